"""LTE-LAA / Wi-Fi coexistence as a Dec-POMDP, solved with nonparametric FSC policies.

Modules:

* :mod:`coexist.channel`    -- microsecond listen-before-talk contention simulator
* :mod:`coexist.decpomdp`   -- actions, binned observations, fairness rewards, trajectories
* :mod:`coexist.fsc`        -- finite-state-controller policies and exploration
* :mod:`coexist.inference`  -- stick-breaking variational posterior and CAVI
* :mod:`coexist.learning`   -- collect-then-infer outer loop and metric traces
* :mod:`coexist.config`, :mod:`coexist.cli` -- experiment files and command line
"""

__version__ = "0.1.0"
