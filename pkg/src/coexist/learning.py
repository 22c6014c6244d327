"""Collect-then-infer outer loop and its metric trace."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _fmt
from .config import ExperimentConfig
from .decpomdp import collect_trajectories
from .fsc import BehaviorPolicy, FscPolicy, epsilon_at, init_fsc_from_trajectories, uniform_fsc
from .inference import (
    Batch,
    VariationalState,
    elbo,
    empirical_value,
    init_variational_state,
    point_estimate,
    prune_nodes,
    run_cavi,
)

__all__ = ["ElboTrace", "LearnResult", "TraceRow", "batch_jain", "learn", "read_trace", "TRACE_FILES"]

log = logging.getLogger(__name__)

TRACE_FILES = ("elbo.csv", "nodes.csv", "value.csv", "gh.csv")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    elbo: float
    sweeps: int
    converged: bool
    epsilon: float
    empirical_value: float
    discounted_return: float
    jain: float
    nodes: tuple[int, ...]
    g: tuple[float, ...]
    h: tuple[float, ...]


@dataclass
class ElboTrace:
    """Append-only record with one row per completed outer iteration."""

    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.iteration != self.rows[-1].iteration + 1:
            raise ValueError("trace rows must be appended in iteration order")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def elbo(self) -> np.ndarray:
        return np.array([r.elbo for r in self.rows])

    @property
    def node_counts(self) -> np.ndarray:
        return np.array([r.nodes for r in self.rows], dtype=int)

    def write_csvs(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        n = len(self.rows[0].nodes) if self.rows else 0
        agents = range(n)
        tables = {
            "elbo.csv": (["iteration", "elbo", "sweeps", "converged", "epsilon"],
                         lambda r: [r.iteration, _fmt.num(r.elbo), r.sweeps, int(r.converged),
                                    _fmt.num(r.epsilon)]),
            "nodes.csv": (["iteration", *(f"agent_{i}" for i in agents)],
                          lambda r: [r.iteration, *r.nodes]),
            "value.csv": (["iteration", "empirical_value", "discounted_return", "jain"],
                          lambda r: [r.iteration, _fmt.num(r.empirical_value),
                                     _fmt.num(r.discounted_return), _fmt.num(r.jain)]),
            "gh.csv": (["iteration", *(f"g_{i}" for i in agents), *(f"h_{i}" for i in agents)],
                       lambda r: [r.iteration, *map(_fmt.num, r.g), *map(_fmt.num, r.h)]),
        }
        for name, (header, row_fn) in tables.items():
            with open(out / name, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header)
                for r in self.rows:
                    writer.writerow(row_fn(r))


class TraceFormatError(ValueError):
    pass


def _read_csv(path: Path, columns_prefix) -> tuple[list[str], list[list[float]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][: len(columns_prefix)] != list(columns_prefix):
        raise TraceFormatError(f"{path.name}: unexpected header")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise TraceFormatError(f"{path.name} row {lineno}: expected {len(rows[0])} cells, got {len(row)}")
        try:
            vals = [float(cell) for cell in row]
        except ValueError:
            raise TraceFormatError(f"{path.name} row {lineno}: non-numeric cell") from None
        if not all(math.isfinite(v) for v in vals):
            raise TraceFormatError(f"{path.name} row {lineno}: non-finite cell")
        out.append(vals)
    return rows[0], out


def read_trace(out_dir) -> ElboTrace:
    """Rebuild an :class:`ElboTrace` from the four CSV files."""
    out = Path(out_dir)
    missing = [name for name in TRACE_FILES if not (out / name).is_file()]
    if missing:
        raise FileNotFoundError("missing trace files: " + ", ".join(missing))
    _, elbo_rows = _read_csv(out / "elbo.csv", ["iteration", "elbo", "sweeps", "converged"])
    _, node_rows = _read_csv(out / "nodes.csv", ["iteration"])
    _, value_rows = _read_csv(out / "value.csv", ["iteration", "empirical_value"])
    _, gh_rows = _read_csv(out / "gh.csv", ["iteration"])
    if not len(elbo_rows) == len(node_rows) == len(value_rows) == len(gh_rows):
        raise TraceFormatError("trace files disagree on the number of iterations")
    trace = ElboTrace()
    for e, nd, v, gh in zip(elbo_rows, node_rows, value_rows, gh_rows):
        n = len(nd) - 1
        trace.append(TraceRow(
            iteration=int(e[0]), elbo=e[1], sweeps=int(e[2]), converged=bool(e[3]),
            epsilon=e[4] if len(e) > 4 else float("nan"),
            empirical_value=v[1], discounted_return=v[2], jain=v[3],
            nodes=tuple(int(x) for x in nd[1:]), g=tuple(gh[1:1 + n]), h=tuple(gh[1 + n:]),
        ))
    return trace


def batch_jain(trajectories) -> float:
    """Mean per-step Jain index of the agents' epoch throughputs."""
    vals = []
    for tr in trajectories:
        th = tr.payload_bits / tr.duration_us
        s, s2 = th.sum(axis=1), (th * th).sum(axis=1)
        n = th.shape[1]
        with np.errstate(invalid="ignore", divide="ignore"):
            j = np.where(s2 > 0, s * s / (n * s2), 1.0)
        vals.append(j)
    return float(np.mean(np.concatenate(vals)))


@dataclass
class LearnResult:
    states: list[VariationalState]
    policies: list[FscPolicy]
    trace: ElboTrace
    stopped_early: bool


def _policies(states) -> list[FscPolicy]:
    return [point_estimate(s).normalized() for s in states]


def learn(config: ExperimentConfig, *, on_batch=None, workers: int | None = None) -> LearnResult:
    """Alternate epsilon-greedy data collection with CAVI until the ELBO settles.

    Round 0 explores uniformly and seeds the controllers from the data; every
    later round explores around the current point-estimate controllers.
    ``on_batch(round, trajectories)`` sees each collected batch.
    """
    sim, lc, priors = config.sim, config.learning, config.priors
    workers = lc.workers if workers is None else workers
    n_agents, n_act, n_obs = sim.num_agents, config.num_actions, lc.num_observations
    if n_agents < 1:
        raise ValueError("need at least one agent")

    def collect(round_, behaviours):
        trajs = collect_trajectories(sim, behaviours, lc.episodes, lc.horizon, config.seed,
                                     bin_edges=lc.bin_edges, stream=(round_,), workers=workers)
        if on_batch is not None:
            on_batch(round_, trajs)
        return trajs

    explore = [BehaviorPolicy(uniform_fsc(n_act, n_obs), 1.0)] * n_agents
    trajs = collect(0, explore)
    states = [
        init_variational_state(
            init_fsc_from_trajectories(trajs, n, lc.node_cap, num_actions=n_act, num_observations=n_obs),
            priors)
        for n in range(n_agents)
    ]
    trace = ElboTrace()
    if lc.max_iters == 0:
        return LearnResult(states, _policies(states), trace, False)

    prev_elbo = None
    stopped = False
    for it in range(lc.max_iters):
        eps = 1.0
        if it > 0:
            eps = epsilon_at(lc.schedule, it)
            behaviours = [BehaviorPolicy(p, eps) for p in _policies(states)]
            trajs = collect(it, behaviours)
        batch = Batch.from_trajectories(trajs, sim.gamma)
        states, history, converged = run_cavi(states, batch, priors, lc.tol, lc.max_sweeps)
        states = [prune_nodes(s, lc.prune_threshold, priors) for s in states]
        cur = elbo(states, batch, priors)
        policies = _policies(states)
        row = TraceRow(
            iteration=it, elbo=cur, sweeps=len(history), converged=converged, epsilon=eps,
            empirical_value=empirical_value(batch, policies),
            discounted_return=float(np.mean([tr.discounted_return(sim.gamma) for tr in trajs])),
            jain=batch_jain(trajs),
            nodes=tuple(s.num_nodes for s in states),
            g=tuple(float(s.g) for s in states), h=tuple(float(s.h) for s in states),
        )
        trace.append(row)
        log.info("iteration %d: elbo %.6g after %d sweeps, nodes %s, eps %.3f",
                 it, cur, len(history), row.nodes, eps)
        if lc.outer_stop and prev_elbo is not None and abs((cur - prev_elbo) / prev_elbo) < lc.tol:
            stopped = True
            break
        prev_elbo = cur
    return LearnResult(states, _policies(states), trace, stopped)
