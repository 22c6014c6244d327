"""Experiment configuration files (YAML).

Every key is optional except ``seed``; omitted keys take the scenario
defaults.  Problems are reported with the line of the offending key::

    config.yaml:12: learning.episodes must be a positive integer, got 0
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import yaml

from .channel import ConfigError, SimConfig
from .decpomdp import DEFAULT_BIN_EDGES, validate_bin_edges
from .fsc import EpsilonSchedule, ScheduleCurve
from .inference import PriorHyperparams

__all__ = [
    "ExperimentConfig",
    "LearningConfig",
    "default_config_text",
    "load_config",
    "parse_config",
]


@dataclass(frozen=True)
class LearningConfig:
    episodes: int = 200
    horizon: int = 50
    max_iters: int = 50
    schedule: EpsilonSchedule = field(default_factory=lambda: EpsilonSchedule(total_iters=50))
    bin_edges: tuple[float, ...] = DEFAULT_BIN_EDGES
    node_cap: int = 10
    prune_threshold: float = 1e-3
    tol: float = 1e-5
    max_sweeps: int = 100
    outer_stop: bool = True
    workers: int = 1

    def __post_init__(self):
        for name in ("episodes", "node_cap", "max_sweeps", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.horizon < 0 or self.max_iters < 0:
            raise ConfigError("horizon and max_iters must be non-negative")
        if not 0.0 < self.prune_threshold < 1.0:
            raise ConfigError("prune_threshold must lie in (0, 1)")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        object.__setattr__(self, "bin_edges", validate_bin_edges(self.bin_edges))

    @property
    def num_observations(self) -> int:
        return len(self.bin_edges) - 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    sim: SimConfig = field(default_factory=SimConfig)
    priors: PriorHyperparams = field(default_factory=PriorHyperparams)
    learning: LearningConfig = field(default_factory=LearningConfig)
    output_dir: str = "runs/default"

    @property
    def num_actions(self) -> int:
        return len(self.sim.cw_set)

    def with_overrides(self, *, seed=None, iters=None, episodes=None, horizon=None,
                       output_dir=None, workers=None) -> "ExperimentConfig":
        """Command-line overrides; ``iters`` also stretches the epsilon schedule."""
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        learn = cfg.learning
        if iters is not None:
            learn = replace(learn, max_iters=int(iters),
                            schedule=replace(learn.schedule, total_iters=int(iters)))
        if episodes is not None:
            learn = replace(learn, episodes=int(episodes))
        if horizon is not None:
            learn = replace(learn, horizon=int(horizon))
        if workers is not None:
            learn = replace(learn, workers=int(workers))
        cfg = replace(cfg, learning=learn)
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        return cfg


# -- parsing --------------------------------------------------------------------------

_SIM_KEYS = {f.name for f in fields(SimConfig)} - {"gamma"}
_PRIOR_KEYS = {"c", "d", "e", "f", "theta"}
_LEARN_SCALARS = {
    "episodes": int, "horizon": int, "max_iters": int, "node_cap": int, "max_sweeps": int,
    "workers": int, "prune_threshold": float, "tol": float, "gamma": float, "outer_stop": bool,
}
_SCHEDULE_KEYS = {"curve", "start", "end", "total_iters"}


class _Doc:
    """Values of a composed YAML document with the source line of every key."""

    def __init__(self, text: str, source: str):
        self.source = source
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark is not None else 1
            raise ConfigError(f"{source}:{line}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
        self.root = node

    def fail(self, node, message: str):
        line = node.start_mark.line + 1 if node is not None else 1
        raise ConfigError(f"{self.source}:{line}: {message}")

    def mapping(self, node, where: str, allowed) -> dict:
        if node is None:
            return {}
        if not isinstance(node, yaml.MappingNode):
            self.fail(node, f"{where} must be a mapping")
        out = {}
        for key_node, value_node in node.value:
            key = key_node.value
            if key not in allowed:
                self.fail(key_node, f"unknown key {where + '.' if where else ''}{key}")
            if key in out:
                self.fail(key_node, f"duplicate key {key}")
            out[key] = (key_node, value_node)
        return out

    def scalar(self, key_node, value_node, kind, where: str):
        if not isinstance(value_node, yaml.ScalarNode):
            self.fail(key_node, f"{where} must be a scalar")
        value = yaml.safe_load(yaml.serialize(value_node))
        if kind is bool:
            if not isinstance(value, bool):
                self.fail(key_node, f"{where} must be true or false, got {value!r}")
            return value
        if kind is float and isinstance(value, str):
            # YAML 1.1 reads exponent forms such as 1e-3 as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(key_node, f"{where} must be a number, got {value!r}")
        if kind is int:
            if not isinstance(value, int):
                self.fail(key_node, f"{where} must be an integer, got {value!r}")
            return value
        value = float(value)
        if not math.isfinite(value):
            self.fail(key_node, f"{where} must be finite")
        return value

    def number_list(self, key_node, value_node, where: str) -> list:
        if not isinstance(value_node, yaml.SequenceNode):
            self.fail(key_node, f"{where} must be a list")
        out = []
        for item in value_node.value:
            value = yaml.safe_load(yaml.serialize(item)) if isinstance(item, yaml.ScalarNode) else None
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self.fail(item, f"{where} entries must be numbers, got {value!r}")
            out.append(value)
        return out


def _build(doc: _Doc, where, factory, block_key, keys=None):
    try:
        return factory()
    except (ConfigError, ValueError) as exc:
        # point at the key the validator complains about when it names one
        target = block_key
        for name, (key_node, _) in (keys or {}).items():
            if str(exc).startswith(name) or f" {name} " in f" {exc} ":
                target = key_node
                break
        doc.fail(target, f"{where}: {exc}")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    doc = _Doc(text, source)
    top = doc.mapping(doc.root, "", {"seed", "output_dir", "sim", "priors", "learning"})
    if "seed" not in top:
        doc.fail(doc.root, "seed is mandatory")
    seed = doc.scalar(*top["seed"], int, "seed")
    if seed < 0:
        doc.fail(top["seed"][0], "seed must be non-negative")
    output_dir = "runs/default"
    if "output_dir" in top:
        k, v = top["output_dir"]
        if not isinstance(v, yaml.ScalarNode) or not v.value:
            doc.fail(k, "output_dir must be a non-empty string")
        output_dir = v.value

    sim_kwargs = {}
    sim_key = top.get("sim", (None, None))
    sim_nodes = doc.mapping(sim_key[1], "sim", _SIM_KEYS)
    for key, (k, v) in sim_nodes.items():
        where = f"sim.{key}"
        if key == "cw_set":
            sim_kwargs[key] = tuple(doc.number_list(k, v, where))
        elif key == "lte_occupation_ms":
            if not isinstance(v, yaml.MappingNode):
                doc.fail(k, f"{where} must be a mapping of CW to milliseconds")
            occ = {}
            for ck, cv in v.value:
                cw = yaml.safe_load(yaml.serialize(ck))
                if isinstance(cw, bool) or not isinstance(cw, int):
                    doc.fail(ck, f"{where} keys must be integer contention windows")
                occ[cw] = doc.scalar(ck, cv, int, f"{where}[{cw}]")
            sim_kwargs[key] = occ
        elif key == "sense_error_prob":
            sim_kwargs[key] = doc.scalar(k, v, float, where)
        else:
            sim_kwargs[key] = doc.scalar(k, v, int, where)

    prior_kwargs = {}
    prior_key = top.get("priors", (None, None))
    prior_nodes = doc.mapping(prior_key[1], "priors", _PRIOR_KEYS)
    for key, (k, v) in prior_nodes.items():
        prior_kwargs[key] = doc.scalar(k, v, float, f"priors.{key}")
    priors = _build(doc, "priors", lambda: PriorHyperparams(**prior_kwargs), prior_key[0], prior_nodes)

    learn_kwargs = {}
    gamma = 0.9
    schedule_kwargs = {}
    learn_key = top.get("learning", (None, None))
    allowed = set(_LEARN_SCALARS) | {"schedule", "bin_edges"}
    learn_nodes = doc.mapping(learn_key[1], "learning", allowed)
    schedule_nodes = {}
    for key, (k, v) in learn_nodes.items():
        where = f"learning.{key}"
        if key == "bin_edges":
            edges = doc.number_list(k, v, where) if isinstance(v, yaml.SequenceNode) else None
            if edges is None:
                doc.fail(k, f"{where} must be a list")
            # the overflow edge is implicit in the file
            learn_kwargs[key] = tuple(float(e) for e in edges) + (math.inf,)
            try:
                validate_bin_edges(learn_kwargs[key])
            except ConfigError as exc:
                doc.fail(k, f"{where}: {exc}")
        elif key == "schedule":
            schedule_nodes = doc.mapping(v, where, _SCHEDULE_KEYS)
            for sk, (skn, svn) in schedule_nodes.items():
                swhere = f"{where}.{sk}"
                if sk == "curve":
                    try:
                        schedule_kwargs[sk] = ScheduleCurve(svn.value)
                    except ValueError:
                        doc.fail(skn, f"{swhere} must be 'linear' or 'exponential', got {svn.value!r}")
                elif sk == "total_iters":
                    schedule_kwargs[sk] = doc.scalar(skn, svn, int, swhere)
                else:
                    schedule_kwargs[sk] = doc.scalar(skn, svn, float, swhere)
        elif key == "gamma":
            gamma = doc.scalar(k, v, float, where)
        else:
            learn_kwargs[key] = doc.scalar(k, v, _LEARN_SCALARS[key], where)

    sim_nodes = dict(sim_nodes)
    if "gamma" in learn_nodes:
        sim_nodes["gamma"] = learn_nodes["gamma"]
    sim = _build(doc, "sim", lambda: SimConfig(gamma=gamma, **sim_kwargs), sim_key[0], sim_nodes)
    schedule_kwargs.setdefault("total_iters", learn_kwargs.get("max_iters", LearningConfig.max_iters))
    schedule = _build(doc, "learning.schedule", lambda: EpsilonSchedule(**schedule_kwargs),
                      learn_nodes.get("schedule", (learn_key[0], None))[0], schedule_nodes)
    learning = _build(doc, "learning", lambda: LearningConfig(schedule=schedule, **learn_kwargs),
                      learn_key[0], learn_nodes)
    return ExperimentConfig(seed=seed, sim=sim, priors=priors, learning=learning, output_dir=output_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def default_config_text() -> str:
    """The shipped two-LTE, two-Wi-Fi scenario as YAML text."""
    return resources.files("coexist").joinpath("default_config.yaml").read_text()
