"""Finite-state-controller policies.

An FSC for one agent is the triple (eta, pi, omega):

* ``eta[i]``          -- probability of starting in node ``i``
* ``pi[i, a]``        -- probability of emitting action ``a`` in node ``i``
* ``omega[i, a, o, j]`` -- probability of moving to node ``j`` after emitting
  ``a`` in node ``i`` and then observing ``o``
"""
from __future__ import annotations

import enum
import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import _fmt
from .channel import ConfigError

__all__ = [
    "BehaviorPolicy",
    "EpsilonSchedule",
    "FscPolicy",
    "HistoryFilter",
    "ScheduleCurve",
    "epsilon_at",
    "history_likelihood",
    "history_log_likelihood",
    "init_fsc_from_trajectories",
    "load_fsc",
    "save_fsc",
    "sample_episode_step",
    "sample_initial",
    "step_action_probabilities",
    "uniform_fsc",
]

ROW_TOL = 1e-12


def _readonly(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FscPolicy:
    eta: np.ndarray
    pi: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        eta, pi, omega = _readonly(self.eta), _readonly(self.pi), _readonly(self.omega)
        if eta.ndim != 1 or pi.ndim != 2 or omega.ndim != 4:
            raise ValueError("expected eta (Z,), pi (Z, A), omega (Z, A, O, Z)")
        z = eta.shape[0]
        if pi.shape[0] != z or omega.shape[0] != z or omega.shape[3] != z or omega.shape[1] != pi.shape[1]:
            raise ValueError(f"inconsistent FSC shapes {eta.shape}, {pi.shape}, {omega.shape}")
        for name, table in (("eta", eta), ("pi", pi), ("omega", omega)):
            if np.any(table < 0) or not np.all(np.isfinite(table)):
                raise ValueError(f"{name} has negative or non-finite entries")
            if np.max(np.abs(table.sum(axis=-1) - 1.0)) > ROW_TOL:
                raise ValueError(f"{name} rows must sum to 1")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def from_unnormalized(cls, eta, pi, omega) -> "FscPolicy":
        """Normalize positive tables row-wise (e.g. a variational point estimate)."""
        eta = np.asarray(eta, float)
        pi = np.asarray(pi, float)
        omega = np.asarray(omega, float)
        return cls(_normalize(eta), _normalize(pi), _normalize(omega))

    @property
    def num_nodes(self) -> int:
        return self.eta.shape[0]

    @property
    def num_actions(self) -> int:
        return self.pi.shape[1]

    @property
    def num_observations(self) -> int:
        return self.omega.shape[2]


def _normalize(table: np.ndarray) -> np.ndarray:
    out = table / table.sum(axis=-1, keepdims=True)
    # rounding can leave |sum - 1| at a few ulp; push the residual into the largest entry
    resid = 1.0 - out.sum(axis=-1)
    idx = np.argmax(out, axis=-1)
    np.put_along_axis(out, idx[..., None],
                      np.take_along_axis(out, idx[..., None], -1) + resid[..., None], -1)
    return out


def uniform_fsc(num_actions: int, num_observations: int, num_nodes: int = 1) -> FscPolicy:
    z = num_nodes
    return FscPolicy(
        eta=np.full(z, 1.0 / z),
        pi=np.full((z, num_actions), 1.0 / num_actions),
        omega=np.full((z, num_actions, num_observations, z), 1.0 / z),
    )


@dataclass(frozen=True, eq=False)
class BehaviorPolicy:
    """epsilon-greedy wrapper: explore uniformly with probability epsilon."""

    base: FscPolicy
    epsilon: float

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")

    @property
    def num_actions(self) -> int:
        return self.base.num_actions

    def action_probs(self, node: int) -> np.ndarray:
        return (1.0 - self.epsilon) * self.base.pi[node] + self.epsilon / self.num_actions

    def as_fsc(self) -> FscPolicy:
        pi = (1.0 - self.epsilon) * self.base.pi + self.epsilon / self.num_actions
        return FscPolicy(self.base.eta, _normalize(pi), self.base.omega)


def _as_fsc(policy) -> FscPolicy:
    return policy.as_fsc() if isinstance(policy, BehaviorPolicy) else policy


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, p.shape[0] - 1)


def sample_initial(policy, rng: np.random.Generator) -> tuple[int, int, float]:
    """Draw (node, action, action probability) for step 0."""
    fsc = _as_fsc(policy)
    node = _draw(fsc.eta, rng)
    probs = fsc.pi[node]
    action = _draw(probs, rng)
    return node, action, float(probs[action])


def sample_episode_step(policy, current_node: int, last_action: int, new_obs: int,
                        rng: np.random.Generator) -> tuple[int, int, float]:
    """Move to the next node given (action, observation) and draw the next action.

    The node always evolves through omega with the action actually taken, also
    for exploratory actions of a :class:`BehaviorPolicy`.
    """
    fsc = _as_fsc(policy)
    if not (0 <= current_node < fsc.num_nodes and 0 <= last_action < fsc.num_actions
            and 0 <= new_obs < fsc.num_observations):
        raise IndexError(f"index out of range: node={current_node}, action={last_action}, obs={new_obs}")
    nxt = _draw(fsc.omega[current_node, last_action, new_obs], rng)
    probs = fsc.pi[nxt]
    action = _draw(probs, rng)
    return nxt, action, float(probs[action])


class HistoryFilter:
    """Running node belief of an FSC given the agent's own actions and observations.

    ``observe_action`` returns p(a_t | h_t), the action probability with the
    node marginalized out; the product of these is the history likelihood.
    """

    def __init__(self, policy):
        self.fsc = _as_fsc(policy)
        self.belief = None

    def observe_action(self, action: int, obs: int | None = None, prev_action: int | None = None) -> float:
        fsc = self.fsc
        if self.belief is None:
            pred = fsc.eta
        else:
            pred = self.belief @ fsc.omega[:, prev_action, obs, :]
        joint = pred * fsc.pi[:, action]
        p = float(joint.sum())
        self.belief = joint / p if p > 0 else joint
        return p


def step_action_probabilities(policy, actions, observations) -> np.ndarray:
    """p(a_tau | a_{0:tau-1}, o_{1:tau}) for every tau, via the forward recursion."""
    actions = np.asarray(actions, int)
    observations = np.asarray(observations, int)
    if len(observations) != len(actions) - 1:
        raise ValueError("need exactly one observation fewer than actions")
    filt = HistoryFilter(policy)
    out = np.empty(len(actions))
    out[0] = filt.observe_action(int(actions[0]))
    for tau in range(1, len(actions)):
        if out[tau - 1] == 0.0:
            out[tau:] = 0.0
            break
        out[tau] = filt.observe_action(int(actions[tau]), int(observations[tau - 1]), int(actions[tau - 1]))
    return out


def history_log_likelihood(policy, actions, observations) -> float:
    probs = step_action_probabilities(policy, actions, observations)
    if np.any(probs == 0.0):
        return -math.inf
    return float(np.sum(np.log(probs)))


def history_likelihood(policy, actions, observations) -> float:
    """p(a_{0:t} | o_{1:t}) under the FSC, with the node path summed out."""
    return math.exp(history_log_likelihood(policy, actions, observations))


# -- exploration schedules ---------------------------------------------------------

class ScheduleCurve(enum.Enum):
    Linear = "linear"
    Exponential = "exponential"


@dataclass(frozen=True)
class EpsilonSchedule:
    curve: ScheduleCurve = ScheduleCurve.Linear
    start: float = 0.9
    end: float = 0.2
    total_iters: int = 50

    def __post_init__(self):
        if not 0.0 < self.end <= self.start <= 1.0:
            raise ValueError("epsilon schedule needs 0 < end <= start <= 1")
        if self.total_iters < 0:
            raise ValueError("total_iters must be non-negative")


def epsilon_at(schedule: EpsilonSchedule, iteration: int) -> float:
    if schedule.total_iters == 0 or iteration >= schedule.total_iters:
        return schedule.end
    frac = max(iteration, 0) / schedule.total_iters
    if schedule.curve is ScheduleCurve.Linear:
        return schedule.start - (schedule.start - schedule.end) * frac
    return schedule.start * (schedule.end / schedule.start) ** frac


# -- initialization from data --------------------------------------------------------

def init_fsc_from_trajectories(episodes, agent: int, cap: int = 10, *, num_actions: int,
                               num_observations: int, smoothing: float = 1.0) -> FscPolicy:
    """Build a starting FSC from one agent's recorded behaviour.

    Every distinct (previous action, observation) signature is a candidate
    node; the ``cap`` most frequent ones get their own node (ties broken by
    signature order), rarer ones share the last node and step 0 starts in
    node 0.  Tables are add-``smoothing`` empirical frequencies.
    """
    episodes = list(episodes)
    if not episodes:
        raise ConfigError("need at least one episode to initialize an FSC")
    if cap < 1:
        raise ConfigError("node cap must be at least 1")
    counts = Counter()
    for ep in episodes:
        acts, obs = ep.actions[:, agent], ep.observations[:, agent]
        counts.update(zip(acts[:-1].tolist(), obs.tolist()))
    ranked = sorted(counts, key=lambda s: (-counts[s], s))
    z = max(1, min(cap, len(ranked)))
    node_of = {sig: min(rank, z - 1) for rank, sig in enumerate(ranked)}

    a_n, o_n = num_actions, num_observations
    eta = np.full(z, smoothing)
    pi = np.full((z, a_n), smoothing)
    omega = np.full((z, a_n, o_n, z), smoothing)
    for ep in episodes:
        acts, obs = ep.actions[:, agent], ep.observations[:, agent]
        node = 0
        eta[node] += 1.0
        pi[node, acts[0]] += 1.0
        for t in range(1, len(acts)):
            nxt = node_of[(int(acts[t - 1]), int(obs[t - 1]))]
            omega[node, acts[t - 1], obs[t - 1], nxt] += 1.0
            pi[nxt, acts[t]] += 1.0
            node = nxt
    return FscPolicy.from_unnormalized(eta, pi, omega)


# -- serialization -------------------------------------------------------------------

FSC_FORMAT = "coexist-fsc"


def dumps_fsc(policy: FscPolicy) -> str:
    header = {"format": FSC_FORMAT, "version": 1, "num_nodes": policy.num_nodes,
              "num_actions": policy.num_actions, "num_observations": policy.num_observations}
    return ("{\n"
            f'  "header": {json.dumps(header)},\n'
            f'  "eta": {_fmt.nested(policy.eta)},\n'
            f'  "pi": {_fmt.nested(policy.pi)},\n'
            f'  "omega": {_fmt.nested(policy.omega)}\n'
            "}\n")


def loads_fsc(text: str) -> FscPolicy:
    doc = json.loads(text)
    header = doc.get("header", {})
    if header.get("format") != FSC_FORMAT:
        raise ValueError("not an FSC policy file")
    policy = FscPolicy(np.array(doc["eta"]), np.array(doc["pi"]), np.array(doc["omega"]))
    dims = (policy.num_nodes, policy.num_actions, policy.num_observations)
    if dims != (header["num_nodes"], header["num_actions"], header["num_observations"]):
        raise ValueError(f"FSC header dimensions do not match tables: {dims}")
    return policy


def save_fsc(policy: FscPolicy, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_fsc(policy))


def load_fsc(path) -> FscPolicy:
    with open(path) as fh:
        return loads_fsc(fh.read())
