"""Dec-POMDP view of the coexistence scenario.

Each decision step is one synchronized contention epoch.  Actions index the
contention-window set, observations are binned waiting times, and the team
receives a fairness-weighted cumulative reward.
"""
from __future__ import annotations

import bisect
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import _fmt
from .channel import ConfigError, ContentionResult, SimConfig, occupancy_at, run_contention_epoch
from .fsc import HistoryFilter, sample_episode_step, sample_initial

__all__ = [
    "DEFAULT_BIN_EDGES",
    "RewardState",
    "Trajectory",
    "bin_observation",
    "collect_trajectories",
    "epoch_rewards",
    "fair_share",
    "global_reward",
    "jain_index",
    "load_trajectories",
    "recompute_rewards",
    "save_trajectories",
    "step_reward",
    "validate_bin_edges",
]

# 8 log-spaced bins over [0, 20 ms) plus an overflow bin, in microseconds
DEFAULT_BIN_EDGES: tuple[float, ...] = (
    0.0, *(float(round(x)) for x in np.geomspace(100.0, 20000.0, 8)), math.inf,
)


def validate_bin_edges(edges) -> tuple[float, ...]:
    edges = tuple(float(e) for e in edges)
    if len(edges) < 2 or edges[0] != 0.0 or edges[-1] != math.inf:
        raise ConfigError("bin edges must start at 0 and end at +inf")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigError("bin edges must be strictly increasing")
    return edges


def bin_observation(wait_us: float, bin_edges) -> int:
    """Index of the half-open bin [e_i, e_{i+1}) holding ``wait_us``."""
    if wait_us < 0:
        raise ValueError("waiting time cannot be negative")
    return bisect.bisect_right(bin_edges, wait_us) - 1


def fair_share(rate_mbps: float, total_users: int) -> float:
    if total_users < 1:
        raise ConfigError("fair share needs at least one spectrum user")
    if rate_mbps <= 0:
        raise ConfigError("data rate must be positive")
    return rate_mbps / total_users


def jain_index(prev_x, new_xn: float, n_agents: int) -> float:
    """Jain's index over the other agents' previous and this agent's new throughput.

    All-zero throughput is treated as perfectly fair.
    """
    xs = [float(x) for x in prev_x] + [float(new_xn)]
    if len(xs) != n_agents:
        raise ValueError(f"expected {n_agents - 1} previous throughputs, got {len(xs) - 1}")
    total = sum(xs)
    square = sum(x * x for x in xs)
    if square == 0.0:
        return 1.0
    return total * total / (n_agents * square)


@dataclass(frozen=True)
class RewardState:
    cumulative: tuple[float, ...]
    x: tuple[float, ...]
    fair: tuple[float, ...]

    @classmethod
    def initial(cls, cfg: SimConfig, n_agents: int | None = None) -> "RewardState":
        n = cfg.num_agents if n_agents is None else n_agents
        share = fair_share(cfg.rate_mbps, n)
        return cls((0.0,) * n, (0.0,) * n, (share,) * n)


def step_reward(result: ContentionResult, state: RewardState, n: int) -> tuple[float, RewardState]:
    """Advance agent ``n``'s cumulative local reward by one completed step."""
    duration = result.total_duration_us
    if duration <= 0:
        raise ValueError("step duration must be positive")
    th = result.effective_payload_bits / duration
    x_new = th / state.fair[n]
    others = [x for i, x in enumerate(state.x) if i != n]
    jain = jain_index(others, x_new, len(state.x))
    r = state.cumulative[n] + math.log(abs(jain * th) + 1.0)
    cumulative = list(state.cumulative)
    cumulative[n] = r
    xs = list(state.x)
    xs[n] = x_new
    return r, replace(state, cumulative=tuple(cumulative), x=tuple(xs))


def epoch_rewards(results, state: RewardState) -> tuple[list[float], RewardState]:
    """Local rewards of all agents for one epoch.

    Every agent's fairness factor uses the other agents' throughput from the
    previous step, so each is evaluated against the pre-epoch state.
    """
    rewards, cumulative, xs = [], list(state.cumulative), list(state.x)
    for n, res in enumerate(results):
        r, after = step_reward(res, state, n)
        rewards.append(r)
        cumulative[n] = r
        xs[n] = after.x[n]
    return rewards, replace(state, cumulative=tuple(cumulative), x=tuple(xs))


def global_reward(local_rewards) -> float:
    local_rewards = list(local_rewards)
    if not local_rewards:
        raise ValueError("global reward needs at least one local reward")
    return math.fsum(local_rewards)


@dataclass(eq=False)
class Trajectory:
    """One episode: ``T+1`` joint actions, ``T`` joint observations, ``T+1`` rewards.

    ``observations[t-1]`` is the joint observation o_t received after action
    step ``t-1``.  ``payload_bits`` / ``duration_us`` keep the per-agent
    contention outcome of every step so rewards can be recomputed.
    """

    actions: np.ndarray            # (T+1, N) int
    observations: np.ndarray       # (T, N) int
    rewards: np.ndarray            # (T+1,)
    behavior_probs: np.ndarray     # (T+1, N)
    payload_bits: np.ndarray       # (T+1, N) int
    duration_us: np.ndarray        # (T+1, N) int
    occupancy: np.ndarray | None = None   # (T+1,) peak number of simultaneous transmitters

    @property
    def horizon(self) -> int:
        return self.actions.shape[0] - 1

    @property
    def num_agents(self) -> int:
        return self.actions.shape[1]

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(gamma ** np.arange(len(self.rewards)) * self.rewards))


def _peak_occupancy(results) -> int:
    return max(occupancy_at(results, r.tx_start_us) for r in results)


def _run_episode(cfg: SimConfig, kinds, policies, horizon: int, bin_edges, seed_seq) -> Trajectory:
    rng = np.random.default_rng(seed_seq)
    n = len(kinds)
    actions = np.zeros((horizon + 1, n), dtype=np.int64)
    observations = np.zeros((horizon, n), dtype=np.int64)
    probs = np.zeros((horizon + 1, n))
    payload = np.zeros((horizon + 1, n), dtype=np.int64)
    duration = np.zeros((horizon + 1, n), dtype=np.int64)
    rewards = np.zeros(horizon + 1)
    occupancy = np.zeros(horizon + 1, dtype=np.int64)

    filters = [HistoryFilter(p) for p in policies]
    nodes = []
    for i, pol in enumerate(policies):
        node, act, _ = sample_initial(pol, rng)
        nodes.append(node)
        actions[0, i] = act
        probs[0, i] = filters[i].observe_action(act)

    state = RewardState.initial(cfg, n)
    cw_set = cfg.cw_set
    for t in range(horizon + 1):
        results = run_contention_epoch(cfg, kinds, [cw_set[a] for a in actions[t]], rng)
        local, state = epoch_rewards(results, state)
        rewards[t] = global_reward(local)
        occupancy[t] = _peak_occupancy(results)
        for i, res in enumerate(results):
            payload[t, i] = res.effective_payload_bits
            duration[t, i] = res.total_duration_us
        if t == horizon:
            break
        for i, (pol, res) in enumerate(zip(policies, results)):
            obs = bin_observation(res.wait_duration_us, bin_edges)
            observations[t, i] = obs
            prev = int(actions[t, i])
            nodes[i], act, _ = sample_episode_step(pol, nodes[i], prev, obs, rng)
            actions[t + 1, i] = act
            probs[t + 1, i] = filters[i].observe_action(act, obs, prev)
    return Trajectory(actions, observations, rewards, probs, payload, duration, occupancy)


def _run_episode_star(args):
    return _run_episode(*args)


def collect_trajectories(cfg: SimConfig, behavior_policies, num_episodes: int, horizon: int,
                         seed: int, *, kinds=None, bin_edges=DEFAULT_BIN_EDGES,
                         stream: tuple[int, ...] = (), workers: int = 1) -> list[Trajectory]:
    """Roll out ``num_episodes`` episodes of ``horizon + 1`` steps.

    Episode ``k`` draws from its own stream spawned from ``(seed, *stream, k)``,
    so the output does not depend on ``workers``.  The stored behaviour
    probability of each action is p(a_t | h_t) under the behaviour FSC.
    """
    if num_episodes < 1 or horizon < 0:
        raise ConfigError("need at least one episode and a non-negative horizon")
    kinds = cfg.kinds if kinds is None else list(kinds)
    policies = list(behavior_policies)
    if len(policies) != len(kinds):
        raise ConfigError(f"{len(kinds)} agents but {len(policies)} behaviour policies")
    edges = validate_bin_edges(bin_edges)
    n_obs = len(edges) - 1
    for pol in policies:
        base = getattr(pol, "base", pol)
        if base.num_actions != len(cfg.cw_set) or base.num_observations != n_obs:
            raise ConfigError("behaviour policy dimensions do not match the action/observation sets")
    jobs = [(cfg, kinds, policies, horizon, edges,
             np.random.SeedSequence(seed, spawn_key=(*stream, k))) for k in range(num_episodes)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_episode_star, jobs, chunksize=max(1, num_episodes // (4 * workers))))
    return [_run_episode(*job) for job in jobs]


def recompute_rewards(traj: Trajectory, cfg: SimConfig) -> np.ndarray:
    """Global rewards rebuilt from the stored per-agent payloads and durations."""
    n = traj.num_agents
    state = RewardState.initial(cfg, n)
    out = np.zeros(len(traj.rewards))
    for t in range(len(out)):
        local = []
        new_cum, new_x = list(state.cumulative), list(state.x)
        for i in range(n):
            th = int(traj.payload_bits[t, i]) / int(traj.duration_us[t, i])
            x_new = th / state.fair[i]
            jain = jain_index([x for j, x in enumerate(state.x) if j != i], x_new, n)
            new_cum[i] = state.cumulative[i] + math.log(abs(jain * th) + 1.0)
            new_x[i] = x_new
            local.append(new_cum[i])
        state = replace(state, cumulative=tuple(new_cum), x=tuple(new_x))
        out[t] = global_reward(local)
    return out


# -- persistence -----------------------------------------------------------------

TRAJECTORY_FORMAT = "coexist-trajectories"


def save_trajectories(trajectories, path) -> None:
    """One JSON object per line; the first line is a header.

    Step records carry ``episode``, ``step``, ``actions`` (joint action
    indices), ``observations`` (joint observation o_t, ``null`` at step 0),
    ``reward`` (global reward), ``behavior_probs``, ``payload_bits`` and
    ``duration_us``.  Reals are written with 17 significant digits.
    """
    trajectories = list(trajectories)
    with open(path, "w") as fh:
        n = trajectories[0].num_agents if trajectories else 0
        fh.write(json.dumps({"format": TRAJECTORY_FORMAT, "version": 1, "episodes": len(trajectories),
                             "num_agents": n}) + "\n")
        for k, tr in enumerate(trajectories):
            for t in range(tr.horizon + 1):
                obs = "null" if t == 0 else json.dumps(tr.observations[t - 1].tolist())
                fh.write(
                    f'{{"episode": {k}, "step": {t}, "actions": {json.dumps(tr.actions[t].tolist())}, '
                    f'"observations": {obs}, "reward": {_fmt.num(tr.rewards[t])}, '
                    f'"behavior_probs": {_fmt.nested(tr.behavior_probs[t])}, '
                    f'"payload_bits": {json.dumps(tr.payload_bits[t].tolist())}, '
                    f'"duration_us": {json.dumps(tr.duration_us[t].tolist())}}}\n')


def load_trajectories(path) -> list[Trajectory]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != TRAJECTORY_FORMAT:
            raise ValueError(f"{path}: not a trajectory file")
        steps: dict[int, list[dict]] = {}
        for line in fh:
            rec = json.loads(line)
            steps.setdefault(rec["episode"], []).append(rec)
    out = []
    for k in sorted(steps):
        recs = sorted(steps[k], key=lambda r: r["step"])
        out.append(Trajectory(
            actions=np.array([r["actions"] for r in recs], dtype=np.int64),
            observations=np.array([r["observations"] for r in recs[1:]], dtype=np.int64).reshape(len(recs) - 1, -1),
            rewards=np.array([r["reward"] for r in recs], dtype=float),
            behavior_probs=np.array([r["behavior_probs"] for r in recs], dtype=float),
            payload_bits=np.array([r["payload_bits"] for r in recs], dtype=np.int64),
            duration_us=np.array([r["duration_us"] for r in recs], dtype=np.int64),
        ))
    return out
