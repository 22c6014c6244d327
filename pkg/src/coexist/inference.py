"""Variational posterior over stick-breaking FSC policies.

Per agent the mean-field family is

* q(u_i)          = Beta(delta_i, mu_i)                 -- initial-node sticks
* q(V_{i,a,o,j})  = Beta(sigma, lam)                    -- transition sticks
* q(pi_i)         = Dirichlet(phi_i)                    -- action distributions
* q(rho)          = Gamma(g, h)                         -- concentration of the u sticks
* q(alpha_{i,a,o})= Gamma(a, b)                         -- concentration of the V sticks

with Gamma in shape/rate form.  The node index set is truncated at
``num_nodes``; the last node takes the leftover stick mass, so its own stick
variable never enters the likelihood.

Node posteriors q(z) are the reward-reweighted exact posteriors under the
point estimate exp(E[log theta]); :func:`sufficient_stats` folds all prefix
lengths t of every episode into one weighted backward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln, logsumexp

from .fsc import FscPolicy
from .special import digamma

__all__ = [
    "Batch",
    "DegenerateHistory",
    "InferenceAbort",
    "Messages",
    "PointEstimatePolicy",
    "PriorHyperparams",
    "SufficientStats",
    "VariationalState",
    "cavi_iteration",
    "elbo",
    "elbo_frozen",
    "empirical_value",
    "expected_log_sticks",
    "forward_backward",
    "geometric_weights",
    "init_variational_state",
    "normalized_reward",
    "nu_weights",
    "point_estimate",
    "prune_nodes",
    "run_cavi",
    "stick_weights",
    "sufficient_stats",
    "update_state",
]


class InferenceAbort(ArithmeticError):
    """Numerical failure that invalidates the current learning round."""


class DegenerateHistory(InferenceAbort):
    """A recorded history has zero probability under the evaluated policy."""


@dataclass(frozen=True)
class PriorHyperparams:
    c: float = 0.1
    d: float = 100.0
    e: float = 0.1
    f: float = 100.0
    theta: float = 1.0

    def __post_init__(self):
        for name in ("c", "d", "e", "f", "theta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"hyperparameter {name} must be strictly positive")


@dataclass(eq=False)
class SufficientStats:
    """nu-weighted expected counts, already averaged over the K episodes."""

    initial: np.ndarray      # (Z,)        sum_{k,t} q_t^k(z_0 = i) / K
    emit: np.ndarray         # (Z, A)      node i emitting action a
    trans: np.ndarray        # (Z, A, O, Z) i -> j after (a, o)
    log_point: "PointEstimatePolicy"   # point estimate the counts were computed under
    log_value: float         # log of the empirical value under that point estimate

    @property
    def occupancy(self) -> np.ndarray:
        return self.emit.sum(axis=1)


@dataclass(eq=False)
class VariationalState:
    delta: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    g: float
    h: float
    a: np.ndarray
    b: np.ndarray
    stats: SufficientStats | None = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.delta.shape[0]

    @property
    def num_actions(self) -> int:
        return self.phi.shape[1]

    @property
    def num_observations(self) -> int:
        return self.sigma.shape[2]

    def check(self) -> None:
        z, n_a, n_o = self.num_nodes, self.num_actions, self.num_observations
        shapes = {"delta": (z,), "mu": (z,), "phi": (z, n_a), "sigma": (z, n_a, n_o, z),
                  "lam": (z, n_a, n_o, z), "a": (z, n_a, n_o), "b": (z, n_a, n_o)}
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
                raise InferenceAbort(f"variational parameter {name} left the positive reals")
        if not (self.g > 0 and self.h > 0 and math.isfinite(self.h)):
            raise InferenceAbort(f"q(rho) parameters must be positive, got g={self.g}, h={self.h}")


@dataclass(frozen=True, eq=False)
class PointEstimatePolicy:
    """exp(E_q[log theta]) tables; rows sum to at most one."""

    log_eta: np.ndarray
    log_pi: np.ndarray
    log_omega: np.ndarray

    @property
    def eta(self) -> np.ndarray:
        return np.exp(self.log_eta)

    @property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)

    @property
    def omega(self) -> np.ndarray:
        return np.exp(self.log_omega)

    @property
    def num_nodes(self) -> int:
        return self.log_eta.shape[0]

    def normalized(self) -> FscPolicy:
        return FscPolicy.from_unnormalized(self.eta, self.pi, self.omega)


# -- stick breaking -----------------------------------------------------------------

def stick_weights(u) -> np.ndarray:
    """Truncated stick-breaking weights along the last axis; the last entry takes the rest."""
    u = np.asarray(u, float)
    rest = np.cumprod(1.0 - u, axis=-1)
    w = np.empty_like(u)
    w[..., 0] = u[..., 0]
    w[..., 1:] = u[..., 1:] * rest[..., :-1]
    if u.shape[-1] > 1:
        w[..., -1] = rest[..., -2]
    else:
        w[..., -1] = 1.0
    return w


def _stick_expect_log(on: np.ndarray, off: np.ndarray) -> np.ndarray:
    """E[log w_i] for sticks with Beta(on, off) fractions along the last axis."""
    total = digamma(on + off)
    log_u = digamma(on) - total
    log_rest = digamma(off) - total
    out = np.empty_like(on)
    before = np.cumsum(log_rest, axis=-1) - log_rest      # sum over m < i
    out[...] = log_u + before
    out[..., -1] = before[..., -1]
    return out


def expected_log_sticks(vstate: VariationalState) -> tuple[np.ndarray, np.ndarray]:
    """E_q[log eta] (Z,) and E_q[log omega] (Z, A, O, Z)."""
    return _stick_expect_log(vstate.delta, vstate.mu), _stick_expect_log(vstate.sigma, vstate.lam)


def _expected_log_pi(phi: np.ndarray) -> np.ndarray:
    return digamma(phi) - digamma(phi.sum(axis=-1, keepdims=True))


def point_estimate(vstate: VariationalState) -> PointEstimatePolicy:
    log_eta, log_omega = expected_log_sticks(vstate)
    return PointEstimatePolicy(log_eta, _expected_log_pi(vstate.phi), log_omega)


# -- single-history messages ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Messages:
    """Scaled forward/backward messages of one history.

    ``alpha[tau] = alpha_tau / prod_{s<=tau} scale_s`` and
    ``beta[tau] = beta_tau / prod_{s>tau} scale_s``; the likelihood is the
    product of the scales.
    """

    alpha: np.ndarray        # (t+1, Z)
    beta: np.ndarray         # (t+1, Z)
    scales: np.ndarray       # (t+1,)
    transitions: np.ndarray  # (t, Z, Z): omega(j | i, a_{tau-1}, o_tau) * pi(a_tau | j)

    @property
    def log_likelihood(self) -> float:
        return float(np.sum(np.log(self.scales)))

    @property
    def likelihood(self) -> float:
        return math.exp(self.log_likelihood)

    def singleton(self) -> np.ndarray:
        m = self.alpha * self.beta
        return m / m.sum(axis=1, keepdims=True)

    def pairwise(self) -> np.ndarray:
        """(t, Z, Z) joint posteriors of (z_{tau-1}, z_tau) for tau = 1..t."""
        p = (self.alpha[:-1, :, None] * self.transitions * self.beta[1:, None, :]
             / self.scales[1:, None, None])
        return p / p.sum(axis=(1, 2), keepdims=True)


def _tables(policy):
    return policy.eta, policy.pi, policy.omega


def forward_backward(policy, actions, observations) -> Messages:
    """Forward-backward pass over one agent history under an FSC or point estimate."""
    eta, pi, omega = _tables(policy)
    actions = np.asarray(actions, int)
    observations = np.asarray(observations, int)
    if len(observations) != len(actions) - 1:
        raise ValueError("need exactly one observation fewer than actions")
    n, z = len(actions), eta.shape[0]
    alpha = np.empty((n, z))
    scales = np.empty(n)
    trans = np.empty((n - 1, z, z))
    a0 = eta * pi[:, actions[0]]
    for tau in range(n):
        if tau > 0:
            trans[tau - 1] = omega[:, actions[tau - 1], observations[tau - 1], :] * pi[:, actions[tau]][None, :]
            a0 = alpha[tau - 1] @ trans[tau - 1]
        s = a0.sum()
        if not s > 0:
            raise DegenerateHistory(f"history has zero probability at step {tau}")
        scales[tau] = s
        alpha[tau] = a0 / s
    beta = np.ones((n, z))
    for tau in range(n - 2, -1, -1):
        beta[tau] = trans[tau] @ beta[tau + 1] / scales[tau + 1]
    return Messages(alpha, beta, scales, trans)


def normalized_reward(r, r_min: float, r_max: float):
    """Affine map of [R_min, R_max] onto [0, 1]."""
    if not r_max > r_min:
        raise InferenceAbort("R_max must exceed R_min")
    return (np.asarray(r, float) - r_min) / (r_max - r_min)


def geometric_weights(gamma: float, horizon: int) -> np.ndarray:
    """(1 - gamma) gamma^t for t = 0..horizon; sums to 1 - gamma^(horizon + 1)."""
    return (1.0 - gamma) * gamma ** np.arange(horizon + 1)


# -- batches of trajectories -----------------------------------------------------------

@dataclass(eq=False)
class Batch:
    """Trajectories stacked for vectorized inference (all of equal horizon)."""

    actions: np.ndarray        # (K, T+1, N)
    observations: np.ndarray   # (K, T, N)
    rewards: np.ndarray        # (K, T+1)
    log_behavior: np.ndarray   # (K, T+1): sum_n log p(a_{n,0:t} | o_{n,1:t}, behaviour)
    gamma: float
    r_min: float

    @classmethod
    def from_trajectories(cls, trajectories, gamma: float, r_min: float | None = None) -> "Batch":
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("empty trajectory batch")
        horizons = {tr.horizon for tr in trajectories}
        if len(horizons) != 1:
            raise ValueError("all trajectories in a batch need the same horizon")
        actions = np.stack([tr.actions for tr in trajectories])
        observations = np.stack([tr.observations for tr in trajectories])
        rewards = np.stack([tr.rewards for tr in trajectories])
        probs = np.stack([tr.behavior_probs for tr in trajectories])
        if np.any(probs <= 0):
            raise InferenceAbort("behaviour probabilities must be strictly positive")
        log_behavior = np.cumsum(np.log(probs).sum(axis=2), axis=1)
        if r_min is None:
            r_min = float(rewards.min())
            if not rewards.max() > r_min:
                raise InferenceAbort("R_max equals R_min: every reward in the batch is identical")
        return cls(actions, observations, rewards, log_behavior, float(gamma), float(r_min))

    @property
    def num_episodes(self) -> int:
        return self.actions.shape[0]

    @property
    def num_agents(self) -> int:
        return self.actions.shape[2]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1] - 1

    def log_shifted_reward(self) -> np.ndarray:
        """log(gamma^t (r_t - R_min)), -inf where the reward sits at the floor."""
        t = np.arange(self.horizon + 1)
        shifted = self.rewards - self.r_min
        if np.any(shifted < 0):
            raise InferenceAbort("reward below R_min in batch")
        with np.errstate(divide="ignore"):
            return t * math.log(self.gamma) + np.log(shifted) if self.gamma > 0 else \
                np.where(t == 0, np.log(shifted), -np.inf)


@dataclass(eq=False)
class _Forward:
    alpha: np.ndarray     # (K, T+1, Z)
    log_scale: np.ndarray  # (K, T+1)
    trans: np.ndarray     # (K, T, Z, Z)

    @property
    def log_lik(self) -> np.ndarray:
        """log p(a_{0:t} | o_{1:t}) for every prefix length t."""
        return np.cumsum(self.log_scale, axis=1)


def _forward_batch(policy, actions: np.ndarray, observations: np.ndarray) -> _Forward:
    eta, pi, omega = _tables(policy)
    k, n = actions.shape
    z = eta.shape[0]
    alpha = np.empty((k, n, z))
    log_scale = np.empty((k, n))
    trans = np.empty((k, max(n - 1, 0), z, z))
    cur = eta[None, :] * pi[:, actions[:, 0]].T
    for tau in range(n):
        if tau > 0:
            m = omega[:, actions[:, tau - 1], observations[:, tau - 1], :].transpose(1, 0, 2)
            m = m * pi[:, actions[:, tau]].T[:, None, :]
            trans[:, tau - 1] = m
            cur = np.einsum("ki,kij->kj", alpha[:, tau - 1], m)
        s = cur.sum(axis=1)
        if not np.all(s > 0):
            raise DegenerateHistory(f"zero-probability history at step {tau}")
        log_scale[:, tau] = np.log(s)
        alpha[:, tau] = cur / s[:, None]
    return _Forward(alpha, log_scale, trans)


def _log_weights(batch: Batch, log_liks) -> tuple[np.ndarray, float]:
    """(log nu (K, T+1), log empirical value) for per-agent prefix log-likelihoods."""
    log_num = batch.log_shifted_reward() + sum(log_liks) - batch.log_behavior
    if not np.any(np.isfinite(log_num)):
        raise InferenceAbort("empirical value is zero: every reward sits at R_min")
    log_value = float(logsumexp(log_num) - math.log(batch.num_episodes))
    return log_num - log_value, log_value


def nu_weights(points, batch: Batch) -> np.ndarray:
    """Reweighting scalars nu_t^k; (1/K) sum_{k,t} nu_t^k = 1."""
    fwd = [_forward_batch(p, batch.actions[:, :, n], batch.observations[:, :, n])
           for n, p in enumerate(points)]
    log_nu, _ = _log_weights(batch, [f.log_lik for f in fwd])
    return np.exp(log_nu)


def empirical_value(trajectories_or_batch, policies, gamma: float | None = None,
                    r_min: float | None = None) -> float:
    """Importance-weighted discounted value of the joint policy on behaviour data."""
    if isinstance(trajectories_or_batch, Batch):
        batch = trajectories_or_batch
    else:
        batch = Batch.from_trajectories(trajectories_or_batch, gamma, r_min)
    log_num = batch.log_shifted_reward() - batch.log_behavior
    for n, pol in enumerate(policies):
        log_num = log_num + _forward_batch(pol, batch.actions[:, :, n], batch.observations[:, :, n]).log_lik
    if not np.any(np.isfinite(log_num)):
        return 0.0
    return float(np.exp(logsumexp(log_num)) / batch.num_episodes)


# -- expected counts ----------------------------------------------------------------------

def _stats_from_forward(point: PointEstimatePolicy, fwd: _Forward, nu: np.ndarray,
                        actions: np.ndarray, observations: np.ndarray, num_obs: int,
                        log_value: float) -> SufficientStats:
    k, n, z = fwd.alpha.shape
    n_a = point.log_pi.shape[1]
    scale = np.exp(fwd.log_scale)
    # weighted backward: back[tau] = sum_{t >= tau} nu_t * beta^{(t)}_tau (scaled)
    back = np.empty_like(fwd.alpha)
    back[:, n - 1] = nu[:, n - 1, None]
    for tau in range(n - 2, -1, -1):
        back[:, tau] = nu[:, tau, None] + np.einsum(
            "kij,kj->ki", fwd.trans[:, tau], back[:, tau + 1]) / scale[:, tau + 1, None]
    single = fwd.alpha * back                                   # (K, T+1, Z)
    initial = single[:, 0].sum(axis=0) / k
    emit = np.zeros((z, n_a))
    flat_single = single.reshape(-1, z)
    flat_actions = actions.reshape(-1)
    for a in range(n_a):
        emit[:, a] = flat_single[flat_actions == a].sum(axis=0)
    emit /= k
    trans = np.zeros((n_a * num_obs, z, z))
    if n > 1:
        pair = (fwd.alpha[:, :-1, :, None] * fwd.trans * back[:, 1:, None, :]
                / scale[:, 1:, None, None])
        idx = (actions[:, :-1] * num_obs + observations).reshape(-1)
        np.add.at(trans, idx, pair.reshape(-1, z, z))
    trans = trans.reshape(n_a, num_obs, z, z).transpose(2, 0, 1, 3) / k
    return SufficientStats(initial, emit, trans, point, log_value)


def sufficient_stats(states, batch: Batch):
    """Point estimates, then nu-weighted node counts for every agent."""
    points = [point_estimate(s) for s in states]
    return _stats_for_points(points, batch, [s.num_observations for s in states])


def _stats_for_points(points, batch: Batch, num_obs, fwd=None):
    if fwd is None:
        fwd = [_forward_batch(p, batch.actions[:, :, n], batch.observations[:, :, n])
               for n, p in enumerate(points)]
    log_nu, log_value = _log_weights(batch, [f.log_lik for f in fwd])
    nu = np.exp(log_nu)
    return [
        _stats_from_forward(p, f, nu, batch.actions[:, :, n], batch.observations[:, :, n],
                            num_obs[n], log_value)
        for n, (p, f) in enumerate(zip(points, fwd))
    ]


# -- coordinate updates ---------------------------------------------------------------------

def _stick_params(counts: np.ndarray, prior_mean) -> tuple[np.ndarray, np.ndarray]:
    """Beta parameters of truncated sticks from expected counts along the last axis."""
    tail = np.cumsum(counts[..., ::-1], axis=-1)[..., ::-1] - counts   # sum over m > i
    on = 1.0 + counts
    off = np.asarray(prior_mean)[..., None] + tail
    # the last stick only carries leftover mass, so its factor stays at the prior
    on[..., -1] = 1.0
    return on, off


def _update_u(vs: VariationalState, stats: SufficientStats) -> VariationalState:
    delta, mu = _stick_params(stats.initial, vs.g / vs.h)
    return replace(vs, delta=delta, mu=mu)


def _update_pi(vs: VariationalState, stats: SufficientStats, priors: PriorHyperparams) -> VariationalState:
    return replace(vs, phi=priors.theta + stats.emit)


def _update_v(vs: VariationalState, stats: SufficientStats) -> VariationalState:
    sigma, lam = _stick_params(stats.trans, vs.a / vs.b)
    return replace(vs, sigma=sigma, lam=lam)


def _update_rho(vs: VariationalState, priors: PriorHyperparams) -> VariationalState:
    g = priors.e + vs.num_nodes
    h = priors.f - float(np.sum(digamma(vs.mu) - digamma(vs.delta + vs.mu)))
    return replace(vs, g=g, h=h)


def _update_alpha(vs: VariationalState, priors: PriorHyperparams) -> VariationalState:
    a = np.full(vs.b.shape, priors.c + vs.num_nodes)
    b = priors.d - np.sum(digamma(vs.lam) - digamma(vs.sigma + vs.lam), axis=-1)
    return replace(vs, a=a, b=b)


COORDINATE_ORDER = ("u", "pi", "v", "rho", "alpha")


def update_state(vs: VariationalState, stats: SufficientStats, priors: PriorHyperparams,
                 coordinates=COORDINATE_ORDER) -> VariationalState:
    """Closed-form coordinate updates, applied in ``coordinates`` order."""
    for name in coordinates:
        if name == "u":
            vs = _update_u(vs, stats)
        elif name == "pi":
            vs = _update_pi(vs, stats, priors)
        elif name == "v":
            vs = _update_v(vs, stats)
        elif name == "rho":
            vs = _update_rho(vs, priors)
        elif name == "alpha":
            vs = _update_alpha(vs, priors)
        else:
            raise ValueError(f"unknown coordinate {name!r}")
    vs = replace(vs, stats=stats)
    vs.check()
    return vs


def cavi_iteration(states, batch: Batch, priors: PriorHyperparams):
    """One sweep: refresh point estimates and q(z), then update every factor."""
    stats = sufficient_stats(states, batch)
    return [update_state(s, st, priors) for s, st in zip(states, stats)]


def init_variational_state(fsc: FscPolicy, priors: PriorHyperparams, strength: float = 1.0) -> VariationalState:
    """q centred on ``fsc``: its tables enter as ``strength`` pseudo-counts per row."""
    z, n_a, n_o = fsc.num_nodes, fsc.num_actions, fsc.num_observations
    vs = VariationalState(
        delta=np.ones(z), mu=np.ones(z), phi=np.ones((z, n_a)),
        sigma=np.ones((z, n_a, n_o, z)), lam=np.ones((z, n_a, n_o, z)),
        g=priors.e, h=priors.f, a=np.full((z, n_a, n_o), priors.c), b=np.full((z, n_a, n_o), priors.d),
    )
    pseudo = SufficientStats(strength * fsc.eta, strength * fsc.pi, strength * fsc.omega,
                             log_point=None, log_value=float("nan"))
    vs = update_state(vs, pseudo, priors)
    return replace(vs, stats=None)


# -- evidence lower bound ------------------------------------------------------------------

def _beta_entropy(p, q):
    return (gammaln(p) + gammaln(q) - gammaln(p + q) - (p - 1) * digamma(p)
            - (q - 1) * digamma(q) + (p + q - 2) * digamma(p + q))


def _gamma_entropy(shape, rate):
    return shape - np.log(rate) + gammaln(shape) + (1 - shape) * digamma(shape)


def _dirichlet_entropy(conc):
    total = conc.sum(axis=-1)
    k = conc.shape[-1]
    return (np.sum(gammaln(conc), axis=-1) - gammaln(total) + (total - k) * digamma(total)
            - np.sum((conc - 1) * digamma(conc), axis=-1))


def _prior_terms(vs: VariationalState, priors: PriorHyperparams) -> float:
    """E_q[log p(u, V, pi, rho, alpha)] - E_q[log q(u, V, pi, rho, alpha)]."""
    e_rho, e_log_rho = vs.g / vs.h, digamma(vs.g) - math.log(vs.h)
    log_1mu = digamma(vs.mu) - digamma(vs.delta + vs.mu)
    total = np.sum(e_log_rho + (e_rho - 1.0) * log_1mu + _beta_entropy(vs.delta, vs.mu))
    total += (priors.e * math.log(priors.f) - gammaln(priors.e) + (priors.e - 1) * e_log_rho
              - priors.f * e_rho + _gamma_entropy(vs.g, vs.h))

    e_alpha = vs.a / vs.b
    e_log_alpha = digamma(vs.a) - np.log(vs.b)
    log_1mv = digamma(vs.lam) - digamma(vs.sigma + vs.lam)
    total += np.sum(e_log_alpha[..., None] + (e_alpha[..., None] - 1.0) * log_1mv
                    + _beta_entropy(vs.sigma, vs.lam))
    total += np.sum(priors.c * math.log(priors.d) - gammaln(priors.c) + (priors.c - 1) * e_log_alpha
                    - priors.d * e_alpha + _gamma_entropy(vs.a, vs.b))

    theta = np.full(vs.num_actions, priors.theta)
    log_pi = _expected_log_pi(vs.phi)
    total += np.sum(gammaln(theta.sum()) - np.sum(gammaln(theta)) + ((theta - 1) * log_pi).sum(axis=-1)
                    + _dirichlet_entropy(vs.phi))
    return float(total)


def _data_shift(vs: VariationalState, stats: SufficientStats) -> float:
    """Expected complete-data log-likelihood under q minus its value at the frozen point estimate."""
    log_eta, log_omega = expected_log_sticks(vs)
    log_pi = _expected_log_pi(vs.phi)
    ref = stats.log_point
    return float(np.sum(stats.initial * (log_eta - ref.log_eta))
                 + np.sum(stats.emit * (log_pi - ref.log_pi))
                 + np.sum(stats.trans * (log_omega - ref.log_omega)))


def elbo_frozen(states, stats_list, priors: PriorHyperparams) -> float:
    """Lower bound with q(z) and the point estimate held at ``stats_list``."""
    total = stats_list[0].log_value
    for vs, st in zip(states, stats_list):
        total += _data_shift(vs, st) + _prior_terms(vs, priors)
    return float(total)


def elbo(states, batch: Batch, priors: PriorHyperparams) -> float:
    """Lower bound on log V(D; theta) + log-prior with q(z) at its optimum for ``states``.

    The reweighted q(z) of the point estimate makes the data part collapse to
    log V(D; point estimate); the rest is E[log prior] + entropy in closed form.
    """
    points = [point_estimate(s) for s in states]
    log_liks = [_forward_batch(p, batch.actions[:, :, n], batch.observations[:, :, n]).log_lik
                for n, p in enumerate(points)]
    _, log_value = _log_weights(batch, log_liks)
    return float(log_value + sum(_prior_terms(s, priors) for s in states))


def run_cavi(states, batch: Batch, priors: PriorHyperparams, tol: float = 1e-5,
             max_sweeps: int = 100):
    """Sweep until the relative ELBO change drops below ``tol``.

    Returns (states, per-sweep ELBO list, converged flag).
    """
    prev = elbo(states, batch, priors)
    history = []
    for _ in range(max_sweeps):
        states = cavi_iteration(states, batch, priors)
        cur = elbo(states, batch, priors)
        history.append(cur)
        if prev != 0.0 and abs((cur - prev) / prev) < tol:
            return states, history, True
        prev = cur
    return states, history, False


# -- truncation management -------------------------------------------------------------------

def prune_nodes(vstate: VariationalState, occupancy_threshold: float,
                priors: PriorHyperparams) -> VariationalState:
    """Drop nodes whose share of expected occupancy falls below the threshold.

    Surviving nodes are re-indexed by decreasing occupancy (so the busiest
    node becomes node 0 and is never dropped) and q is rebuilt from the
    sliced expected counts.
    """
    if not 0.0 < occupancy_threshold < 1.0:
        raise ValueError("occupancy threshold must lie in (0, 1)")
    stats = vstate.stats
    if stats is None:
        raise ValueError("prune_nodes needs the expected counts of a completed sweep")
    occ = stats.occupancy
    total = occ.sum()
    if total <= 0:
        return vstate
    order = np.argsort(-occ, kind="stable")
    keep = [int(i) for i in order if occ[i] / total >= occupancy_threshold]
    if not keep:
        keep = [int(order[0])]
    if len(keep) == vstate.num_nodes:
        return vstate
    idx = np.array(keep)
    ref = stats.log_point
    sliced = SufficientStats(
        initial=stats.initial[idx],
        emit=stats.emit[idx],
        trans=stats.trans[idx][..., idx],
        log_point=PointEstimatePolicy(ref.log_eta[idx], ref.log_pi[idx], ref.log_omega[idx][..., idx]),
        log_value=stats.log_value,
    )
    z = len(idx)
    shrunk = VariationalState(
        delta=vstate.delta[idx], mu=vstate.mu[idx], phi=vstate.phi[idx],
        sigma=vstate.sigma[idx][..., idx], lam=vstate.lam[idx][..., idx],
        g=priors.e + z, h=vstate.h, a=vstate.a[idx], b=vstate.b[idx],
    )
    return update_state(shrunk, sliced, priors)
