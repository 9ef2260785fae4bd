"""Exact oracles on finite MDPs.

Everything here is closed-form linear algebra in float64: discounted
stationary state-action distributions, action values, expected returns,
marginal importance weights (MIW), the backup operator whose fixed point is
the MIW, its contraction constant, the evaluation-error bound that the rest of
the package optimizes a surrogate of, and the fixed-point identity used to
train neural weight estimators.  The verification suite treats these as ground
truth, so this module is deliberately free of sampling and approximation
(except for the explicitly-named power-iteration / rollout oracles used to
cross-check the solvers).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class ZeroSupportError(ValueError):
    """A state-action pair needed in a denominator has zero probability."""

    def __init__(self, pairs, what: str):
        self.pairs = list(pairs)
        super().__init__(f"{what} is zero on pairs {self.pairs[:8]}"
                         + (" ..." if len(self.pairs) > 8 else ""))


class AbsoluteContinuityError(ValueError):
    """KL(p || q) is infinite because q = 0 somewhere p > 0."""


# ---------------------------------------------------------------------------
# core types


@dataclass(frozen=True)
class TabularMdp:
    n_states: int
    n_actions: int
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray      # (S, A)
    r_max: float
    gamma: float
    mu0: np.ndarray         # (S,)

    def __post_init__(self):
        S, A = self.n_states, self.n_actions
        assert self.transition.shape == (S, A, S)
        assert self.reward.shape == (S, A)
        assert self.mu0.shape == (S,)
        assert 0.0 <= self.gamma < 1.0, self.gamma
        assert self.r_max > 0
        assert np.all(self.transition >= 0)
        assert np.all(np.abs(self.transition.sum(axis=2) - 1.0) <= 1e-12)
        assert np.all(self.mu0 >= 0) and abs(self.mu0.sum() - 1.0) <= 1e-12
        assert np.all(np.abs(self.reward) <= self.r_max + 1e-12)

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_states": self.n_states,
                "n_actions": self.n_actions,
                "gamma": self.gamma,
                "r_max": self.r_max,
                "mu0": self.mu0.tolist(),
                "transition": self.transition.tolist(),
                "reward": self.reward.tolist(),
            }
        )

    @classmethod
    def from_json(cls, doc: str) -> "TabularMdp":
        d = json.loads(doc)
        return cls(
            n_states=int(d["n_states"]),
            n_actions=int(d["n_actions"]),
            transition=np.asarray(d["transition"], dtype=np.float64),
            reward=np.asarray(d["reward"], dtype=np.float64),
            r_max=float(d.get("r_max", np.max(np.abs(np.asarray(d["reward"]))))),
            gamma=float(d["gamma"]),
            mu0=np.asarray(d["mu0"], dtype=np.float64),
        )


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        assert self.probs.ndim == 2
        assert np.all(self.probs >= 0)
        assert np.all(np.abs(self.probs.sum(axis=1) - 1.0) <= 1e-12)

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Vectorized action draw for integer state indices."""
        cdf = np.cumsum(self.probs[states], axis=1)
        u = rng.random(len(states))
        idx = (u[:, None] > cdf).sum(axis=1)
        return np.minimum(idx, self.probs.shape[1] - 1)


def uniform_policy(n_states: int, n_actions: int) -> TabularPolicy:
    return TabularPolicy(np.full((n_states, n_actions), 1.0 / n_actions))


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / x.sum(axis=-1, keepdims=True)


def random_mdp(rng: np.random.Generator, n_states: int = 5, n_actions: int = 3,
               gamma: float = 0.95) -> TabularMdp:
    """Dirichlet(1,..,1) transition rows, rewards U[-1,1], uniform mu0.

    Full support keeps every KL finite and every d_{pi_b}(s,a) positive.
    """
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    transition = _normalize_rows(transition)
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(
        n_states=n_states,
        n_actions=n_actions,
        transition=transition,
        reward=reward,
        r_max=1.0,
        gamma=gamma,
        mu0=np.full(n_states, 1.0 / n_states),
    )


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> TabularPolicy:
    return TabularPolicy(_normalize_rows(rng.dirichlet(np.ones(n_actions), size=n_states)))


def perturb_policy(pi: TabularPolicy, rng: np.random.Generator, eps: float) -> TabularPolicy:
    """Mix each row with a random policy row; per-state TV distance <= eps."""
    other = random_policy(rng, *pi.probs.shape)
    return TabularPolicy(_normalize_rows((1.0 - eps) * pi.probs + eps * other.probs))


def perturb_model(mdp: TabularMdp, rng: np.random.Generator, eps: float) -> TabularMdp:
    """New MDP whose transition rows are mixed with independent Dirichlet rows."""
    noise = rng.dirichlet(np.ones(mdp.n_states), size=(mdp.n_states, mdp.n_actions))
    transition = _normalize_rows((1.0 - eps) * mdp.transition + eps * noise)
    return TabularMdp(
        n_states=mdp.n_states,
        n_actions=mdp.n_actions,
        transition=transition,
        reward=mdp.reward,
        r_max=mdp.r_max,
        gamma=mdp.gamma,
        mu0=mdp.mu0,
    )


# ---------------------------------------------------------------------------
# distributions, values, returns


def stationary_distribution(mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    """Discounted stationary state-action distribution d(s,a), by linear solve.

    Solves (I - gamma * T_pi^T) d_state = (1-gamma) * mu0 with
    T_pi(s'|s) = sum_a pi(a|s) P(s'|s,a), then d(s,a) = d_state(s) pi(a|s).
    """
    t_pi = np.einsum("sa,saz->sz", pi.probs, mdp.transition)
    lhs = np.eye(mdp.n_states) - mdp.gamma * t_pi.T
    d_state = np.linalg.solve(lhs, (1.0 - mdp.gamma) * mdp.mu0)
    d = d_state[:, None] * pi.probs
    assert abs(d.sum() - 1.0) <= 1e-10, "stationary distribution does not normalize"
    return d


def stationary_distribution_power(mdp: TabularMdp, pi: TabularPolicy,
                                  n_steps: int = 10_000) -> np.ndarray:
    """Power-iteration oracle for the same quantity (cross-check, not solver)."""
    d = mdp.mu0[:, None] * pi.probs * (1.0 - mdp.gamma)
    base = (1.0 - mdp.gamma) * mdp.mu0[:, None] * pi.probs
    for _ in range(n_steps):
        flow = np.einsum("saz,sa->z", mdp.transition, d)
        d = mdp.gamma * flow[:, None] * pi.probs + base
    return d


def exact_q(mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    """Action values of pi: solves Q = r + gamma P Pi Q as one dense system."""
    S, A = mdp.n_states, mdp.n_actions
    n = S * A
    # (PPi)[(s,a),(s',a')] = P(s'|s,a) pi(a'|s')
    p_pi = (mdp.transition[:, :, :, None] * pi.probs[None, None, :, :]).reshape(n, n)
    q = np.linalg.solve(np.eye(n) - mdp.gamma * p_pi, mdp.reward.reshape(n))
    return q.reshape(S, A)


def value_iteration_q(mdp: TabularMdp, pi: TabularPolicy, tol: float = 1e-12,
                      max_iters: int = 200_000) -> np.ndarray:
    """Fixed-point iteration oracle for exact_q."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    while max_iters > 0:
        v = (pi.probs * q).sum(axis=1)
        nxt = mdp.reward + mdp.gamma * np.einsum("saz,z->sa", mdp.transition, v)
        if np.max(np.abs(nxt - q)) <= tol:
            return nxt
        q = nxt
        max_iters -= 1
    return q


def expected_return(mdp: TabularMdp, pi: TabularPolicy) -> float:
    """Normalized expected discounted return J(pi).

    Computed as (1-gamma) E_{mu0,pi}[Q]; cross-checked against E_d[r] (the two
    must agree to 1e-9 -- a mismatch means a solver bug, so it is asserted).
    """
    q = exact_q(mdp, pi)
    j_init = (1.0 - mdp.gamma) * float(np.sum(mdp.mu0[:, None] * pi.probs * q))
    d = stationary_distribution(mdp, pi)
    j_flow = float(np.sum(d * mdp.reward))
    assert abs(j_init - j_flow) <= 1e-9, (j_init, j_flow)
    return j_init


# ---------------------------------------------------------------------------
# marginal importance weights and their backup operator


def true_miw(mdp: TabularMdp, pi: TabularPolicy, pi_b: TabularPolicy) -> np.ndarray:
    """omega*(s,a) = d_pi(s,a) / d_pi_b(s,a); errors where the denominator is 0."""
    d_pi = stationary_distribution(mdp, pi)
    d_b = stationary_distribution(mdp, pi_b)
    bad = np.argwhere(d_b <= 0.0)
    if len(bad):
        raise ZeroSupportError([tuple(p) for p in bad], "d_pi_b")
    return d_pi / d_b


def apply_miw_operator(mdp: TabularMdp, pi: TabularPolicy, pi_b: TabularPolicy,
                       omega: np.ndarray) -> np.ndarray:
    """One backup of the operator whose unique fixed point is true_miw.

    (T omega)(s',a') = [gamma sum_{s,a} pi(a'|s') P(s'|s,a) omega(s,a) d_b(s,a)
                        + (1-gamma) mu0(s') pi(a'|s')] / d_b(s',a')
    """
    d_b = stationary_distribution(mdp, pi_b)
    bad = np.argwhere(d_b <= 0.0)
    if len(bad):
        raise ZeroSupportError([tuple(p) for p in bad], "d_pi_b")
    flow = np.einsum("saz,sa->z", mdp.transition, omega * d_b)
    numer = mdp.gamma * flow[:, None] * pi.probs \
        + (1.0 - mdp.gamma) * mdp.mu0[:, None] * pi.probs
    return numer / d_b


def contraction_constant(mdp: TabularMdp, pi: TabularPolicy, pi_b: TabularPolicy) -> float:
    """Lipschitz constant of the weight backup operator in the sup norm.

    c = max_{s',a'} [pi(a'|s')/pi_b(a'|s')] * c(s'), with
    c(s') = 1 - (1-gamma) mu0(s') / (gamma sum_{s,a} P(s'|s,a) d_b(s,a)
                                     + (1-gamma) mu0(s')).
    May exceed 1 (convergence then not guaranteed); that is reported, not an
    error.  Pairs where pi is 0 contribute nothing.
    """
    d_b = stationary_distribution(mdp, pi_b)
    flow = np.einsum("saz,sa->z", mdp.transition, d_b)
    base = (1.0 - mdp.gamma) * mdp.mu0
    c_state = 1.0 - base / (mdp.gamma * flow + base)
    bad = np.argwhere((pi_b.probs == 0.0) & (pi.probs > 0.0))
    if len(bad):
        raise ZeroSupportError([tuple(p) for p in bad], "pi_b where pi > 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pi.probs > 0.0, pi.probs / pi_b.probs, 0.0)
    return float(np.max(ratio * c_state[:, None]))


# ---------------------------------------------------------------------------
# divergences


def kl_discrete(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for flat probability vectors, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    support = p > 0.0
    if np.any(q[support] <= 0.0):
        raise AbsoluteContinuityError("q has zeros on the support of p")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def policy_augmented_kl_gap(p_star: np.ndarray, p_hat: np.ndarray,
                            pi_b: np.ndarray, pi: np.ndarray) -> float:
    """KL(P* pi_b || Phat pi) - KL(P* || Phat) for one (s,a) context.

    `p_star`, `p_hat` are next-state distributions (S,); `pi_b`, `pi` are
    (S, A) policy matrices over next states.  The gap equals
    E_{s'~P*}[KL(pi_b(.|s') || pi(.|s'))] and is therefore nonnegative; it is
    computed here as the literal difference of the two KLs so that the
    identity is actually exercised.
    """
    joint_p = p_star[:, None] * pi_b
    joint_q = p_hat[:, None] * pi
    return kl_discrete(joint_p, joint_q) - kl_discrete(p_star, p_hat)


def joint_vs_conditional_kl(mdp: TabularMdp, model: TabularMdp,
                            pi: TabularPolicy, pi_b: TabularPolicy):
    """(full-joint KL, expected conditional KL); the former dominates.

    Left joint:  d_b(s,a) P*(s'|s,a) pi_b(a'|s')
    Right joint: d_b(s) pi(a|s) Phat(s'|s,a) pi(a'|s')
    The difference equals KL(d_b(s,a) || d_b(s) pi(a|s)) >= 0.
    """
    d_b = stationary_distribution(mdp, pi_b)
    cond = _expected_conditional_kl(mdp, model, pi, pi_b, d_b)
    left = d_b[:, :, None, None] * mdp.transition[:, :, :, None] * pi_b.probs[None, None, :, :]
    d_state = d_b.sum(axis=1)
    right = (d_state[:, None] * pi.probs)[:, :, None, None] \
        * model.transition[:, :, :, None] * pi.probs[None, None, :, :]
    return kl_discrete(left, right), cond


def _expected_conditional_kl(mdp, model, pi, pi_b, d_b) -> float:
    """E_{d_b}[ KL(P* pi_b || Phat pi | s,a) ] by exact summation."""
    total = 0.0
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            if d_b[s, a] <= 0.0:
                continue
            joint_p = mdp.transition[s, a][:, None] * pi_b.probs
            joint_q = model.transition[s, a][:, None] * pi.probs
            total += d_b[s, a] * kl_discrete(joint_p, joint_q)
    return total


# ---------------------------------------------------------------------------
# the evaluation-error bound and the fixed-point identity


def bound_prefactor(gamma: float, r_max: float) -> float:
    """gamma r_max / (sqrt(2) (1-gamma)); kept separate so checks can fault-inject it."""
    return gamma * r_max / (np.sqrt(2.0) * (1.0 - gamma))


def eval_error_bound(mdp: TabularMdp, model: TabularMdp,
                     pi: TabularPolicy, pi_b: TabularPolicy):
    """(lhs, rhs) of the model evaluation-error bound.

    lhs = |J(pi, P*) - J(pi, Phat)| with the model sharing the true reward;
    rhs = gamma r_max / (sqrt(2) (1-gamma)) * sqrt(D) with
    D = E_{d_b}[ omega*(s,a) KL(P* pi_b || Phat pi | s,a) ].
    """
    assert model.n_states == mdp.n_states and model.n_actions == mdp.n_actions
    assert model.gamma == mdp.gamma
    assert np.array_equal(model.mu0, mdp.mu0)
    assert np.array_equal(model.reward, mdp.reward)
    positive = mdp.transition > 0.0
    if np.any(model.transition[positive] <= 0.0):
        raise AbsoluteContinuityError("model rows have zeros where mdp is positive")

    lhs = abs(expected_return(mdp, pi) - expected_return(model, pi))
    d_b = stationary_distribution(mdp, pi_b)
    omega = true_miw(mdp, pi, pi_b)
    d_metric = 0.0
    prefactor = bound_prefactor(mdp.gamma, mdp.r_max)
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            joint_p = mdp.transition[s, a][:, None] * pi_b.probs
            joint_q = model.transition[s, a][:, None] * pi.probs
            d_metric += d_b[s, a] * omega[s, a] * kl_discrete(joint_p, joint_q)
    return lhs, prefactor * np.sqrt(d_metric)


def fixed_point_residual(mdp: TabularMdp, pi: TabularPolicy, pi_b: TabularPolicy,
                         omega: np.ndarray, q: np.ndarray) -> float:
    """l1(omega) - l2(omega) for a bounded test table q; 0 at omega = true_miw.

    l1 = E_{d_b}[omega q]
    l2 = gamma E_{d_b, P*, pi}[omega(s,a) q(s',a')] + (1-gamma) E_{mu0,pi}[q]
    """
    d_b = stationary_distribution(mdp, pi_b)
    l1 = float(np.sum(d_b * omega * q))
    succ = np.einsum("saz,zb->sa", mdp.transition, pi.probs * q)
    l2 = mdp.gamma * float(np.sum(d_b * omega * succ)) \
        + (1.0 - mdp.gamma) * float(np.sum(mdp.mu0[:, None] * pi.probs * q))
    return l1 - l2


# ---------------------------------------------------------------------------
# Monte-Carlo oracle (sampling cross-check for true_miw)


def monte_carlo_visitation(mdp: TabularMdp, pi: TabularPolicy, n_rollouts: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Empirical d(s,a) from discounted rollouts.

    Each rollout stops at a Geometric(1-gamma) time T; the pair (s_T, a_T) is
    an exact draw from the discounted stationary distribution, so the
    empirical frequency table is an unbiased estimate of d.  Episodes are
    simulated generation-by-generation with the still-alive subset compacted
    away each step.
    """
    lengths = rng.geometric(1.0 - mdp.gamma, size=n_rollouts) - 1  # support {0,1,...}
    states = rng.choice(mdp.n_states, size=n_rollouts, p=mdp.mu0)
    counts = np.zeros((mdp.n_states, mdp.n_actions))
    t = 0
    while len(states):
        actions = pi.sample(states, rng)
        stopped = lengths == t
        if np.any(stopped):
            np.add.at(counts, (states[stopped], actions[stopped]), 1.0)
        alive = ~stopped
        states, actions, lengths = states[alive], actions[alive], lengths[alive]
        if not len(states):
            break
        cdf = np.cumsum(mdp.transition[states, actions], axis=1)
        u = rng.random(len(states))
        states = np.minimum((u[:, None] > cdf).sum(axis=1), mdp.n_states - 1)
        t += 1
    return counts / n_rollouts
