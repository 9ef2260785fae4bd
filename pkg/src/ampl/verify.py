"""Exact property checks on random finite MDPs, packaged as a runnable suite.

Every check below evaluates a closed-form inequality or agreement from
`tabular` on a batch of randomly drawn instances and reports the worst
violation.  A violation is a signed number scaled so that "<= tolerance"
means pass; the worst instance of a failing check is kept in a
JSON-serializable form so it can be replayed in isolation.

The suite is pure float64 linear algebra; the full default run is a few
seconds on one core.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import tabular

DEFAULT_GAMMA = 0.95
MAX_STATES = 16
MAX_ACTIONS = 5
MODEL_EPSILONS = (0.01, 0.1, 0.3)


@dataclass
class CheckResult:
    name: str
    instances: int
    max_violation: float
    tolerance: float
    passed: bool
    witness: Optional[dict] = field(default=None, repr=False)


def _instance_rng(name: str, seed: int, i: int) -> np.random.Generator:
    if name == "eval-error-bound":
        # one instance per plain integer seed, so instance i of the default
        # run is reproducible as --seed i --num-mdps 1
        return np.random.default_rng(seed + i)
    return np.random.default_rng((zlib.crc32(name.encode()), seed, i))


def _draw_sizes(rng: np.random.Generator) -> Tuple[int, int]:
    return int(rng.integers(2, MAX_STATES + 1)), int(rng.integers(2, MAX_ACTIONS + 1))


def _draw_instance(rng: np.random.Generator):
    n_states, n_actions = _draw_sizes(rng)
    mdp = tabular.random_mdp(rng, n_states, n_actions, gamma=DEFAULT_GAMMA)
    pi = tabular.random_policy(rng, n_states, n_actions)
    pi_b = tabular.random_policy(rng, n_states, n_actions)
    return mdp, pi, pi_b


def _witness(i: int, violation: float, mdp: tabular.TabularMdp, **extra) -> dict:
    doc = {"instance": i, "violation": float(violation), "mdp": json.loads(mdp.to_json())}
    for key, val in extra.items():
        doc[key] = val.tolist() if isinstance(val, np.ndarray) else val
    return doc


def _scan(name: str, seed: int, n: int, tol: float,
          one: Callable[[np.random.Generator, int], Tuple[float, dict]]) -> CheckResult:
    """Run `one` per instance, track the worst violation and its witness."""
    worst = -np.inf
    witness = None
    for i in range(n):
        violation, doc = one(_instance_rng(name, seed, i), i)
        if violation > worst:
            worst, witness = violation, doc
    passed = bool(worst <= tol)
    return CheckResult(name, n, float(worst), tol, passed,
                       witness=None if passed else witness)


# ---------------------------------------------------------------------------
# individual checks


def check_eval_error_bound(seed: int, n: int, tol: float) -> CheckResult:
    """|J(pi,P*) - J(pi,Phat)| <= prefactor * sqrt(weighted joint KL)."""

    def one(rng, i):
        mdp, pi, pi_b = _draw_instance(rng)
        eps = MODEL_EPSILONS[i % len(MODEL_EPSILONS)]
        model = tabular.perturb_model(mdp, rng, eps)
        lhs, rhs = tabular.eval_error_bound(mdp, model, pi, pi_b)
        return lhs - rhs, _witness(i, lhs - rhs, mdp, model=json.loads(model.to_json()),
                                   pi=pi.probs, pi_b=pi_b.probs, epsilon=eps,
                                   lhs=float(lhs), rhs=float(rhs))

    return _scan("eval-error-bound", seed, n, tol, one)


def check_kl_gap(seed: int, n: int, tol: float) -> CheckResult:
    """Joint KL with the behavior policy folded in dominates the plain KL."""

    def one(rng, i):
        n_states, n_actions = _draw_sizes(rng)
        p_star = rng.dirichlet(np.ones(n_states))
        p_hat = rng.dirichlet(np.ones(n_states))
        pi_b = tabular.random_policy(rng, n_states, n_actions).probs
        pi = tabular.random_policy(rng, n_states, n_actions).probs
        gap = tabular.policy_augmented_kl_gap(p_star, p_hat, pi_b, pi)
        doc = {"instance": i, "violation": float(-gap), "p_star": p_star.tolist(),
               "p_hat": p_hat.tolist(), "pi_b": pi_b.tolist(), "pi": pi.tolist()}
        return -gap, doc

    return _scan("kl-gap", seed, n, tol, one)


def check_joint_kl_dominance(seed: int, n: int, tol: float) -> CheckResult:
    """KL of the full joints >= expected conditional KL under d_b."""

    def one(rng, i):
        mdp, pi, pi_b = _draw_instance(rng)
        eps = MODEL_EPSILONS[i % len(MODEL_EPSILONS)]
        model = tabular.perturb_model(mdp, rng, eps)
        full, cond = tabular.joint_vs_conditional_kl(mdp, model, pi, pi_b)
        return cond - full, _witness(i, cond - full, mdp,
                                     model=json.loads(model.to_json()),
                                     pi=pi.probs, pi_b=pi_b.probs,
                                     full=float(full), conditional=float(cond))

    return _scan("joint-kl-dominance", seed, n, tol, one)


def check_stationary_recursion(seed: int, n: int, tol: float) -> CheckResult:
    """Linear-solve d satisfies its own flow recursion entrywise."""

    def one(rng, i):
        mdp, pi, _ = _draw_instance(rng)
        d = tabular.stationary_distribution(mdp, pi)
        flow = np.einsum("saz,sa->z", mdp.transition, d)
        recursed = mdp.gamma * flow[:, None] * pi.probs \
            + (1.0 - mdp.gamma) * mdp.mu0[:, None] * pi.probs
        err = float(np.max(np.abs(recursed - d)))
        return err, _witness(i, err, mdp, pi=pi.probs)

    return _scan("stationary-recursion", seed, n, tol, one)


def check_stationary_power_agreement(seed: int, n: int, tol: float) -> CheckResult:
    """Linear-solve d matches long power iteration of the same recursion."""

    def one(rng, i):
        mdp, pi, _ = _draw_instance(rng)
        d = tabular.stationary_distribution(mdp, pi)
        d_pow = tabular.stationary_distribution_power(mdp, pi, n_steps=10_000)
        err = float(np.max(np.abs(d - d_pow)))
        return err, _witness(i, err, mdp, pi=pi.probs)

    return _scan("stationary-power-agreement", seed, n, tol, one)


def check_return_two_forms(seed: int, n: int, tol: float) -> CheckResult:
    """(1-gamma) E_mu0[Q] form of J agrees with the E_d[r] form."""

    def one(rng, i):
        mdp, pi, _ = _draw_instance(rng)
        q = tabular.exact_q(mdp, pi)
        j_init = (1.0 - mdp.gamma) * float(np.sum(mdp.mu0[:, None] * pi.probs * q))
        d = tabular.stationary_distribution(mdp, pi)
        j_flow = float(np.sum(d * mdp.reward))
        err = abs(j_init - j_flow)
        return err, _witness(i, err, mdp, pi=pi.probs,
                             j_init=j_init, j_flow=j_flow)

    return _scan("return-two-forms", seed, n, tol, one)


def check_miw_normalization(seed: int, n: int, tol: float) -> CheckResult:
    """E_{d_b}[omega*] = 1: the weight ratio integrates to one."""

    def one(rng, i):
        mdp, pi, pi_b = _draw_instance(rng)
        omega = tabular.true_miw(mdp, pi, pi_b)
        d_b = tabular.stationary_distribution(mdp, pi_b)
        err = abs(float(np.sum(d_b * omega)) - 1.0)
        return err, _witness(i, err, mdp, pi=pi.probs, pi_b=pi_b.probs)

    return _scan("miw-normalization", seed, n, tol, one)


def check_operator_fixed_point(seed: int, n: int, tol: float) -> CheckResult:
    """The weight backup operator leaves the true weights unchanged."""

    def one(rng, i):
        mdp, pi, pi_b = _draw_instance(rng)
        omega = tabular.true_miw(mdp, pi, pi_b)
        err = float(np.max(np.abs(tabular.apply_miw_operator(mdp, pi, pi_b, omega) - omega)))
        return err, _witness(i, err, mdp, pi=pi.probs, pi_b=pi_b.probs)

    return _scan("operator-fixed-point", seed, n, tol, one)


def check_operator_lipschitz(seed: int, n: int, tol: float) -> CheckResult:
    """||T w - T u||_inf <= c ||w - u||_inf with the closed-form constant."""

    def one(rng, i):
        mdp, pi, _ = _draw_instance(rng)
        pi_b = pi  # the constant is only guaranteed meaningful on-policy
        c = tabular.contraction_constant(mdp, pi, pi_b)
        w = rng.uniform(0.0, 3.0, size=(mdp.n_states, mdp.n_actions))
        u = rng.uniform(0.0, 3.0, size=(mdp.n_states, mdp.n_actions))
        lhs = float(np.max(np.abs(tabular.apply_miw_operator(mdp, pi, pi_b, w)
                                  - tabular.apply_miw_operator(mdp, pi, pi_b, u))))
        rhs = c * float(np.max(np.abs(w - u)))
        return lhs - rhs, _witness(i, lhs - rhs, mdp, pi=pi.probs, w=w, u=u,
                                   c=float(c), lhs=float(lhs), rhs=float(rhs))

    return _scan("operator-lipschitz", seed, n, tol, one)


def check_contraction_trace(seed: int, n: int, tol: float, n_iters: int = 200) -> CheckResult:
    """On-policy: c < 1 and iterates stay inside the geometric envelope."""

    def one(rng, i):
        mdp, pi, _ = _draw_instance(rng)
        pi_b = pi
        c = tabular.contraction_constant(mdp, pi, pi_b)
        omega_star = tabular.true_miw(mdp, pi, pi_b)
        if c >= 1.0:
            return np.inf, _witness(i, np.inf, mdp, pi=pi.probs, c=float(c))
        omega = np.zeros_like(omega_star)
        err0 = float(np.max(np.abs(omega - omega_star)))
        worst = -np.inf
        envelope = err0
        for _ in range(n_iters):
            omega = tabular.apply_miw_operator(mdp, pi, pi_b, omega)
            envelope *= c
            worst = max(worst, float(np.max(np.abs(omega - omega_star))) - envelope)
        return worst, _witness(i, worst, mdp, pi=pi.probs, c=float(c))

    return _scan("contraction-trace", seed, n, tol, one)


def check_identity_residual(seed: int, n: int, tol: float) -> CheckResult:
    """Both sides of the weighted backup identity agree at the true weights.

    Five bounded test tables per MDP: the exact action values, the reward
    table itself, and three uniform random tables.
    """

    def one(rng, i):
        mdp, pi, pi_b = _draw_instance(rng)
        omega = tabular.true_miw(mdp, pi, pi_b)
        tables = [tabular.exact_q(mdp, pi), mdp.reward]
        tables += [rng.uniform(-1.0, 1.0, size=mdp.reward.shape) for _ in range(3)]
        worst = -np.inf
        for q in tables:
            worst = max(worst, abs(tabular.fixed_point_residual(mdp, pi, pi_b, omega, q)))
        return worst, _witness(i, worst, mdp, pi=pi.probs, pi_b=pi_b.probs)

    return _scan("identity-residual", seed, n, tol, one)


# ---------------------------------------------------------------------------
# registry and driver

CHECKS: Dict[str, Tuple[Callable[[int, int, float], CheckResult], int, float]] = {
    "eval-error-bound": (check_eval_error_bound, 100, 1e-9),
    "kl-gap": (check_kl_gap, 1000, 1e-12),
    "joint-kl-dominance": (check_joint_kl_dominance, 1000, 1e-12),
    "stationary-recursion": (check_stationary_recursion, 50, 1e-10),
    "stationary-power-agreement": (check_stationary_power_agreement, 50, 1e-8),
    "return-two-forms": (check_return_two_forms, 100, 1e-9),
    "miw-normalization": (check_miw_normalization, 100, 1e-9),
    "operator-fixed-point": (check_operator_fixed_point, 50, 1e-9),
    "operator-lipschitz": (check_operator_lipschitz, 100, 1e-12),
    "contraction-trace": (check_contraction_trace, 50, 1e-10),
    "identity-residual": (check_identity_residual, 50, 1e-9),
}


def run_suite(seed: int = 0, num_mdps: Optional[int] = None,
              tolerance_overrides: Optional[Dict[str, float]] = None) -> List[CheckResult]:
    overrides = dict(tolerance_overrides or {})
    unknown = sorted(set(overrides) - set(CHECKS))
    if unknown:
        raise KeyError(f"unknown check names in tolerance overrides: {unknown}")
    results = []
    for name, (fn, default_n, default_tol) in CHECKS.items():
        n = num_mdps if num_mdps is not None else default_n
        results.append(fn(seed, n, overrides.get(name, default_tol)))
    return results


def format_report(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  instances  max violation  tolerance  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.instances:9d}  {r.max_violation:13.3e}"
                     f"  {r.tolerance:9.0e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
