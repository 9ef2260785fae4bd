"""Fixed-point estimation of marginal importance weights omega(s, a).

omega is an MLP over (s, a) with a softplus-power output, trained so that the
empirical Bellman-flow residual

    L1 - y,   L1 = mean[omega(s,a) q(s,a)],
              y  = gamma mean[omega'(s,a) q'(s',a')] + (1-gamma) mean[q'(s0,a0)]

vanishes for a fixed test function q (a frozen critic snapshot by default, the
learned reward head in the ablation).  omega' and q' are EMA copies so y acts
as a constant target.  A quadratic hinge keeps the batch-mean weight below
g_constraint.  Helpers at the bottom embed a finite MDP as one-hot vectors so
the trained network can be compared against the exact linear-solve weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import nets
from .dataset import OfflineDataset
from .tabular import TabularMdp, TabularPolicy, stationary_distribution

KAPPA = 100.0  # hinge penalty weight for the mean constraint


class MiwEstimator:
    def __init__(self, state_dim: int, action_dim: int, hidden: tuple,
                 rng: np.random.Generator, alpha: float = 0.5,
                 g_constraint: float = 10.0, ema_rate: float = 0.01,
                 lr: float = 1e-6, dtype=np.float64):
        assert 0.0 < alpha <= 1.0
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.spec = nets.MlpSpec(state_dim + action_dim, tuple(hidden), 1,
                                 output="softplus_power", out_arg=alpha)
        self.params = nets.init_mlp(self.spec, rng, dtype=dtype, final_uniform=0.003)
        self.target_params = self.params.copy()
        self.opt = nets.Adam(self.params, lr=lr)
        self.alpha = alpha
        self.g_constraint = g_constraint
        self.ema_rate = ema_rate

    def forward(self, s: np.ndarray, a: np.ndarray, params: Optional[nets.Params] = None) -> np.ndarray:
        x = np.concatenate([s, a], axis=1)
        p = self.params if params is None else params
        return nets.mlp_forward(self.spec, p, x)[:, 0]


@dataclass
class TestFunction:
    """q(s,a) plus its slow copy; soft_update drifts q' -> q when param-backed."""

    fn: Callable
    target_fn: Callable
    live: Optional[nets.Params] = None
    target: Optional[nets.Params] = None
    mode: str = "critic"

    def soft_update(self, rate: float) -> None:
        if self.live is not None and self.target is not None:
            nets.soft_update(self.target, self.live, rate)


def critic_test_function(q_spec: nets.MlpSpec, q_params: nets.Params,
                         q_target_params: nets.Params) -> TestFunction:
    """Freeze the live critic as q and its target as q' (private copies)."""
    live = q_params.copy()
    target = q_target_params.copy()

    def _eval(params, s, a):
        return nets.mlp_forward(q_spec, params, np.concatenate([s, a], axis=1))[:, 0]

    return TestFunction(
        fn=lambda s, a: _eval(live, s, a),
        target_fn=lambda s, a: _eval(target, s, a),
        live=live,
        target=target,
        mode="critic",
    )


def reward_test_function(reward_fn: Callable) -> TestFunction:
    """Deterministic r_hat(s, a) as the test function; no target drift."""
    return TestFunction(fn=reward_fn, target_fn=reward_fn, mode="reward")


def table_test_function(q_table: np.ndarray) -> TestFunction:
    """Exact table lookup over one-hot embedded states/actions."""

    def fn(s, a):
        return q_table[np.argmax(s, axis=1), np.argmax(a, axis=1)]

    return TestFunction(fn=fn, target_fn=fn, mode="table")


def miw_minibatch_loss(estimator: MiwEstimator, batch, init_states: np.ndarray,
                       policy_sampler: Callable, gamma: float,
                       test_fn: TestFunction, row_weights=None, init_weights=None,
                       omega_override=None):
    """(L1 - y)^2 + KAPPA * max(0, mean omega - g)^2 and its parameter gradient.

    batch is (s, a, s_next) or (s, a, s_next, a_next); when a_next is absent it
    is drawn from policy_sampler(s_next), and initial actions always come from
    policy_sampler(init_states).  Optional row/init weights (e.g. exact joint
    probabilities for a full-population tabular batch) replace the uniform
    means; they are normalized to sum to one.  omega_override=(omega, omega')
    substitutes fixed weight values for the network outputs (loss-only hook for
    instantiating the objective at exact fixed points; gradient comes back None).
    """
    s, a, s_next = batch[0], batch[1], batch[2]
    a_next = batch[3] if len(batch) > 3 else policy_sampler(s_next)
    a0 = policy_sampler(init_states)

    if omega_override is not None:
        omega, omega_t = omega_override
        cache = None
    else:
        x = np.concatenate([s, a], axis=1)
        omega_col, cache = nets.mlp_forward_cached(estimator.spec, estimator.params, x)
        omega = omega_col[:, 0]
        omega_t = nets.mlp_forward(estimator.spec, estimator.target_params, x)[:, 0]

    q_sa = test_fn.fn(s, a)
    q_next = test_fn.target_fn(s_next, a_next)
    q0 = test_fn.target_fn(init_states, a0)

    if row_weights is None:
        w = np.full(len(s), 1.0 / len(s))
    else:
        w = np.asarray(row_weights, dtype=np.float64)
        w = w / w.sum()
    if init_weights is None:
        wi = np.full(len(init_states), 1.0 / len(init_states))
    else:
        wi = np.asarray(init_weights, dtype=np.float64)
        wi = wi / wi.sum()

    l1 = float(w @ (omega * q_sa))
    y = gamma * float(w @ (omega_t * q_next)) + (1.0 - gamma) * float(wi @ q0)
    mean_omega = float(w @ omega)
    overshoot = mean_omega - estimator.g_constraint
    loss = (l1 - y) ** 2 + KAPPA * max(0.0, overshoot) ** 2

    if cache is None:
        return loss, None
    d_omega = 2.0 * (l1 - y) * w * q_sa
    if overshoot > 0.0:
        d_omega = d_omega + 2.0 * KAPPA * overshoot * w
    grad, _ = nets.mlp_backward(estimator.spec, estimator.params, cache,
                                d_omega[:, None].astype(omega_col.dtype))
    return loss, grad


def train_miw(estimator: MiwEstimator, dataset: OfflineDataset, test_fn: TestFunction,
              policy_sampler: Callable, n_steps: int, gamma: float,
              rng: np.random.Generator, batch_size: int = 1024,
              init_batch_size: int = 2048) -> MiwEstimator:
    """Fixed-point training loop: Adam on the minibatch loss, gradient norm
    clipped at 1, EMA (rate ema_rate) of omega' toward omega and q' toward q
    after every step.  Warm-starts from the estimator's current parameters."""
    n, n_init = dataset.size, len(dataset.initial_states)
    for step in range(n_steps):
        idx = rng.integers(0, n, size=batch_size)
        init_idx = rng.integers(0, n_init, size=init_batch_size)
        batch = (dataset.states[idx], dataset.actions[idx], dataset.next_states[idx])
        loss, grad = miw_minibatch_loss(
            estimator, batch, dataset.initial_states[init_idx], policy_sampler,
            gamma, test_fn,
        )
        if not np.isfinite(loss):
            raise RuntimeError(f"miw training diverged at step {step}: loss={loss}")
        nets.clip_grad_norm(grad.flat, 1.0)
        estimator.opt.step(estimator.params, grad.flat)
        nets.soft_update(estimator.target_params, estimator.params, estimator.ema_rate)
        test_fn.soft_update(estimator.ema_rate)
    return estimator


def raw_weights(estimator: MiwEstimator, dataset: OfflineDataset) -> np.ndarray:
    """Unnormalized omega over every transition (for metrics/constraint checks)."""
    return estimator.forward(dataset.states, dataset.actions)


def normalized_weights(estimator: MiwEstimator, dataset: OfflineDataset) -> np.ndarray:
    """omega over the dataset scaled to mean exactly one (float64 for reporting)."""
    w = raw_weights(estimator, dataset).astype(np.float64)
    out = w / w.mean()
    assert abs(out.mean() - 1.0) < 1e-9
    return out


def save_estimator(directory, estimator: MiwEstimator) -> None:
    """Weight-net checkpoint: parameter blobs plus a JSON shape/config manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nets.save_params(directory / "params", estimator.params)
    nets.save_params(directory / "target_params", estimator.target_params)
    manifest = {
        "state_dim": estimator.state_dim,
        "action_dim": estimator.action_dim,
        "hidden": list(estimator.spec.hidden),
        "alpha": estimator.alpha,
        "g_constraint": estimator.g_constraint,
        "ema_rate": estimator.ema_rate,
        "lr": estimator.opt.lr,
        "dtype": str(estimator.params.flat.dtype),
    }
    (directory / "miw.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_estimator(directory) -> MiwEstimator:
    directory = Path(directory)
    m = json.loads((directory / "miw.json").read_text())
    est = MiwEstimator(m["state_dim"], m["action_dim"], tuple(m["hidden"]),
                       np.random.default_rng(0), alpha=m["alpha"],
                       g_constraint=m["g_constraint"], ema_rate=m["ema_rate"],
                       lr=m["lr"], dtype=np.dtype(m["dtype"]))
    est.params = nets.load_params(directory / "params")
    est.target_params = nets.load_params(directory / "target_params")
    return est


# --- one-hot embedding of finite MDPs (estimator-vs-oracle comparisons) -----

def one_hot(indices: np.ndarray, n: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((len(indices), n), dtype=dtype)
    out[np.arange(len(indices)), indices] = 1.0
    return out


def sample_categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row from row-wise categorical distributions."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass
class TabularMiwProblem:
    dataset: OfflineDataset
    mdp: TabularMdp
    pi: TabularPolicy
    pi_b: TabularPolicy

    def policy_sampler(self, rng: np.random.Generator) -> Callable:
        """a ~ pi(.|s) over one-hot rows, consuming the given stream."""

        def sampler(states_onehot: np.ndarray) -> np.ndarray:
            s_idx = np.argmax(states_onehot, axis=1)
            a_idx = sample_categorical_rows(self.pi.probs[s_idx], rng)
            return one_hot(a_idx, self.mdp.n_actions)

        return sampler

    def all_pairs(self):
        """One-hot (s, a) arrays enumerating every state-action pair."""
        S, A = self.mdp.n_states, self.mdp.n_actions
        s_idx = np.repeat(np.arange(S), A)
        a_idx = np.tile(np.arange(A), S)
        return one_hot(s_idx, S), one_hot(a_idx, A)


def tabular_miw_problem(mdp: TabularMdp, pi: TabularPolicy, pi_b: TabularPolicy,
                        n_transitions: int, n_init: int,
                        rng: np.random.Generator) -> TabularMiwProblem:
    """Draw (s,a) ~ d_{pi_b}, s' ~ P(.|s,a), s0 ~ mu0 and one-hot embed them."""
    S, A = mdp.n_states, mdp.n_actions
    d_b = stationary_distribution(mdp, pi_b)
    flat = rng.choice(S * A, size=n_transitions, p=d_b.reshape(-1) / d_b.sum())
    s_idx, a_idx = np.divmod(flat, A)
    s_next_idx = sample_categorical_rows(mdp.transition[s_idx, a_idx], rng)
    s0_idx = rng.choice(S, size=n_init, p=mdp.mu0)
    dataset = OfflineDataset(
        states=one_hot(s_idx, S),
        actions=one_hot(a_idx, A),
        rewards=mdp.reward[s_idx, a_idx],
        next_states=one_hot(s_next_idx, S),
        dones=np.zeros(n_transitions, dtype=bool),
        initial_states=one_hot(s0_idx, S),
        meta={"kind": "tabular-embedding"},
    )
    return TabularMiwProblem(dataset=dataset, mdp=mdp, pi=pi, pi_b=pi_b)
