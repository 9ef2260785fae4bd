"""Implicit policy, twin critics with conservative targets, and the GAN head.

The policy is a deterministic network over [s; z] with z ~ N(0, sigma^2 I)
(tanh-scaled output), or optionally a tanh-squashed Gaussian head.  Critics
train on the c-mixed min/max target with a huge-value bootstrap mask and a
Huber loss; a discriminator over (s, a) pairs separates dataset pairs from
model/policy "fake" pairs, and the actor maximizes lambda * min-Q plus the
non-saturating generator objective, with gradients flowing through its own
actions and (optionally) through the model's reparameterized next state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import nets
from .ensemble import DynamicsEnsemble

C_MIX = 0.75
LAMBDA_PRIME = 10.0
BOOTSTRAP_CLIP = 2000.0   # bootstrap term dropped when |q_tilde| reaches this
HUBER_DELTA = 500.0
CRITIC_LR = 3e-4
CRITIC_GRAD_CLIP = 0.1
GAN_LR = 2e-4             # actor and discriminator
GAN_BETA1 = 0.4
TARGET_BETA = 0.005
DISC_CLAMP = 1e-6
LABEL_LOW, LABEL_HIGH = 0.8, 1.0


def default_noise_dim(state_dim: int) -> int:
    return min(10, state_dim // 2)


class AgentState:
    def __init__(self, state_dim: int, action_dim: int, max_action: float,
                 hidden: tuple, rng: np.random.Generator, *,
                 noise_dim: Optional[int] = None, sigma_noise: float = 1.0,
                 c_mix: float = C_MIX, lambda_prime: float = LAMBDA_PRIME,
                 k_policy_freq: int = 2, policy_kind: str = "implicit",
                 actor_lr: float = GAN_LR, critic_lr: float = CRITIC_LR,
                 disc_lr: float = GAN_LR, dtype=np.float64):
        assert policy_kind in ("implicit", "gaussian")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.max_action = float(max_action)
        self.noise_dim = default_noise_dim(state_dim) if noise_dim is None else noise_dim
        self.sigma_noise = sigma_noise
        self.c_mix = c_mix
        self.lambda_prime = lambda_prime
        self.k_policy_freq = k_policy_freq
        self.policy_kind = policy_kind
        self.dtype = dtype

        hidden = tuple(hidden)
        if policy_kind == "implicit":
            self.policy_spec = nets.MlpSpec(state_dim + self.noise_dim, hidden, action_dim,
                                            output="tanh_scaled", out_arg=self.max_action)
        else:
            # Gaussian head: means then raw log-stds, squashed after sampling
            self.policy_spec = nets.MlpSpec(state_dim, hidden, 2 * action_dim)
        self.critic_spec = nets.MlpSpec(state_dim + action_dim, hidden, 1)
        self.disc_spec = nets.MlpSpec(state_dim + action_dim, hidden, 1, output="sigmoid")

        self.policy_params = nets.init_mlp(self.policy_spec, rng, dtype=dtype)
        self.policy_target_params = self.policy_params.copy()
        self.critic1_params = nets.init_mlp(self.critic_spec, rng, dtype=dtype)
        self.critic2_params = nets.init_mlp(self.critic_spec, rng, dtype=dtype)
        self.critic1_target_params = self.critic1_params.copy()
        self.critic2_target_params = self.critic2_params.copy()
        self.discriminator_params = nets.init_mlp(self.disc_spec, rng, dtype=dtype)

        self.policy_opt = nets.Adam(self.policy_params, lr=actor_lr, beta1=GAN_BETA1)
        self.critic1_opt = nets.Adam(self.critic1_params, lr=critic_lr)
        self.critic2_opt = nets.Adam(self.critic2_params, lr=critic_lr)
        self.disc_opt = nets.Adam(self.discriminator_params, lr=disc_lr, beta1=GAN_BETA1)

        self.q_avg = 1.0
        self.iteration = 0


# --- policy forward/backward ------------------------------------------------

def _draw_policy_noise(agent: AgentState, n: int, rng: np.random.Generator) -> np.ndarray:
    dt = np.dtype(agent.dtype)
    if agent.policy_kind == "implicit":
        z = rng.standard_normal((n, agent.noise_dim), dtype=dt)
        if agent.sigma_noise != 1.0:
            z *= dt.type(agent.sigma_noise)
        return z
    return rng.standard_normal((n, agent.action_dim), dtype=dt)


def _policy_forward(agent: AgentState, s: np.ndarray, z: np.ndarray,
                    params: nets.Params, with_cache: bool = False):
    """action (and a backprop cache) given pre-drawn noise z."""
    if agent.policy_kind == "implicit":
        x = np.concatenate([s, z], axis=1)
        if not with_cache:
            return nets.mlp_forward(agent.policy_spec, params, x), None
        a, net_cache = nets.mlp_forward_cached(agent.policy_spec, params, x)
        return a, ("implicit", net_cache, params)
    # gaussian: u = [mean, raw log_std]; a = max * tanh(mean + std * z)
    if not with_cache:
        u = nets.mlp_forward(agent.policy_spec, params, s)
    else:
        u, net_cache = nets.mlp_forward_cached(agent.policy_spec, params, s)
    mean = u[:, : agent.action_dim]
    raw = u[:, agent.action_dim :]
    log_std = np.clip(raw, nets.LOG_STD_MIN, nets.LOG_STD_MAX)
    std = np.exp(log_std)
    pre = mean + std * z
    t = np.tanh(pre)
    a = agent.max_action * t
    if not with_cache:
        return a, None
    mask = (raw > nets.LOG_STD_MIN) & (raw < nets.LOG_STD_MAX)
    return a, ("gaussian", net_cache, params, z, std, mask, t)


def _policy_backward(agent: AgentState, cache, d_action: np.ndarray,
                     need_state_grad: bool = False):
    """(param grad, d state) through a cached policy forward."""
    kind = cache[0]
    if kind == "implicit":
        _, net_cache, params = cache
        grad, dx = nets.mlp_backward(agent.policy_spec, params, net_cache, d_action,
                                     need_input_grad=need_state_grad)
        ds = dx[:, : agent.state_dim] if need_state_grad else None
        return grad, ds
    _, net_cache, params, z, std, mask, t = cache
    d_pre = d_action * agent.max_action * (1.0 - t * t)
    dy = np.concatenate([d_pre, d_pre * z * std * mask], axis=1)
    grad, dx = nets.mlp_backward(agent.policy_spec, params, net_cache, dy,
                                 need_input_grad=need_state_grad)
    return grad, (dx if need_state_grad else None)


def policy_sample(agent: AgentState, s: np.ndarray, rng: np.random.Generator,
                  params: Optional[nets.Params] = None) -> np.ndarray:
    """a = pi(s, z), z ~ N(0, sigma_noise^2 I); always within max_action bounds."""
    p = agent.policy_params if params is None else params
    z = _draw_policy_noise(agent, len(s), rng)
    a, _ = _policy_forward(agent, s.astype(agent.dtype, copy=False), z, p)
    return a


def make_policy(agent: AgentState):
    """Read-only (obs, rng) -> action closure for environment evaluation."""

    def policy(obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return policy_sample(agent, obs, rng)

    return policy


def _critic(agent: AgentState, params: nets.Params, s: np.ndarray, a: np.ndarray,
            with_cache: bool = False):
    x = np.concatenate([s, a], axis=1)
    if with_cache:
        q, cache = nets.mlp_forward_cached(agent.critic_spec, params, x)
        return q[:, 0], cache
    return nets.mlp_forward(agent.critic_spec, params, x)[:, 0]


# --- critic training ----------------------------------------------------------

def conservative_target(agent: AgentState, batch, gamma: float,
                        rng: np.random.Generator) -> np.ndarray:
    """r + gamma * q_tilde masked at |q_tilde| >= BOOTSTRAP_CLIP; r at terminals.

    q_tilde = c * min_j Q'_j(s', a') + (1-c) * max_j Q'_j(s', a'), with a' from
    the target policy.
    """
    s, a, r, s_next, done = batch
    a_next = policy_sample(agent, s_next, rng, params=agent.policy_target_params)
    q1 = _critic(agent, agent.critic1_target_params, s_next, a_next)
    q2 = _critic(agent, agent.critic2_target_params, s_next, a_next)
    q_tilde = agent.c_mix * np.minimum(q1, q2) + (1.0 - agent.c_mix) * np.maximum(q1, q2)
    keep = (np.abs(q_tilde) < BOOTSTRAP_CLIP) & ~done
    return r + gamma * q_tilde * keep


def critic_loss_grad(agent: AgentState, params: nets.Params, s: np.ndarray,
                     a: np.ndarray, target: np.ndarray):
    """Mean Huber(Q(s,a) - target) and its gradient for one critic."""
    q, cache = _critic(agent, params, s, a, with_cache=True)
    residual = q - target
    loss = float(np.mean(nets.huber(residual, HUBER_DELTA)))
    dq = (nets.huber_grad(residual, HUBER_DELTA) / len(q)).astype(q.dtype)
    grad, _ = nets.mlp_backward(agent.critic_spec, params, cache, dq[:, None])
    return loss, grad


def critic_update(agent: AgentState, batch, gamma: float, rng: np.random.Generator):
    """One Adam step per critic on mean Huber(Q - target); returns both losses."""
    s, a = batch[0], batch[1]
    target = conservative_target(agent, batch, gamma, rng)
    losses = []
    for params, opt in ((agent.critic1_params, agent.critic1_opt),
                        (agent.critic2_params, agent.critic2_opt)):
        loss, grad = critic_loss_grad(agent, params, s, a, target)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite critic loss {loss}")
        nets.clip_grad_norm(grad.flat, CRITIC_GRAD_CLIP)
        opt.step(params, grad.flat)
        losses.append(loss)
    return tuple(losses)


# --- fake batches and the discriminator --------------------------------------

@dataclass
class FakeBatch:
    states: np.ndarray
    actions: np.ndarray
    weights: np.ndarray  # per-row generator weights (1 everywhere outside wpr)
    n_source: int


def build_fake_batch(agent: AgentState, states: np.ndarray, model: DynamicsEnsemble,
                     rng: np.random.Generator, row_weights=None,
                     termination_fn=None) -> FakeBatch:
    """(s, pi(s)) rows plus (s', pi(s')) rows for non-terminal model steps."""
    a = policy_sample(agent, states, rng)
    s_next, _, done, _ = model.predict(states, a, rng, termination_fn=termination_fn)
    keep = ~done
    if row_weights is None:
        row_weights = np.ones(len(states), dtype=agent.dtype)
    rows_s, rows_a, rows_w = [states, ], [a, ], [row_weights, ]
    if keep.any():
        s2 = s_next[keep]
        a2 = policy_sample(agent, s2, rng)
        rows_s.append(s2)
        rows_a.append(a2)
        rows_w.append(row_weights[keep])
    return FakeBatch(
        states=np.concatenate(rows_s, axis=0).astype(agent.dtype),
        actions=np.concatenate(rows_a, axis=0).astype(agent.dtype),
        weights=np.concatenate(rows_w, axis=0),
        n_source=len(states),
    )


def _disc_log_grads(d: np.ndarray):
    """clamped D, log D, log(1-D), and the clamp mask."""
    mask = (d > DISC_CLAMP) & (d < 1.0 - DISC_CLAMP)
    dc = np.clip(d, DISC_CLAMP, 1.0 - DISC_CLAMP)
    return dc, mask


def discriminator_loss_grad(agent: AgentState, true_s: np.ndarray, true_a: np.ndarray,
                            fake: FakeBatch, labels: np.ndarray):
    """Smoothed BCE (true labels as given, fake labels 0) and its gradient."""
    n_true, n_fake = len(true_s), len(fake.states)
    x = np.concatenate([
        np.concatenate([true_s, true_a], axis=1),
        np.concatenate([fake.states, fake.actions], axis=1),
    ], axis=0).astype(agent.dtype)
    d_col, cache = nets.mlp_forward_cached(agent.disc_spec, agent.discriminator_params, x)
    d = d_col[:, 0]
    dc, mask = _disc_log_grads(d)
    dt, df = dc[:n_true], dc[n_true:]
    loss = -(np.mean(labels * np.log(dt) + (1.0 - labels) * np.log(1.0 - dt))
             + np.mean(np.log(1.0 - df)))
    dd = np.empty_like(d)
    dd[:n_true] = -(labels / dt - (1.0 - labels) / (1.0 - dt)) / n_true
    dd[n_true:] = (1.0 / (1.0 - df)) / n_fake
    dd *= mask
    grad, _ = nets.mlp_backward(agent.disc_spec, agent.discriminator_params, cache,
                                dd[:, None].astype(d_col.dtype))
    return float(loss), grad


def discriminator_update(agent: AgentState, true_s: np.ndarray, true_a: np.ndarray,
                         fake: FakeBatch, rng: np.random.Generator) -> float:
    """One Adam step on the smoothed BCE: true labels ~ U[0.8, 1), fake labels 0."""
    labels = rng.uniform(LABEL_LOW, LABEL_HIGH, size=len(true_s))
    loss, grad = discriminator_loss_grad(agent, true_s, true_a, fake, labels)
    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite discriminator loss {loss}")
    agent.disc_opt.step(agent.discriminator_params, grad.flat)
    return float(loss)


# --- actor --------------------------------------------------------------------

def actor_loss_grad(agent: AgentState, states: np.ndarray, model: Optional[DynamicsEnsemble],
                    rng: np.random.Generator, *, fake_weights=None,
                    saturating: bool = False, stop_model_grad: bool = False,
                    include_q_term: bool = True, termination_fn=None):
    """-lambda * mean[min_j Q_j(s, pi(s,z))] + L_g and its policy gradient.

    The fake batch is rebuilt here from the current policy so gradients flow
    through both the policy actions and (unless stop_model_grad) the model's
    reparameterized next-state sample.  fake_weights (wpr mode) multiply each
    fake row's generator term; they are frozen inputs.  L_g is the
    non-saturating -mean[w log D] by default, +mean[w log(1-D)] when
    saturating.  include_q_term=False gives the warm-start generator-only loss.
    """
    states = states.astype(agent.dtype, copy=False)
    n = len(states)
    z1 = _draw_policy_noise(agent, n, rng)
    a, cache_p1 = _policy_forward(agent, states, z1, agent.policy_params, with_cache=True)
    d_a1 = np.zeros_like(a)
    loss = 0.0

    if include_q_term:
        if agent.q_avg <= 0.0:
            raise RuntimeError(f"q_avg must be positive, got {agent.q_avg}")
        lam = agent.lambda_prime / agent.q_avg
        q1, cq1 = _critic(agent, agent.critic1_params, states, a, with_cache=True)
        q2, cq2 = _critic(agent, agent.critic2_params, states, a, with_cache=True)
        take1 = q1 <= q2
        loss += -lam * float(np.mean(np.minimum(q1, q2)))
        coeff = a.dtype.type(-lam / n)
        for params_q, cache_q, sel in ((agent.critic1_params, cq1, take1),
                                       (agent.critic2_params, cq2, ~take1)):
            dyq = sel[:, None].astype(a.dtype) * coeff
            _, dxq = nets.mlp_backward(agent.critic_spec, params_q, cache_q, dyq,
                                       need_input_grad=True, need_param_grad=False)
            d_a1 += dxq[:, agent.state_dim:]

    # differentiable fake batch from the current policy
    if model is not None:
        s2_full, _, done, _, model_back = model.sample_step_cached(
            states, a, rng, termination_fn=termination_fn)
        keep = ~done
    else:
        keep = np.zeros(n, dtype=bool)
    if fake_weights is None:
        fake_weights = np.ones(n, dtype=agent.dtype)
    have_row2 = bool(keep.any())
    if have_row2:
        s2 = s2_full[keep].astype(agent.dtype)
        z2 = _draw_policy_noise(agent, len(s2), rng)
        a2, cache_p2 = _policy_forward(agent, s2, z2, agent.policy_params, with_cache=True)
        rows_s = np.concatenate([states, s2], axis=0)
        rows_a = np.concatenate([a, a2], axis=0)
        w = np.concatenate([fake_weights, fake_weights[keep]])
    else:
        rows_s, rows_a, w = states, a, fake_weights

    x = np.concatenate([rows_s, rows_a], axis=1)
    d_col, cache_d = nets.mlp_forward_cached(agent.disc_spec, agent.discriminator_params, x)
    d = d_col[:, 0]
    dc, mask = _disc_log_grads(d)
    n_rows = len(d)
    if saturating:
        loss_g = float(np.mean(w * np.log(1.0 - dc)))
        dd = (-w / (1.0 - dc)) / n_rows
    else:
        loss_g = -float(np.mean(w * np.log(dc)))
        dd = (-w / dc) / n_rows
    loss += loss_g
    dd *= mask
    _, dx = nets.mlp_backward(agent.disc_spec, agent.discriminator_params, cache_d,
                              dd[:, None].astype(d_col.dtype), need_input_grad=True,
                              need_param_grad=False)
    d_rows_s, d_rows_a = dx[:, : agent.state_dim], dx[:, agent.state_dim:]

    d_a1 += d_rows_a[:n]
    grad_flat = None
    if have_row2:
        d_a2 = d_rows_a[n:]
        grad2, d_s2 = _policy_backward(agent, cache_p2, d_a2, need_state_grad=True)
        grad_flat = grad2.flat.copy()
        if not stop_model_grad:
            d_s2_total = d_rows_s[n:] + d_s2  # direct disc path + via a2 = pi(s2)
            scatter = np.zeros((n, agent.state_dim), dtype=d_s2_total.dtype)
            scatter[keep] = d_s2_total
            d_a1 += model_back(scatter)

    grad1, _ = _policy_backward(agent, cache_p1, d_a1)
    if grad_flat is None:
        grad_flat = grad1.flat
    else:
        grad_flat += grad1.flat
    return float(loss), grad_flat


def actor_update(agent: AgentState, states: np.ndarray, model: Optional[DynamicsEnsemble],
                 rng: np.random.Generator, **kwargs) -> float:
    """One Adam step on the actor loss (see actor_loss_grad for the terms)."""
    loss, grad_flat = actor_loss_grad(agent, states, model, rng, **kwargs)
    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite actor loss {loss}")
    agent.policy_opt.step(agent.policy_params, grad_flat)
    return loss


def min_q_value_fn(agent: AgentState, rng: np.random.Generator):
    """V(s) = min_j Q_j(s, pi(s, z)) with its input gradient, as a frozen
    callable for value-matched model training.  Each call draws fresh policy
    noise from `rng`; the returned gradient includes the path through the
    policy action."""

    def value_fn(states: np.ndarray):
        states = states.astype(agent.dtype, copy=False)
        z = _draw_policy_noise(agent, len(states), rng)
        a, cache_p = _policy_forward(agent, states, z, agent.policy_params, with_cache=True)
        q1, c1 = _critic(agent, agent.critic1_params, states, a, with_cache=True)
        q2, c2 = _critic(agent, agent.critic2_params, states, a, with_cache=True)
        take1 = q1 <= q2
        v = np.where(take1, q1, q2)
        ds = np.zeros_like(states)
        da = np.zeros_like(a)
        for params_q, cache_q, sel in ((agent.critic1_params, c1, take1),
                                       (agent.critic2_params, c2, ~take1)):
            dy = sel.astype(a.dtype)[:, None]
            _, dx = nets.mlp_backward(agent.critic_spec, params_q, cache_q, dy,
                                      need_input_grad=True, need_param_grad=False)
            ds += dx[:, : agent.state_dim]
            da += dx[:, agent.state_dim :]
        _, ds_via_a = _policy_backward(agent, cache_p, da, need_state_grad=True)
        ds += ds_via_a
        return v, ds

    return value_fn


# --- bookkeeping ----------------------------------------------------------------

def post_step_updates(agent: AgentState, states: np.ndarray, rng: np.random.Generator,
                      beta: float = TARGET_BETA) -> None:
    """Soft-update targets and track q_avg <- beta |min Q| + (1-beta) q_avg."""
    nets.soft_update(agent.policy_target_params, agent.policy_params, beta)
    nets.soft_update(agent.critic1_target_params, agent.critic1_params, beta)
    nets.soft_update(agent.critic2_target_params, agent.critic2_params, beta)
    a = policy_sample(agent, states, rng)
    q1 = _critic(agent, agent.critic1_params, states, a)
    q2 = _critic(agent, agent.critic2_params, states, a)
    level = float(np.mean(np.abs(np.minimum(q1, q2))))
    agent.q_avg = beta * level + (1.0 - beta) * agent.q_avg
    agent.iteration += 1


def warm_start(agent: AgentState, dataset, model: DynamicsEnsemble, n_iters: int,
               batch_size: int, rng: np.random.Generator, termination_fn=None,
               saturating: bool = False):
    """Generator-only pre-phase: discriminator + actor (L_g only); critics untouched.

    Returns (mean disc loss, mean actor loss) over the phase.
    """
    d_losses, a_losses = [], []
    for _ in range(n_iters):
        idx = rng.integers(0, dataset.size, size=batch_size)
        s = dataset.states[idx]
        fake = build_fake_batch(agent, s, model, rng, termination_fn=termination_fn)
        d_losses.append(discriminator_update(agent, s, dataset.actions[idx], fake, rng))
        a_losses.append(actor_update(agent, s, model, rng, include_q_term=False,
                                     termination_fn=termination_fn, saturating=saturating))
    return (float(np.mean(d_losses)) if d_losses else 0.0,
            float(np.mean(a_losses)) if a_losses else 0.0)


# --- checkpointing ----------------------------------------------------------------

_PARAM_KEYS = ("policy_params", "policy_target_params", "critic1_params",
               "critic2_params", "critic1_target_params", "critic2_target_params",
               "discriminator_params")


def save_agent(directory: str | Path, agent: AgentState) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for key in _PARAM_KEYS:
        nets.save_params(directory / key, getattr(agent, key))
    manifest = {
        "state_dim": agent.state_dim,
        "action_dim": agent.action_dim,
        "max_action": agent.max_action,
        "hidden": list(agent.critic_spec.hidden),
        "noise_dim": agent.noise_dim,
        "sigma_noise": agent.sigma_noise,
        "c_mix": agent.c_mix,
        "lambda_prime": agent.lambda_prime,
        "k_policy_freq": agent.k_policy_freq,
        "policy_kind": agent.policy_kind,
        "q_avg": agent.q_avg,
        "iteration": agent.iteration,
        "dtype": str(np.dtype(agent.dtype)),
    }
    (directory / "agent.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_agent(directory: str | Path) -> AgentState:
    directory = Path(directory)
    m = json.loads((directory / "agent.json").read_text())
    agent = AgentState(
        m["state_dim"], m["action_dim"], m["max_action"], tuple(m["hidden"]),
        np.random.default_rng(0), noise_dim=m["noise_dim"],
        sigma_noise=m["sigma_noise"], c_mix=m["c_mix"],
        lambda_prime=m["lambda_prime"], k_policy_freq=m["k_policy_freq"],
        policy_kind=m["policy_kind"], dtype=np.dtype(m["dtype"]),
    )
    for key in _PARAM_KEYS:
        setattr(agent, key, nets.load_params(directory / key))
    agent.q_avg = m["q_avg"]
    agent.iteration = m["iteration"]
    return agent
