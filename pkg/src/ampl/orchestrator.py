"""Full offline training loop: model fit, adversarial warm start, then
interleaved critic / discriminator / actor updates with periodic
importance-weighted model retraining and synthetic rollout generation.

Everything here is deterministic given (config, dataset, seed): all
randomness flows through purpose-scoped generator streams, so two runs with
the same inputs produce byte-identical metrics.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import agent as agent_mod
from . import dataset as dataset_mod
from . import ensemble as ensemble_mod
from . import miw as miw_mod
from . import nets
from .util import spawn_streams

log = logging.getLogger(__name__)

VARIANTS = ("main", "nw", "wpr", "rew_test", "value_disc", "gaussian")

METRIC_COLUMNS = (
    "epoch",
    "seed",
    "mean_return",
    "std_return",
    "critic_loss",
    "disc_loss",
    "actor_loss",
    "model_holdout_nll",
    "miw_mean_raw",
    "miw_std_raw",
    "n_penalized_rollouts",
)


# --- configuration ---------------------------------------------------------------


@dataclass
class RunConfig:
    """One training run.  Defaults are the full-scale settings; ``desk()``
    gives the small CPU profile used by the fast end-to-end checks (smaller
    counts and widths only — the schedule semantics never change)."""

    seed: int = 0
    variant: str = "main"
    gamma: float = 0.99
    batch_size: int = 512

    n_epochs: int = 1000
    iters_per_epoch: int = 1000
    warm_epochs: int = 40

    # agent
    agent_hidden: Tuple[int, ...] = (400, 300)
    actor_lr: float = agent_mod.GAN_LR
    critic_lr: float = agent_mod.CRITIC_LR
    disc_lr: float = agent_mod.GAN_LR
    target_beta: float = agent_mod.TARGET_BETA
    c_mix: float = agent_mod.C_MIX
    lambda_prime: float = agent_mod.LAMBDA_PRIME
    sigma_noise: float = 1.0
    k_policy_freq: int = 2
    saturating_generator: bool = False
    stop_model_grad: bool = False

    # dynamics model
    model_hidden: Tuple[int, ...] = (400, 300)
    model_members: int = 7
    model_elites: int = 5
    model_lr: float = 1e-3
    model_init_epochs: int = 5
    model_retrain_epochs: int = 1
    model_steps_per_epoch: int = 1000
    model_batch_size: int = 256
    model_retrain_period: int = 100  # epochs between weight-fit + retrain events

    # marginal importance weights
    miw_hidden: Tuple[int, ...] = (400, 300)
    miw_lr: float = 1e-6
    miw_steps: int = 100_000
    miw_batch_size: int = 1024
    miw_init_batch_size: int = 2048
    miw_alpha: float = 0.5
    miw_g_constraint: float = 10.0

    # synthetic data
    rollout_frequency: int = 250
    rollout_batch: int = 128
    rollout_horizon: int = 1
    retain_epochs: int = 5
    real_ratio: float = 0.5

    eval_episodes: int = 10
    dtype: str = "float64"

    def __post_init__(self):
        self.agent_hidden = tuple(self.agent_hidden)
        self.model_hidden = tuple(self.model_hidden)
        self.miw_hidden = tuple(self.miw_hidden)
        problems = self.field_problems()
        if problems:
            raise ValueError("invalid config:\n  " + "\n  ".join(problems))

    _POSITIVE_INT_FIELDS = (
        "batch_size", "n_epochs", "iters_per_epoch", "k_policy_freq",
        "model_members", "model_elites", "model_init_epochs", "model_retrain_epochs",
        "model_steps_per_epoch", "model_batch_size", "model_retrain_period",
        "miw_steps", "miw_batch_size", "miw_init_batch_size",
        "rollout_frequency", "rollout_batch", "rollout_horizon",
        "retain_epochs", "eval_episodes",
    )
    _NONNEGATIVE_INT_FIELDS = ("seed", "warm_epochs")
    _POSITIVE_FLOAT_FIELDS = (
        "actor_lr", "critic_lr", "disc_lr", "model_lr", "miw_lr",
        "target_beta", "lambda_prime", "sigma_noise", "miw_g_constraint",
    )
    _BOOL_FIELDS = ("saturating_generator", "stop_model_grad")

    def field_problems(self) -> List[str]:
        """Every violated field constraint, one message per field."""
        p = []
        if self.variant not in VARIANTS:
            p.append(f"variant: {self.variant!r} is not one of {VARIANTS}")
        for name in self._POSITIVE_INT_FIELDS:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                p.append(f"{name}: expected a positive integer, got {v!r}")
        for name in self._NONNEGATIVE_INT_FIELDS:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                p.append(f"{name}: expected a nonnegative integer, got {v!r}")
        for name in self._POSITIVE_FLOAT_FIELDS:
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                p.append(f"{name}: expected a positive number, got {v!r}")
        for name in self._BOOL_FIELDS:
            if not isinstance(getattr(self, name), bool):
                p.append(f"{name}: expected true/false, got {getattr(self, name)!r}")
        for name in ("agent_hidden", "model_hidden", "miw_hidden"):
            v = getattr(self, name)
            if not v or any(not isinstance(h, int) or isinstance(h, bool) or h < 1 for h in v):
                p.append(f"{name}: expected a nonempty list of positive integers, got {v!r}")
        if not (isinstance(self.gamma, float) and 0.0 <= self.gamma < 1.0):
            p.append(f"gamma: expected a float in [0, 1), got {self.gamma!r}")
        if not (isinstance(self.c_mix, (int, float)) and 0.0 <= self.c_mix <= 1.0):
            p.append(f"c_mix: expected a number in [0, 1], got {self.c_mix!r}")
        if not (isinstance(self.real_ratio, (int, float)) and 0.0 <= self.real_ratio <= 1.0):
            p.append(f"real_ratio: expected a number in [0, 1], got {self.real_ratio!r}")
        if not (isinstance(self.miw_alpha, (int, float)) and 0.0 < self.miw_alpha <= 1.0):
            p.append(f"miw_alpha: expected a number in (0, 1], got {self.miw_alpha!r}")
        if self.dtype not in ("float32", "float64"):
            p.append(f"dtype: expected 'float32' or 'float64', got {self.dtype!r}")
        if (isinstance(self.model_elites, int) and isinstance(self.model_members, int)
                and self.model_elites > self.model_members):
            p.append(f"model_elites: {self.model_elites} exceeds model_members {self.model_members}")
        return p

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        """Small-scale profile: same loop structure, shrunken counts/widths."""
        base = dict(
            n_epochs=30,
            warm_epochs=5,
            batch_size=192,
            agent_hidden=(64, 64),
            model_hidden=(64, 64),
            miw_hidden=(64, 64),
            model_members=3,
            model_elites=2,
            model_steps_per_epoch=200,
            model_retrain_period=15,
            miw_steps=5000,
            miw_batch_size=256,
            miw_init_batch_size=512,
            miw_lr=1e-4,
            dtype="float32",
        )
        base.update(overrides)
        return cls(**base)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def model_buffer_capacity(self) -> int:
        per_epoch = self.iters_per_epoch // self.rollout_frequency
        return self.retain_epochs * max(per_epoch, 1) * self.rollout_batch * self.rollout_horizon

    def to_json(self, path: str):
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        problems = [f"{name}: unknown field" for name in sorted(set(raw) - known)]
        if not problems:
            return cls(**raw)
        # report unknown-field and per-field value problems together
        try:
            cls(**{k: v for k, v in raw.items() if k in known})
        except ValueError as exc:
            msg = str(exc)
            problems += msg.split("\n  ")[1:] if "\n" in msg else []
        raise ValueError("invalid config:\n  " + "\n  ".join(problems))


def schedule_expectations(config: RunConfig) -> Dict[str, int]:
    """Closed-form update counts implied by a config's main loop (warm start
    is tallied separately in the run audit)."""
    total = config.n_epochs * config.iters_per_epoch
    k = config.k_policy_freq
    retrains = 0 if config.variant == "nw" else (config.n_epochs - 1) // config.model_retrain_period
    return {
        "critic_steps": total,
        "disc_steps": total,
        "actor_steps": total // k,
        "rollout_generations": -(-total // config.rollout_frequency),
        "model_retrains": retrains,
        "miw_trainings": retrains,
    }


# --- synthetic-transition buffer ---------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions; oldest entries are
    overwritten first once full."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, dtype=np.float64):
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim), dtype=dtype)
        self.actions = np.zeros((capacity, action_dim), dtype=dtype)
        self.rewards = np.zeros(capacity, dtype=dtype)
        self.next_states = np.zeros((capacity, state_dim), dtype=dtype)
        self.dones = np.zeros(capacity, dtype=bool)
        self._cursor = 0
        self.size = 0

    def add(self, states, actions, rewards, next_states, dones):
        n = len(states)
        if n == 0:
            return
        if n > self.capacity:
            raise ValueError(f"batch of {n} exceeds buffer capacity {self.capacity}")
        idx = (self._cursor + np.arange(n)) % self.capacity
        self.states[idx] = states
        self.actions[idx] = actions
        self.rewards[idx] = rewards
        self.next_states[idx] = next_states
        self.dones[idx] = dones
        self._cursor = int((self._cursor + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def rows(self, idx: np.ndarray):
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.dones[idx])


def mixed_sample(data: dataset_mod.OfflineDataset, buffer: ReplayBuffer,
                 real_ratio: float, batch_size: int, rng: np.random.Generator,
                 dtype=np.float64):
    """Draw a training batch where each row independently comes from the
    offline data with probability ``real_ratio`` and from the synthetic
    buffer otherwise.  An empty buffer falls back to offline rows for every
    draw (logged, since it means rollouts are lagging the schedule)."""
    take_env = rng.random(batch_size) < real_ratio
    env_idx = rng.integers(0, data.size, size=batch_size)
    if buffer.size == 0:
        if not take_env.all():
            log.warning("synthetic buffer empty; sampling all %d rows from offline data",
                        batch_size)
        take_env = np.ones(batch_size, dtype=bool)
        model_rows = None
    else:
        model_idx = rng.integers(0, buffer.size, size=batch_size)
        model_rows = buffer.rows(model_idx)

    s = data.states[env_idx].astype(dtype, copy=False)
    a = data.actions[env_idx].astype(dtype, copy=False)
    r = data.rewards[env_idx].astype(dtype, copy=False)
    sn = data.next_states[env_idx].astype(dtype, copy=False)
    d = data.dones[env_idx]
    if model_rows is not None:
        m = ~take_env
        s[m] = model_rows[0][m].astype(dtype)
        a[m] = model_rows[1][m].astype(dtype)
        r[m] = model_rows[2][m].astype(dtype)
        sn[m] = model_rows[3][m].astype(dtype)
        d[m] = model_rows[4][m]
    return s, a, r, sn, d


def generate_rollouts(agent: agent_mod.AgentState, model: ensemble_mod.DynamicsEnsemble,
                      data: dataset_mod.OfflineDataset, horizon: int, n_starts: int,
                      rng: np.random.Generator,
                      termination_fn: Optional[Callable] = None):
    """Roll the current policy through the learned model for up to ``horizon``
    steps from start states drawn uniformly from the offline data.  Rows stop
    contributing once flagged done.  Returns stacked transitions plus the
    number of penalty-triggered steps."""
    start_idx = rng.integers(0, data.size, size=n_starts)
    s = data.states[start_idx].astype(agent.dtype, copy=False)
    out_s, out_a, out_r, out_sn, out_d = [], [], [], [], []
    n_penalized = 0
    for _ in range(horizon):
        if len(s) == 0:
            break
        a = agent_mod.policy_sample(agent, s, rng)
        sn, r, done, penalized = model.predict(s, a, rng, termination_fn=termination_fn)
        n_penalized += int(penalized.sum())
        out_s.append(s)
        out_a.append(a)
        out_r.append(r)
        out_sn.append(sn)
        out_d.append(done)
        alive = ~done
        s = sn[alive]
    if not out_s:
        empty = np.zeros((0,))
        return empty, empty, empty, empty, empty, 0
    return (np.concatenate(out_s), np.concatenate(out_a), np.concatenate(out_r),
            np.concatenate(out_sn), np.concatenate(out_d), n_penalized)


# --- the run ----------------------------------------------------------------------


@dataclass
class RunResult:
    config: RunConfig
    agent: agent_mod.AgentState
    model: ensemble_mod.DynamicsEnsemble
    miw_estimator: Optional[miw_mod.MiwEstimator]
    metrics: List[Dict]
    audit: Dict[str, int]
    dataset_mean_return: float
    warm_losses: Tuple[float, float] = (float("nan"), float("nan"))


def _policy_sampler(agent: agent_mod.AgentState, rng: np.random.Generator):
    def sampler(states: np.ndarray) -> np.ndarray:
        return agent_mod.policy_sample(agent, states, rng)
    return sampler


def retrain_event(cfg: RunConfig, data: dataset_mod.OfflineDataset,
                  agent: agent_mod.AgentState, model: ensemble_mod.DynamicsEnsemble,
                  estimator: miw_mod.MiwEstimator,
                  miw_rng: np.random.Generator, model_rng: np.random.Generator) -> float:
    """Fit the importance weights against a snapshot of the live critic pair
    (or the model reward head for the rew_test variant), then retrain the
    model on the frozen normalized weights.  Returns the dataset mean of the
    raw weights (the normalizer reused for per-row actor weights)."""
    if cfg.variant == "rew_test":
        test_fn = miw_mod.reward_test_function(model.mean_reward_fn())
    else:
        test_fn = miw_mod.critic_test_function(
            agent.critic_spec, agent.critic1_params, agent.critic1_target_params)
    sampler = _policy_sampler(agent, miw_rng)
    miw_mod.train_miw(estimator, data, test_fn, sampler, cfg.miw_steps, cfg.gamma,
                      miw_rng, batch_size=cfg.miw_batch_size,
                      init_batch_size=cfg.miw_init_batch_size)
    raw = miw_mod.raw_weights(estimator, data)
    miw_norm_mean = float(raw.mean())
    weights = raw / miw_norm_mean
    if cfg.variant == "value_disc":
        value_fn = agent_mod.min_q_value_fn(agent, model_rng)
        model.train_value_discriminated(
            data, weights, value_fn, epochs=cfg.model_retrain_epochs,
            steps_per_epoch=cfg.model_steps_per_epoch,
            batch_size=cfg.model_batch_size, rng=model_rng)
    else:
        model.train_weighted_mle(
            data, weights, epochs=cfg.model_retrain_epochs,
            steps_per_epoch=cfg.model_steps_per_epoch,
            batch_size=cfg.model_batch_size, rng=model_rng)
    return miw_norm_mean


def training_iteration(cfg: RunConfig, data: dataset_mod.OfflineDataset,
                       buffer: ReplayBuffer, agent: agent_mod.AgentState,
                       model: ensemble_mod.DynamicsEnsemble,
                       agent_rng: np.random.Generator,
                       rollout_rng: np.random.Generator, global_iter: int,
                       fake_weights_fn: Optional[Callable] = None,
                       termination_fn: Optional[Callable] = None):
    """One main-loop iteration: (maybe) refresh rollouts, then critic,
    discriminator, and - once every k_policy_freq iterations - actor updates,
    followed by target/scale bookkeeping.

    Returns (critic_loss, disc_loss, actor_loss | None, n_penalized,
    rolled_out) with actor_loss None on off-cadence iterations.
    """
    dt = cfg.np_dtype
    n_penalized = 0
    rolled_out = False
    if global_iter % cfg.rollout_frequency == 0:
        rs, ra, rr, rsn, rd, n_penalized = generate_rollouts(
            agent, model, data, cfg.rollout_horizon, cfg.rollout_batch,
            rollout_rng, termination_fn=termination_fn)
        buffer.add(rs, ra, rr, rsn, rd)
        rolled_out = True

    s, a, r, sn, d = mixed_sample(data, buffer, cfg.real_ratio,
                                  cfg.batch_size, agent_rng, dtype=dt)
    l1, l2 = agent_mod.critic_update(agent, (s, a, r, sn, d), cfg.gamma, agent_rng)

    row_weights = fake_weights_fn(s, a) if fake_weights_fn is not None else None
    true_idx = agent_rng.integers(0, data.size, size=cfg.batch_size)
    true_s = data.states[true_idx].astype(dt, copy=False)
    true_a = data.actions[true_idx].astype(dt, copy=False)
    fake = agent_mod.build_fake_batch(agent, s, model, agent_rng,
                                      row_weights=row_weights,
                                      termination_fn=termination_fn)
    d_loss = agent_mod.discriminator_update(agent, true_s, true_a, fake, agent_rng)

    a_loss = None
    if global_iter % cfg.k_policy_freq == cfg.k_policy_freq - 1:
        a_loss = agent_mod.actor_update(
            agent, s, model, agent_rng, fake_weights=row_weights,
            saturating=cfg.saturating_generator,
            stop_model_grad=cfg.stop_model_grad,
            termination_fn=termination_fn)

    agent_mod.post_step_updates(agent, s, agent_rng, beta=cfg.target_beta)
    return 0.5 * (l1 + l2), d_loss, a_loss, n_penalized, rolled_out


def run_ampl(config: RunConfig, data: dataset_mod.OfflineDataset,
             evaluate: Optional[Callable] = None,
             termination_fn: Optional[Callable] = None,
             progress: Optional[Callable[[str], None]] = None) -> RunResult:
    """Execute one training run.

    evaluate: optional callable (policy, n_episodes, seed) -> (mean, std)
        invoked once per epoch with exploration noise active; when omitted the
        return columns are NaN (pure-offline mode, e.g. schedule audits).
    termination_fn: optional (s, a, s_next) -> done mask applied to model steps.
    """
    cfg = config
    dt = cfg.np_dtype
    streams = spawn_streams(cfg.seed)
    say = progress or (lambda _msg: None)

    if not data.rewards_normalized:
        data = dataset_mod.normalize_rewards(data)
    dataset_mean_return = data.mean_episode_return()
    data = dataset_mod.cast(data, dt)

    state_dim = data.states.shape[1]
    action_dim = data.actions.shape[1]
    max_action = float(np.max(np.abs(data.actions))) or 1.0

    # dynamics model: frozen holdout split, then plain max-likelihood init
    model = ensemble_mod.DynamicsEnsemble(
        state_dim, action_dim, cfg.model_members, cfg.model_elites,
        cfg.model_hidden, streams["model"], lr=cfg.model_lr, dtype=dt)
    model.fit(data, streams["model"])
    say("model: initial max-likelihood fit")
    model.train_mle(data, epochs=cfg.model_init_epochs,
                    steps_per_epoch=cfg.model_steps_per_epoch,
                    batch_size=cfg.model_batch_size, rng=streams["model"])

    policy_kind = "gaussian" if cfg.variant == "gaussian" else "implicit"
    agent = agent_mod.AgentState(
        state_dim, action_dim, max_action, cfg.agent_hidden, streams["agent"],
        sigma_noise=cfg.sigma_noise, c_mix=cfg.c_mix, lambda_prime=cfg.lambda_prime,
        k_policy_freq=cfg.k_policy_freq, policy_kind=policy_kind,
        actor_lr=cfg.actor_lr, critic_lr=cfg.critic_lr, disc_lr=cfg.disc_lr, dtype=dt)

    estimator = None
    if cfg.variant != "nw":
        estimator = miw_mod.MiwEstimator(
            state_dim, action_dim, cfg.miw_hidden, streams["miw"],
            alpha=cfg.miw_alpha, g_constraint=cfg.miw_g_constraint,
            lr=cfg.miw_lr, dtype=dt)

    buffer = ReplayBuffer(cfg.model_buffer_capacity(), state_dim, action_dim, dtype=dt)

    audit = {
        "critic_steps": 0,
        "disc_steps": 0,
        "actor_steps": 0,
        "rollout_generations": 0,
        "model_retrains": 0,
        "miw_trainings": 0,
        "warm_disc_steps": 0,
        "warm_actor_steps": 0,
        "fallback_batches": 0,
    }

    # adversarial warm start: discriminator + generator term only, critics frozen
    warm_iters = cfg.warm_epochs * cfg.iters_per_epoch
    say(f"warm start: {warm_iters} iterations")
    warm_losses = agent_mod.warm_start(
        agent, data, model, warm_iters, cfg.batch_size, streams["agent"],
        termination_fn=termination_fn, saturating=cfg.saturating_generator)
    audit["warm_disc_steps"] = warm_iters
    audit["warm_actor_steps"] = warm_iters

    miw_norm_mean = 1.0  # dataset-mean of raw weights, refreshed at each weight fit
    metrics: List[Dict] = []
    g = cfg.gamma

    def fake_row_weights(s, a):
        # frozen per-row generator weights: current estimate, dataset-mean normalized
        w = estimator.forward(s, a) / miw_norm_mean
        return w.astype(dt)

    for epoch in range(cfg.n_epochs):
        if (cfg.variant != "nw" and epoch > 0
                and epoch % cfg.model_retrain_period == 0):
            say(f"epoch {epoch}: weight fit ({cfg.miw_steps} steps) + model retrain")
            miw_norm_mean = retrain_event(cfg, data, agent, model, estimator,
                                          streams["miw"], streams["model"])
            audit["miw_trainings"] += 1
            audit["model_retrains"] += 1

        critic_losses, disc_losses, actor_losses = [], [], []
        n_penalized_epoch = 0
        for it in range(cfg.iters_per_epoch):
            global_iter = epoch * cfg.iters_per_epoch + it
            if buffer.size == 0 and global_iter % cfg.rollout_frequency != 0:
                audit["fallback_batches"] += 1
            c_loss, d_loss, a_loss, n_pen, rolled_out = training_iteration(
                cfg, data, buffer, agent, model, streams["agent"],
                streams["rollout"], global_iter,
                fake_weights_fn=fake_row_weights if cfg.variant == "wpr" else None,
                termination_fn=termination_fn)
            critic_losses.append(c_loss)
            disc_losses.append(d_loss)
            n_penalized_epoch += n_pen
            audit["critic_steps"] += 1
            audit["disc_steps"] += 1
            audit["rollout_generations"] += int(rolled_out)
            if a_loss is not None:
                actor_losses.append(a_loss)
                audit["actor_steps"] += 1

        if evaluate is not None:
            eval_seed = int(streams["eval"].integers(0, 2**31 - 1))
            mean_ret, std_ret = evaluate(agent_mod.make_policy(agent),
                                         cfg.eval_episodes, eval_seed)
        else:
            mean_ret, std_ret = float("nan"), float("nan")

        if estimator is not None:
            raw = miw_mod.raw_weights(estimator, data)
            miw_mean_raw, miw_std_raw = float(raw.mean()), float(raw.std())
        else:
            miw_mean_raw, miw_std_raw = float("nan"), float("nan")

        row = {
            "epoch": epoch,
            "seed": cfg.seed,
            "mean_return": mean_ret,
            "std_return": std_ret,
            "critic_loss": float(np.mean(critic_losses)),
            "disc_loss": float(np.mean(disc_losses)),
            "actor_loss": float(np.mean(actor_losses)) if actor_losses else float("nan"),
            "model_holdout_nll": float(np.mean(model.holdout_nll(data)[model.elites])),
            "miw_mean_raw": miw_mean_raw,
            "miw_std_raw": miw_std_raw,
            "n_penalized_rollouts": n_penalized_epoch,
        }
        metrics.append(row)
        say(f"epoch {epoch}: return {mean_ret:.2f} critic {row['critic_loss']:.4f}")

    return RunResult(config=cfg, agent=agent, model=model, miw_estimator=estimator,
                     metrics=metrics, audit=audit,
                     dataset_mean_return=dataset_mean_return, warm_losses=warm_losses)


def metrics_to_csv(metrics: List[Dict], path: str):
    """Write metric rows with a fixed column order (stable across runs)."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(METRIC_COLUMNS))
        writer.writeheader()
        for row in metrics:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})
