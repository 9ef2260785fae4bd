"""A 2-D point-mass reach task with scripted data-collection policies.

This is desk-scale plumbing, not a benchmark: a point with position and
velocity in [-1, 1]^2 is pushed toward a fixed goal; reward is the negative
distance to the goal after the move, and reaching within GOAL_RADIUS ends the
episode.  The horizon cutoff is enforced by the rollout harness and is *not* a
terminal (done stays False there), because value bootstrapping must continue
through cutoffs.

All dynamics constants are frozen below so that every downstream number in the
test suite is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import OfflineDataset

FRICTION = 0.9
ACTION_GAIN = 0.1
POSITION_GAIN = 0.1
NOISE_STD = 0.01          # dynamics noise; constructor hook can suppress it
GOAL = np.array([0.8, 0.8])
GOAL_RADIUS = 0.1
HORIZON = 100
RESET_LOW, RESET_HIGH = -0.9, -0.7
STATE_DIM = 4             # [px, py, vx, vy]
ACTION_DIM = 2
MAX_ACTION = 1.0

QUALITIES = ("expert", "medium", "medium-replay")


@dataclass
class PointMassState:
    position: np.ndarray
    velocity: np.ndarray

    def observation(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


class PointMassEnv:
    """Single-threaded environment instance; clone per worker for parallel use."""

    def __init__(self, noise_std: float = NOISE_STD):
        self.noise_std = noise_std

    def reset(self, rng: np.random.Generator) -> PointMassState:
        position = rng.uniform(RESET_LOW, RESET_HIGH, size=2)
        return PointMassState(position=position, velocity=np.zeros(2))

    def step(self, state: PointMassState, action: np.ndarray, rng: np.random.Generator):
        action = np.asarray(action, dtype=np.float64)
        if not (np.all(np.isfinite(action)) and np.all(np.isfinite(state.position))
                and np.all(np.isfinite(state.velocity))):
            raise ValueError("non-finite state or action")
        action = np.clip(action, -MAX_ACTION, MAX_ACTION)
        noise = rng.normal(0.0, self.noise_std, size=2) if self.noise_std > 0 else np.zeros(2)
        velocity = np.clip(FRICTION * state.velocity + ACTION_GAIN * action + noise, -1.0, 1.0)
        position = np.clip(state.position + POSITION_GAIN * velocity, -1.0, 1.0)
        dist = float(np.linalg.norm(position - GOAL))
        next_state = PointMassState(position=position, velocity=velocity)
        return next_state, -dist, dist < GOAL_RADIUS

    # -- vectorized helpers (used for lockstep evaluation and rollouts) ----
    def reset_batch(self, n: int, rng: np.random.Generator) -> np.ndarray:
        pos = rng.uniform(RESET_LOW, RESET_HIGH, size=(n, 2))
        return np.concatenate([pos, np.zeros((n, 2))], axis=1)

    def step_batch(self, obs: np.ndarray, actions: np.ndarray, rng: np.random.Generator):
        actions = np.clip(actions, -MAX_ACTION, MAX_ACTION)
        noise = (rng.normal(0.0, self.noise_std, size=(len(obs), 2))
                 if self.noise_std > 0 else np.zeros((len(obs), 2)))
        vel = np.clip(FRICTION * obs[:, 2:] + ACTION_GAIN * actions + noise, -1.0, 1.0)
        pos = np.clip(obs[:, :2] + POSITION_GAIN * vel, -1.0, 1.0)
        dist = np.linalg.norm(pos - GOAL, axis=1)
        return np.concatenate([pos, vel], axis=1), -dist, dist < GOAL_RADIUS


def termination_fn(next_obs: np.ndarray) -> np.ndarray:
    """Goal rule evaluated on a batch of observations (used on model rollouts)."""
    return np.linalg.norm(next_obs[:, :2] - GOAL, axis=1) < GOAL_RADIUS


def behavior_action(obs: np.ndarray, quality: str, rng: np.random.Generator) -> np.ndarray:
    """Scripted data-collection policies of decreasing quality.

    expert        clamped PD controller toward the goal
    medium        expert plus N(0, 0.3^2) action noise, clamped
    medium-replay with probability 0.3 a uniform random action, else medium
    """
    assert quality in QUALITIES, quality
    if quality == "medium-replay" and rng.random() < 0.3:
        return rng.uniform(-MAX_ACTION, MAX_ACTION, size=2)
    position, velocity = obs[:2], obs[2:]
    action = np.clip(2.0 * (GOAL - position) - 1.0 * velocity, -MAX_ACTION, MAX_ACTION)
    if quality == "expert":
        return action
    return np.clip(action + rng.normal(0.0, 0.3, size=2), -MAX_ACTION, MAX_ACTION)


def collect_dataset(quality: str, n_episodes: int, seed: int,
                    init_pool_size: int = 10_000) -> OfflineDataset:
    """Roll the scripted policy and package everything as an OfflineDataset."""
    assert n_episodes >= 1
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    env = PointMassEnv()
    s_rows, a_rows, r_rows, sn_rows, d_rows = [], [], [], [], []
    episode_returns = []
    for _ in range(n_episodes):
        state = env.reset(rng)
        ep_return = 0.0
        for _ in range(HORIZON):
            obs = state.observation()
            action = behavior_action(obs, quality, rng)
            state, reward, done = env.step(state, action, rng)
            s_rows.append(obs)
            a_rows.append(action)
            r_rows.append(reward)
            sn_rows.append(state.observation())
            d_rows.append(done)
            ep_return += reward
            if done:
                break
        episode_returns.append(ep_return)
    init_states = env.reset_batch(init_pool_size, rng)
    return OfflineDataset(
        states=np.asarray(s_rows),
        actions=np.asarray(a_rows),
        rewards=np.asarray(r_rows),
        next_states=np.asarray(sn_rows),
        dones=np.asarray(d_rows, dtype=np.bool_),
        initial_states=init_states,
        meta={"quality": quality, "seed": seed, "episode_returns": episode_returns},
    )


def evaluate_policy(policy, n_episodes: int, seed: int, noise_std: float = NOISE_STD):
    """(mean, std) of undiscounted returns over `n_episodes` capped episodes.

    `policy(obs_batch, rng) -> action_batch`.  Episodes run in lockstep on one
    rng, which keeps the result a pure function of the seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    env = PointMassEnv(noise_std=noise_std)
    obs = env.reset_batch(n_episodes, rng)
    returns = np.zeros(n_episodes)
    active = np.ones(n_episodes, dtype=bool)
    for _ in range(HORIZON):
        actions = np.asarray(policy(obs, rng))
        nxt, rewards, done = env.step_batch(obs, actions, rng)
        returns += np.where(active, rewards, 0.0)
        active &= ~done
        obs = nxt
        if not active.any():
            break
    return float(returns.mean()), float(returns.std())
