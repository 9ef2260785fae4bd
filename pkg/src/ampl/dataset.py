"""Offline transition datasets: the (s, a, r, s', done) currency of the package.

A dataset carries the transition arrays, a pool of initial-state samples, and
the statistics everything downstream normalizes with.  Serialization is JSON
Lines for the transitions plus a metadata JSON document.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class OfflineDataset:
    states: np.ndarray        # (N, state_dim)
    actions: np.ndarray       # (N, action_dim)
    rewards: np.ndarray       # (N,)
    next_states: np.ndarray   # (N, state_dim)
    dones: np.ndarray         # (N,) bool; True only for genuine terminals
    initial_states: np.ndarray  # (M, state_dim) samples from the start distribution
    meta: dict = field(default_factory=dict)  # quality, seed, episode_returns, ...
    rewards_normalized: bool = False

    def __post_init__(self):
        n = len(self.states)
        assert self.actions.shape[0] == n and self.rewards.shape == (n,)
        assert self.next_states.shape == self.states.shape
        assert self.dones.shape == (n,) and self.dones.dtype == np.bool_
        assert len(self.initial_states) > 0, "initial-state pool must be nonempty"
        assert np.all(np.isfinite(self.rewards)), "non-finite reward in dataset"
        assert np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.actions))

    # -- dimensions -----------------------------------------------------
    @property
    def size(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    # -- statistics -----------------------------------------------------
    def reward_stats(self):
        """(r_min, r_max, sigma_r) over the stored rewards."""
        return (
            float(self.rewards.min()),
            float(self.rewards.max()),
            float(self.rewards.std()),
        )

    def input_stats(self):
        """Per-coordinate mean/std of concatenated (s, a)."""
        x = np.concatenate([self.states, self.actions], axis=1)
        return x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6)

    def target_stats(self):
        """Per-coordinate mean/std of concatenated (r, delta_s)."""
        t = np.concatenate(
            [self.rewards[:, None], self.next_states - self.states], axis=1
        )
        return t.mean(axis=0), np.maximum(t.std(axis=0), 1e-6)

    def state_abs_max(self) -> np.ndarray:
        """Per-coordinate max |s| over states and next states (rollout guard)."""
        return np.maximum(
            np.abs(self.states).max(axis=0), np.abs(self.next_states).max(axis=0)
        )

    def mean_episode_return(self) -> float:
        returns = self.meta.get("episode_returns")
        assert returns, "dataset metadata lacks episode_returns"
        return float(np.mean(returns))

    # -- serialization ---------------------------------------------------
    def save(self, prefix: str | Path) -> None:
        """Write <prefix>.jsonl, <prefix>.meta.json, <prefix>.init.json."""
        prefix = Path(prefix)
        with open(prefix.with_suffix(".jsonl"), "w") as fh:
            for i in range(self.size):
                fh.write(
                    json.dumps(
                        {
                            "s": self.states[i].tolist(),
                            "a": self.actions[i].tolist(),
                            "r": float(self.rewards[i]),
                            "s_next": self.next_states[i].tolist(),
                            "done": int(self.dones[i]),
                        }
                    )
                    + "\n"
                )
        init_file = prefix.with_suffix(".init.json")
        init_file.write_text(json.dumps(self.initial_states.tolist()) + "\n")
        r_min, r_max, sigma_r = self.reward_stats()
        in_mean, in_std = self.input_stats()
        t_mean, t_std = self.target_stats()
        meta = {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "n_transitions": self.size,
            "rewards_normalized": self.rewards_normalized,
            "reward_stats": {"r_min": r_min, "r_max": r_max, "sigma_r": sigma_r},
            "normalization_stats": {
                "input_mean": in_mean.tolist(),
                "input_std": in_std.tolist(),
                "target_mean": t_mean.tolist(),
                "target_std": t_std.tolist(),
            },
            "initial_states_file": init_file.name,
            **self.meta,
        }
        prefix.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, prefix: str | Path) -> "OfflineDataset":
        prefix = Path(prefix)
        meta = json.loads(prefix.with_suffix(".meta.json").read_text())
        s, a, r, s_next, done = [], [], [], [], []
        with open(prefix.with_suffix(".jsonl")) as fh:
            for line in fh:
                row = json.loads(line)
                s.append(row["s"])
                a.append(row["a"])
                r.append(row["r"])
                s_next.append(row["s_next"])
                done.append(bool(row["done"]))
        init = np.asarray(
            json.loads((prefix.parent / meta["initial_states_file"]).read_text()),
            dtype=np.float64,
        )
        stored_stats = meta.pop("reward_stats")
        meta.pop("normalization_stats")
        normalized = meta.pop("rewards_normalized", False)
        for key in ("state_dim", "action_dim", "n_transitions", "initial_states_file"):
            meta.pop(key, None)
        ds = cls(
            states=np.asarray(s, dtype=np.float64),
            actions=np.asarray(a, dtype=np.float64),
            rewards=np.asarray(r, dtype=np.float64),
            next_states=np.asarray(s_next, dtype=np.float64),
            dones=np.asarray(done, dtype=np.bool_),
            initial_states=init,
            meta=meta,
            rewards_normalized=normalized,
        )
        r_min, r_max, sigma_r = ds.reward_stats()
        assert abs(r_min - stored_stats["r_min"]) <= 1e-9
        assert abs(r_max - stored_stats["r_max"]) <= 1e-9
        assert abs(sigma_r - stored_stats["sigma_r"]) <= 1e-9
        return ds


def cast(dataset: OfflineDataset, dtype) -> OfflineDataset:
    """Float arrays converted to `dtype` (dones stay boolean).  Lets a
    reduced-precision run pay the conversion once instead of per batch."""
    return replace(
        dataset,
        states=dataset.states.astype(dtype, copy=False),
        actions=dataset.actions.astype(dtype, copy=False),
        rewards=dataset.rewards.astype(dtype, copy=False),
        next_states=dataset.next_states.astype(dtype, copy=False),
        initial_states=dataset.initial_states.astype(dtype, copy=False),
    )


def normalize_rewards(dataset: OfflineDataset) -> OfflineDataset:
    """Shift/scale rewards to (0, 1]: r <- (r - r_min + 0.001) / (r_max - r_min).

    Applied exactly once per run (guarded by the dataset flag); errors out on a
    constant-reward dataset where the scale is undefined.
    """
    if dataset.rewards_normalized:
        raise ValueError("dataset rewards already normalized")
    r_min, r_max, _ = dataset.reward_stats()
    if r_max - r_min <= 0.0:
        raise ValueError("constant rewards: normalization scale undefined")
    rewards = (dataset.rewards - r_min + 0.001) / (r_max - r_min)
    return replace(dataset, rewards=rewards, rewards_normalized=True)
