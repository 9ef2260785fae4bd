"""Gaussian probabilistic dynamics ensemble over (reward, state-delta) targets.

Each member is an MLP mapping normalized (s, a) to a double head: means and
log-stds of the normalized (r, s' - s) target.  Members train independently by
(optionally weighted) maximum likelihood on bootstrap-resampled minibatches;
elites are the members with the lowest NLL on a shared held-out split.
Prediction samples one elite per query row, denormalizes, and applies the
out-of-range termination/penalty augmentation.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nets
from .dataset import OfflineDataset
from .util import max_workers

HOLDOUT_FRACTION = 0.1


@dataclass
class EnsembleStats:
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    r_range: float
    state_abs_max: np.ndarray


def fit_stats(dataset: OfflineDataset) -> EnsembleStats:
    """Normalization statistics plus the reward/state guard ranges.

    r_range = max(|r_min - 10 sigma_r|, |r_max + 10 sigma_r|); predictions with
    |r_hat| beyond it (or next states beyond twice the dataset coordinate
    range) are treated as model blow-ups.
    """
    assert dataset.size > 0, "empty dataset"
    in_mean, in_std = dataset.input_stats()
    t_mean, t_std = dataset.target_stats()
    r_min, r_max, sigma_r = dataset.reward_stats()
    r_range = max(abs(r_min - 10.0 * sigma_r), abs(r_max + 10.0 * sigma_r))
    return EnsembleStats(
        input_mean=in_mean,
        input_std=in_std,
        target_mean=t_mean,
        target_std=t_std,
        r_range=float(r_range),
        state_abs_max=dataset.state_abs_max(),
    )


class DynamicsEnsemble:
    """Ensemble container; training mutates members in place."""

    def __init__(self, state_dim: int, action_dim: int, n_members: int, n_elites: int,
                 hidden: tuple, rng: np.random.Generator, lr: float = 1e-3,
                 dtype=np.float64):
        assert 1 <= n_elites <= n_members
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.n_members = n_members
        self.n_elites = n_elites
        # double head: means then log-stds of the (r, delta_s) target
        self.target_dim = 1 + state_dim
        self.spec = nets.MlpSpec(state_dim + action_dim, tuple(hidden), 2 * self.target_dim)
        self.members = [nets.init_mlp(self.spec, rng, dtype=dtype) for _ in range(n_members)]
        self.optimizers = [nets.Adam(p, lr=lr) for p in self.members]
        self.elites = list(range(n_elites))
        self.stats: EnsembleStats | None = None
        self._train_idx: np.ndarray | None = None
        self._holdout_idx: np.ndarray | None = None
        self.dtype = dtype

    # -- plumbing ---------------------------------------------------------
    def fit(self, dataset: OfflineDataset, rng: np.random.Generator) -> None:
        """Fit stats and freeze the shared train/holdout split (first call only)."""
        self.stats = fit_stats(dataset)
        if self._holdout_idx is None:
            perm = rng.permutation(dataset.size)
            n_hold = max(1, int(round(HOLDOUT_FRACTION * dataset.size)))
            self._holdout_idx = np.sort(perm[:n_hold])
            self._train_idx = np.sort(perm[n_hold:])

    def _normalized_inputs(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        x = np.concatenate([s, a], axis=1)
        return ((x - self.stats.input_mean) / self.stats.input_std).astype(self.dtype)

    def _targets(self, dataset: OfflineDataset, idx: np.ndarray) -> np.ndarray:
        t = np.concatenate(
            [dataset.rewards[idx][:, None], dataset.next_states[idx] - dataset.states[idx]],
            axis=1,
        )
        return ((t - self.stats.target_mean) / self.stats.target_std).astype(self.dtype)

    def _heads(self, u: np.ndarray):
        """(mean, log_std, clamp_mask) from a raw network output batch."""
        mean = u[:, : self.target_dim]
        raw = u[:, self.target_dim :]
        log_std = np.clip(raw, nets.LOG_STD_MIN, nets.LOG_STD_MAX)
        mask = (raw > nets.LOG_STD_MIN) & (raw < nets.LOG_STD_MAX)
        return mean, log_std, mask

    # -- training ----------------------------------------------------------
    def train_mle(self, dataset: OfflineDataset, epochs: int, steps_per_epoch: int,
                  batch_size: int, rng: np.random.Generator) -> None:
        """Unweighted maximum likelihood == weighted with unit weights."""
        self.train_weighted_mle(dataset, None, epochs, steps_per_epoch, batch_size, rng)

    def train_weighted_mle(self, dataset: OfflineDataset, weights, epochs: int,
                           steps_per_epoch: int, batch_size: int,
                           rng: np.random.Generator) -> None:
        """Minimize mean[w_hat * nll] per member; warm-starts from current params."""
        w_hat = self._normalize_weights(dataset, weights)

        def step(params, idx, w, member_rng):
            return self._mle_step(params, dataset, idx, w)

        self._run_members(dataset, w_hat, epochs * steps_per_epoch, batch_size, rng, step)
        self.elite_selection(dataset)

    def train_value_discriminated(self, dataset: OfflineDataset, weights, value_fn,
                                  epochs: int, steps_per_epoch: int, batch_size: int,
                                  rng: np.random.Generator) -> None:
        """Value-matched state training: minimize w_hat * |V(s'_data) - V(s'_model)|
        with one reparameterized model sample, plus w_hat-weighted NLL for the
        reward dimension.  `value_fn(states) -> (values, d values/d states)` and
        is treated as frozen."""
        w_hat = self._normalize_weights(dataset, weights)

        def step(params, idx, w, member_rng):
            return self._value_disc_step(params, dataset, idx, w, value_fn, member_rng)

        self._run_members(dataset, w_hat, epochs * steps_per_epoch, batch_size, rng, step)
        self.elite_selection(dataset)

    def _normalize_weights(self, dataset: OfflineDataset, weights) -> np.ndarray:
        if weights is None:
            return np.ones(dataset.size, dtype=self.dtype)
        weights = np.asarray(weights, dtype=np.float64)
        assert weights.shape == (dataset.size,)
        assert np.all(weights >= 0.0), "negative importance weight"
        mean = weights.mean()
        if mean <= 0.0:
            raise ValueError("all-zero importance weights")
        return (weights / mean).astype(self.dtype)

    def _run_members(self, dataset, w_hat, n_steps, batch_size, rng, step_fn) -> None:
        assert self.stats is not None, "call fit() before training"
        pools = []
        streams = rng.spawn(self.n_members)
        for member_rng in streams:
            # bootstrap resample of the shared train split, one pool per member
            pools.append(member_rng.choice(self._train_idx, size=len(self._train_idx)))

        def train_one(i: int) -> None:
            member_rng = streams[i]
            pool = pools[i]
            params, opt = self.members[i], self.optimizers[i]
            for _ in range(n_steps):
                idx = pool[member_rng.integers(0, len(pool), size=batch_size)]
                loss, grad = step_fn(params, idx, w_hat[idx], member_rng)
                if not np.isfinite(loss):
                    raise RuntimeError(f"member {i}: non-finite training loss {loss}")
                opt.step(params, grad.flat)

        workers = min(max_workers(), self.n_members)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool_exec:
                list(pool_exec.map(train_one, range(self.n_members)))
        else:
            for i in range(self.n_members):
                train_one(i)

    def _mle_step(self, params, dataset, idx, w):
        x = self._normalized_inputs(dataset.states[idx], dataset.actions[idx])
        t = self._targets(dataset, idx)
        u, cache = nets.mlp_forward_cached(self.spec, params, x)
        mean, log_std, mask = self._heads(u)
        nll = nets.gaussian_nll(mean, log_std, t)
        loss = float(np.mean(w * nll))
        d_mean, d_log_std = nets.gaussian_nll_grads(mean, log_std, t)
        scale = (w / len(idx))[:, None]
        dy = np.concatenate([scale * d_mean, scale * d_log_std * mask], axis=1)
        grad, _ = nets.mlp_backward(self.spec, params, cache, dy)
        return loss, grad

    def _value_disc_step(self, params, dataset, idx, w, value_fn, member_rng):
        s = dataset.states[idx]
        x = self._normalized_inputs(s, dataset.actions[idx])
        t = self._targets(dataset, idx)
        u, cache = nets.mlp_forward_cached(self.spec, params, x)
        mean, log_std, mask = self._heads(u)
        n, d = len(idx), self.target_dim

        # reward head: weighted NLL on dimension 0
        nll_r = nets.gaussian_nll(mean[:, :1], log_std[:, :1], t[:, :1])
        d_mean_r, d_ls_r = nets.gaussian_nll_grads(mean[:, :1], log_std[:, :1], t[:, :1])

        # state head: |V(s'_data) - V(s'_model)| with one reparameterized sample
        eps = member_rng.standard_normal((n, d - 1), dtype=u.dtype)
        std_state = np.exp(log_std[:, 1:])
        delta_n = mean[:, 1:] + std_state * eps
        t_std = self.stats.target_std[1:]
        t_mean = self.stats.target_mean[1:]
        s_model = s + delta_n * t_std + t_mean
        v_data, _ = value_fn(dataset.next_states[idx])
        v_model, dv_ds = value_fn(s_model)
        diff = v_data - v_model
        loss = float(np.mean(w * (np.abs(diff) + nll_r)))

        # d loss / d s_model = -w * sign(v_data - v_model) * dV/ds_model / n
        coeff = (-w * np.sign(diff) / n)[:, None] * dv_ds
        dy = np.zeros_like(u)
        dy[:, 1:d] = coeff * t_std
        dy[:, d + 1 :] = coeff * t_std * eps * std_state
        dy[:, 0] = w * d_mean_r[:, 0] / n
        dy[:, d] = w * d_ls_r[:, 0] / n
        dy[:, d:] *= mask
        grad, _ = nets.mlp_backward(self.spec, params, cache, dy)
        return loss, grad

    # -- elites -------------------------------------------------------------
    def holdout_nll(self, dataset: OfflineDataset) -> np.ndarray:
        """Per-member mean NLL on the frozen holdout split."""
        idx = self._holdout_idx
        x = self._normalized_inputs(dataset.states[idx], dataset.actions[idx])
        t = self._targets(dataset, idx)
        out = np.empty(self.n_members)
        for i, params in enumerate(self.members):
            mean, log_std, _ = self._heads(nets.mlp_forward(self.spec, params, x))
            out[i] = float(np.mean(nets.gaussian_nll(mean, log_std, t)))
        return out

    def elite_selection(self, dataset: OfflineDataset) -> list:
        """Pick the n_elites members with lowest holdout NLL (ties: lower index)."""
        nll = self.holdout_nll(dataset)
        order = np.argsort(nll, kind="stable")
        self.elites = sorted(int(i) for i in order[: self.n_elites])
        return self.elites

    # -- prediction ----------------------------------------------------------
    def predict(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator,
                termination_fn=None):
        """One-step model sample per row with a uniformly chosen elite.

        Returns (s_next, reward, done, penalized).  Blow-up rule: if any next
        state coordinate leaves twice the dataset range or |r_hat| > r_range,
        reward is replaced by -r_range and the row is terminal+penalized;
        otherwise the environment termination rule (if given) decides done.
        """
        s_next, reward, _, _ = self._sample(s, a, rng, with_cache=False)[:4]
        return self._augment(s, s_next, reward, termination_fn)

    def sample_step_cached(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator,
                           termination_fn=None):
        """predict() variant that also returns a backprop closure.

        The closure maps d loss/d s_next -> d loss/d a through the chosen
        member's reparameterized Gaussian sample (stats denormalization
        included).  Rows flagged done contribute whatever gradient the caller
        passes; callers drop such rows by zeroing them.
        """
        s_next, reward, caches, layout = self._sample(s, a, rng, with_cache=True)
        s_next, reward, done, penalized = self._augment(s, s_next, reward, termination_fn)

        def backprop(d_snext: np.ndarray) -> np.ndarray:
            d_action = np.zeros((len(s), self.action_dim), dtype=d_snext.dtype)
            d = self.target_dim
            t_std = self.stats.target_std[1:]
            for member_idx, rows, cache, eps, log_std, mask in caches:
                dy = np.zeros((len(rows), 2 * d), dtype=d_snext.dtype)
                g = d_snext[rows] * t_std
                dy[:, 1:d] = g
                dy[:, d + 1 :] = g * eps * np.exp(log_std) * mask
                _, dx = nets.mlp_backward(
                    self.spec, self.members[member_idx], cache, dy,
                    need_input_grad=True, need_param_grad=False,
                )
                d_action[rows] = dx[:, self.state_dim:] / self.stats.input_std[self.state_dim:]
            return d_action

        return s_next, reward, done, penalized, backprop

    def _sample(self, s, a, rng, with_cache: bool):
        assert self.stats is not None and self.elites, "untrained ensemble"
        n = len(s)
        x = self._normalized_inputs(s, a)
        choice = rng.integers(0, len(self.elites), size=n)
        eps = rng.standard_normal((n, self.target_dim), dtype=x.dtype)
        target_n = np.empty((n, self.target_dim), dtype=x.dtype)
        caches = []
        for j, member_idx in enumerate(self.elites):
            rows = np.flatnonzero(choice == j)
            if len(rows) == 0:
                continue
            if with_cache:
                u, cache = nets.mlp_forward_cached(self.spec, self.members[member_idx], x[rows])
            else:
                u = nets.mlp_forward(self.spec, self.members[member_idx], x[rows])
            mean, log_std, mask = self._heads(u)
            target_n[rows] = mean + np.exp(log_std) * eps[rows]
            if with_cache:
                caches.append((member_idx, rows, cache, eps[rows, 1:], log_std[:, 1:], mask[:, 1:]))
        target = target_n * self.stats.target_std.astype(x.dtype) + self.stats.target_mean.astype(x.dtype)
        reward = target[:, 0]
        s_next = s.astype(x.dtype) + target[:, 1:]
        return s_next, reward, caches, None

    def _augment(self, s, s_next, reward, termination_fn):
        bound = 2.0 * self.stats.state_abs_max
        blown = np.any(np.abs(s_next) > bound, axis=1) | (np.abs(reward) > self.stats.r_range)
        reward = np.where(blown, -self.stats.r_range, reward)
        done = blown.copy()
        if termination_fn is not None:
            done |= termination_fn(s_next)
        assert np.all(np.isfinite(s_next)) and np.all(np.isfinite(reward))
        return s_next, reward, done, blown

    # -- checkpointing ---------------------------------------------------
    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, params in enumerate(self.members):
            nets.save_params(directory / f"member_{i}", params)
        manifest = {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "n_members": self.n_members,
            "n_elites": self.n_elites,
            "hidden": list(self.spec.hidden),
            "elites": self.elites,
            "dtype": str(np.dtype(self.dtype)),
            "stats": {
                "input_mean": self.stats.input_mean.tolist(),
                "input_std": self.stats.input_std.tolist(),
                "target_mean": self.stats.target_mean.tolist(),
                "target_std": self.stats.target_std.tolist(),
                "r_range": self.stats.r_range,
                "state_abs_max": self.stats.state_abs_max.tolist(),
            },
        }
        (directory / "ensemble.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "DynamicsEnsemble":
        directory = Path(directory)
        m = json.loads((directory / "ensemble.json").read_text())
        ens = cls(
            m["state_dim"], m["action_dim"], m["n_members"], m["n_elites"],
            tuple(m["hidden"]), np.random.default_rng(0), dtype=np.dtype(m["dtype"]),
        )
        for i in range(ens.n_members):
            ens.members[i] = nets.load_params(directory / f"member_{i}")
        ens.elites = list(m["elites"])
        st = m["stats"]
        ens.stats = EnsembleStats(
            input_mean=np.asarray(st["input_mean"]),
            input_std=np.asarray(st["input_std"]),
            target_mean=np.asarray(st["target_mean"]),
            target_std=np.asarray(st["target_std"]),
            r_range=float(st["r_range"]),
            state_abs_max=np.asarray(st["state_abs_max"]),
        )
        return ens

    # -- reward head as a deterministic function (miw reward-test mode) -----
    def mean_reward_fn(self):
        """Deterministic r_hat(s, a): elite-averaged mean-head reward."""

        def fn(s: np.ndarray, a: np.ndarray) -> np.ndarray:
            x = self._normalized_inputs(s, a)
            acc = np.zeros(len(s))
            for member_idx in self.elites:
                u = nets.mlp_forward(self.spec, self.members[member_idx], x)
                acc += u[:, 0]
            mean_n = acc / len(self.elites)
            return mean_n * self.stats.target_std[0] + self.stats.target_mean[0]

        return fn
