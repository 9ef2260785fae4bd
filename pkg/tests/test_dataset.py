"""OfflineDataset container: statistics, serialization, reward normalization."""

import json

import numpy as np
import pytest

from ampl import dataset as ds_mod
from ampl.dataset import OfflineDataset


def _toy_dataset(n=50, state_dim=3, action_dim=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return OfflineDataset(
        states=rng.normal(size=(n, state_dim)),
        actions=rng.uniform(-1, 1, size=(n, action_dim)),
        rewards=rng.normal(size=n),
        next_states=rng.normal(size=(n, state_dim)),
        dones=rng.random(n) < 0.1,
        initial_states=rng.normal(size=(20, state_dim)),
        meta={"quality": "toy", "seed": seed, "episode_returns": [1.0, 2.0]},
        **kw,
    )


def test_validation_catches_shape_and_nan_problems():
    good = _toy_dataset()
    with pytest.raises(AssertionError):
        OfflineDataset(good.states, good.actions[:-1], good.rewards,
                       good.next_states, good.dones, good.initial_states)
    bad_rewards = good.rewards.copy()
    bad_rewards[0] = np.nan
    with pytest.raises(AssertionError):
        OfflineDataset(good.states, good.actions, bad_rewards,
                       good.next_states, good.dones, good.initial_states)
    with pytest.raises(AssertionError):
        OfflineDataset(good.states, good.actions, good.rewards,
                       good.next_states, good.dones, good.initial_states[:0])


def test_dimension_properties():
    data = _toy_dataset(n=7, state_dim=4, action_dim=2)
    assert data.size == 7 and data.state_dim == 4 and data.action_dim == 2


def test_statistics_match_numpy_references():
    data = _toy_dataset(seed=3)
    r_min, r_max, sigma_r = data.reward_stats()
    assert r_min == data.rewards.min() and r_max == data.rewards.max()
    assert sigma_r == pytest.approx(data.rewards.std(), abs=1e-12)

    x = np.concatenate([data.states, data.actions], axis=1)
    mean, std = data.input_stats()
    np.testing.assert_allclose(mean, x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(std, x.std(axis=0), atol=1e-12)

    t = np.concatenate([data.rewards[:, None], data.next_states - data.states], axis=1)
    t_mean, t_std = data.target_stats()
    np.testing.assert_allclose(t_mean, t.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(t_std, t.std(axis=0), atol=1e-12)


def test_input_stats_std_floor():
    data = _toy_dataset()
    frozen = OfflineDataset(
        np.zeros_like(data.states), data.actions, data.rewards,
        np.zeros_like(data.next_states), data.dones, data.initial_states)
    _, std = frozen.input_stats()
    assert np.all(std >= 1e-6)


def test_state_abs_max_covers_both_sides():
    data = _toy_dataset()
    guard = data.state_abs_max()
    assert np.all(guard >= np.abs(data.states).max(axis=0))
    assert np.all(guard >= np.abs(data.next_states).max(axis=0))


def test_mean_episode_return_uses_meta():
    data = _toy_dataset()
    assert data.mean_episode_return() == pytest.approx(1.5)
    bare = _toy_dataset()
    bare.meta.pop("episode_returns")
    with pytest.raises(AssertionError):
        bare.mean_episode_return()


# ---------------------------------------------------------------------------
# serialization


def test_save_load_roundtrip_exact(tmp_path):
    data = _toy_dataset(seed=11)
    data.save(tmp_path / "toy")
    back = OfflineDataset.load(tmp_path / "toy")
    np.testing.assert_array_equal(back.states, data.states)
    np.testing.assert_array_equal(back.actions, data.actions)
    np.testing.assert_array_equal(back.rewards, data.rewards)
    np.testing.assert_array_equal(back.next_states, data.next_states)
    np.testing.assert_array_equal(back.dones, data.dones)
    np.testing.assert_array_equal(back.initial_states, data.initial_states)
    assert back.meta["quality"] == "toy"
    assert back.meta["episode_returns"] == [1.0, 2.0]
    assert back.rewards_normalized == data.rewards_normalized


def test_save_writes_three_documents_with_stats(tmp_path):
    data = _toy_dataset()
    data.save(tmp_path / "d")
    assert (tmp_path / "d.jsonl").exists()
    assert (tmp_path / "d.init.json").exists()
    meta = json.loads((tmp_path / "d.meta.json").read_text())
    assert meta["n_transitions"] == data.size
    assert meta["state_dim"] == data.state_dim
    assert "input_mean" in meta["normalization_stats"]
    first = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
    assert set(first) == {"s", "a", "r", "s_next", "done"}


def test_load_checks_stored_reward_stats(tmp_path):
    data = _toy_dataset()
    data.save(tmp_path / "d")
    meta_file = tmp_path / "d.meta.json"
    meta = json.loads(meta_file.read_text())
    meta["reward_stats"]["sigma_r"] += 0.5
    meta_file.write_text(json.dumps(meta))
    with pytest.raises(AssertionError):
        OfflineDataset.load(tmp_path / "d")


def test_normalized_flag_survives_roundtrip(tmp_path):
    data = ds_mod.normalize_rewards(_toy_dataset())
    data.save(tmp_path / "norm")
    back = OfflineDataset.load(tmp_path / "norm")
    assert back.rewards_normalized is True
    np.testing.assert_allclose(back.rewards, data.rewards, atol=1e-15)


# ---------------------------------------------------------------------------
# transforms


def test_cast_converts_float_arrays_only():
    data = _toy_dataset()
    light = ds_mod.cast(data, np.float32)
    assert light.states.dtype == np.float32
    assert light.rewards.dtype == np.float32
    assert light.dones.dtype == np.bool_
    np.testing.assert_allclose(light.states, data.states, atol=1e-6)


def test_normalize_rewards_range_and_guards():
    data = _toy_dataset(seed=21)
    norm = ds_mod.normalize_rewards(data)
    span = data.rewards.max() - data.rewards.min()
    assert norm.rewards.min() == pytest.approx(0.001 / span)
    assert norm.rewards.max() == pytest.approx(1.0 + 0.001 / span)
    assert np.all(norm.rewards > 0.0)
    # order preserved
    assert np.array_equal(np.argsort(norm.rewards), np.argsort(data.rewards))

    with pytest.raises(ValueError):
        ds_mod.normalize_rewards(norm)  # double application

    flat = OfflineDataset(data.states, data.actions, np.ones_like(data.rewards),
                          data.next_states, data.dones, data.initial_states)
    with pytest.raises(ValueError):
        ds_mod.normalize_rewards(flat)  # constant rewards
