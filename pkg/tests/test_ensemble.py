"""Dynamics ensemble: weighted MLE, elites, prediction guards, checkpointing."""

import numpy as np
import pytest

from ampl import ensemble as ens_mod
from ampl import nets
from ampl.dataset import OfflineDataset
from ampl.ensemble import DynamicsEnsemble, fit_stats


def _linear_dataset(n=400, seed=0, noise=0.0):
    """Deterministic (or lightly noisy) linear dynamics in 2-D."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, size=(n, 2))
    a = rng.uniform(-1, 1, size=(n, 1))
    s_next = 0.8 * s + 0.3 * np.concatenate([a, -a], axis=1)
    if noise:
        s_next = s_next + rng.normal(0, noise, size=s_next.shape)
    r = -np.linalg.norm(s_next, axis=1)
    return OfflineDataset(
        states=s, actions=a, rewards=r, next_states=s_next,
        dones=np.zeros(n, dtype=np.bool_),
        initial_states=rng.uniform(-1, 1, size=(32, 2)),
        meta={"quality": "linear-toy", "seed": seed, "episode_returns": [0.0]},
    )


def _make(dataset, members=3, elites=2, hidden=(16, 16), seed=0, lr=1e-3):
    ens = DynamicsEnsemble(dataset.state_dim, dataset.action_dim, members, elites,
                           hidden, np.random.default_rng(seed), lr=lr)
    ens.fit(dataset, np.random.default_rng(seed + 1))
    return ens


# ---------------------------------------------------------------------------
# stats


def test_fit_stats_formulas():
    data = _linear_dataset(seed=3)
    st = fit_stats(data)
    r_min, r_max, sigma = data.reward_stats()
    assert st.r_range == pytest.approx(max(abs(r_min - 10 * sigma), abs(r_max + 10 * sigma)))
    np.testing.assert_allclose(st.state_abs_max, data.state_abs_max())
    in_mean, in_std = data.input_stats()
    np.testing.assert_allclose(st.input_mean, in_mean)
    np.testing.assert_allclose(st.input_std, in_std)


def test_holdout_split_frozen_across_refits():
    data = _linear_dataset()
    ens = _make(data)
    first = ens._holdout_idx.copy()
    ens.fit(data, np.random.default_rng(999))  # stats refresh must not reshuffle
    np.testing.assert_array_equal(ens._holdout_idx, first)
    assert len(first) == round(0.1 * data.size)
    assert len(np.intersect1d(first, ens._train_idx)) == 0


# ---------------------------------------------------------------------------
# weighted MLE semantics


def test_unit_weights_reproduce_unweighted_training_exactly():
    data = _linear_dataset(noise=0.05)
    a = _make(data, seed=7)
    b = _make(data, seed=7)
    a.train_mle(data, epochs=1, steps_per_epoch=30, batch_size=32,
                rng=np.random.default_rng(11))
    b.train_weighted_mle(data, np.ones(data.size), epochs=1, steps_per_epoch=30,
                         batch_size=32, rng=np.random.default_rng(11))
    for pa, pb in zip(a.members, b.members):
        assert pa.flat.tobytes() == pb.flat.tobytes()
    assert a.elites == b.elites


def test_weight_scale_invariance():
    data = _linear_dataset(noise=0.05)
    a = _make(data, seed=8)
    b = _make(data, seed=8)
    a.train_weighted_mle(data, np.full(data.size, 37.0), epochs=1, steps_per_epoch=25,
                         batch_size=32, rng=np.random.default_rng(12))
    b.train_weighted_mle(data, np.ones(data.size), epochs=1, steps_per_epoch=25,
                         batch_size=32, rng=np.random.default_rng(12))
    for pa, pb in zip(a.members, b.members):
        np.testing.assert_allclose(pa.flat, pb.flat, atol=1e-12)


def test_weight_validation():
    data = _linear_dataset()
    ens = _make(data)
    with pytest.raises(AssertionError):
        ens.train_weighted_mle(data, -np.ones(data.size), 1, 5, 16,
                               np.random.default_rng(0))
    with pytest.raises(ValueError):
        ens.train_weighted_mle(data, np.zeros(data.size), 1, 5, 16,
                               np.random.default_rng(0))


def test_holdout_nll_decreases_over_first_epochs():
    data = _linear_dataset(seed=0, noise=0.02)
    ens = _make(data, members=2, elites=1, seed=0)
    curve = []
    for _ in range(5):
        ens.train_mle(data, epochs=1, steps_per_epoch=100, batch_size=64,
                      rng=np.random.default_rng(0))
        curve.append(ens.holdout_nll(data).min())
    assert all(b < a for a, b in zip(curve, curve[1:])), curve


def test_concentrated_weights_overfit_that_transition():
    # all weight on one transition pulls the model mean toward its target
    data = _linear_dataset(n=64, seed=5, noise=0.3)
    weights = np.full(data.size, 1e-6)
    star = 7
    weights[star] = 1.0
    ens = _make(data, members=1, elites=1, seed=9, lr=3e-3)
    ens.train_weighted_mle(data, weights, epochs=1, steps_per_epoch=800,
                           batch_size=64, rng=np.random.default_rng(5))
    x = ens._normalized_inputs(data.states[star:star + 1], data.actions[star:star + 1])
    mean_n, _, _ = ens._heads(nets.mlp_forward(ens.spec, ens.members[0], x))
    target_n = ens._targets(data, np.array([star]))
    assert np.max(np.abs(mean_n - target_n)) < 0.1


def test_training_continues_from_current_parameters():
    # warm start: a second training call advances the same optimizer state
    # instead of reinitializing anything
    data = _linear_dataset(noise=0.05)
    ens = _make(data, members=1, elites=1)
    ens.train_mle(data, 1, 40, 32, np.random.default_rng(0))
    t_after_first = ens.optimizers[0].t
    snapshot = ens.members[0].flat.copy()
    ens.train_weighted_mle(data, np.ones(data.size), 1, 40, 32, np.random.default_rng(1))
    assert ens.optimizers[0].t == 2 * t_after_first
    # parameters moved by gradient steps, not by a fresh init
    assert 0 < np.max(np.abs(ens.members[0].flat - snapshot)) < 0.2


def test_non_finite_loss_aborts():
    data = _linear_dataset(n=64)
    ens = _make(data, members=1, elites=1)
    ens.members[0].flat[:] = 1e30  # force an overflow in the forward pass
    with pytest.raises((RuntimeError, FloatingPointError)):
        with np.errstate(over="raise", invalid="raise"):
            ens.train_mle(data, 1, 3, 16, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# categorical surrogate: weighted-MLE closed form


def weighted_categorical_mle(rows, weights, n_states, steps=4000, lr=0.5):
    """Gradient descent on softmax-parameterized weighted categorical NLL.

    rows: (s, s_next) index pairs. Convex in the logits up to the softmax
    gauge, so plain descent reaches the optimum; returns (P_learned, P_counts)
    for comparison.
    """
    logits = np.zeros((n_states, n_states))
    counts = np.zeros((n_states, n_states))
    for (s, s_next), w in zip(rows, weights):
        counts[s, s_next] += w
    for _ in range(steps):
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        grad = probs * counts.sum(axis=1, keepdims=True) - counts
        logits -= lr * grad / max(weights.sum(), 1e-12)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    return probs, counts / np.maximum(counts.sum(axis=1, keepdims=True), 1e-300)


def test_weighted_categorical_minimizer_is_weighted_counts():
    rng = np.random.default_rng(0)
    rows = [(int(rng.integers(4)), int(rng.integers(4))) for _ in range(200)]
    weights = rng.uniform(0.1, 3.0, size=200)
    learned, closed_form = weighted_categorical_mle(rows, weights, n_states=4)
    assert np.max(np.abs(learned - closed_form)) < 1e-10


# ---------------------------------------------------------------------------
# elites


def test_elite_selection_orders_by_holdout_nll():
    data = _linear_dataset(noise=0.05)
    ens = _make(data, members=4, elites=2)
    ens.train_mle(data, 1, 120, 48, np.random.default_rng(3))
    nll = ens.holdout_nll(data)
    chosen = ens.elite_selection(data)
    assert chosen == sorted(int(i) for i in np.argsort(nll, kind="stable")[:2])
    assert max(nll[chosen]) <= min(np.delete(nll, chosen)) + 1e-12


def test_single_member_is_its_own_elite():
    data = _linear_dataset(n=100)
    ens = _make(data, members=1, elites=1)
    ens.train_mle(data, 1, 10, 16, np.random.default_rng(0))
    assert ens.elites == [0]


def test_untrained_member_is_never_elite():
    data = _linear_dataset(noise=0.02)
    ens = _make(data, members=4, elites=3, seed=0)
    ens.train_mle(data, 1, 150, 48, np.random.default_rng(0))
    # blow away one member's training
    ens.members[1] = nets.init_mlp(ens.spec, np.random.default_rng(123))
    assert 1 not in ens.elite_selection(data)


# ---------------------------------------------------------------------------
# prediction guards


def _trained(data, **kw):
    ens = _make(data, **kw)
    ens.train_mle(data, 1, 100, 48, np.random.default_rng(2))
    return ens


def test_predict_shapes_and_finiteness():
    data = _linear_dataset(noise=0.02)
    ens = _trained(data)
    s, a = data.states[:16], data.actions[:16]
    s_next, reward, done, penalized = ens.predict(s, a, np.random.default_rng(0))
    assert s_next.shape == s.shape and reward.shape == (16,)
    assert done.dtype == np.bool_ and penalized.dtype == np.bool_
    assert np.all(np.isfinite(s_next)) and np.all(np.isfinite(reward))


def test_blowup_rows_are_penalized_terminals():
    data = _linear_dataset(noise=0.02)
    ens = _trained(data)
    # shrink the guard ranges so every prediction counts as a blow-up
    ens.stats.state_abs_max = np.full(data.state_dim, 1e-9)
    ens.stats.r_range = 1e-9
    _, reward, done, penalized = ens.predict(
        data.states[:8], data.actions[:8], np.random.default_rng(0))
    assert np.all(penalized) and np.all(done)
    np.testing.assert_allclose(reward, -ens.stats.r_range)


def test_termination_rule_applies_to_clean_rows():
    data = _linear_dataset(noise=0.02)
    ens = _trained(data)
    flag_all = lambda s_next: np.ones(len(s_next), dtype=bool)
    _, _, done, penalized = ens.predict(
        data.states[:8], data.actions[:8], np.random.default_rng(0), termination_fn=flag_all)
    assert np.all(done)
    assert not np.all(penalized)


def test_forced_tiny_log_std_makes_prediction_near_deterministic():
    data = _linear_dataset(noise=0.02)
    ens = _trained(data, members=1, elites=1)
    params = ens.members[0]
    # push the raw log-std head far below the clamp so std == exp(-10)
    last = len(ens.spec.dims) - 2
    params.view(f"w{last}")[:, ens.target_dim:] = 0.0
    params.view(f"b{last}")[ens.target_dim:] = -50.0
    draws = np.array([
        ens.predict(data.states[:4], data.actions[:4], np.random.default_rng(s))[0]
        for s in range(6)
    ])
    assert np.max(draws.std(axis=0)) <= 1e-4


def test_constant_value_fn_zeroes_state_head_gradient():
    data = _linear_dataset(noise=0.02)
    ens = _make(data, members=1, elites=1)
    value_fn = lambda states: (np.full(len(states), 3.0), np.zeros_like(states))
    idx = np.arange(16)
    w = np.ones(16)
    loss, grad = ens._value_disc_step(ens.members[0], data, idx, w, value_fn,
                                      np.random.default_rng(0))
    d = ens.target_dim
    last = len(ens.spec.dims) - 2
    # value term vanishes -> only the reward-NLL columns of the final layer move
    assert np.all(grad.view(f"w{last}")[:, 1:d] == 0.0)
    assert np.all(grad.view(f"w{last}")[:, d + 1:] == 0.0)
    assert np.any(grad.view(f"w{last}")[:, 0] != 0.0)


# ---------------------------------------------------------------------------
# checkpointing


def test_save_load_roundtrip_bit_exact(tmp_path):
    data = _linear_dataset(noise=0.02)
    ens = _trained(data)
    ens.save(tmp_path / "ens")
    back = DynamicsEnsemble.load(tmp_path / "ens")
    assert back.elites == ens.elites
    assert back.n_members == ens.n_members
    for pa, pb in zip(ens.members, back.members):
        assert pa.flat.tobytes() == pb.flat.tobytes()
    np.testing.assert_array_equal(back.stats.input_mean, ens.stats.input_mean)
    assert back.stats.r_range == ens.stats.r_range
    # loaded ensembles predict identically
    a = ens.predict(data.states[:5], data.actions[:5], np.random.default_rng(4))
    b = back.predict(data.states[:5], data.actions[:5], np.random.default_rng(4))
    np.testing.assert_array_equal(a[0], b[0])


def test_mean_reward_fn_matches_elite_average():
    data = _linear_dataset(noise=0.02)
    ens = _trained(data)
    fn = ens.mean_reward_fn()
    s, a = data.states[:6], data.actions[:6]
    x = ens._normalized_inputs(s, a)
    acc = np.zeros(6)
    for i in ens.elites:
        acc += nets.mlp_forward(ens.spec, ens.members[i], x)[:, 0]
    expect = acc / len(ens.elites) * ens.stats.target_std[0] + ens.stats.target_mean[0]
    np.testing.assert_allclose(fn(s, a), expect, atol=1e-12)
