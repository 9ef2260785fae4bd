"""Network plumbing: parameter container, forward/backward, optimizer, losses.

Every analytic gradient in the package ultimately flows through mlp_backward,
so the finite-difference agreement checks here are the foundation the
higher-level loss-gradient checks build on.
"""

import copy
import pickle

import numpy as np
import pytest

from ampl import nets
from ampl.nets import MlpSpec, Params


# ---------------------------------------------------------------------------
# Params container


def _small_layout():
    return (("w0", (3, 4)), ("b0", (4,)), ("w1", (4, 2)), ("b1", (2,)))


def test_params_views_alias_flat_buffer():
    p = Params.zeros(_small_layout())
    p.view("w0")[1, 2] = 7.0
    assert p.flat[1 * 4 + 2] == 7.0
    p.flat[:] = np.arange(p.flat.size, dtype=np.float64)
    assert p.view("b1")[0] == p.flat.size - 2


def test_params_copy_is_independent():
    p = Params.zeros(_small_layout())
    q = p.copy()
    q.flat += 1.0
    assert np.all(p.flat == 0.0)
    assert np.all(q.view("w1") == 1.0)


def test_params_deepcopy_preserves_view_aliasing():
    # regression: a naive deepcopy copies each view separately, severing the
    # aliasing so optimizer steps on `flat` stop reaching the layer views
    p = Params.zeros(_small_layout())
    q = copy.deepcopy(p)
    q.flat += 3.0
    assert np.all(q.view("w0") == 3.0)
    assert np.all(p.flat == 0.0)


def test_params_pickle_roundtrip_preserves_aliasing():
    rng = np.random.default_rng(0)
    p = Params(rng.normal(size=17), (("w0", (3, 4)), ("b0", (5,))))
    q = pickle.loads(pickle.dumps(p))
    assert np.array_equal(q.flat, p.flat)
    q.flat[:] = -1.0
    assert np.all(q.view("w0") == -1.0)


def test_params_save_load_bit_exact(tmp_path):
    for dtype in (np.float64, np.float32):
        rng = np.random.default_rng(3)
        p = Params(rng.normal(size=26).astype(dtype), _small_layout())
        nets.save_params(tmp_path / f"p_{np.dtype(dtype).name}", p)
        q = nets.load_params(tmp_path / f"p_{np.dtype(dtype).name}")
        assert q.dtype == p.dtype
        assert q.layout == p.layout
        assert q.flat.tobytes() == p.flat.tobytes()


def test_params_astype_roundtrip_layout():
    p = Params.zeros(_small_layout(), dtype=np.float64)
    q = p.astype(np.float32)
    assert q.dtype == np.float32
    assert q.view("w1").shape == (4, 2)


# ---------------------------------------------------------------------------
# init


def test_init_mlp_fan_in_bounds():
    spec = MlpSpec(in_dim=9, hidden=(16,), out_dim=4)
    params = nets.init_mlp(spec, np.random.default_rng(0))
    assert np.max(np.abs(params.view("w0"))) <= 1.0 / 3.0
    assert np.max(np.abs(params.view("w1"))) <= 0.25
    assert np.max(np.abs(params.view("b0"))) <= 1.0 / 3.0


def test_init_mlp_final_uniform_override():
    spec = MlpSpec(in_dim=4, hidden=(8,), out_dim=1, output="softplus_power", out_arg=0.5)
    params = nets.init_mlp(spec, np.random.default_rng(1), final_uniform=1e-3)
    assert np.max(np.abs(params.view("w1"))) <= 1e-3
    assert np.all(params.view("b1") == 0.0)


def test_init_mlp_deterministic():
    spec = MlpSpec(in_dim=3, hidden=(5, 5), out_dim=2)
    a = nets.init_mlp(spec, np.random.default_rng(42))
    b = nets.init_mlp(spec, np.random.default_rng(42))
    assert a.flat.tobytes() == b.flat.tobytes()


# ---------------------------------------------------------------------------
# forward pass semantics


def test_forward_matches_manual_reference():
    spec = MlpSpec(in_dim=2, hidden=(3,), out_dim=2)
    params = nets.init_mlp(spec, np.random.default_rng(5))
    x = np.random.default_rng(6).normal(size=(7, 2))
    u0 = x @ params.view("w0") + params.view("b0")
    h = np.where(u0 > 0, u0, nets.LEAKY_SLOPE * u0)
    ref = h @ params.view("w1") + params.view("b1")
    np.testing.assert_allclose(nets.mlp_forward(spec, params, x), ref, rtol=0, atol=1e-14)


@pytest.mark.parametrize(
    "output,out_arg,check",
    [
        ("tanh_scaled", 2.5, lambda y: np.all(np.abs(y) < 2.5)),
        ("sigmoid", None, lambda y: np.all((y > 0) & (y < 1))),
        ("softplus_power", 0.5, lambda y: np.all(y > 0)),
    ],
)
def test_output_transform_ranges(output, out_arg, check):
    spec = MlpSpec(in_dim=3, hidden=(8,), out_dim=2, output=output, out_arg=out_arg)
    params = nets.init_mlp(spec, np.random.default_rng(7))
    y = nets.mlp_forward(spec, params, np.random.default_rng(8).normal(size=(64, 3), scale=5.0))
    assert check(y)


def test_softplus_power_strictly_positive_for_very_negative_logits():
    # the positivity floor must hold even when the pre-activation saturates low
    spec = MlpSpec(in_dim=1, hidden=(2,), out_dim=1, output="softplus_power", out_arg=0.5)
    params = Params.zeros(spec.layout())
    params.view("b1")[...] = -1e4
    y = nets.mlp_forward(spec, params, np.zeros((1, 1)))
    assert y > 0.0 and np.isfinite(y)


def test_cached_forward_agrees_with_plain_forward():
    spec = MlpSpec(in_dim=4, hidden=(6, 6), out_dim=3, output="tanh_scaled", out_arg=1.0)
    params = nets.init_mlp(spec, np.random.default_rng(9))
    x = np.random.default_rng(10).normal(size=(11, 4))
    y_plain = nets.mlp_forward(spec, params, x)
    y_cached, _ = nets.mlp_forward_cached(spec, params, x)
    np.testing.assert_array_equal(y_plain, y_cached)


def test_softplus_stable_and_correct():
    x = np.array([-745.0, -30.0, -1.0, 0.0, 1.0, 30.0, 745.0])
    y = nets.softplus(x)
    assert np.all(np.isfinite(y))
    mid = x[1:-1]
    np.testing.assert_allclose(nets.softplus(mid), np.log1p(np.exp(mid)), rtol=1e-12)
    assert y[-1] == pytest.approx(745.0)


# ---------------------------------------------------------------------------
# backward pass vs central differences


GRAD_TOL = 1e-4  # shared tolerance for all finite-difference gradient checks


def _fd_check(spec, seed, reduce_fn=None, scale=1.0):
    """Finite-difference check of mlp_backward for one spec/seed.

    reduce_fn maps network output to a scalar loss (defaults to a fixed
    random linear functional so every output coordinate matters).
    """
    rng = np.random.default_rng(seed)
    params = nets.init_mlp(spec, rng)
    params.flat *= scale
    x = rng.normal(size=(5, spec.in_dim))
    w = rng.normal(size=(5, spec.out_dim))
    if reduce_fn is None:
        reduce_fn = lambda y: float(np.sum(w * y))
        reduce_grad = lambda y: w
    else:
        reduce_grad = None

    def loss(p):
        return reduce_fn(nets.mlp_forward(spec, p, x))

    y, cache = nets.mlp_forward_cached(spec, params, x)
    dy = reduce_grad(y)
    grad, _ = nets.mlp_backward(spec, params, cache, dy)
    numeric = nets.finite_diff_gradient(loss, params)
    return nets.scaled_gradient_error(grad.flat, numeric)


@pytest.mark.parametrize("output,out_arg", [
    ("none", None),
    ("tanh_scaled", 1.5),
    ("sigmoid", None),
    ("softplus_power", 0.5),
])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_param_gradients_all_output_transforms(output, out_arg, seed):
    spec = MlpSpec(in_dim=3, hidden=(6, 5), out_dim=2, output=output, out_arg=out_arg)
    assert _fd_check(spec, seed) < GRAD_TOL


@pytest.mark.parametrize("activation", ["leaky_relu", "tanh", "sigmoid"])
def test_param_gradients_all_activations(activation):
    spec = MlpSpec(in_dim=4, hidden=(7,), out_dim=3, activation=activation)
    assert _fd_check(spec, seed=11) < GRAD_TOL


def test_input_gradient_matches_finite_differences():
    spec = MlpSpec(in_dim=3, hidden=(8, 6), out_dim=2, output="tanh_scaled", out_arg=1.0)
    rng = np.random.default_rng(13)
    params = nets.init_mlp(spec, rng)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 2))
    _, cache = nets.mlp_forward_cached(spec, params, x)
    _, dx = nets.mlp_backward(spec, params, cache, w, need_input_grad=True, need_param_grad=False)

    numeric = np.zeros_like(x)
    step = 1e-6
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            up, down = x.copy(), x.copy()
            up[i, j] += step
            down[i, j] -= step
            numeric[i, j] = (
                np.sum(w * nets.mlp_forward(spec, params, up))
                - np.sum(w * nets.mlp_forward(spec, params, down))
            ) / (2 * step)
    assert nets.scaled_gradient_error(dx.ravel(), numeric.ravel()) < GRAD_TOL


def test_backward_skips_param_grad_when_not_needed():
    spec = MlpSpec(in_dim=2, hidden=(4,), out_dim=1)
    params = nets.init_mlp(spec, np.random.default_rng(14))
    x = np.ones((3, 2))
    y, cache = nets.mlp_forward_cached(spec, params, x)
    grad, dx = nets.mlp_backward(spec, params, cache, np.ones_like(y),
                                 need_input_grad=True, need_param_grad=False)
    assert grad is None
    assert dx.shape == x.shape


# ---------------------------------------------------------------------------
# optimizer / update helpers


def test_adam_matches_reference_implementation():
    layout = (("w0", (3, 2)),)
    rng = np.random.default_rng(21)
    params = Params(rng.normal(size=6), layout)
    ref = params.flat.copy()
    opt = nets.Adam(params, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8)

    m = np.zeros(6)
    v = np.zeros(6)
    for t in range(1, 6):
        g = rng.normal(size=6)
        opt.step(params, g)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9**t)
        v_hat = v / (1 - 0.999**t)
        ref -= 1e-2 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(params.flat, ref, rtol=0, atol=1e-14)


def test_adam_reduces_quadratic_loss():
    layout = (("w0", (8,)),)
    params = Params(np.full(8, 5.0), layout)
    opt = nets.Adam(params, lr=0.1)
    for _ in range(500):
        opt.step(params, 2.0 * params.flat)
    assert np.max(np.abs(params.flat)) < 1e-2


def test_clip_grad_norm_scales_and_reports():
    g = np.array([3.0, 4.0])
    norm = nets.clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.linalg.norm(g) == pytest.approx(1.0, rel=1e-12)

    g2 = np.array([0.3, 0.4])
    norm2 = nets.clip_grad_norm(g2, 1.0)
    assert norm2 == pytest.approx(0.5)
    np.testing.assert_array_equal(g2, [0.3, 0.4])


def test_soft_update_convex_combination():
    layout = (("w0", (4,)),)
    target = Params(np.zeros(4), layout)
    source = Params(np.full(4, 10.0), layout)
    nets.soft_update(target, source, beta=0.25)
    np.testing.assert_allclose(target.flat, 2.5)
    nets.soft_update(target, source, beta=1.0)
    np.testing.assert_allclose(target.flat, 10.0)


# ---------------------------------------------------------------------------
# losses and their hand gradients


def test_huber_values_quadratic_core_linear_tails():
    r = np.array([-3.0, -1.0, -0.25, 0.0, 0.25, 1.0, 3.0])
    v = nets.huber(r, delta=1.0)
    np.testing.assert_allclose(v[3], 0.0)
    np.testing.assert_allclose(v[2], 0.5 * 0.25**2)
    np.testing.assert_allclose(v[0], 1.0 * (3.0 - 0.5))
    assert np.all(v == v[::-1])  # symmetric


def test_huber_grad_matches_finite_differences():
    rng = np.random.default_rng(31)
    r = rng.normal(size=64, scale=2.0)
    step = 1e-7
    numeric = (nets.huber(r + step, 1.0) - nets.huber(r - step, 1.0)) / (2 * step)
    assert nets.scaled_gradient_error(nets.huber_grad(r, 1.0), numeric) < GRAD_TOL


def test_gaussian_nll_matches_log_density():
    rng = np.random.default_rng(32)
    mean = rng.normal(size=(9, 3))
    log_std = rng.normal(size=(9, 3), scale=0.3)
    target = rng.normal(size=(9, 3))
    std = np.exp(log_std)
    ref = -np.sum(
        -0.5 * ((target - mean) / std) ** 2 - np.log(std) - 0.5 * np.log(2 * np.pi),
        axis=-1,
    )
    np.testing.assert_allclose(nets.gaussian_nll(mean, log_std, target), ref, rtol=1e-12)


def test_gaussian_nll_grads_match_finite_differences():
    rng = np.random.default_rng(33)
    mean = rng.normal(size=(6, 2))
    log_std = rng.normal(size=(6, 2), scale=0.2)
    target = rng.normal(size=(6, 2))
    d_mean, d_log_std = nets.gaussian_nll_grads(mean, log_std, target)

    step = 1e-6
    num_mean = (
        nets.gaussian_nll(mean + step, log_std, target)
        - nets.gaussian_nll(mean - step, log_std, target)
    ) / (2 * step)
    num_log_std = (
        nets.gaussian_nll(mean, log_std + step, target)
        - nets.gaussian_nll(mean, log_std - step, target)
    ) / (2 * step)
    # nll sums over dims, so the per-row FD derivative w.r.t. a uniform shift
    # equals the row-sum of elementwise grads
    assert nets.scaled_gradient_error(d_mean.sum(axis=1), num_mean) < GRAD_TOL
    assert nets.scaled_gradient_error(d_log_std.sum(axis=1), num_log_std) < GRAD_TOL


def test_relative_and_scaled_gradient_error_basics():
    a = np.array([1.0, 2.0])
    assert nets.relative_gradient_error(a, a) == 0.0
    assert nets.relative_gradient_error(a, a * 1.001) == pytest.approx(1e-3, rel=1e-2)
    # tiny coordinates do not dominate the scaled variant
    a = np.array([100.0, 1e-9])
    b = np.array([100.0, 5e-9])
    assert nets.scaled_gradient_error(a, b) < 1e-4
    assert nets.relative_gradient_error(a, b) > 0.1
