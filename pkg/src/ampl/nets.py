"""Minimal differentiable MLP stack on numpy.

Everything downstream (dynamics ensemble, importance-weight net, actor,
critics, discriminator) is a plain fully-connected network built from the
pieces here: a flat parameter vector with named layer views, a cached forward
pass, a hand-derived layer-wise backward pass, Adam, and a few loss helpers.
Gradients are validated against central finite differences in the test suite;
`finite_diff_gradient` is the reference oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.01
LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0

ACTIVATIONS = ("leaky_relu", "tanh", "sigmoid", "linear")
OUTPUT_TRANSFORMS = ("none", "tanh_scaled", "sigmoid", "softplus_power")


# ---------------------------------------------------------------------------
# parameter container


class Params:
    """Flat float vector partitioned into named (reshaped) layer views.

    The flat buffer is the single source of truth; `view()` returns numpy
    views into it, so elementwise updates (Adam, soft updates) and per-layer
    matmuls share storage.
    """

    __slots__ = ("flat", "layout", "_views")

    _layout_cache: dict = {}

    @classmethod
    def _spans(cls, layout):
        # (normalized layout, total size, [(name, shape, start, stop)])
        key = tuple((name, tuple(shape)) for name, shape in layout)
        hit = cls._layout_cache.get(key)
        if hit is None:
            spans = []
            off = 0
            for name, shape in key:
                n = 1
                for d in shape:
                    n *= int(d)
                spans.append((name, shape, off, off + n))
                off += n
            hit = (key, off, tuple(spans))
            cls._layout_cache[key] = hit
        return hit

    def __init__(self, flat: np.ndarray, layout: tuple):
        key, total, spans = Params._spans(layout)
        assert flat.ndim == 1 and flat.size == total, (flat.shape, total)
        self.flat = flat
        self.layout = key
        self._views = {name: flat[a:b].reshape(shape) for name, shape, a, b in spans}

    @classmethod
    def zeros(cls, layout, dtype=np.float64) -> "Params":
        total = cls._spans(layout)[1]
        return cls(np.zeros(total, dtype=dtype), layout)

    @classmethod
    def empty(cls, layout, dtype=np.float64) -> "Params":
        total = cls._spans(layout)[1]
        return cls(np.empty(total, dtype=dtype), layout)

    @property
    def dtype(self):
        return self.flat.dtype

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    def copy(self) -> "Params":
        return Params(self.flat.copy(), self.layout)

    def __deepcopy__(self, memo) -> "Params":
        # naive deepcopy would sever the view aliasing into `flat`
        return Params(self.flat.copy(), self.layout)

    def __reduce__(self):
        return (Params, (self.flat.copy(), self.layout))

    def astype(self, dtype) -> "Params":
        return Params(self.flat.astype(dtype), self.layout)

    def manifest(self) -> dict:
        return {
            "dtype": str(self.flat.dtype),
            "layout": [[name, list(shape)] for name, shape in self.layout],
        }

    def tobytes(self) -> bytes:
        return self.flat.tobytes()

    @classmethod
    def frombytes(cls, raw: bytes, manifest: dict) -> "Params":
        flat = np.frombuffer(raw, dtype=np.dtype(manifest["dtype"])).copy()
        layout = tuple((name, tuple(shape)) for name, shape in manifest["layout"])
        return cls(flat, layout)


def save_params(path: str | Path, params: Params) -> None:
    """Write `<path>.bin` (raw little-endian buffer) + `<path>.json` manifest."""
    path = Path(path)
    path.with_suffix(".bin").write_bytes(params.tobytes())
    path.with_suffix(".json").write_text(json.dumps(params.manifest()) + "\n")


def load_params(path: str | Path) -> Params:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    return Params.frombytes(path.with_suffix(".bin").read_bytes(), manifest)


# ---------------------------------------------------------------------------
# MLP spec / init / forward / backward


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one fully-connected stack.

    output transforms:
      none           -- identity
      tanh_scaled    -- out_arg * tanh(u)   (bounded actions)
      sigmoid        -- logistic            (discriminator probability)
      softplus_power -- (softplus(u - eps) + eps) ** out_arg, strictly positive
    """

    in_dim: int
    hidden: tuple
    out_dim: int
    activation: str = "leaky_relu"
    output: str = "none"
    out_arg: float | None = None

    def __post_init__(self):
        assert self.activation in ACTIVATIONS, self.activation
        assert self.output in OUTPUT_TRANSFORMS, self.output
        if self.output in ("tanh_scaled", "softplus_power"):
            assert self.out_arg is not None, f"{self.output} needs out_arg"

    @property
    def dims(self) -> tuple:
        return (self.in_dim, *self.hidden, self.out_dim)

    def layout(self) -> tuple:
        out = []
        dims = self.dims
        for i in range(len(dims) - 1):
            out.append((f"w{i}", (dims[i], dims[i + 1])))
            out.append((f"b{i}", (dims[i + 1],)))
        return tuple(out)


def init_mlp(
    spec: MlpSpec,
    rng: np.random.Generator,
    dtype=np.float64,
    final_uniform: float | None = None,
) -> Params:
    """Fan-in uniform init; `final_uniform=v` overrides the last layer with
    U(-v, v) weights and zero bias (used by the importance-weight head)."""
    params = Params.zeros(spec.layout(), dtype=dtype)
    dims = spec.dims
    n_layers = len(dims) - 1
    for i in range(n_layers):
        bound = 1.0 / np.sqrt(dims[i])
        if final_uniform is not None and i == n_layers - 1:
            w = rng.uniform(-final_uniform, final_uniform, size=(dims[i], dims[i + 1]))
            b = np.zeros(dims[i + 1])
        else:
            w = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
            b = rng.uniform(-bound, bound, size=(dims[i + 1],))
        params.view(f"w{i}")[...] = w
        params.view(f"b{i}")[...] = b
    return params


def softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _activate(u: np.ndarray, kind: str) -> np.ndarray:
    if kind == "leaky_relu":
        # in-place: u is always a fresh pre-activation buffer at call sites
        return np.maximum(u, LEAKY_SLOPE * u, out=u)
    if kind == "tanh":
        return np.tanh(u)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-u))
    return u


def _activation_grad(h: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the activation value
    if kind == "leaky_relu":
        # {1, slope} built from the sign mask; ~10x faster than np.where and
        # exact: positives get 1.0 + slope*0, negatives 0.0 + slope*1
        f = (h > 0).astype(h.dtype)
        g = h.dtype.type(1.0) - f
        g *= h.dtype.type(LEAKY_SLOPE)
        f += g
        return f
    if kind == "tanh":
        return 1.0 - h * h
    if kind == "sigmoid":
        return h * (1.0 - h)
    return np.ones_like(h)


def _transform(u: np.ndarray, spec: MlpSpec) -> np.ndarray:
    if spec.output == "none":
        return u
    if spec.output == "tanh_scaled":
        return spec.out_arg * np.tanh(u)
    if spec.output == "sigmoid":
        return 1.0 / (1.0 + np.exp(-u))
    # softplus_power
    eps = 1e-8
    return (softplus(u - eps) + eps) ** spec.out_arg


def _transform_grad(u: np.ndarray, y: np.ndarray, spec: MlpSpec) -> np.ndarray:
    if spec.output == "none":
        return np.ones_like(u)
    if spec.output == "tanh_scaled":
        t = y / spec.out_arg
        return spec.out_arg * (1.0 - t * t)
    if spec.output == "sigmoid":
        return y * (1.0 - y)
    eps = 1e-8
    sp = softplus(u - eps) + eps
    sig = 1.0 / (1.0 + np.exp(-(u - eps)))
    return spec.out_arg * sp ** (spec.out_arg - 1.0) * sig


def _affine(h: np.ndarray, params: Params, i: int) -> np.ndarray:
    u = h @ params.view(f"w{i}")
    u += params.view(f"b{i}")
    return u


def mlp_forward(spec: MlpSpec, params: Params, x: np.ndarray) -> np.ndarray:
    h = x
    n_layers = len(spec.dims) - 1
    for i in range(n_layers - 1):
        h = _activate(_affine(h, params, i), spec.activation)
    u = _affine(h, params, n_layers - 1)
    return _transform(u, spec)


def mlp_forward_cached(spec: MlpSpec, params: Params, x: np.ndarray):
    """Forward pass keeping what backward needs: (y, cache)."""
    hs = [x]
    h = x
    n_layers = len(spec.dims) - 1
    for i in range(n_layers - 1):
        h = _activate(_affine(h, params, i), spec.activation)
        hs.append(h)
    u = _affine(h, params, n_layers - 1)
    y = _transform(u, spec)
    return y, (hs, u, y)


def mlp_backward(
    spec: MlpSpec,
    params: Params,
    cache,
    dy: np.ndarray,
    need_input_grad: bool = False,
    need_param_grad: bool = True,
):
    """Backprop `dy` through a cached forward pass.

    Returns (grad, dx): `grad` is a Params-shaped gradient (or None), `dx` the
    gradient w.r.t. the input batch (or None).
    """
    hs, u, y = cache
    n_layers = len(spec.dims) - 1
    grad = Params.empty(spec.layout(), dtype=params.dtype) if need_param_grad else None

    # every grad view below is fully overwritten, so uninitialized is fine
    delta = dy if spec.output == "none" else dy * _transform_grad(u, y, spec)
    for i in range(n_layers - 1, -1, -1):
        if need_param_grad:
            np.matmul(hs[i].T, delta, out=grad.view(f"w{i}"))
            np.add.reduce(delta, axis=0, out=grad.view(f"b{i}"))
        if i == 0 and not need_input_grad:
            return grad, None
        delta = delta @ params.view(f"w{i}").T
        if i > 0:
            np.multiply(delta, _activation_grad(hs[i], spec.activation), out=delta)
    return grad, delta


# ---------------------------------------------------------------------------
# optimizer / update helpers


class Adam:
    """Adam on a flat parameter buffer (in-place steps)."""

    def __init__(self, params: Params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros_like(params.flat)
        self.v = np.zeros_like(params.flat)

    def step(self, params: Params, grad_flat: np.ndarray) -> None:
        assert grad_flat.shape == params.flat.shape
        self.t += 1
        self.m += (1.0 - self.beta1) * (grad_flat - self.m)
        self.v += (1.0 - self.beta2) * (grad_flat * grad_flat - self.v)
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params.flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grad_flat: np.ndarray, max_norm: float):
    """Scale `grad_flat` in place so its global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    norm = float(np.sqrt(np.sum(grad_flat.astype(np.float64) ** 2)))
    if norm > max_norm:
        grad_flat *= grad_flat.dtype.type(max_norm / norm)
    return norm


def soft_update(target: Params, source: Params, beta: float) -> None:
    """target <- beta * source + (1 - beta) * target, in place."""
    target.flat += beta * (source.flat - target.flat)


# ---------------------------------------------------------------------------
# losses


def huber(residual: np.ndarray, delta: float) -> np.ndarray:
    """Elementwise Huber value: quadratic core, linear tails."""
    a = np.abs(residual)
    return np.where(a <= delta, 0.5 * residual * residual, delta * (a - 0.5 * delta))


def huber_grad(residual: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(residual, -delta, delta)


def gaussian_nll(mean: np.ndarray, log_std: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-row negative log density of a diagonal Gaussian (sum over dims)."""
    z = (target - mean) / np.exp(log_std)
    per_dim = 0.5 * z * z + log_std + 0.5 * np.log(2.0 * np.pi)
    return per_dim.sum(axis=-1)


def gaussian_nll_grads(mean: np.ndarray, log_std: np.ndarray, target: np.ndarray):
    """(d nll / d mean, d nll / d log_std), elementwise."""
    inv_var = np.exp(-2.0 * log_std)
    d_mean = (mean - target) * inv_var
    d_log_std = 1.0 - (target - mean) ** 2 * inv_var
    return d_mean, d_log_std


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_gradient(loss_fn, params: Params, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of `loss_fn(params)` w.r.t. every entry.

    O(2 * n_params) loss evaluations; intended for downsized networks in tests
    and as the acceptance oracle for all analytic gradients.
    """
    flat = params.flat
    grad = np.zeros(flat.size, dtype=np.float64)
    probe = Params(flat.copy(), params.layout)
    for i in range(flat.size):
        orig = probe.flat[i]
        probe.flat[i] = orig + step
        up = float(loss_fn(probe))
        probe.flat[i] = orig - step
        down = float(loss_fn(probe))
        probe.flat[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(1e-8, |a_i|, |n_i|), the check used in tests."""
    denom = np.maximum(1e-8, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def scaled_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Like relative_gradient_error but with the floor tied to the gradient's
    own scale (1e-6 * max(1, ||analytic||_inf)); coordinates that are many
    orders of magnitude below the dominant ones otherwise drown the comparison
    in finite-difference roundoff."""
    floor = 1e-6 * max(1.0, float(np.max(np.abs(analytic))))
    denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
