"""Dense ReLU networks with hand-written backprop, Adam, and a gradient checker.

Inputs may be a single vector ``(d,)`` or a batch ``(B, d)``; weight
matrices are stored ``(out, in)`` so a layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ValidationError

try:  # optional: a fused single-pass Adam kernel, about twice as fast
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

ACTIVATIONS = ("relu", "identity")
WEIGHT_FORMAT = "meshrl-densenet/1"


@dataclass
class DenseNet:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    output_activation: str = "identity"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "DenseNet":
        return DenseNet(list(self.layer_dims), [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.activation, self.output_activation)


def _check_dims(layer_dims) -> list[int]:
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValidationError(f"layer_dims needs >= 2 positive entries, got {list(layer_dims)}")
    return dims


def net_init(layer_dims, seed: int, output_activation: str = "identity") -> DenseNet:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    dims = _check_dims(layer_dims)
    if output_activation not in ACTIVATIONS:
        raise ValidationError(f"unknown activation {output_activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(dims, weights, biases, "relu", output_activation)


@dataclass
class Cache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activation of each layer
    single: bool


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else z


def forward(net: DenseNet, x) -> tuple[np.ndarray, Cache]:
    a = np.asarray(x, dtype=float)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != net.layer_dims[0]:
        raise ValidationError(f"input has shape {np.shape(x)}, net expects width {net.layer_dims[0]}")
    inputs, pre = [], []
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        a = _activate(z, net.output_activation if i == last else net.activation)
    return (a[0] if single else a), Cache(inputs, pre, single)


def backward(net: DenseNet, cache: Cache, d_out) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Reverse-mode gradients for the loss whose output gradient is ``d_out``.

    Returns ``(dW, db, d_input)``; batch gradients are summed over rows.
    """
    g = np.asarray(d_out, dtype=float)
    if cache.single:
        g = g[None, :]
    if g.shape != cache.pre[-1].shape:
        raise ValidationError(f"output gradient shape {np.shape(d_out)} does not match output {cache.pre[-1].shape}")
    dws: list[np.ndarray] = [None] * net.n_layers  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * net.n_layers  # type: ignore[list-item]
    last = net.n_layers - 1
    for i in range(last, -1, -1):
        kind = net.output_activation if i == last else net.activation
        if kind == "relu":
            g = g * (cache.pre[i] > 0)
        dws[i] = g.T @ cache.inputs[i]
        dbs[i] = g.sum(axis=0)
        g = g @ net.weights[i]
    d_in = g[0] if cache.single else g
    return dws, dbs, d_in


def mse(pred, target) -> tuple[float, np.ndarray]:
    p = np.asarray(pred, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ValidationError(f"pred shape {p.shape} != target shape {t.shape}")
    diff = p - t
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0


def adam_init(net: DenseNet, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    if not learning_rate > 0:
        raise ValidationError(f"learning_rate must be > 0, got {learning_rate}")
    params = net.params()
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                     learning_rate, beta1, beta2, eps)


def _adam_numpy(p, g, m, v, tmp, b1, b2, step, inv_root_c2, eps):
    m *= b1
    np.multiply(g, 1.0 - b1, out=tmp)
    m += tmp
    v *= b2
    np.multiply(g, g, out=tmp)
    tmp *= 1.0 - b2
    v += tmp
    # tmp <- step * m_hat / (sqrt(v_hat) + eps)
    np.sqrt(v, out=tmp)
    tmp *= inv_root_c2
    tmp += eps
    np.divide(m, tmp, out=tmp)
    tmp *= step
    p -= tmp


def _adam_kernel_py(p, g, m, v, b1, b2, step, inv_root_c2, eps):
    # same operation order as _adam_numpy, so both paths round identically
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + gi * gi * (1.0 - b2)
        m[i] = mi
        v[i] = vi
        p[i] -= (mi / (math.sqrt(vi) * inv_root_c2 + eps)) * step


def _all_finite_py(a):
    for x in a:
        if not math.isfinite(x):
            return False
    return True


if numba is not None:
    _adam_kernel = numba.njit(cache=True)(_adam_kernel_py)
    _finite_kernel = numba.njit(cache=True)(_all_finite_py)
else:  # pragma: no cover
    _adam_kernel = _finite_kernel = None


def _all_finite(a: np.ndarray) -> bool:
    if _finite_kernel is not None:
        return bool(_finite_kernel(np.ascontiguousarray(a).reshape(-1)))
    return bool(np.all(np.isfinite(a)))


def adam_step(net: DenseNet, grads, state: AdamState) -> tuple[DenseNet, AdamState]:
    """One bias-corrected Adam update, in place.

    ``grads`` is ``(dW, db)`` as returned by :func:`backward` (a trailing
    input gradient is ignored).
    """
    dws, dbs = grads[0], grads[1]
    flat = [g for pair in zip(dws, dbs) for g in pair]
    params = net.params()
    if len(flat) != len(params):
        raise ValidationError("gradient list does not match network layers")
    for k, (p, g) in enumerate(zip(params, flat)):
        if g.shape != p.shape:
            raise ValidationError(f"layer {k // 2}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not _all_finite(g):
            raise NumericError(f"non-finite gradient in layer {k // 2} ({'weight' if k % 2 == 0 else 'bias'})")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = state.learning_rate / (1.0 - b1**state.t)
    inv_root_c2 = 1.0 / math.sqrt(1.0 - b2**state.t)
    for p, g, m, v in zip(params, flat, state.m, state.v):
        if _adam_kernel is not None and p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous:
            _adam_kernel(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
                         b1, b2, step, inv_root_c2, state.eps)
        else:
            _adam_numpy(p, g, m, v, np.empty_like(p), b1, b2, step, inv_root_c2, state.eps)
    return net, state


def numerical_gradient(net: DenseNet, x, target, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the MSE loss w.r.t. every parameter."""
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            lp = mse(forward(net, x)[0], target)[0]
            flat_p[i] = orig - h
            lm = mse(forward(net, x)[0], target)[0]
            flat_p[i] = orig
            flat_g[i] = (lp - lm) / (2 * h)
        out.append(g)
    return out


def analytic_gradient(net: DenseNet, x, target) -> list[np.ndarray]:
    y, cache = forward(net, x)
    _, d = mse(y, target)
    dws, dbs, _ = backward(net, cache, d)
    return [g for pair in zip(dws, dbs) for g in pair]


def grad_check(net: DenseNet, x, target, analytic: list[np.ndarray] | None = None,
               h: float = 1e-5, max_params: int = 10_000) -> float:
    """Max relative error between backprop and central differences.

    ``analytic`` overrides the backprop gradients (flat weight/bias list),
    which is how the checker itself is tested.
    """
    if net.n_params() > max_params:
        raise ValidationError(f"grad_check limited to {max_params} parameters, net has {net.n_params()}")
    a_list = analytic if analytic is not None else analytic_gradient(net, x, target)
    n_list = numerical_gradient(net, x, target, h)
    worst = 0.0
    for a, n in zip(a_list, n_list):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def net_to_dict(net: DenseNet) -> dict:
    return {
        "format": WEIGHT_FORMAT,
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "output_activation": net.output_activation,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def net_from_dict(d: dict) -> DenseNet:
    try:
        if d.get("format") != WEIGHT_FORMAT:
            raise FormatError(f"unsupported weight format {d.get('format')!r}")
        dims = _check_dims(d["layer_dims"])
        weights = [np.array(w, dtype=float) for w in d["weights"]]
        biases = [np.array(b, dtype=float) for b in d["biases"]]
        activation = d["activation"]
        output_activation = d.get("output_activation", "identity")
    except KeyError as e:
        raise FormatError(f"weight file missing {e.args[0]!r}") from None
    except (TypeError, ValueError, ValidationError) as e:
        raise FormatError(f"weight file malformed: {e}") from None
    if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
        raise FormatError("weight file layer count does not match layer_dims")
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
            raise FormatError(f"layer {i}: parameter shapes {w.shape}/{b.shape} do not match layer_dims")
    if activation not in ACTIVATIONS or output_activation not in ACTIVATIONS:
        raise FormatError("unknown activation tag")
    return DenseNet(dims, weights, biases, activation, output_activation)


def save_net(net: DenseNet, path, extra: dict | None = None) -> None:
    doc = net_to_dict(net)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not a valid weight file ({e})") from None
