"""
Dense arithmetic shared by the model, the losses and the trainers.

Parameters are kept as flat ``{name: ndarray}`` dicts. A small tanh MLP is stored
as ``W0, b0, W1, b1, ...`` with ``W_i`` shaped ``(in, out)``.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from omdalib import errors

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]

DEFAULT_DTYPE = np.float64
PROB_FLOOR = 1e-7


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Params:
    """
    Glorot-uniform weights, zero biases.
    :param sizes: layer widths, e.g. (d_in, hidden, d)
    :param rng: generator derived from the run seed
    """
    if len(sizes) < 2:
        raise errors.ShapeError("an MLP needs at least an input and an output width")
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if fan_in < 1 or fan_out < 1:
            raise errors.ShapeError("layer {} has a zero width: {}x{}".format(i, fan_in, fan_out))
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params["W%d" % i] = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
        params["b%d" % i] = np.zeros(fan_out, dtype=dtype)
    return params


def mlp_layer_count(params: Mapping[str, np.ndarray]) -> int:
    n = 0
    while "W%d" % n in params:
        n += 1
    return n


def mlp_sizes(params: Mapping[str, np.ndarray]) -> List[int]:
    n = mlp_layer_count(params)
    if n == 0:
        raise errors.ShapeError("MLP has no layers")
    sizes = [params["W0"].shape[0]]
    for i in range(n):
        w, b = params["W%d" % i], params["b%d" % i]
        if w.ndim != 2 or w.shape[0] != sizes[-1]:
            raise errors.ShapeError("layer {} weight {} does not chain from width {}".format(i, w.shape, sizes[-1]))
        if b.shape != (w.shape[1],):
            raise errors.ShapeError("layer {} bias {} does not match weight {}".format(i, b.shape, w.shape))
        sizes.append(w.shape[1])
    return sizes


def parameter_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


@dataclass
class MlpCache:
    # inputs[i] is what layer i consumed; for i > 0 it is the tanh output of layer i-1
    inputs: List[np.ndarray]
    squeeze: bool


def mlp_forward(params: Params, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    """Forward pass on a vector or on a batch of row vectors, keeping what the backward pass needs."""
    x = np.asarray(x)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    n = mlp_layer_count(params)
    if n == 0:
        raise errors.ShapeError("MLP has no layers")
    inputs = []
    for i in range(n):
        w, b = params["W%d" % i], params["b%d" % i]
        if h.shape[1] != w.shape[0]:
            raise errors.ShapeError("layer {} expects input width {}, got {}".format(i, w.shape[0], h.shape[1]))
        inputs.append(h)
        h = h @ w + b
        if i < n - 1:
            h = np.tanh(h)
    out = h[0] if squeeze else h
    return out, MlpCache(inputs=inputs, squeeze=squeeze)


def mlp_apply(params: Params, x: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(params, x)
    return out


def mlp_backward(params: Params, cache: MlpCache, grad_out: np.ndarray) -> Tuple[Params, np.ndarray]:
    """
    :return: (gradients keyed like params, gradient w.r.t. the input)
    """
    delta = np.asarray(grad_out)
    if cache.squeeze:
        delta = delta[None, :]
    n = mlp_layer_count(params)
    grads = {}
    for i in reversed(range(n)):
        inp = cache.inputs[i]
        grads["W%d" % i] = inp.T @ delta
        grads["b%d" % i] = delta.sum(axis=0)
        delta = delta @ params["W%d" % i].T
        if i > 0:
            delta = delta * (1.0 - inp * inp)
    return grads, (delta[0] if cache.squeeze else delta)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def clamp_probability(p):
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0 or scores.shape[axis] == 0:
        raise errors.ValidationError("softmax of an empty vector")
    if not np.all(np.isfinite(scores)):
        raise errors.NumericalError("softmax received non-finite scores")
    shifted = scores - scores.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def flatten_groups(groups: Mapping[str, Mapping[str, np.ndarray]]) -> Params:
    return {"{}/{}".format(g, name): arr for g, params in groups.items() for name, arr in params.items()}


def unflatten_groups(flat: Mapping[str, np.ndarray]) -> Dict[str, Params]:
    groups = {}
    for key, arr in flat.items():
        g, name = key.split("/", 1)
        groups.setdefault(g, {})[name] = arr
    return groups


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def to_dict(self) -> dict:
        return {"max_rel_error": self.max_rel_error, "worst_parameter": self.worst_parameter,
                "checked": self.checked, "tol": self.tol, "passed": self.passed}


def grad_check(scalar_fn: Callable[[Params], Tuple[float, Params]], params: Params,
               h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """
    Compare the analytic gradient of ``scalar_fn`` with central differences, coordinate by coordinate.

    :param scalar_fn: params -> (value, grads); grads keyed like params, missing keys mean zero
    :param h: finite-difference step
    :param tol: relative tolerance used for ``report.passed``
    """
    if h <= 0:
        raise errors.ValidationError("finite-difference step must be positive, got {}".format(h))
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    value, analytic = scalar_fn(base)
    if not np.isfinite(value):
        raise errors.NumericalError("function value is not finite at the check point")
    worst, worst_key, checked = 0.0, "", 0
    for key, arr in base.items():
        g = analytic.get(key)
        g = np.zeros_like(arr) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != arr.shape:
            raise errors.ShapeError("gradient for {} has shape {}, parameter has {}".format(key, g.shape, arr.shape))
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            f_plus, _ = scalar_fn(base)
            arr[idx] = orig - h
            f_minus, _ = scalar_fn(base)
            arr[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise errors.NumericalError("non-finite value while perturbing {}{}".format(key, list(idx)))
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(g[idx] - numeric) / max(abs(g[idx]), abs(numeric), 1e-8)
            checked += 1
            if rel > worst or not worst_key:
                worst, worst_key = rel, "{}{}".format(key, list(idx))
    return GradCheckReport(max_rel_error=float(worst), worst_parameter=worst_key, checked=checked, tol=tol)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Params, grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> Tuple[Params, AdamState]:
    """
    One bias-corrected Adam update. Pure: neither ``params`` nor ``state`` is modified.
    A parameter whose gradient is identically zero (or absent) is left untouched, moments included.
    """
    if not lr > 0:
        raise errors.ValidationError("learning rate must be positive, got {}".format(lr))
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        if g.shape != p.shape:
            raise errors.ShapeError("gradient for {} has shape {}, parameter has {}".format(key, g.shape, p.shape))
        if not np.all(np.isfinite(g)):
            raise errors.NumericalError("non-finite gradient for {}".format(key))
        if not np.any(g):
            continue
        mk = state.m.get(key, np.zeros_like(p))
        vk = state.v.get(key, np.zeros_like(p))
        mk = state.beta1 * mk + (1.0 - state.beta1) * g
        vk = state.beta2 * vk + (1.0 - state.beta2) * (g * g)
        m_hat = mk / bc1
        v_hat = vk / bc2
        new_params[key] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m[key], v[key] = mk, vk
    return new_params, AdamState(m=m, v=v, t=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps)


class Adam(object):
    """Owns one AdamState; the trainer holding it is the only writer."""

    def __init__(self, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if not lr > 0:
            raise errors.ValidationError("learning rate must be positive, got {}".format(lr))
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise errors.ValidationError("invalid betas: {}".format(betas))
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
        new_params, self.state = adam_step(params, grads, self.state, self.lr)
        for key, p in new_params.items():
            check_finite(key, p)
        return new_params


def check_finite(name: str, arr: np.ndarray, limit: Optional[float] = None) -> None:
    if not np.all(np.isfinite(arr)):
        raise errors.NumericalError("{} contains non-finite values".format(name))
    if limit is not None and np.any(np.abs(arr) > limit):
        raise errors.NumericalError("{} exceeds magnitude {}".format(name, limit))
