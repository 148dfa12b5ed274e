"""Dense numeric kernel: affine layers, activations, losses, optimizers,
seeded random streams and a finite-difference gradient checker.

Arrays are plain numpy arrays. Batched inputs are 2-D with one sample per
row; single vectors are accepted wherever a batch is.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

PROB_EPS = 1e-7
ACTIVATIONS = ("sigmoid", "tanh", "relu", "identity")


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# random streams


class RngStream:
    """Named, splittable random stream.

    A stream is identified by a root seed plus a path of names; the same
    (seed, path) always yields the same sequence, and splitting off a child
    never advances the parent.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        key = tuple(zlib.crc32(p.encode("utf-8")) for p in self.path)
        seq = np.random.SeedSequence(self.seed, spawn_key=key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def split(self, name: str) -> "RngStream":
        return RngStream(self.seed, self.path + (name,))

    @property
    def cursor(self) -> dict:
        return self.generator.bit_generator.state

    def restore(self, cursor: dict) -> None:
        self.generator.bit_generator.state = cursor

    def __getattr__(self, name):
        # random(), integers(), permutation(), ... come from the generator
        return getattr(self.generator, name)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def gaussian_sample(rng, dim, dtype=np.float64) -> np.ndarray:
    """Standard-normal draws of shape ``dim`` (an int or a shape tuple)."""
    shape = (dim,) if np.isscalar(dim) else tuple(dim)
    if not shape or any(int(s) < 1 for s in shape):
        raise ValueError(f"gaussian_sample needs positive dimensions, got {dim!r}")
    return as_generator(rng).standard_normal(shape).astype(dtype, copy=False)


# --------------------------------------------------------------------------
# layers


@dataclass
class AffineLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def affine_forward(layer: AffineLayer, x: np.ndarray):
    """Return ``(weight @ x + bias, cache)`` for a vector or a row batch."""
    x = np.asarray(x)
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(
            f"input shape {x.shape} incompatible with weight shape {layer.weight.shape}"
        )
    y = x @ layer.weight.T + layer.bias
    return y, x


def affine_backward(layer: AffineLayer, cache: np.ndarray, dy: np.ndarray):
    """Return ``(dx, dweight, dbias)`` given the cached input and upstream grad."""
    x = cache
    dx = dy @ layer.weight
    if x.ndim == 1:
        dw = np.outer(dy, x)
        db = dy.copy()
    else:
        dw = dy.T @ x
        db = dy.sum(axis=0)
    return dx, dw, db


def activation_apply(kind: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float) if not isinstance(x, np.ndarray) else x
    if kind == "sigmoid":
        # split by sign to avoid overflow in exp
        out = np.empty_like(x, dtype=np.result_type(x, np.float32))
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through an activation, expressed via its output ``y``."""
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    if kind == "tanh":
        return dy * (1.0 - y * y)
    if kind == "relu":
        return dy * (y > 0)
    if kind == "identity":
        return dy
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# losses


def bce_loss(target: np.ndarray, pred: np.ndarray, eps: float = PROB_EPS) -> float:
    """Summed binary cross entropy; predictions are clamped to [eps, 1 - eps]."""
    target = np.asarray(target, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if target.shape != pred.shape:
        raise ShapeError(f"target shape {target.shape} != prediction shape {pred.shape}")
    p = np.clip(pred, eps, 1.0 - eps)
    return float(-(target * np.log(p) + (1.0 - target) * np.log1p(-p)).sum())


def bce_sigmoid_grad(target: np.ndarray, prob: np.ndarray, eps: float = PROB_EPS) -> np.ndarray:
    """d bce_loss / d logit for ``prob = sigmoid(logit)``.

    Zero wherever the clamp is active, matching the clamped loss exactly.
    """
    inside = (prob > eps) & (prob < 1.0 - eps)
    return (prob - target) * inside


def log_clamped(p: np.ndarray, eps: float = PROB_EPS) -> np.ndarray:
    return np.log(np.clip(p, eps, 1.0 - eps))


def dlog_clamped(p: np.ndarray, eps: float = PROB_EPS) -> np.ndarray:
    """Derivative of ``log_clamped`` with respect to ``p``."""
    return ((p > eps) & (p < 1.0 - eps)) / np.clip(p, eps, 1.0 - eps)


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


def make_optimizer(kind: str, learning_rate: float, params: Mapping[str, np.ndarray], **kw) -> OptimizerState:
    state = OptimizerState(kind, learning_rate, **kw)
    if kind == "adam":
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    return state


def _check_aligned(params, grads):
    for k, g in grads.items():
        if k not in params:
            raise ShapeError(f"gradient for unknown parameter {k!r}")
        if params[k].shape != np.shape(g):
            raise ShapeError(f"parameter {k!r} has shape {params[k].shape}, gradient {np.shape(g)}")


def adam_step(state: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
    """Bias-corrected Adam update of the parameters named in ``grads``.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    if state.kind != "adam":
        raise ValueError("adam_step needs an adam optimizer state")
    _check_aligned(params, grads)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v = dict(state.m), dict(state.v)
    new_params = dict(params)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        mk = m.get(k)
        vk = v.get(k)
        if mk is None:
            mk = np.zeros_like(params[k])
            vk = np.zeros_like(params[k])
        mk = b1 * mk + (1.0 - b1) * g
        vk = b2 * vk + (1.0 - b2) * (g * g)
        m[k], v[k] = mk, vk
        new_params[k] = params[k] - state.learning_rate * (mk / c1) / (np.sqrt(vk / c2) + state.epsilon)
    new_state = OptimizerState(
        "adam", state.learning_rate, b1, b2, state.epsilon, t, m, v
    )
    return new_params, new_state


def sgd_step(state: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]):
    if state.kind != "sgd":
        raise ValueError("sgd_step needs an sgd optimizer state")
    _check_aligned(params, grads)
    new_params = dict(params)
    for k, g in grads.items():
        new_params[k] = params[k] - state.learning_rate * g
    new_state = OptimizerState("sgd", state.learning_rate, state.beta1, state.beta2, state.epsilon, state.step + 1)
    return new_params, new_state


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float]
    nonfinite: list[tuple[str, tuple]] = field(default_factory=list)

    @property
    def failed_groups(self) -> list[str]:
        bad = {g for g, e in self.max_rel_error.items() if not e <= self.tol}
        bad.update(group for group, _ in self.nonfinite)
        return sorted(bad)

    @property
    def passed(self) -> bool:
        return not self.failed_groups

    def lines(self) -> list[str]:
        out = []
        for g in sorted(self.max_rel_error):
            status = "FAIL" if g in self.failed_groups else "ok"
            out.append(f"{g:<24s} max_rel_err={self.max_rel_error[g]:.3e}  {status}")
        return out


def default_group(key: str) -> str:
    return key.rsplit("/", 1)[0] if "/" in key else key


def grad_check(
    loss_fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    keys=None,
    group: Callable[[str], str] = default_group,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``loss_fn(params)`` returns ``(loss, grads)``. Per coordinate the relative
    error is ``|a - n| / max(|a| + |n|, floor)``; ``floor`` keeps coordinates
    whose true gradient is zero from dividing roundoff by zero.
    """
    params = {k: np.array(p, dtype=np.float64) for k, p in params.items()}
    _, analytic = loss_fn(params)
    keys = list(params) if keys is None else list(keys)
    report = GradCheckReport(tol=tol, max_rel_error={})
    for key in keys:
        g = group(key)
        a = np.asarray(analytic.get(key, np.zeros_like(params[key])), dtype=np.float64)
        worst = report.max_rel_error.get(g, 0.0)
        base = params[key]
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + h
            lp, _ = loss_fn(params)
            base[idx] = orig - h
            lm, _ = loss_fn(params)
            base[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                report.nonfinite.append((g, (key,) + idx))
                continue
            num = (lp - lm) / (2.0 * h)
            err = abs(a[idx] - num) / max(abs(a[idx]) + abs(num), floor)
            worst = max(worst, err)
        report.max_rel_error[g] = worst
    return report
