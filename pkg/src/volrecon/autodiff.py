"""Minimal reverse-mode autodiff over dense numpy arrays.

A Tape records ops in execution order (which is already topological); the
backward pass walks it in reverse exactly once, accumulating vector-Jacobian
products in a fixed order so replays are bit-identical. There is no
broadcasting beyond scalar-with-tensor: elementwise ops require exactly
matching shapes, which keeps 5-D conv code honest.

Training runs in float32 by default; gradient checks construct float64 tapes
because central finite differences are unreliable in single precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ShapeMismatch


class DiffTensor:
    """Handle to one node of a Tape: immutable values + node id."""

    __slots__ = ("tape", "id", "values")

    def __init__(self, tape: "Tape", node_id: int, values: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.values = values

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.tape.grad_of(self)

    # arithmetic sugar used heavily by the SSIM core
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"DiffTensor(id={self.id}, shape={self.shape}, dtype={self.values.dtype})"


class Tape:
    """Recorded computation graph; single-threaded during record/backward."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[Callable | None] = []
        self._needs: list[bool] = []
        self._grads: list[np.ndarray | None] | None = None

    def _record(self, values, parents: tuple[int, ...], backward, needs: bool) -> DiffTensor:
        values = np.asarray(values, dtype=self.dtype)
        self._parents.append(parents)
        self._backward.append(backward)
        self._needs.append(needs)
        return DiffTensor(self, len(self._parents) - 1, values)

    def tensor(self, values) -> DiffTensor:
        """Differentiable leaf."""
        return self._record(values, (), None, True)

    def constant(self, values) -> DiffTensor:
        """Leaf that never receives a gradient."""
        return self._record(values, (), None, False)

    def op(self, values, parent_tensors: Sequence[DiffTensor], backward) -> DiffTensor:
        for p in parent_tensors:
            if p.tape is not self:
                raise ValueError("mixing tensors from different tapes")
        ids = tuple(p.id for p in parent_tensors)
        needs = any(self._needs[i] for i in ids)
        return self._record(values, ids, backward if needs else None, needs)

    def backward(self, loss: DiffTensor) -> None:
        if loss.values.size != 1:
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[loss.id] = np.ones_like(loss.values)
        for nid in range(loss.id, -1, -1):
            g = grads[nid]
            fn = self._backward[nid]
            if g is None or fn is None:
                continue
            parent_grads = fn(g)
            for pid, pg in zip(self._parents[nid], parent_grads):
                if pg is None or not self._needs[pid]:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg.astype(self.dtype, copy=True)
                else:
                    grads[pid] += pg
        self._grads = grads

    def grad_of(self, t: DiffTensor) -> np.ndarray | None:
        if self._grads is None:
            return None
        return self._grads[t.id]


# ---------------------------------------------------------------------------
# elementwise / scalar ops

def _check_same_shape(a: DiffTensor, b: DiffTensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")


def add(a: DiffTensor, b) -> DiffTensor:
    if isinstance(b, DiffTensor):
        _check_same_shape(a, b)
        return a.tape.op(a.values + b.values, (a, b), lambda g: (g, g))
    return a.tape.op(a.values + float(b), (a,), lambda g: (g,))


def sub(a: DiffTensor, b) -> DiffTensor:
    if isinstance(b, DiffTensor):
        _check_same_shape(a, b)
        return a.tape.op(a.values - b.values, (a, b), lambda g: (g, -g))
    return a.tape.op(a.values - float(b), (a,), lambda g: (g,))


def neg(a: DiffTensor) -> DiffTensor:
    return a.tape.op(-a.values, (a,), lambda g: (-g,))


def mul(a: DiffTensor, b) -> DiffTensor:
    """Elementwise product (implements the x * m masking)."""
    if isinstance(b, DiffTensor):
        _check_same_shape(a, b)
        av, bv = a.values, b.values
        return a.tape.op(av * bv, (a, b), lambda g: (g * bv, g * av))
    return smul(a, b)


def smul(a: DiffTensor, s: float) -> DiffTensor:
    s = float(s)
    return a.tape.op(a.values * s, (a,), lambda g: (g * s,))


def div(a: DiffTensor, b) -> DiffTensor:
    if isinstance(b, DiffTensor):
        _check_same_shape(a, b)
        av, bv = a.values, b.values
        out = av / bv

        def back(g):
            ga = g / bv
            return ga, -ga * out

        return a.tape.op(out, (a, b), back)
    return smul(a, 1.0 / float(b))


def exp(a: DiffTensor) -> DiffTensor:
    out = np.exp(a.values)
    return a.tape.op(out, (a,), lambda g: (g * out,))


def log(a: DiffTensor) -> DiffTensor:
    av = a.values
    return a.tape.op(np.log(av), (a,), lambda g: (g / av,))


def leaky_relu(a: DiffTensor, slope: float = 0.01) -> DiffTensor:
    av = a.values
    mask = av > 0

    def back(g):
        return (np.where(mask, g, g * slope),)

    return a.tape.op(np.where(mask, av, av * slope), (a,), back)


def stop_gradient(a: DiffTensor) -> DiffTensor:
    return a.tape.constant(a.values)


# ---------------------------------------------------------------------------
# reductions / shaping

def sum_(a: DiffTensor, axes: tuple[int, ...] | None = None) -> DiffTensor:
    shape = a.shape

    def back(g):
        if axes is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge, shape).astype(g.dtype, copy=True),)

    return a.tape.op(a.values.sum(axis=axes), (a,), back)


def mean(a: DiffTensor, axes: tuple[int, ...] | None = None) -> DiffTensor:
    shape = a.shape
    count = a.values.size if axes is None else int(np.prod([shape[i] for i in axes]))

    def back(g):
        if axes is None:
            ge = g
        else:
            ge = np.expand_dims(g, axes)
        return (np.broadcast_to(ge / count, shape).astype(g.dtype, copy=True),)

    return a.tape.op(a.values.mean(axis=axes), (a,), back)


def reshape(a: DiffTensor, shape: tuple[int, ...]) -> DiffTensor:
    old = a.shape
    return a.tape.op(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: DiffTensor, axes: tuple[int, ...]) -> DiffTensor:
    inv = tuple(np.argsort(axes))
    return a.tape.op(np.ascontiguousarray(a.values.transpose(axes)), (a,),
                     lambda g: (g.transpose(inv),))


def select_row(a: DiffTensor, i: int) -> DiffTensor:
    """a[i] along axis 0; backward scatters into a zero tensor."""
    shape = a.shape

    def back(g):
        ga = np.zeros(shape, dtype=g.dtype)
        ga[i] = g
        return (ga,)

    return a.tape.op(a.values[i], (a,), back)


# ---------------------------------------------------------------------------
# dense / conv layers

def linear(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None) -> DiffTensor:
    """x (B, F) @ w (O, F)^T + b (O,)."""
    if x.values.ndim != 2 or w.values.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"linear: x {x.shape}, w {w.shape}")
    xv, wv = x.values, w.values
    y = xv @ wv.T
    parents = [x, w]
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"linear bias {b.shape} vs out dim {w.shape[0]}")
        y = y + b.values
        parents.append(b)

    def back(g):
        gx = g @ wv
        gw = g.T @ xv
        if b is not None:
            return gx, gw, g.sum(axis=0)
        return gx, gw

    return x.tape.op(y, parents, back)


def _check_conv_shapes(x: DiffTensor, w: DiffTensor, in_ch_axis: int) -> None:
    if x.values.ndim != 5 or w.values.ndim != 5:
        raise ShapeMismatch(f"conv expects 5-D tensors, got {x.shape} and {w.shape}")
    if w.shape[in_ch_axis] != x.shape[1]:
        raise ShapeMismatch(f"channel mismatch: x {x.shape}, w {w.shape}")


def conv3d(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None,
           stride: int = 1, pad: int = 0) -> DiffTensor:
    """Cross-correlation; x (B,Cin,*), w (Cout,Cin,k,k,k), zero padding."""
    _check_conv_shapes(x, w, in_ch_axis=1)
    xv, wv = x.values, w.values
    k = wv.shape[2]
    y = kernels.conv3d_forward(xv, wv, b.values if b is not None else None, stride, pad)
    parents = [x, w] + ([b] if b is not None else [])

    def back(g):
        gx = kernels.conv3d_grad_input(g, wv, xv.shape, stride, pad)
        gw, gb = kernels.conv3d_grad_weight(g, xv, k, stride, pad)
        if b is not None:
            return gx, gw, gb
        return gx, gw

    return x.tape.op(y, parents, back)


def conv_transpose3d(x: DiffTensor, w: DiffTensor, b: DiffTensor | None = None,
                     stride: int = 2, pad: int = 0) -> DiffTensor:
    """Transposed conv; x (B,Cin,*), w (Cin,Cout,k,k,k)."""
    _check_conv_shapes(x, w, in_ch_axis=0)
    xv, wv = x.values, w.values
    k = wv.shape[2]
    y = kernels.convt3d_forward(xv, wv, b.values if b is not None else None, stride, pad)
    parents = [x, w] + ([b] if b is not None else [])

    def back(g):
        gx = kernels.convt3d_grad_input(g, wv, stride, pad)
        gw, gb = kernels.convt3d_grad_weight(g, xv, k, stride, pad)
        if b is not None:
            return gx, gw, gb
        return gx, gw

    return x.tape.op(y, parents, back)


def channel_norm(x: DiffTensor, eps: float = 1e-5,
                 axes: tuple[int, ...] | None = None) -> DiffTensor:
    """Normalize to zero mean / unit variance per channel. By default the
    statistics run over the spatial axes per (batch, channel); pass
    axes=(0, 2, 3, 4) for batch-statistics normalization. No learned
    affine."""
    if x.values.ndim < 3:
        raise ShapeMismatch(f"channel_norm expects (B,C,spatial...), got {x.shape}")
    if axes is None:
        axes = tuple(range(2, x.values.ndim))
    xv = x.values
    m = xv.mean(axis=axes, keepdims=True)
    var = ((xv - m) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xv - m) * inv

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return ((g - gm - y * gym) * inv,)

    return x.tape.op(y, (x,), back)


def channel_scale_shift(x: DiffTensor, scale: np.ndarray, shift: np.ndarray) -> DiffTensor:
    """Per-channel affine with constant coefficients (inference-mode
    normalization from running statistics)."""
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeMismatch(f"scale/shift must be ({c},)")
    view = (1, c) + (1,) * (x.values.ndim - 2)
    s = scale.reshape(view).astype(x.values.dtype)
    b = shift.reshape(view).astype(x.values.dtype)
    return x.tape.op(x.values * s + b, (x,), lambda g: (g * s,))


def gather_rows(table: DiffTensor, idx: np.ndarray) -> DiffTensor:
    """table (K,E)[idx] -> (N,E); backward scatter-adds into the rows."""
    idx = np.asarray(idx, dtype=np.int64)
    tv = table.values

    def back(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, idx, g)
        return (gt,)

    return table.tape.op(tv[idx], (table,), back)


# ---------------------------------------------------------------------------
# stochastic / loss ops

def gaussian_sample(mu: DiffTensor, logvar: DiffTensor, noise: np.ndarray) -> DiffTensor:
    """Reparameterized draw mu + exp(logvar/2) * noise; the noise tensor is
    an explicit seeded input so training is replayable."""
    _check_same_shape(mu, logvar)
    if noise.shape != mu.shape:
        raise ShapeMismatch(f"noise {noise.shape} vs mu {mu.shape}")
    std = exp(smul(logvar, 0.5))
    return add(mu, mul(std, mu.tape.constant(noise)))


def _as_values(x) -> np.ndarray:
    return x.values if isinstance(x, DiffTensor) else np.asarray(x)


def mse_loss(x: DiffTensor, y) -> DiffTensor:
    yv = _as_values(y)
    if yv.ndim > 0 and yv.shape != x.shape:
        raise ShapeMismatch(f"mse_loss: {x.shape} vs {yv.shape}")
    d = x.values - yv
    n = x.values.size
    parents = [x] + ([y] if isinstance(y, DiffTensor) else [])

    def back(g):
        gx = g * (2.0 / n) * d
        if isinstance(y, DiffTensor):
            return gx, -gx
        return (gx,)

    return x.tape.op((d * d).mean(), parents, back)


def weighted_mse_loss(x: DiffTensor, y, weights: np.ndarray) -> DiffTensor:
    """sum(w * (x-y)^2) / sum(w); w is a constant region weight."""
    yv = _as_values(y)
    w = np.asarray(weights, dtype=x.values.dtype)
    if w.shape != x.shape:
        raise ShapeMismatch(f"weights {w.shape} vs {x.shape}")
    total = float(w.sum())
    if total <= 0:
        raise ShapeMismatch("weighted_mse_loss: empty region (sum of weights is 0)")
    d = x.values - yv
    parents = [x] + ([y] if isinstance(y, DiffTensor) else [])

    def back(g):
        gx = g * (2.0 / total) * (w * d)
        if isinstance(y, DiffTensor):
            return gx, -gx
        return (gx,)

    return x.tape.op((w * d * d).sum() / total, parents, back)


def blur1d(x: DiffTensor, kern: np.ndarray, axis: int) -> DiffTensor:
    """Valid 1-D correlation along one axis (separable Gaussian windows)."""
    kv = np.asarray(kern, dtype=x.values.dtype)
    y = kernels.corr1d_valid(x.values, kv, axis)

    def back(g):
        return (kernels.corr1d_valid_grad(g, kv, axis),)

    return x.tape.op(y, (x,), back)


def dssim_loss(x: DiffTensor, y, window: int = 11) -> DiffTensor:
    """Structural dissimilarity (1 - SSIM)/2; the SSIM core lives in the
    metrics module and is shared with the plain evaluation path."""
    from . import metrics

    if not isinstance(y, DiffTensor):
        y = x.tape.constant(np.asarray(y))
    return metrics.dssim_core(x, y, window)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f, x0: np.ndarray, eps: float = 1e-4, tol: float = 1e-4,
               max_coords: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued builder f(tape, x) against
    central finite differences on a float64 tape.

    Checks every coordinate, or a random subset of max_coords for large
    inputs.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    tape = Tape(np.float64)
    xt = tape.tensor(x0)
    loss = f(tape, xt)
    tape.backward(loss)
    g = xt.grad
    if g is None:
        g = np.zeros_like(x0)

    size = x0.size
    if size <= max_coords:
        coords = np.arange(size)
    else:
        coords = np.random.default_rng(seed).choice(size, size=max_coords, replace=False)

    def eval_at(xf):
        t = Tape(np.float64)
        return float(f(t, t.tensor(xf)).values)

    report = GradCheckReport(0.0, len(coords), tol)
    gflat = g.reshape(-1)
    for c in coords:
        xp = x0.copy().reshape(-1)
        xp[c] += eps
        fp = eval_at(xp.reshape(x0.shape))
        xm = x0.copy().reshape(-1)
        xm[c] -= eps
        fm = eval_at(xm.reshape(x0.shape))
        fd = (fp - fm) / (2 * eps)
        ad = float(gflat[c])
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
        if rel > report.max_rel_err:
            report.max_rel_err = rel
        if rel > tol:
            report.failures.append((int(c), ad, fd, rel))
    return report


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamWState:
    step: int
    m: dict
    v: dict

    @classmethod
    def init(cls, params: dict) -> "AdamWState":
        return cls(step=0,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> tuple[dict, AdamWState]:
    """Decoupled-weight-decay Adam update with bias correction, in place."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"adamw: grad {g.shape} vs param {p.shape} for '{key}'")
        if weight_decay != 0.0:
            p *= 1.0 - lr * weight_decay
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state
