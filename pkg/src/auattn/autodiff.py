"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at
least one input tracks gradients.  A tape stores only backward closures and
node ids, never output arrays, so intermediate activations are released as
soon as the caller drops them::

    with Tape() as tape:
        loss = mean(relu(dense(x, w, b)))
    tape.backward(loss)     # w.grad, b.grad now hold d loss / d param

Tensors use the NHWC layout for images.  Backward rules add into leaf
``grad`` buffers; call :meth:`Tensor.zero_grad` between steps.
"""

from __future__ import annotations

import contextlib
import itertools
import os
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError, StatisticsError, TapeError

DEBUG = bool(os.environ.get("AUATTN_DEBUG"))

BN_EPS = 1e-5
BN_MOMENTUM = 0.99

_state = threading.local()
_tape_ids = itertools.count(1)


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape_uid", "_node")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape_uid = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self):
        return self._node

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.requires_grad:
            if self.grad is None or self.grad.shape != self.data.shape:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


@dataclass
class _Record:
    inputs: tuple  # node id per input, None for untracked inputs
    output: int
    backward: Callable


class Tape:
    """Ordered record of primitive applications for one backward sweep.

    A tape is single use: after :meth:`backward` it is consumed and a second
    call raises :class:`TapeError` instead of accumulating twice.
    """

    def __init__(self):
        self.uid = next(_tape_ids)
        self._records: list[_Record] = []
        self._leaves: dict[int, tuple[int, Tensor]] = {}
        self._next = 0
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def _new_node(self):
        nid = self._next
        self._next += 1
        return nid

    def _node_of(self, t: Tensor):
        if not t.requires_grad:
            return None
        if t._tape_uid == self.uid:
            return t._node
        # leaf (or a tensor from another tape, treated as a leaf here)
        entry = self._leaves.get(id(t))
        if entry is None:
            entry = (self._new_node(), t)
            self._leaves[id(t)] = entry
        return entry[0]

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        ids = tuple(self._node_of(t) for t in inputs)
        nid = self._new_node()
        out.requires_grad = True
        out._tape_uid = self.uid
        out._node = nid
        self._records.append(_Record(ids, nid, backward))

    def backward(self, loss: Tensor):
        """Propagate d loss / d leaf into every tracked leaf's ``grad``."""
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape_uid != self.uid:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            needs = tuple(i is not None for i in rec.inputs)
            in_grads = rec.backward(g, needs)
            for nid, ig in zip(rec.inputs, in_grads):
                if nid is None or ig is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + ig
                else:
                    grads[nid] = ig
        for nid, leaf in self._leaves.values():
            g = grads.get(nid)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad += g.reshape(leaf.shape).astype(leaf.dtype, copy=False)
        self._records.clear()
        self._leaves.clear()
        self.consumed = True


def backward(tape: Tape, loss: Tensor):
    tape.backward(loss)


def current_tape() -> Optional[Tape]:
    s = _stack()
    return s[-1] if s else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording for the enclosed block."""
    saved = _stack()[:]
    _stack().clear()
    try:
        yield
    finally:
        _stack().extend(saved)


@contextlib.contextmanager
def record_patterns():
    """Collect the piecewise-linear branch taken by every relu, clip and
    maxpool in the block (used to detect kink crossings in grad checks)."""
    log = []
    _state.patterns = log
    try:
        yield log
    finally:
        _state.patterns = None


def _note_pattern(arr):
    log = getattr(_state, "patterns", None)
    if log is not None:
        log.append(arr)


def _emit(data, inputs, backward_fn):
    out = Tensor(data)
    if DEBUG and not np.all(np.isfinite(out.data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError("non-finite output from finite inputs")
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    # constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, as_tensor(b, dtype=None if isinstance(b, Tensor) else a.dtype)
    if isinstance(b, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _emit(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                -_unbroadcast(g, sb) if needs[1] else None)

    return _emit(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g, needs):
        return (_unbroadcast(g * bd, ad.shape) if needs[0] else None,
                _unbroadcast(g * ad, bd.shape) if needs[1] else None)

    return _emit(ad * bd, (a, b), bw)


def neg(x):
    x = as_tensor(x)
    return _emit(-x.data, (x,), lambda g, needs: (-g,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    _note_pattern(mask)
    return _emit(np.maximum(x.data, 0), (x,), lambda g, needs: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _emit(y, (x,), lambda g, needs: (g * y * (1 - y),))


def log(x):
    x = as_tensor(x)
    d = x.data
    return _emit(np.log(d), (x,), lambda g, needs: (g / d,))


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g, needs: (g * y,))


def clip(x, lo, hi):
    """Clamp values to ``[lo, hi]``; gradient is zero where clamping is active."""
    x = as_tensor(x)
    d = x.data
    inside = (d >= lo) & (d <= hi)
    _note_pattern(inside)
    return _emit(np.clip(d, lo, hi), (x,), lambda g, needs: (g * inside,))


def softmax(x, axis=-1):
    x = as_tensor(x)
    d = x.data
    if not -d.ndim <= axis < d.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {d.shape}")
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, needs):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), bw)


# ----------------------------------------------------------------- structural


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(old),))


# ----------------------------------------------------------------- reductions


def _check_axis(d, axis):
    if d.size == 0:
        raise DimensionError("reduction over an empty tensor")
    if axis is not None:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        for ax in axes:
            if not -d.ndim <= ax < d.ndim:
                raise DimensionError(f"axis {ax} out of range for shape {d.shape}")


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    _check_axis(x.data, axis)
    shape = x.shape

    def bw(g, needs):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x, axis=None):
    x = as_tensor(x)
    _check_axis(x.data, axis)
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))

    def bw(g, needs):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit(np.asarray(x.data.mean(axis=axis)), (x,), bw)


def weighted_sum(values, weights, axis=0):
    """Sum ``values`` along ``axis`` with one weight per slice.

    ``weights`` has the shape ``values.shape[:axis + 1]`` and broadcasts over
    the trailing dimensions, e.g. values ``(N, P, C)``, weights ``(N, P)``,
    ``axis=1`` gives ``(N, C)``.
    """
    values, weights = as_tensor(values), as_tensor(weights)
    vd, wd = values.data, weights.data
    axis = axis % vd.ndim
    if vd.shape[axis] == 0:
        raise DimensionError("weighted_sum over an empty axis")
    if wd.shape != vd.shape[:axis + 1]:
        raise DimensionError(
            f"weights shape {wd.shape} does not match values {vd.shape} up to axis {axis}")
    trailing = vd.ndim - wd.ndim
    wx = wd.reshape(wd.shape + (1,) * trailing)
    out = (vd * wx).sum(axis=axis)

    def bw(g, needs):
        ge = np.expand_dims(g, axis)
        gv = ge * wx if needs[0] else None
        gw = None
        if needs[1]:
            gw = vd * ge
            if trailing:
                gw = gw.sum(axis=tuple(range(wd.ndim, vd.ndim)))
        return gv, gw

    return _emit(out, (values, weights), bw)


# --------------------------------------------------------------------- layers


def dense(x, weight, bias):
    """Affine map ``x @ weight + bias`` for 2-D ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data

    def bw(g, needs):
        return (g @ wd.T if needs[0] else None,
                xd.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return _emit(xd @ wd + bias.data, (x, weight, bias), bw)


# patch-matrix chunks are capped so large batches fit in memory
_COLS_BUDGET = 64 * 2**20  # elements per chunk
_COLS_KEEP = 64 * 2**20    # keep forward patches for backward below this size


def _patches(xp, h, w):
    """``(n, h, w, 9 * c)`` patch matrix of a padded NHWC array, (ky, kx, c) order."""
    return np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)],
                          axis=-1)


def conv2d(x, kernel, bias):
    """3x3 stride-1 cross-correlation with zero "same" padding, NHWC layout."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise DimensionError(f"conv2d expects a 3x3xCinxCout kernel, got {kernel.shape}")
    n, h, w, cin = x.shape
    if kernel.shape[2] != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kernel.shape[2]}")
    cout = kernel.shape[3]
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    xd = x.data
    kmat = kernel.data.reshape(9 * cin, cout)
    xp = np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
    step = max(1, _COLS_BUDGET // (h * w * 9 * cin))
    chunks = [slice(s, min(s + step, n)) for s in range(0, n, step)]
    keep = n * h * w * 9 * cin <= _COLS_KEEP
    saved = []
    out = np.empty((n, h, w, cout), dtype=np.result_type(xd, kmat))
    for sl in chunks:
        cols = _patches(xp[sl], h, w).reshape(-1, 9 * cin)
        np.matmul(cols, kmat, out=out[sl].reshape(-1, cout))
        if keep:
            saved.append(cols)
    del xp
    out += bias.data

    def bw(g, needs):
        gx = gk = gb = None
        if needs[2]:
            gb = g.reshape(-1, cout).sum(axis=0)
        if not (needs[0] or needs[1]):
            return gx, gk, gb
        if needs[1]:
            gk = np.zeros_like(kmat)
        if needs[0]:
            gxp = np.zeros((n, h + 2, w + 2, cin), dtype=g.dtype)
        xpb = None if keep else np.pad(xd, ((0, 0), (1, 1), (1, 1), (0, 0)))
        for c, sl in enumerate(chunks):
            gc = g[sl].reshape(-1, cout)
            if needs[1]:
                cols = saved[c] if keep else _patches(xpb[sl], h, w).reshape(-1, 9 * cin)
                gk += cols.T @ gc
                del cols
            if needs[0]:
                gcols = (gc @ kmat.T).reshape(-1, h, w, 9, cin)
                gsl = gxp[sl]
                for s in range(9):
                    i, j = divmod(s, 3)
                    gsl[:, i:i + h, j:j + w, :] += gcols[:, :, :, s, :]
        if needs[1]:
            gk = gk.reshape(3, 3, cin, cout)
        if needs[0]:
            gx = gxp[:, 1:-1, 1:-1, :]
        return gx, gk, gb

    return _emit(out, (x, kernel, bias), bw)


def maxpool2d(x):
    """2x2 max pooling with stride 2, no padding (odd trailing rows dropped).

    The gradient goes to the first maximal element of each window in
    row-major scan order.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2d needs H, W >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    d = x.data
    views = [d[:, di:2 * ho:2, dj:2 * wo:2, :] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
    # nested in scan order so the first maximal position wins ties
    arg = np.where(views[0] == out, 0,
                   np.where(views[1] == out, 1,
                            np.where(views[2] == out, 2, 3))).astype(np.int8)
    _note_pattern(arg)
    del views
    dtype = x.dtype

    def bw(g, needs):
        gx = np.zeros((n, h, w, c), dtype=dtype)
        for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            gx[:, di:2 * ho:2, dj:2 * wo:2, :] = g * (arg == k)
        return (gx,)

    return _emit(out, (x,), bw)


class RunningStats:
    """Per-channel moving mean/variance used by batch norm in inference."""

    def __init__(self, channels, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, batch_mean, batch_var, momentum=BN_MOMENTUM):
        self.mean *= momentum
        self.mean += (1 - momentum) * batch_mean
        self.var *= momentum
        self.var += (1 - momentum) * batch_var

    def copy(self):
        other = RunningStats(self.mean.shape[0], self.mean.dtype)
        other.mean[...] = self.mean
        other.var[...] = self.var
        return other


def batchnorm(x, gamma, beta, stats: Optional[RunningStats] = None, training=True,
              momentum=BN_MOMENTUM, eps=BN_EPS):
    """Normalize over every axis but the last, then scale and shift.

    In training mode the batch statistics are used (with a full backward
    through them) and ``stats`` is updated in place when given.  In
    inference mode ``stats`` supplies the mean and variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: gamma/beta must have shape ({c},)")
    axes = tuple(range(x.ndim - 1))
    xd = x.data
    if training:
        m = xd.size // c
        if m < 2:
            raise StatisticsError(f"batchnorm needs >= 2 values per channel, got {m}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if stats is not None:
            stats.update(mu, var, momentum)
    else:
        if stats is None:
            raise ContractError("inference-mode batchnorm requires running statistics")
        mu, var = stats.mean.astype(xd.dtype), stats.var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu) * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g, needs):
        gg = (g * xhat).sum(axis=axes) if needs[1] else None
        gb = g.sum(axis=axes) if needs[2] else None
        gx = None
        if needs[0]:
            if training:
                m = xd.size // c
                gxhat = g * gd
                gx = (inv / m) * (m * gxhat - gxhat.sum(axis=axes)
                                  - xhat * (gxhat * xhat).sum(axis=axes))
            else:
                gx = g * (gd * inv)
        return gx, gg, gb

    return _emit(out, (x, gamma, beta), bw)


# --------------------------------------------------------------- grad check


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: Optional[tuple]  # (input position, flat coordinate)
    nan_at: Optional[tuple] = None
    skipped: int = 0

    @property
    def ok(self):
        return self.nan_at is None

    def passed(self, tol=1e-4):
        return self.ok and self.max_rel_error < tol


def grad_check(f, point, h=1e-3, skip_kinks=False):
    """Compare tape gradients of scalar ``f(*tensors)`` with central differences.

    Returns the maximum over all coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.  A NaN on
    either side is reported through ``nan_at`` with its coordinate.  With
    ``skip_kinks`` a coordinate whose +-h probe switches any relu, clip or
    maxpool branch is left out (and counted in ``skipped``), since the
    function is not differentiable across it.
    """
    arrays = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape, record_patterns() as base:
        loss = f(*leaves)
    if not loss.requires_grad:
        analytic = [np.zeros_like(a) for a in arrays]
    else:
        tape.backward(loss)
        analytic = [lf.grad for lf in leaves]

    def value(vals):
        with no_grad(), record_patterns() as pats:
            out = float(f(*[Tensor(v) for v in vals]).data)
        same = len(pats) == len(base) and all(np.array_equal(a, b) for a, b in zip(pats, base))
        return out, same

    worst_err, worst_at, skipped = 0.0, None, 0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp, same_p = value(arrays)
            flat[idx] = orig - h
            fm, same_m = value(arrays)
            flat[idx] = orig
            if skip_kinks and not (same_p and same_m):
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            ana = float(analytic[k].reshape(-1)[idx])
            if not (np.isfinite(num) and np.isfinite(ana)):
                return GradCheckResult(float("nan"), (k, idx), nan_at=(k, idx), skipped=skipped)
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (k, idx)
    return GradCheckResult(worst_err, worst_at, skipped=skipped)


# ------------------------------------------------------------------ threads


def set_num_threads(n: Optional[int]):
    """Cap BLAS threads; ``1`` gives bit-reproducible reductions."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def deterministic():
    """Context manager forcing single-threaded kernels."""
    return set_num_threads(1)
