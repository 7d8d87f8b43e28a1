"""Dense-tensor micro-framework with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Operations record onto the currently
active :class:`Tape` (a thread-local stack, so independent model replicas can
run on separate threads) whenever any input requires gradients. A tape is
single-use: one forward pass, one ``backward``, then it is consumed.
"""

from __future__ import annotations

import math
import threading
import numpy as np

from .errors import NonScalarLoss, ShapeError, TapeError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional float64 array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __array__(self, dtype=None, copy=None):
        # lets np.asarray(tensor) work everywhere plain arrays are expected
        if dtype is not None and dtype != self.data.dtype:
            return self.data.astype(dtype)
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations for one forward/backward cycle."""

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn) in execution order
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def _record(self, out, inputs, backward_fn):
        if self._consumed:
            raise TapeError("tape already consumed; start a new forward pass")
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, loss):
        if self._consumed or not self._nodes:
            raise TapeError("backward on a consumed or empty tape; run a new forward pass")
        if loss.size != 1:
            raise NonScalarLoss(f"loss must be scalar-shaped, got shape {loss.shape}")
        # zero-init so parameters on the tape but off the loss path end at exactly 0
        for out, inputs, _ in self._nodes:
            for t in inputs:
                if t.requires_grad and t.grad is None:
                    t.grad = np.zeros_like(t.data)
            if out.grad is None:
                out.grad = np.zeros_like(out.data)
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._nodes):
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is not None and t.requires_grad:
                    t.grad += g
        self._nodes.clear()
        self._consumed = True


def backward(loss):
    """Run reverse-mode accumulation on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise TapeError("no active tape; wrap the forward pass in `with Tape():`")
    tape.backward(loss)


def _make(data, inputs, backward_fn):
    """Create the output tensor and record the op if anything needs gradients."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(t, s):
    t = as_tensor(t)
    s = float(s)
    return _make(t.data * s, (t,), lambda g: (g * s,))


def neg(t):
    return scale(t, -1.0)


def relu(t):
    t = as_tensor(t)
    mask = t.data > 0
    return _make(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


def sigmoid(t):
    t = as_tensor(t)
    y = 1.0 / (1.0 + np.exp(-t.data))
    return _make(y, (t,), lambda g: (g * y * (1.0 - y),))


def tanh(t):
    t = as_tensor(t)
    y = np.tanh(t.data)
    return _make(y, (t,), lambda g: (g * (1.0 - y * y),))


def log(t):
    t = as_tensor(t)
    return _make(np.log(t.data), (t,), lambda g: (g / t.data,))


def clip(t, lo, hi):
    """Clamp values; gradient passes through only where no clamping happened."""
    t = as_tensor(t)
    y = np.clip(t.data, lo, hi)
    inside = (t.data > lo) & (t.data < hi)
    return _make(y, (t,), lambda g: (g * inside,))


def reshape(t, shape):
    t = as_tensor(t)
    old = t.shape
    return _make(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def swap_axes(t, a, b):
    t = as_tensor(t)
    return _make(np.swapaxes(t.data, a, b), (t,), lambda g: (np.swapaxes(g, a, b),))


def concat_lastdim(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError("concat_lastdim", a.shape, b.shape)
    na = a.shape[-1]

    def bwd(g):
        return g[..., :na], g[..., na:]

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), bwd)


def concat_rows(tensors):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[0] for t in tensors]

    def bwd(g):
        grads, off = [], 0
        for n in sizes:
            grads.append(g[off:off + n])
            off += n
        return tuple(grads)

    return _make(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), bwd)


def take_rows(t, idx):
    """Gather rows by integer index; backward scatter-adds."""
    t = as_tensor(t)
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        gt = np.zeros_like(t.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(t.data[idx], (t,), bwd)


def take_cols(t, start, stop):
    t = as_tensor(t)

    def bwd(g):
        gt = np.zeros(t.shape)
        gt[..., start:stop] = g
        return (gt,)

    return _make(t.data[..., start:stop], (t,), bwd)


def tile_rows(t, n):
    """Broadcast a (1, d) row to (n, d); backward sums the rows back."""
    t = as_tensor(t)
    if t.ndim != 2 or t.shape[0] != 1:
        raise ShapeError("tile_rows", t.shape)
    return _make(np.repeat(t.data, n, axis=0), (t,), lambda g: (g.sum(axis=0, keepdims=True),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(t):
    t = as_tensor(t)
    shape = t.shape
    return _make(np.array(t.data.sum()), (t,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(t):
    t = as_tensor(t)
    n = t.size
    shape = t.shape
    return _make(np.array(t.data.sum() / n), (t,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def maxpool_over_rows(t):
    """Columnwise max over axis 0 of an (n, d) tensor -> (1, d).

    Gradient routes to the first maximal row per column, so the op stays
    deterministic under ties.
    """
    t = as_tensor(t)
    if t.ndim != 2:
        raise ShapeError("maxpool_over_rows", t.shape)
    arg = t.data.argmax(axis=0)
    out = t.data[arg, np.arange(t.shape[1])][None, :]

    def bwd(g):
        gt = np.zeros_like(t.data)
        gt[arg, np.arange(t.shape[1])] = g[0]
        return (gt,)

    return _make(out, (t,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """2-D or batched matrix product; batch dimensions must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bwd(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), bwd)


def add_bias(t, bias):
    """Add a (d,) bias to the last dimension of t."""
    t, bias = as_tensor(t), as_tensor(bias)
    if bias.ndim != 1 or t.shape[-1] != bias.shape[0]:
        raise ShapeError("add_bias", t.shape, bias.shape)

    def bwd(g):
        return g, g.reshape(-1, bias.shape[0]).sum(axis=0)

    return _make(t.data + bias.data, (t, bias), bwd)


def batched_matvec(mats, v):
    """Per-row matrix-vector product out[m] = mats[m] @ v[m]; mats is constant."""
    v = as_tensor(v)
    mats = np.asarray(mats, dtype=np.float64)
    if mats.ndim != 3 or v.ndim != 2 or mats.shape[0] != v.shape[0] or mats.shape[2] != v.shape[1]:
        raise ShapeError("batched_matvec", mats.shape, v.shape)
    out = np.einsum("mij,mj->mi", mats, v.data)
    return _make(out, (v,), lambda g: (np.einsum("mij,mi->mj", mats, g),))


def l2norm_rows(t):
    """Euclidean norm of each row of an (n, d) tensor -> (n,).

    The gradient is defined as 0 on zero rows (instead of the undefined
    derivative of sqrt at 0), which is what distance losses need.
    """
    t = as_tensor(t)
    if t.ndim != 2:
        raise ShapeError("l2norm_rows", t.shape)
    norms = np.sqrt((t.data * t.data).sum(axis=1))

    def bwd(g):
        safe = np.where(norms > 0, norms, 1.0)
        return ((g / safe)[:, None] * t.data,)

    return _make(norms, (t,), bwd)


# ---------------------------------------------------------------------------
# normalization and attention
# ---------------------------------------------------------------------------

def softmax_lastdim(t):
    t = as_tensor(t)
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return _make(s, (t,), bwd)


def layer_norm(t, gain, bias, eps=1e-5):
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    t, gain, bias = as_tensor(t), as_tensor(gain), as_tensor(bias)
    d = t.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", t.shape, gain.shape)
    mu = t.data.mean(axis=-1, keepdims=True)
    var = t.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (t.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gx_hat = g * gain.data
        # standard layer-norm backward over the last axis
        gt = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        flat_x = xhat.reshape(-1, d)
        return gt, (flat_g * flat_x).sum(axis=0), flat_g.sum(axis=0)

    return _make(out, (t, gain, bias), bwd)


def scaled_dot_product_attention(q, k, v):
    """softmax(q k^T / sqrt(d_k)) v, batched over any leading dimensions."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d_k = k.shape[-1]
    scores = scale(matmul(q, swap_axes(k, -1, -2)), 1.0 / math.sqrt(d_k))
    return matmul(softmax_lastdim(scores), v)


# ---------------------------------------------------------------------------
# optimizer and gradient checking
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError("adam_step", p.data.shape, g.shape)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** t)
            v_hat = self.v[i] / (1 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(optimizer):
    optimizer.step()


def grad_check(f, x, h=1e-4, max_coords=None, seed=0):
    """Compare the tape gradient of scalar-valued f against central differences.

    Returns the max over checked coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    ``max_coords`` caps how many coordinates are probed (random subset).
    """
    x.zero_grad()
    with Tape() as tape:
        loss = f(x)
        tape.backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in coords:
        keep = flat[i]
        flat[i] = keep + h
        f_plus = f(x).item()
        flat[i] = keep - h
        f_minus = f(x).item()
        flat[i] = keep
        numeric = (f_plus - f_minus) / (2 * h)
        err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]), abs(numeric))
        worst = max(worst, err)
    return worst
