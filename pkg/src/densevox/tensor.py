"""Minimal reverse-mode tensor core.

A ``Tensor`` wraps a dense float ndarray (channels-last layout for spatial
data, ``[D, H, W, C]`` or ``[N, D, H, W, C]``) together with a gradient slot
and enough graph structure to replay the backward pass. Operations are free
functions that record a closure per node; ``backward`` walks the graph once
in reverse topological order.

Everything is dtype-generic: the production path runs in float32, while the
gradient checks in the test suite re-execute the same code in float64.
"""

import threading

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that skips graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0

    def accumulate(self, g, own=False):
        """Add ``g`` into the grad slot. ``own=True`` promises ``g`` is a fresh
        array the graph may keep by reference (skips one full copy)."""
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"


def _make(data, parents, backward_fn):
    """Wrap an op result; record graph edges only when grads are on and needed."""
    out = Tensor(data)
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss):
    """Reverse-mode accumulation from a scalar loss into every reachable grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior activations are not needed once propagated
            if node is not loss:
                node.grad = None
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# operations


def conv3d_valid(x, w, bias):
    """Valid 3D cross-correlation, differentiable in x, w and bias.

    x: [D,H,W,Cin] or [N,D,H,W,Cin]; w: [k,k,k,Cin,Cout]; bias: [Cout].
    """
    squeeze = x.data.ndim == 4
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d_valid expects 4/5-d input and 5-d kernels, "
                         f"got {x.data.shape} and {w.data.shape}")
    k = w.data.shape[0]
    if w.data.shape[1] != k or w.data.shape[2] != k:
        raise ShapeError(f"kernels must be cubic, got {w.data.shape[:3]}")
    if xd.shape[4] != w.data.shape[3]:
        raise ShapeError(f"channel mismatch: input {xd.shape} vs kernels {w.data.shape}")
    if min(xd.shape[1:4]) < k:
        raise ShapeError(f"kernel extent {k} exceeds input spatial extents {xd.shape[1:4]}")
    if bias.data.shape != (w.data.shape[4],):
        raise ShapeError(f"bias shape {bias.data.shape} != ({w.data.shape[4]},)")

    out = kernels.conv3d_forward(xd, w.data, bias.data)
    if squeeze:
        out = out[0]

    def backward_fn(gy):
        gyb = gy[None] if squeeze else gy
        if x.requires_grad:
            dx = kernels.conv3d_input_grad(gyb, w.data)
            x.accumulate(dx[0] if squeeze else dx, own=not squeeze)
        if w.requires_grad:
            w.accumulate(kernels.conv3d_weight_grad(xd, gyb, k), own=True)
        if bias.requires_grad:
            bias.accumulate(gyb.sum(axis=(0, 1, 2, 3)), own=True)

    return _make(out, (x, w, bias), backward_fn)


def batch_norm(x, gamma, beta, running_mean, running_var, mode,
               momentum=0.9, eps=1e-5):
    """Per-channel batch normalization over all non-channel axes.

    ``running_mean``/``running_var`` are plain ndarrays updated in place in
    train mode (momentum 0.9) and read in infer mode. Differentiable w.r.t.
    x, gamma and beta in train mode.
    """
    C = x.data.shape[-1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"BN parameter shape mismatch: C={C}, "
                         f"gamma {gamma.data.shape}, beta {beta.data.shape}")
    dt = x.data.dtype
    x2 = x.data.reshape(-1, C)
    m = x2.shape[0]
    if mode == "train":
        if m < 2:
            raise ShapeError("train-mode batch norm needs >= 2 samples per channel")
        mean = x2.mean(axis=0)
        # E[x^2] - E[x]^2 in one fused pass, no full-size temporary
        sq = np.einsum("mc,mc->c", x2, x2, optimize=True) / dt.type(m)
        var = np.maximum(sq - mean * mean, 0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    elif mode == "infer":
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    inv = 1.0 / np.sqrt(var + dt.type(eps))
    scale = (gamma.data * inv).astype(dt)
    shift = (beta.data - mean * scale).astype(dt)
    out = x.data * scale
    out += shift

    def backward_fn(gy):
        gy2 = gy.reshape(-1, C)
        need_any = gamma.requires_grad or x.requires_grad
        gy_sum = gy2.sum(axis=0) if (need_any or beta.requires_grad) else None
        gyx = np.einsum("mc,mc->c", gy2, x2, optimize=True) if need_any else None
        if gamma.requires_grad:
            # sum(gy * xhat) = inv * (sum(gy*x) - mean*sum(gy))
            gamma.accumulate(inv * (gyx - mean * gy_sum), own=True)
        if beta.requires_grad:
            beta.accumulate(gy_sum.copy(), own=True)
        if x.requires_grad:
            if mode == "infer":
                x.accumulate(gy * scale, own=True)
                return
            mm = dt.type(m)
            # dx = scale*gy + kx*x + c0 with per-channel coefficients
            s2 = gyx - mean * gy_sum                   # sum(gy * (x - mean))
            kx = -(scale * inv * inv * s2) / mm
            c0 = -(mean * kx) - scale * gy_sum / mm
            dx = gy * scale
            dx += x.data * kx
            dx += c0
            x.accumulate(dx, own=True)

    return _make(out, (x, gamma, beta), backward_fn)


def relu(x):
    """Elementwise max(0, x)."""
    out = np.maximum(x.data, 0)

    def backward_fn(gy):
        if x.requires_grad:
            x.accumulate(np.where(out > 0, gy, gy.dtype.type(0)), own=True)

    return _make(out, (x,), backward_fn)


def add(a, b):
    """Elementwise sum of two identically shaped tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward_fn(gy):
        if a.requires_grad:
            a.accumulate(gy)
        if b.requires_grad:
            b.accumulate(gy)

    return _make(out, (a, b), backward_fn)


def concat_channels(*xs):
    """Stack tensors along the channel (last) axis, in argument order."""
    if len(xs) < 1:
        raise ShapeError("concat_channels needs at least one tensor")
    lead = xs[0].data.shape[:-1]
    for t in xs[1:]:
        if t.data.shape[:-1] != lead:
            raise ShapeError(f"concat_channels non-channel extents differ: "
                             f"{lead} vs {t.data.shape[:-1]}")
    out = np.concatenate([t.data for t in xs], axis=-1)
    widths = [t.data.shape[-1] for t in xs]
    offsets = np.cumsum([0] + widths)

    def backward_fn(gy):
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate(gy[..., lo:hi])

    return _make(out, xs, backward_fn)


def softmax_channels(x):
    """Per-voxel softmax over the channel axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(gy):
        if x.requires_grad:
            inner = (gy * out).sum(axis=-1, keepdims=True)
            x.accumulate((gy - inner) * out, own=True)

    return _make(out, (x,), backward_fn)


def crop_center(x, target):
    """Spatially centered crop to ``target`` extents; margins must be even.

    Works on [D,H,W,C] and [N,D,H,W,C]. Backward scatters gradients into the
    cropped window and zeros elsewhere.
    """
    nd = x.data.ndim
    if nd not in (4, 5):
        raise ShapeError(f"crop_center expects 4/5-d input, got {x.data.shape}")
    off = 1 if nd == 5 else 0
    spatial = x.data.shape[off:off + 3]
    if len(target) != 3:
        raise ShapeError(f"crop target must have 3 extents, got {target}")
    margins = []
    for s, t in zip(spatial, target):
        m = s - t
        if m < 0 or m % 2 != 0:
            raise ShapeError(f"cannot center-crop extent {s} to {t}: margin must "
                             f"be even and non-negative")
        margins.append(m // 2)
    sl = (slice(None),) * off + tuple(
        slice(m, m + t) for m, t in zip(margins, target)
    )
    out = x.data[sl].copy()

    def backward_fn(gy):
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[sl] = gy
            x.accumulate(g, own=True)

    return _make(out, (x,), backward_fn)


def sum_all(x):
    """Scalar sum of all elements (test and loss plumbing)."""
    out = x.data.sum()

    def backward_fn(gy):
        if x.requires_grad:
            x.accumulate(np.broadcast_to(gy, x.data.shape))

    return _make(out, (x,), backward_fn)


def scale(x, factor):
    """Multiply by a python scalar."""
    f = x.data.dtype.type(factor)
    out = x.data * f

    def backward_fn(gy):
        if x.requires_grad:
            x.accumulate(gy * f)

    return _make(out, (x,), backward_fn)
