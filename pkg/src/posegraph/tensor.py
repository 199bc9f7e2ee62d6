"""Dense float64 tensors with reverse-mode differentiation.

Every op records a closure that pushes the output gradient back to its
inputs.  The graph is dynamic: it is rebuilt on each forward pass and
released by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self.shape)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_nonscalar(shape):
    raise ShapeError(f"expected a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording the graph edge when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    """Only singleton dims may broadcast."""
    sa, sb = a.shape, b.shape
    for x, y in zip(reversed(sa), reversed(sb)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{opname}: cannot broadcast shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product; singleton dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


mul_broadcast = mul


def scale(x: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(x, g * c)

    return _make(x.data * c, (x,), bw)


def add_n(xs: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    if len(xs) == 1:
        return xs[0]
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"add_n: shape {x.shape} differs from {shape}")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data

    def bw(g):
        for x in xs:
            _accum(x, g)

    return _make(out, tuple(xs), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return _make(x.data * mask, (x,), bw)


_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the open interval (0, 1) where float64 would round to 0 or 1
    np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)

    def bw(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, 2.0 * g * x.data)

    return _make(x.data * x.data, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        _accum(x, g * out)

    return _make(out, (x,), bw)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    nd = x.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax_axis: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.array(x.data.sum()), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _make(np.array(x.data.mean()), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(out, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), bw)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1; all other dims must agree."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or x.shape[:1] != ref[:1] or x.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {x.shape} incompatible with {ref}")
    if len(xs) == 1:
        return xs[0]
    sizes = [x.shape[1] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                _accum(x, g[:, lo:hi])

    return _make(np.concatenate([x.data for x in xs], axis=1), tuple(xs), bw)


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    """Contiguous equal channel groups."""
    c = x.shape[1]
    if c % parts:
        raise ShapeError(f"split_channels: {c} channels not divisible by {parts}")
    w = c // parts
    return [channel_slice(x, i * w, (i + 1) * w) for i in range(parts)]


def channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        _accum(x, full)

    return _make(x.data[:, lo:hi], (x,), bw)


def flip_w(x: Tensor) -> Tensor:
    """Mirror along the last axis."""

    def bw(g):
        _accum(x, g[..., ::-1])

    return _make(x.data[..., ::-1].copy(), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    area = h * w

    def bw(g):
        _accum(x, np.broadcast_to(g / area, x.shape))

    return _make(x.data.mean(axis=(2, 3), keepdims=True), (x,), bw)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (Cout, Cin, kh, kw) weight."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"conv2d: kernel {kh}x{kw} unsupported (1 or 3 only)")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride {stride} unsupported")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wmat = weight.data.reshape(cout, -1)

    if kh == 1 and kw == 1:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, cin * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if weight.requires_grad:
            _accum(weight, (g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if x.requires_grad:
            dcols = g2 @ wmat
            if kh == 1 and kw == 1:
                dxs = dcols.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2)
                if stride > 1 or padding:
                    dxp = np.zeros((n, cin, hp, wp))
                    dxp[:, :, ::stride, ::stride] = dxs
                else:
                    dxp = dxs
            else:
                dcols = dcols.reshape(n, ho, wo, cin, kh, kw)
                dxp = np.zeros((n, cin, hp, wp))
                he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + he:stride, j:j + we:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            _accum(x, dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the running statistics are updated in place with the
    unbiased batch variance.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    c = x.shape[1]
    gsh = (1, c, 1, 1)
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu.reshape(gsh)
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
        xc = x.data - mu.reshape(gsh)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(gsh)
    out = xhat * gamma.data.reshape(gsh) + beta.data.reshape(gsh)

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * gamma.data.reshape(gsh)
            if training:
                mean_g = gx.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
                _accum(x, (gx - mean_g - xhat * mean_gx) * inv.reshape(gsh))
            else:
                _accum(x, gx * inv.reshape(gsh))

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# resampling


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear weights mapping ``n_in`` samples to ``n_out`` (half-pixel centres)."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * ratio - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Separable bilinear resize of the last two axes to ``size=(H, W)``."""
    h, w = x.shape[-2:]
    ry = interp_matrix(h, size[0])
    rx = interp_matrix(w, size[1])
    out = ry @ x.data @ rx.T

    def bw(g):
        _accum(x, ry.T @ g @ rx)

    return _make(out, (x,), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        s = g.shape
        _accum(x, g.reshape(*s[:-2], s[-2] // factor, factor, s[-1] // factor, factor).sum(axis=(-3, -1)))

    return _make(out, (x,), bw)


def resample(x: Tensor, mode: str, factor: int, weight: Tensor | None = None) -> Tensor:
    """Scale the spatial dims of ``x`` by ``factor``.

    ``bilinear_up`` and ``nearest_up`` are parameter-free; ``stride_down``
    needs a stride-2 3x3 ``weight`` per halving (``factor`` 2 uses one conv,
    4 chains two with the same weight only if a single weight is passed, so
    callers normally pass a list).
    """
    if factor not in (2, 4):
        raise ShapeError(f"resample: factor {factor} not in (2, 4)")
    if mode == "nearest_up":
        return upsample_nearest(x, factor)
    if mode == "bilinear_up":
        h, w = x.shape[-2:]
        return resize_bilinear(x, (h * factor, w * factor))
    if mode == "stride_down":
        h, w = x.shape[-2:]
        if h % factor or w % factor:
            raise ShapeError(f"resample: spatial dims {(h, w)} not divisible by {factor}")
        weights = weight if isinstance(weight, (list, tuple)) else [weight] * (factor // 2)
        if any(wt is None for wt in weights):
            raise ValueError("resample: stride_down requires conv weights")
        out = x
        for wt in weights:
            out = conv2d(out, wt, None, stride=2, padding=1)
        return out
    raise ValueError(f"resample: unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it, then free the graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss_grad = np.ones_like(loss.data)
    if loss._backward is None:
        _accum(loss, loss_grad)
        return
    loss.grad = loss_grad
    for node in reversed(order):
        fn = node._backward
        if fn is None:
            continue
        if node.grad is not None:
            fn(node.grad)
        # interior nodes drop their gradient and graph edges
        node.grad = None
        node._parents = ()
        node._backward = None
        node.requires_grad = False


class NondeterministicError(RuntimeError):
    pass


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    kink_margin: float | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor.  ``x.data`` is perturbed in place and
    restored.  With ``max_entries`` only a random subset of coordinates is
    probed.  ``kink_margin`` moves entries of ``x`` closer than that to zero
    out to +/- the margin first (for relu-like kinks).
    """
    if kink_margin:
        d = x.data
        near = np.abs(d) < kink_margin
        d[near] = np.where(d[near] >= 0, kink_margin, -kink_margin)

    with no_grad():
        f0 = f(x).item()
        f1 = f(x).item()
    if f0 != f1:
        raise NondeterministicError(f"grad_check: f is not deterministic ({f0!r} vs {f1!r})")

    was = x.requires_grad
    saved = x.grad
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    loss = f(x)
    backward(loss)
    analytic = x.grad.copy()
    x.grad = saved
    x.requires_grad = was

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.random.default_rng(seed).choice(flat.size, size=max_entries, replace=False)
    an = analytic.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(an[i] - num) / max(1e-8, abs(an[i]) + abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameters and optimisation


class Parameter(Tensor):
    """A trainable leaf tensor carrying its Adam moments."""

    __slots__ = ("name", "m", "v", "t")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0

    @property
    def tensor(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    for p in params:
        g = p.grad
        p.t += 1
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * g * g
        mhat = p.m / (1 - beta1 ** p.t)
        vhat = p.v / (1 - beta2 ** p.t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= factor
    return norm
