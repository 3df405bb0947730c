"""Differentiable operations over :class:`~attnreid.tensor.Tensor`.

Convolutions run as im2col/col2im matrix products; the transposed
convolution is the exact adjoint of ``conv2d`` (same kernel array, first
two axes reinterpreted), which the adjoint-identity test relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericalError
from .tensor import Tape, Tensor, active_tape


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    tape = active_tape(a, b)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    tape.record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    tape = active_tape(a, b)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g)
        b.accumulate_grad(-g, own=True)

    tape.record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    tape = active_tape(a, b)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g * b.data, own=True)
        b.accumulate_grad(g * a.data, own=True)

    tape.record(out, backward)
    return out


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * c)
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g * c, own=True)

    tape.record(out, backward)
    return out


def add_scalar(a, c: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data + c)
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g)

    tape.record(out, backward)
    return out


def square(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data * a.data)
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g * (2.0 * a.data), own=True)

    tape.record(out, backward)
    return out


def absolute(a) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0."""
    a = _as_tensor(a)
    out = Tensor(np.abs(a.data))
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g * np.sign(a.data), own=True)

    tape.record(out, backward)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g * (a.data > 0), own=True)

    tape.record(out, backward)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g * s * (1.0 - s), own=True)

    tape.record(out, backward)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(x)), numerically stable."""
    a = _as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        x = a.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        a.accumulate_grad(g * s, own=True)

    tape.record(out, backward)
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise NumericalError("sqrt of negative value")
    r = np.sqrt(a.data)
    out = Tensor(r)
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g * (0.5 / np.maximum(r, np.finfo(r.dtype).tiny)), own=True)

    tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    tape.record(out, backward)
    return out


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a.accumulate_grad(g.reshape(a.shape))

    tape.record(out, backward)
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = active_tape(*tensors)
    if tape is None:
        return out
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward():
        g = out.grad
        if g is None:
            return
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.accumulate_grad(piece)

    tape.record(out, backward)
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into the range."""
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index].copy())
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        full = np.zeros(a.shape, dtype=a.dtype)
        full[index] = g
        a.accumulate_grad(full, own=True)

    tape.record(out, backward)
    return out


def pick(a, index) -> Tensor:
    """Single element as a 0-d tensor."""
    a = _as_tensor(a)
    index = tuple(int(i) for i in index)
    out = Tensor(np.asarray(a.data[index]))
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        full = np.zeros(a.shape, dtype=a.dtype)
        full[index] = g
        a.accumulate_grad(full, own=True)

    tape.record(out, backward)
    return out


def gather_pairs(a, rows, cols) -> Tensor:
    """out[k] = a[rows[k], cols[k]] for a 2-D tensor."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"gather_pairs needs a 2-D tensor, got {a.shape}")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = Tensor(a.data[rows, cols])
    tape = active_tape(a)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, (rows, cols), g)
        a.accumulate_grad(full, own=True)

    tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra / network layers
# ---------------------------------------------------------------------------

def dense(x, w, b=None) -> Tensor:
    """x @ w + b for x:(N,Din), w:(Din,Dout), b:(Dout,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense: incompatible shapes {x.shape} @ {w.shape}")
    y = x.data @ w.data
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
        y = y + b.data
    out = Tensor(y)
    tape = active_tape(x, w, b) if b is not None else active_tape(x, w)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        x.accumulate_grad(g @ w.data.T, own=True)
        w.accumulate_grad(x.data.T @ g, own=True)
        if b is not None:
            b.accumulate_grad(g.sum(axis=0), own=True)

    tape.record(out, backward)
    return out


def bias_add(x, b) -> Tensor:
    """Per-channel bias for NCHW tensors."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim != 4 or b.shape != (x.shape[1],):
        raise DimensionError(f"bias_add: bias {b.shape} does not fit channels of {x.shape}")
    out = Tensor(x.data + b.data[None, :, None, None])
    tape = active_tape(x, b)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        x.accumulate_grad(g)
        b.accumulate_grad(g.sum(axis=(0, 2, 3)), own=True)

    tape.record(out, backward)
    return out


def _patch_ranges(offset: int, padding: int, stride: int, extent: int, count: int):
    """Valid output-index range [u0,u1) for reads/writes at offset-padding+stride*u."""
    base = offset - padding
    u0 = max(-(base // stride) if base < 0 else 0, 0)
    u1 = min((extent - 1 - base) // stride + 1, count)
    return u0, u1, base + stride * u0


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int,
            padding: int = 0) -> np.ndarray:
    """Patch matrix (N, C*kh*kw, oh*ow); padding handled by clipped ranges."""
    n, c, h, w = x.shape
    cols = np.zeros((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        u0, u1, r0 = _patch_ranges(i, padding, stride, h, oh)
        if u0 >= u1:
            continue
        for j in range(kw):
            v0, v1, c0 = _patch_ranges(j, padding, stride, w, ow)
            if v0 >= v1:
                continue
            cols[:, :, i, j, u0:u1, v0:v1] = x[
                :, :, r0:r0 + stride * (u1 - u0):stride, c0:c0 + stride * (v1 - v0):stride
            ]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, oh: int, ow: int,
            padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches into (N,C,H,W)."""
    n, c, h, w = shape
    x = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        u0, u1, r0 = _patch_ranges(i, padding, stride, h, oh)
        if u0 >= u1:
            continue
        for j in range(kw):
            v0, v1, c0 = _patch_ranges(j, padding, stride, w, ow)
            if v0 >= v1:
                continue
            x[:, :, r0:r0 + stride * (u1 - u0):stride,
              c0:c0 + stride * (v1 - v0):stride] += cols[:, :, i, j, u0:u1, v0:v1]
    return x


def _apply_activation(y: np.ndarray, activation):
    if activation == "relu":
        np.maximum(y, 0, out=y)
    elif activation == "sigmoid":
        np.negative(y, out=y)
        np.exp(y, out=y)
        y += 1.0
        np.reciprocal(y, out=y)
    elif activation is not None:
        raise DimensionError(f"unknown fused activation {activation!r}")
    return y


def _activation_grad(g: np.ndarray, y: np.ndarray, activation):
    """Upstream grad through the fused activation; fresh array when fused."""
    if activation == "relu":
        return g * (y > 0)
    if activation == "sigmoid":
        return g * y * (1.0 - y)
    return g


def conv2d(x, kernel, stride: int = 1, padding: int = 0,
           bias=None, activation: str | None = None) -> Tensor:
    """2-D convolution (cross-correlation) of NCHW input with (Cout,Cin,kh,kw) kernel.

    ``bias`` (per output channel) and ``activation`` ("relu"/"sigmoid")
    fuse the usual post-ops in place to avoid full-size temporaries.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D (N,C,H,W), got {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4-D (Cout,Cin,kh,kw), got {kernel.shape}")
    n, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin_k != cin:
        raise DimensionError(
            f"conv2d: input channel axis ({cin}) does not match kernel channel axis ({cin_k})"
        )
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded spatial extents ({hp}x{wp})"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    cols = _im2col(x.data, kh, kw, stride, oh, ow, padding)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    y = np.matmul(wmat, cols).reshape(n, cout, oh, ow)
    if bias is not None:
        y += bias.data[None, :, None, None]
    out = Tensor(_apply_activation(y, activation))
    tape = active_tape(x, kernel, bias) if bias is not None else active_tape(x, kernel)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        g = _activation_grad(g, y, activation)
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)), own=True)
        gf = g.reshape(n, cout, oh * ow)
        kernel.accumulate_grad(
            np.tensordot(gf, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape), own=True
        )
        gcols = np.matmul(wmat.T, gf)
        x.accumulate_grad(_col2im(gcols, x.shape, kh, kw, stride, oh, ow, padding), own=True)

    tape.record(out, backward)
    return out


def deconv2d(x, kernel, stride: int = 1, padding: int = 0, output_padding: int = 0,
             bias=None, activation: str | None = None) -> Tensor:
    """Transposed convolution: NCHW input, kernel (Cin,Cout,kh,kw).

    Exact adjoint of ``conv2d`` with the same kernel array; output spatial
    extent is (H-1)*stride - 2*padding + kh + output_padding. ``bias`` and
    ``activation`` fuse as in :func:`conv2d`.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"deconv2d: need 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, cin, h, w = x.shape
    cin_k, cout, kh, kw = kernel.shape
    if cin_k != cin:
        raise DimensionError(
            f"deconv2d: input channel axis ({cin}) does not match kernel channel axis ({cin_k})"
        )
    if stride < 1:
        raise DimensionError(f"deconv2d: stride must be >= 1, got {stride}")
    if not 0 <= output_padding < stride:
        raise DimensionError(
            f"deconv2d: output_padding must lie in [0, stride), got {output_padding}"
        )
    oh = (h - 1) * stride - 2 * padding + kh + output_padding
    ow = (w - 1) * stride - 2 * padding + kw + output_padding
    if oh < 1 or ow < 1:
        raise DimensionError(f"deconv2d: configuration yields empty output ({oh}x{ow})")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"deconv2d: bias shape {bias.shape} != ({cout},)")
    kmat = kernel.data.reshape(cin, cout * kh * kw)
    cols = np.matmul(kmat.T, x.data.reshape(n, cin, h * w))
    y = _col2im(cols, (n, cout, oh, ow), kh, kw, stride, h, w, padding)
    if bias is not None:
        y += bias.data[None, :, None, None]
    out = Tensor(_apply_activation(y, activation))
    tape = active_tape(x, kernel, bias) if bias is not None else active_tape(x, kernel)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        g = _activation_grad(g, y, activation)
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)), own=True)
        gcols = _im2col(g, kh, kw, stride, h, w, padding)
        x.accumulate_grad(np.matmul(kmat, gcols).reshape(x.shape), own=True)
        kernel.accumulate_grad(
            np.tensordot(x.data.reshape(n, cin, h * w), gcols, axes=([0, 2], [0, 2])).reshape(kernel.shape), own=True
        )

    tape.record(out, backward)
    return out


def max_pool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: input must be 4-D, got {x.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"max_pool2d: kernel {kernel} exceeds extent {h}x{w}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    flat = x.data.reshape(n * c, 1, h, w)
    cols = _im2col(flat, kernel, kernel, stride, oh, ow)  # (N*C, k*k, L)
    arg = np.argmax(cols, axis=1)
    vals = np.take_along_axis(cols, arg[:, None, :], axis=1)[:, 0, :]
    out = Tensor(vals.reshape(n, c, oh, ow))
    tape = active_tape(x)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, arg[:, None, :], g.reshape(n * c, 1, oh * ow), axis=1)
        gx = _col2im(gcols, flat.shape, kernel, kernel, stride, oh, ow)
        x.accumulate_grad(gx.reshape(x.shape), own=True)

    tape.record(out, backward)
    return out


def global_avg_pool(x) -> Tensor:
    """Spatial mean of an NCHW tensor -> (N, C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    tape = active_tape(x)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        x.accumulate_grad(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype, copy=False))

    tape.record(out, backward)
    return out


def l2_distance(x, y, eps: float = 1e-12) -> Tensor:
    """Pairwise Euclidean distance matrix for x:(Q,D), y:(G,D).

    eps inside the square root keeps the gradient finite at zero distance.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionError(f"l2_distance: incompatible shapes {x.shape} vs {y.shape}")
    sq = (
        np.sum(x.data * x.data, axis=1)[:, None]
        + np.sum(y.data * y.data, axis=1)[None, :]
        - 2.0 * (x.data @ y.data.T)
    )
    np.maximum(sq, 0.0, out=sq)
    d = np.sqrt(sq + eps)
    out = Tensor(d)
    tape = active_tape(x, y)
    if tape is None:
        return out

    def backward():
        g = out.grad
        if g is None:
            return
        a = g / d
        x.accumulate_grad(a.sum(axis=1)[:, None] * x.data - a @ y.data, own=True)
        y.accumulate_grad(a.sum(axis=0)[:, None] * y.data - a.T @ x.data, own=True)

    tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(fn, inputs, epsilon: float = 1e-5, sample: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(*inputs) -> scalar Tensor`` is evaluated under a fresh tape for the
    analytic pass, then re-evaluated tape-free for the numeric differences.
    ``sample`` caps the number of coordinates checked per input (all by
    default); error is |analytic - numeric| / max(1, |numeric|).
    """
    inputs = [_as_tensor(t) for t in inputs]
    tape = Tape()
    tape.watch(*inputs)
    out = fn(*inputs)
    if out.size != 1:
        raise DimensionError("finite_difference_check requires a scalar-valued closure")
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    tape.release()

    if not all(np.all(np.isfinite(g)) for g in analytic):
        raise NumericalError("analytic gradient contains non-finite values")

    max_err = 0.0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(flat.size, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = fn(*inputs).item()
            flat[i] = orig - epsilon
            fm = fn(*inputs).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError("closure produced non-finite values during probing")
            numeric = (fp - fm) / (2.0 * epsilon)
            err = abs(grad.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return float(max_err)
