"""Dense tensors and the reverse-mode autodiff engine.

Everything is backed by contiguous row-major numpy buffers with layout
[N, C, spatial...] (2 or 3 spatial axes).  Operations are plain functions;
when executed inside a ``recording()`` block they append backward rules to
the active Tape, and ``backward(loss, tape)`` replays the tape in reverse
to accumulate gradients into requires_grad leaves.

Training graphs run in float32; gradient-check suites run the same graphs
in float64.
"""

import math
from contextlib import contextmanager

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}

# im2col buffers above this many elements are processed in batch chunks
_COL_CHUNK_ELEMS = 1 << 26


class ShapeError(ValueError):
    """Tensor extents incompatible with the requested operation."""


class DtypeError(TypeError):
    """Operation applied to an unsupported element type."""


class Tensor:
    """N-dimensional value of the engine: data buffer + optional gradient.

    shape has rank 1..5; dtype is float32, float64 or uint8. uint8 tensors
    never carry requires_grad.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.dtype not in DTYPE_CODES:
            raise DtypeError(f"unsupported dtype {arr.dtype}; use float32/float64/uint8")
        if not 1 <= arr.ndim <= 5:
            raise ShapeError(f"rank {arr.ndim} outside supported range 1..5")
        if requires_grad and arr.dtype == np.uint8:
            raise DtypeError("uint8 tensors cannot require gradients")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class Tape:
    """Ordered record of executed operations with their backward rules.

    Each entry is (output, inputs, backward_fn); recording order is
    topological by construction because ops append as they execute.
    """

    def __init__(self):
        self.ops = []

    def record(self, output, inputs, backward_fn):
        self.ops.append((output, inputs, backward_fn))

    def __len__(self):
        return len(self.ops)


_TAPE_STACK = []


@contextmanager
def recording():
    """Activate a fresh Tape for the duration of the block and yield it."""
    tape = Tape()
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()


def _track(out, inputs, backward_fn):
    """Mark out as grad-connected and record the op if a tape is active."""
    if any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        if _TAPE_STACK:
            _TAPE_STACK[-1].record(out, inputs, backward_fn)
    return out


def backward(loss, tape):
    """Populate grad for every requires_grad leaf reachable from loss.

    Repeated calls accumulate into leaf grads. Intermediate gradients are
    kept in a scratch map and freed as the reverse sweep passes them.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ShapeError("backward expects a scalar loss tensor")
    produced = {id(out) for out, _, _ in tape.ops}
    if id(loss) not in produced:
        raise ValueError("loss tensor was not recorded on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape.ops):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, backward_fn(g)):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if id(t) in produced:
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
            else:
                t.accumulate_grad(gi)


def _require_float(t, op):
    if t.dtype == np.uint8:
        raise DtypeError(f"{op}: uint8 input not supported")


def _require_same_dtype(op, *ts):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise DtypeError(f"{op}: mixed dtypes {dt} and {t.dtype}")


def _as_ints(v, rank, name):
    if isinstance(v, int):
        return (v,) * rank
    v = tuple(int(x) for x in v)
    if len(v) != rank:
        raise ShapeError(f"{name} has {len(v)} entries for spatial rank {rank}")
    return v


# ---------------------------------------------------------------------------
# convolution


def _conv_out_spatial(in_sp, ksp, stride, pad):
    out = []
    for i, (l, k, s, p) in enumerate(zip(in_sp, ksp, stride, pad)):
        if l + 2 * p < k:
            raise ShapeError(f"axis {i + 2}: padded extent {l + 2 * p} smaller than kernel {k}")
        out.append((l + 2 * p - k) // s + 1)
    return tuple(out)


def _batch_chunks(n, per_sample_elems):
    step = max(1, _COL_CHUNK_ELEMS // max(1, per_sample_elems))
    return [(i, min(i + step, n)) for i in range(0, n, step)]


def _im2col(xp, ksp, stride, out_sp):
    """Padded [N,C,*S] -> batch-major columns [N*prod(out), C*prod(k)]."""
    from . import _kernels
    if len(ksp) == 2:
        return _kernels.im2col2d(xp, ksp[0], ksp[1], stride[0], stride[1],
                                 out_sp[0], out_sp[1])
    return _kernels.im2col3d(xp, ksp[0], ksp[1], ksp[2], stride[0], stride[1],
                             stride[2], out_sp[0], out_sp[1], out_sp[2])


def _col2im(colg, xp_shape, ksp, stride, out_sp):
    from . import _kernels
    n, c = xp_shape[:2]
    if len(ksp) == 2:
        return _kernels.col2im2d(colg, n, c, xp_shape[2], xp_shape[3],
                                 ksp[0], ksp[1], stride[0], stride[1],
                                 out_sp[0], out_sp[1])
    return _kernels.col2im3d(colg, n, c, xp_shape[2], xp_shape[3], xp_shape[4],
                             ksp[0], ksp[1], ksp[2], stride[0], stride[1],
                             stride[2], out_sp[0], out_sp[1], out_sp[2])


def _conv_forward(x, w, b, stride, pad, want_cols=False):
    from . import _kernels
    rank = x.ndim - 2
    n, cin = x.shape[:2]
    cout = w.shape[0]
    ksp = w.shape[2:]
    out_sp = _conv_out_spatial(x.shape[2:], ksp, stride, pad)
    l = math.prod(out_sp)
    wm = w.reshape(cout, -1)
    y = np.empty((n, cout) + out_sp, dtype=x.dtype)
    per_sample = cin * math.prod(ksp) * l
    pad_w = [(0, 0), (0, 0)] + [(p, p) for p in pad]
    chunks = _batch_chunks(n, per_sample)
    keep = want_cols and len(chunks) == 1
    cols_out = None
    for lo, hi in chunks:
        nb = hi - lo
        xp = np.pad(x[lo:hi], pad_w) if any(pad) else x[lo:hi]
        cols = _im2col(np.ascontiguousarray(xp), ksp, stride, out_sp)
        if keep:
            cols_out = cols
        y2 = (cols @ wm.T).reshape(nb, l, cout)
        y[lo:hi] = _kernels.nhwc_to_nchw(y2).reshape((nb, cout) + out_sp)
    y += b.reshape((1, cout) + (1,) * rank)
    return y, out_sp, cols_out


def _conv_backward(g, x, w, stride, pad, need_gx=True, need_gw=True,
                   cols_cache=None):
    from . import _kernels
    rank = x.ndim - 2
    n, cin = x.shape[:2]
    cout = w.shape[0]
    ksp = w.shape[2:]
    out_sp = g.shape[2:]
    l = math.prod(out_sp)
    gb = g.sum(axis=(0,) + tuple(range(2, 2 + rank)))
    wm = w.reshape(cout, -1)
    gw = np.zeros_like(wm) if need_gw else None
    gx = None
    pad_w = [(0, 0), (0, 0)] + [(p, p) for p in pad]
    if need_gx and all(s == 1 for s in stride) and all(k - 1 - p >= 0
                                                      for k, p in zip(ksp, pad)):
        # stride-1 input gradient is itself a convolution of the output
        # gradient with the spatially flipped, channel-transposed kernel
        flip = (slice(None), slice(None)) + (slice(None, None, -1),) * rank
        wf = np.ascontiguousarray(w[flip].swapaxes(0, 1))
        gx, _, _ = _conv_forward(g, wf, np.zeros(cin, dtype=g.dtype), (1,) * rank,
                                 tuple(k - 1 - p for k, p in zip(ksp, pad)))
        need_gx = False
    elif need_gx:
        gx = np.zeros_like(x)
    crop = (slice(None), slice(None)) + tuple(
        slice(p, p + s) for p, s in zip(pad, x.shape[2:]))
    per_sample = cin * math.prod(ksp) * l
    chunks = _batch_chunks(n, per_sample)
    for lo, hi in chunks:
        nb = hi - lo
        if not need_gw and not need_gx:
            break
        g2 = _kernels.nchw_to_nhwc(
            np.ascontiguousarray(g[lo:hi]).reshape(nb, cout, l)).reshape(nb * l, cout)
        if need_gw:
            if cols_cache is not None and len(chunks) == 1:
                cols = cols_cache
            else:
                xp = np.pad(x[lo:hi], pad_w) if any(pad) else x[lo:hi]
                cols = _im2col(np.ascontiguousarray(xp), ksp, stride, out_sp)
            gw += g2.T @ cols
        if need_gx:
            colg = g2 @ wm
            xp_shape = (nb, cin) + tuple(s + 2 * p for s, p in zip(x.shape[2:], pad))
            gxp = _col2im(colg, xp_shape, ksp, stride, out_sp)
            gx[lo:hi] = gxp[crop]
    return gx, (gw.reshape(w.shape) if need_gw else None), gb


def convolve(x, kernel, bias, stride=1, padding=0):
    """N-d cross-correlation: x [N,C,*S] * kernel [Co,C,*K] + bias [Co].

    Output spatial extent per axis is floor((in + 2*pad - k)/stride) + 1.
    Differentiable w.r.t. x, kernel and bias.
    """
    _require_float(x, "convolve")
    _require_float(kernel, "convolve")
    _require_same_dtype("convolve", x, kernel, bias)
    rank = x.data.ndim - 2
    if rank not in (2, 3):
        raise ShapeError(f"convolve expects 2 or 3 spatial axes, got {rank}")
    if kernel.data.ndim != rank + 2:
        raise ShapeError(
            f"kernel rank {kernel.data.ndim} does not match input rank {x.data.ndim}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"axis 1: input channels {x.shape[1]} != kernel channels {kernel.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({kernel.shape[0]},)")
    stride = _as_ints(stride, rank, "stride")
    pad = _as_ints(padding, rank, "padding")
    tracking = bool(_TAPE_STACK) and (x.requires_grad or kernel.requires_grad
                                      or bias.requires_grad)
    y, _, cols = _conv_forward(x.data, kernel.data, bias.data, stride, pad,
                               want_cols=tracking and kernel.requires_grad)
    out = Tensor(y)

    def bwd(g):
        return _conv_backward(g, x.data, kernel.data, stride, pad,
                              need_gx=x.requires_grad,
                              need_gw=kernel.requires_grad,
                              cols_cache=cols)

    return _track(out, (x, kernel, bias), bwd)


# ---------------------------------------------------------------------------
# pooling


def max_pool(x, window, stride=None):
    """Windowed maximum over spatial axes; out = (L - w)//s + 1 per axis.

    Backward routes each output gradient to the arg-max position, first
    occurrence in row-major order on ties.
    """
    _require_float(x, "max_pool")
    rank = x.data.ndim - 2
    window = _as_ints(window, rank, "window")
    stride = window if stride is None else _as_ints(stride, rank, "stride")
    in_sp = x.shape[2:]
    for i, (l, w) in enumerate(zip(in_sp, window)):
        if w > l:
            raise ShapeError(f"axis {i + 2}: window {w} larger than extent {l}")
    v = np.lib.stride_tricks.sliding_window_view(
        x.data, window, axis=tuple(range(2, 2 + rank)))
    v = v[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    out_sp = v.shape[2:2 + rank]
    vf = v.reshape(v.shape[:2 + rank] + (-1,))
    idx = vf.argmax(-1)
    y = np.take_along_axis(vf, idx[..., None], -1)[..., -1]
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g):
        from . import _kernels
        n, c = x.shape[:2]
        offs = np.unravel_index(idx, window)
        grids = np.meshgrid(*[np.arange(e) * s for e, s in zip(out_sp, stride)],
                            indexing="ij")
        flat = np.zeros(idx.shape, dtype=np.int64)
        for o, gr, l in zip(offs, grids, in_sp):
            flat = flat * l + (gr + o)
        gx = np.zeros((n, c, math.prod(in_sp)), dtype=g.dtype)
        _kernels.scatter_add_channels(
            gx, np.ascontiguousarray(flat).reshape(n, c, -1),
            np.ascontiguousarray(g).reshape(n, c, -1))
        return (gx.reshape(x.shape),)

    return _track(out, (x,), bwd)


def _bin_edges(l, out):
    return [(i * l // out, (i + 1) * l // out) for i in range(out)]


def adaptive_avg_pool(x, out_spatial):
    """Mean over contiguous bins with boundaries floor(i*L/out)..floor((i+1)*L/out)."""
    _require_float(x, "adaptive_avg_pool")
    rank = x.data.ndim - 2
    out_sp = _as_ints(out_spatial, rank, "out_spatial")
    for i, (l, o) in enumerate(zip(x.shape[2:], out_sp)):
        if o > l:
            raise ShapeError(f"axis {i + 2}: output extent {o} exceeds input {l}")
    edges = [_bin_edges(l, o) for l, o in zip(x.shape[2:], out_sp)]
    y = np.empty(x.shape[:2] + out_sp, dtype=x.dtype)
    for cell in np.ndindex(*out_sp):
        sl = tuple(slice(*edges[a][i]) for a, i in enumerate(cell))
        y[(Ellipsis,) + cell] = x.data[(Ellipsis,) + sl].mean(
            axis=tuple(range(2, 2 + rank)))
    out = Tensor(y)

    def bwd(g):
        gx = np.zeros_like(x.data)
        for cell in np.ndindex(*out_sp):
            sl = tuple(slice(*edges[a][i]) for a, i in enumerate(cell))
            binsize = math.prod(e - s for s, e in
                                (edges[a][i] for a, i in enumerate(cell)))
            gx[(Ellipsis,) + sl] += (g[(Ellipsis,) + cell] / binsize).reshape(
                g.shape[:2] + (1,) * rank)
        return (gx,)

    return _track(out, (x,), bwd)


# ---------------------------------------------------------------------------
# interpolation


def _up2_axis_fwd(a, axis):
    # half-pixel centers (align-corners false) at scale 2 reduce to a
    # fixed even/odd stencil: out[2j] = 0.25 x[j-1] + 0.75 x[j],
    # out[2j+1] = 0.75 x[j] + 0.25 x[j+1], clamped at the borders
    am = np.moveaxis(a, axis, -1)
    l = am.shape[-1]
    out = np.empty(am.shape[:-1] + (2 * l,), dtype=a.dtype)
    oe = out[..., 0::2]
    oo = out[..., 1::2]
    oe[..., 0] = am[..., 0]
    if l > 1:
        oe[..., 1:] = 0.25 * am[..., :-1] + 0.75 * am[..., 1:]
        oo[..., :-1] = 0.75 * am[..., :-1] + 0.25 * am[..., 1:]
    oo[..., -1] = am[..., -1]
    return np.moveaxis(out, -1, axis)


def _up2_axis_bwd(g, axis):
    gm = np.moveaxis(g, axis, -1)
    ge = gm[..., 0::2]
    go = gm[..., 1::2]
    gx = 0.75 * (ge + go)
    if ge.shape[-1] > 1:
        gx[..., :-1] += 0.25 * ge[..., 1:]
        gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., 0] += 0.25 * ge[..., 0]
    gx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(gx, -1, axis)


def upsample_linear(x, scale=2):
    """Separable linear interpolation doubling every spatial extent.

    Sample centers follow the half-pixel convention (align-corners false).
    """
    _require_float(x, "upsample_linear")
    if scale != 2:
        raise ShapeError("only scale 2 is supported")
    rank = x.data.ndim - 2
    axes = tuple(range(2, 2 + rank))
    y = x.data
    for axis in axes:
        y = _up2_axis_fwd(y, axis)
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g):
        for axis in reversed(axes):
            g = _up2_axis_bwd(g, axis)
        return (np.ascontiguousarray(g),)

    return _track(out, (x,), bwd)


# ---------------------------------------------------------------------------
# batch norm


def batch_norm(x, gamma, beta, running_mean, running_var, train,
               momentum=0.1, epsilon=1e-5, update_running=True):
    """Normalize over all non-channel axes.

    Train mode uses batch statistics (biased variance) and updates the
    running buffers in place; eval mode normalizes by the running stats.
    """
    _require_float(x, "batch_norm")
    _require_same_dtype("batch_norm", x, gamma, beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"axis 1: gamma/beta extent != channel count {c}")
    rank = x.data.ndim - 2
    axes = (0,) + tuple(range(2, 2 + rank))
    m = x.data.size // c
    if m == 0:
        raise ShapeError("batch_norm: zero batch*spatial count")
    cshape = (1, c) + (1,) * rank
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
            running_var.data[...] = (1 - momentum) * running_var.data + momentum * var
    else:
        mean = running_mean.data
        var = running_var.data
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (x.data - mean.reshape(cshape)) * inv.reshape(cshape)
    y = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)
    out = Tensor(y.astype(x.dtype, copy=False))

    def bwd(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gi = gamma.data.reshape(cshape) * inv.reshape(cshape)
        if train:
            gx = gi / m * (m * g - gb.reshape(cshape) - xhat * gg.reshape(cshape))
        else:
            gx = gi * g
        return gx, gg, gb

    return _track(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# pointwise


def relu(x):
    _require_float(x, "relu")
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        return (g * (x.data > 0),)

    return _track(out, (x,), bwd)


def sigmoid(x):
    _require_float(x, "sigmoid")
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def bwd(g):
        return (g * y * (1 - y),)

    return _track(out, (x,), bwd)


def _elementwise_pair(a, b, op):
    _require_float(a, op)
    _require_float(b, op)
    _require_same_dtype(op, a, b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} != {b.shape}")


def add(a, b):
    _elementwise_pair(a, b, "add")
    out = Tensor(a.data + b.data)
    return _track(out, (a, b), lambda g: (g, g))


def subtract(a, b):
    """a - b elementwise."""
    _elementwise_pair(a, b, "subtract")
    out = Tensor(a.data - b.data)
    return _track(out, (a, b), lambda g: (g, -g))


def multiply(a, b):
    _elementwise_pair(a, b, "multiply")
    out = Tensor(a.data * b.data)
    return _track(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, factor):
    """x * scalar constant."""
    _require_float(x, "scale")
    factor = float(factor)
    out = Tensor(x.data * np.asarray(factor, dtype=x.dtype))
    return _track(out, (x,), lambda g: (g * factor,))


def channel_scale(features, weights):
    """Per-channel rescale: features [N,C,*S] * weights [N,C,1...]."""
    _require_float(features, "channel_scale")
    _require_float(weights, "channel_scale")
    _require_same_dtype("channel_scale", features, weights)
    rank = features.data.ndim - 2
    if weights.data.ndim != rank + 2 or weights.shape[2:] != (1,) * rank:
        raise ShapeError(f"weights spatial extents {weights.shape[2:]} must all be 1")
    if weights.shape[:2] != features.shape[:2]:
        raise ShapeError(
            f"axis 1: weight channels {weights.shape[1]} != features {features.shape[1]}")
    out = Tensor(features.data * weights.data)
    axes = tuple(range(2, 2 + rank))

    def bwd(g):
        gw = (g * features.data).sum(axis=axes, keepdims=True)
        return g * weights.data, gw

    return _track(out, (features, weights), bwd)


# ---------------------------------------------------------------------------
# shape ops


def concat(parts, axis=1):
    """Concatenate along the channel axis; backward splits the gradient."""
    if not parts:
        raise ShapeError("concat of zero parts")
    for t in parts:
        _require_float(t, "concat")
    _require_same_dtype("concat", *parts)
    base = parts[0].shape
    for t in parts[1:]:
        for i, (a, b) in enumerate(zip(base, t.shape)):
            if i != axis and a != b:
                raise ShapeError(f"axis {i}: extent {b} != {a}")
    out = Tensor(np.concatenate([t.data for t in parts], axis=axis))
    sizes = [t.shape[axis] for t in parts]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.ascontiguousarray(
            g[(slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)])
            for i in range(len(parts)))

    return _track(out, tuple(parts), bwd)


def split(x, sizes, axis=1):
    """Inverse of concat: cut x into parts of the given extents along axis."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes sum {sum(sizes)} != extent {x.shape[axis]}")
    bounds = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        sl = (slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)
        part = Tensor(np.ascontiguousarray(x.data[sl]))

        def bwd(g, sl=sl):
            gx = np.zeros_like(x.data)
            gx[sl] = g
            return (gx,)

        outs.append(_track(part, (x,), bwd))
    return outs


def tsum(x):
    """Sum of all elements, as a shape-(1,) tensor."""
    _require_float(x, "tsum")
    out = Tensor(np.asarray([x.data.sum()], dtype=x.dtype))
    return _track(out, (x,), lambda g: (np.full_like(x.data, g.reshape(-1)[0]),))


def tmean(x):
    _require_float(x, "tmean")
    out = Tensor(np.asarray([x.data.mean()], dtype=x.dtype))
    n = x.data.size
    return _track(out, (x,), lambda g: (np.full_like(x.data, g.reshape(-1)[0] / n),))


# ---------------------------------------------------------------------------
# loss

BCE_EPS = 1e-7


def bce_loss(pred, target):
    """Mean binary cross-entropy; pred clamped to [eps, 1-eps], eps=1e-7."""
    _require_float(pred, "bce_loss")
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ShapeError(f"bce_loss: target shape {t.shape} != pred {pred.shape}")
    tv = t.astype(pred.dtype, copy=False)
    if not np.all((tv == 0) | (tv == 1)):
        raise ValueError("bce_loss: target values outside {0, 1}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    val = -(tv * np.log(p) + (1 - tv) * np.log1p(-p)).mean()
    out = Tensor(np.asarray([val], dtype=pred.dtype))
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)
    n = pred.data.size

    def bwd(g):
        gp = np.where(inside, (p - tv) / (p * (1.0 - p)) / n, 0.0).astype(pred.dtype)
        return (gp * g.reshape(-1)[0],)

    return _track(out, (pred,), bwd)
