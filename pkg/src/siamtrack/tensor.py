"""Dense float64 tensor engine with tape-based reverse-mode differentiation.

All arrays are row-major NCHW (or degenerate forms). Ops record onto the
active Tape; without an active tape they run forward-only, which is what
inference uses. Summation orders are fixed so results are reproducible
bit-for-bit across runs.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class TapeError(RuntimeError):
    """Raised on tape misuse (double backward, detached loss, ...)."""


_ACTIVE_TAPE = None


class Tensor:
    """A float64 array plus an optional gradient buffer and tape node."""

    __slots__ = ("data", "grad", "_tape")

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self):
        """Populate grads of everything this scalar depends on."""
        if self.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._tape is None:
            raise TapeError("backward() on a detached tensor (no tape recorded it)")
        self._tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # Small operator sugar; the heavy ops live at module level.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class Param:
    """A named leaf tensor; appears exactly once in an optimizer's list."""

    def __init__(self, data, name, trainable=True):
        self.tensor = Tensor(data)
        self.name = name
        self.trainable = trainable

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Param({self.name}, shape={self.tensor.shape})"


class _Record:
    __slots__ = ("out", "forward_fn", "backward_fn", "parents")

    def __init__(self, out, forward_fn, backward_fn, parents):
        self.out = out
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn
        self.parents = parents


class Tape:
    """Ordered op log; creation order is already topological."""

    def __init__(self):
        self.records = []
        self._used = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        if self._used:
            raise TapeError("backward() called twice on the same tape")
        if not any(rec.out is loss for rec in self.records):
            raise TapeError("loss tensor is not on this tape")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            if rec.out.grad is None or rec.backward_fn is None:
                continue
            rec.backward_fn(rec.out.grad)

    def replay(self):
        """Re-run forward closures in recorded order; values must reproduce."""
        for rec in self.records:
            rec.out.data = rec.forward_fn()

    def __len__(self):
        return len(self.records)


def _emit(forward_fn, backward_fn, parents, op_name):
    data = forward_fn()
    assert np.isfinite(data).all(), f"{op_name}: non-finite values in output"
    out = Tensor(data)
    if _ACTIVE_TAPE is not None:
        out._tape = _ACTIVE_TAPE
        _ACTIVE_TAPE.records.append(_Record(out, forward_fn, backward_fn, parents))
    return out


def _binop_check(a, b, name):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit(lambda: a.data + c, lambda g: a.accumulate(g), (a,), "add")
    _binop_check(a, b, "add")

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return _emit(lambda: a.data + b.data, backward, (a, b), "add")


def sub(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit(lambda: a.data - c, lambda g: a.accumulate(g), (a,), "sub")
    _binop_check(a, b, "sub")

    def backward(g):
        a.accumulate(g)
        b.accumulate(-g)

    return _emit(lambda: a.data - b.data, backward, (a, b), "sub")


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit(lambda: a.data * c, lambda g: a.accumulate(g * c), (a,), "mul")
    _binop_check(a, b, "mul")

    def backward(g):
        a.accumulate(g * b.data)
        b.accumulate(g * a.data)

    return _emit(lambda: a.data * b.data, backward, (a, b), "mul")


def div(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit(lambda: a.data / c, lambda g: a.accumulate(g / c), (a,), "div")
    _binop_check(a, b, "div")

    def backward(g):
        a.accumulate(g / b.data)
        b.accumulate(-g * a.data / (b.data * b.data))

    return _emit(lambda: a.data / b.data, backward, (a, b), "div")


def neg(x):
    return _emit(lambda: -x.data, lambda g: x.accumulate(-g), (x,), "neg")


def scale(x, s):
    """Multiply a tensor by a scalar-shaped Tensor (a learned gate weight)."""
    if s.data.size != 1:
        raise ShapeError(f"scale: scale factor must be scalar, got {s.shape}")

    def backward(g):
        x.accumulate(g * s.data)
        s.accumulate(np.sum(g * x.data).reshape(s.shape))

    return _emit(lambda: x.data * s.data, backward, (x, s), "scale")


def relu(x):
    def backward(g):
        x.accumulate(g * (x.data > 0.0))

    return _emit(lambda: np.maximum(x.data, 0.0), backward, (x,), "relu")


def sigmoid(x):
    state = {}

    def forward():
        d = x.data
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ez = np.exp(d[~pos])
        out[~pos] = ez / (1.0 + ez)
        state["y"] = out
        return out

    def backward(g):
        y = state["y"]
        x.accumulate(g * y * (1.0 - y))

    return _emit(forward, backward, (x,), "sigmoid")


def exp(x):
    state = {}

    def forward():
        state["y"] = np.exp(x.data)
        return state["y"]

    def backward(g):
        x.accumulate(g * state["y"])

    return _emit(forward, backward, (x,), "exp")


def log(x):
    def backward(g):
        x.accumulate(g / x.data)

    return _emit(lambda: np.log(x.data), backward, (x,), "log")


def softplus(x):
    """log(1 + e^x), computed without overflow."""

    def forward():
        d = x.data
        return np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))

    def backward(g):
        d = x.data
        sig = np.empty_like(d)
        pos = d >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ez = np.exp(d[~pos])
        sig[~pos] = ez / (1.0 + ez)
        x.accumulate(g * sig)

    return _emit(forward, backward, (x,), "softplus")


def maximum(a, b):
    """Elementwise max; ties send the gradient to the first argument."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit(
            lambda: np.maximum(a.data, c),
            lambda g: a.accumulate(g * (a.data >= c)),
            (a,),
            "maximum",
        )
    _binop_check(a, b, "maximum")

    def backward(g):
        take_a = a.data >= b.data
        a.accumulate(g * take_a)
        b.accumulate(g * ~take_a)

    return _emit(lambda: np.maximum(a.data, b.data), backward, (a, b), "maximum")


def minimum(a, b):
    """Elementwise min; ties send the gradient to the first argument."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit(
            lambda: np.minimum(a.data, c),
            lambda g: a.accumulate(g * (a.data <= c)),
            (a,),
            "minimum",
        )
    _binop_check(a, b, "minimum")

    def backward(g):
        take_a = a.data <= b.data
        a.accumulate(g * take_a)
        b.accumulate(g * ~take_a)

    return _emit(lambda: np.minimum(a.data, b.data), backward, (a, b), "minimum")


def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape

    def backward(g):
        x.accumulate(g.reshape(old))

    return _emit(lambda: x.data.reshape(shape).copy(), backward, (x,), "reshape")


def transpose_last2(x):
    def backward(g):
        x.accumulate(np.ascontiguousarray(g.swapaxes(-1, -2)))

    return _emit(
        lambda: np.ascontiguousarray(x.data.swapaxes(-1, -2)),
        backward,
        (x,),
        "transpose_last2",
    )


def concat_channels(a, b):
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: need NCHW, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: N/H/W mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def backward(g):
        a.accumulate(g[:, :ca])
        b.accumulate(g[:, ca:])

    return _emit(
        lambda: np.concatenate([a.data, b.data], axis=1), backward, (a, b), "concat_channels"
    )


def slice_channels(x, start, stop):
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x.accumulate(full)

    return _emit(lambda: x.data[:, start:stop].copy(), backward, (x,), "slice_channels")


def mul_channelwise(x, w):
    """x[N,C,H,W] * w[N,C,1,1], broadcasting w over the spatial dims."""
    if x.data.ndim != 4 or w.shape != x.shape[:2] + (1, 1):
        raise ShapeError(f"mul_channelwise: got x {x.shape}, w {w.shape}")

    def backward(g):
        x.accumulate(g * w.data)
        w.accumulate((g * x.data).sum(axis=(2, 3), keepdims=True))

    return _emit(lambda: x.data * w.data, backward, (x, w), "mul_channelwise")


def tsum(x):
    shape = x.shape

    def backward(g):
        gx = np.empty(shape)
        gx[...] = g
        x.accumulate(gx)

    return _emit(lambda: np.sum(x.data).reshape(()), backward, (x,), "sum")


def mean(x):
    n = x.data.size
    shape = x.shape

    def backward(g):
        gx = np.empty(shape)
        gx[...] = g / n
        x.accumulate(gx)

    return _emit(lambda: (np.sum(x.data) / n).reshape(()), backward, (x,), "mean")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: need 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")

    def backward(g):
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    return _emit(lambda: a.data @ b.data, backward, (a, b), "matmul")


def bmm(a, b):
    """Batched matmul over the leading axis: [N,M,K] x [N,K,P] -> [N,M,P]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm: need 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} x {b.shape}")

    def backward(g):
        a.accumulate(g @ b.data.swapaxes(-1, -2))
        b.accumulate(a.data.swapaxes(-1, -2) @ g)

    return _emit(lambda: a.data @ b.data, backward, (a, b), "bmm")


def softmax_lastaxis(x):
    state = {}

    def forward():
        m = x.data.max(axis=-1, keepdims=True)
        e = np.exp(x.data - m)
        state["y"] = e / e.sum(axis=-1, keepdims=True)
        return state["y"]

    def backward(g):
        y = state["y"]
        x.accumulate((g - (g * y).sum(axis=-1, keepdims=True)) * y)

    return _emit(forward, backward, (x,), "softmax_lastaxis")


# ---------------------------------------------------------------------------
# spatial ops


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, c, ho, wo, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3)
    )
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw
    )
    return cols, ho, wo


def _col2im(dcols, xshape, kh, kw, stride, pad):
    n, c, h, w = xshape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    dx = np.zeros((n, c, hp, wp))
    dwin = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for u in range(kh):
        for v in range(kw):
            dx[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride] += dwin[
                :, :, :, :, u, v
            ]
    if pad:
        dx = dx[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(dx)


def conv2d(x, weight, bias, stride=1, pad=0):
    """Cross-correlation convolution, NCHW in, NCHW out."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D x and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match weight {weight.shape}"
        )
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * pad, w + 2 * pad)}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    state = {}

    def forward():
        cols, _, _ = _im2col(x.data, kh, kw, stride, pad)
        state["cols"] = cols
        out = cols @ weight.data.reshape(cout, -1).T + bias.data
        return np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        grows = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        weight.accumulate((grows.T @ state["cols"]).reshape(weight.shape))
        bias.accumulate(grows.sum(axis=0))
        dcols = grows @ weight.data.reshape(cout, -1)
        x.accumulate(_col2im(dcols, x.shape, kh, kw, stride, pad))

    return _emit(forward, backward, (x, weight, bias), "conv2d")


def dwxcorr(search, template):
    """Valid per-channel cross-correlation of search with template.

    Accumulates over template cells in row-major order, so the result is
    bit-identical to a naive per-output-cell loop with the same order.
    """
    if search.data.ndim != 4 or template.data.ndim != 4:
        raise ShapeError(f"dwxcorr: need 4-D inputs, got {search.shape}, {template.shape}")
    n, c, hs, ws = search.shape
    nt, ct, ht, wt = template.shape
    if (n, c) != (nt, ct):
        raise ShapeError(f"dwxcorr: N/C mismatch {search.shape} vs {template.shape}")
    if ht > hs or wt > ws:
        raise ShapeError(
            f"dwxcorr: template {template.shape} larger than search {search.shape}"
        )
    ho, wo = hs - ht + 1, ws - wt + 1

    def forward():
        out = np.zeros((n, c, ho, wo))
        for u in range(ht):
            for v in range(wt):
                out += search.data[:, :, u : u + ho, v : v + wo] * template.data[
                    :, :, u : u + 1, v : v + 1
                ]
        return out

    def backward(g):
        ds = np.zeros_like(search.data)
        dt = np.zeros_like(template.data)
        for u in range(ht):
            for v in range(wt):
                ds[:, :, u : u + ho, v : v + wo] += g * template.data[:, :, u : u + 1, v : v + 1]
                dt[:, :, u, v] = (g * search.data[:, :, u : u + ho, v : v + wo]).sum(
                    axis=(2, 3)
                )
        search.accumulate(ds)
        template.accumulate(dt)

    return _emit(forward, backward, (search, template), "dwxcorr")


def maxpool2d(x, k, stride):
    """Max pooling; on ties the gradient goes to the first cell in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: need NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} larger than input {(h, w)}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    state = {}

    def forward():
        s0, s1, s2, s3 = x.data.strides
        win = np.lib.stride_tricks.as_strided(
            x.data, (n, c, ho, wo, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3)
        )
        flat = win.reshape(n, c, ho, wo, k * k)
        idx = flat.argmax(axis=-1)
        state["idx"] = idx
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0].copy()

    def backward(g):
        idx = state["idx"]
        dx = np.zeros_like(x.data)
        ni, ci, ii, ji = np.indices((n, c, ho, wo))
        rows = ii * stride + idx // k
        cols = ji * stride + idx % k
        np.add.at(dx, (ni, ci, rows, cols), g)
        x.accumulate(dx)

    return _emit(forward, backward, (x,), "maxpool2d")


def gap(x):
    """Global average pooling to [N,C,1,1]."""
    if x.data.ndim != 4:
        raise ShapeError(f"gap: need NCHW, got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward(g):
        x.accumulate(np.broadcast_to(g / hw, x.shape))

    return _emit(lambda: x.data.mean(axis=(2, 3), keepdims=True), backward, (x,), "gap")


def gmp(x):
    """Global max pooling to [N,C,1,1]; ties route to the first argmax cell."""
    if x.data.ndim != 4:
        raise ShapeError(f"gmp: need NCHW, got {x.shape}")
    n, c, h, w = x.shape
    state = {}

    def forward():
        flat = x.data.reshape(n, c, h * w)
        state["idx"] = flat.argmax(axis=-1)
        return flat.max(axis=-1).reshape(n, c, 1, 1)

    def backward(g):
        dx = np.zeros((n, c, h * w))
        ni, ci = np.indices((n, c))
        np.add.at(dx, (ni, ci, state["idx"]), g[:, :, 0, 0])
        x.accumulate(dx.reshape(x.shape))

    return _emit(forward, backward, (x,), "gmp")
