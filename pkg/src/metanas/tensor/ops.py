"""Differentiable primitives.

Every function takes and returns :class:`Tensor` values.  Convolutions and
pools use stride 1 and "same" padding (``k // 2`` on each side, odd ``k``), so
spatial extents never change and depth concatenation is always well defined.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import InvalidConfigError, InvalidLabelError, InvalidShapeError
from .tape import Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape),
                                  _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(a))`` without overflow for large ``|a|``."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return make_result(out, (a,), lambda g: (g * _stable_sigmoid(-a.data),))


# ---------------------------------------------------------------- reductions / shape

def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make_result(np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return make_result(np.asarray(a.data.mean()), (a,),
                       lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; the backward scatters into a zero array."""
    a = as_tensor(a)

    basic = all(isinstance(i, (slice, int)) for i in
                (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(a.data[index], (a,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise InvalidShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_result(data, tensors, backward)


# ---------------------------------------------------------------- dense layers

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return make_result(a.data @ b.data, (a, b),
                       lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape ``[B, D]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise InvalidShapeError(f"dense input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise InvalidShapeError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data
    return make_result(out, (x, weight, bias),
                       lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)))


def embedding_lookup(table, index: int) -> Tensor:
    """Row ``index`` of ``table`` as a ``[1, D]`` tensor."""
    table = as_tensor(table)
    if not 0 <= index < table.shape[0]:
        raise InvalidShapeError(f"embedding index {index} out of range {table.shape[0]}")

    def backward(g):
        full = np.zeros_like(table.data)
        full[index] += g[0]
        return (full,)

    return make_result(table.data[index:index + 1].copy(), (table,), backward)


# ---------------------------------------------------------------- convolutions

def _check_odd_kernel(kh: int, kw: int):
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidShapeError(f"same padding needs odd kernel sizes, got {kh}x{kw}")


def _pad(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def _flat_layout(x: np.ndarray, kh: int, kw: int):
    """Pad ``x[B,C,H,W]`` and lay it out as ``[C, B * L]`` with row-major padded images.

    With padded width ``Wp`` and ``L = Hp * Wp + kw - 1``, the input pixel read by
    kernel tap ``(i, j)`` for output column ``q`` is flat column ``q + i * Wp + j``,
    so every tap is one contiguous column slice.
    """
    b, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    hp, wp = h + 2 * ph, w + 2 * pw
    length = hp * wp + kw - 1
    flat = np.zeros((c, b, length))
    flat[:, :, :hp * wp].reshape(c, b, hp, wp)[:, :, ph:ph + h, pw:pw + w] = x.transpose(1, 0, 2, 3)
    n_out = (b - 1) * length + h * wp
    return flat.reshape(c, b * length), wp, length, n_out


def _from_flat(out: np.ndarray, b: int, h: int, w: int, wp: int, length: int) -> np.ndarray:
    f = out.shape[0]
    full = np.zeros((f, b * length))
    full[:, :out.shape[1]] = out
    grid = full.reshape(f, b, length)[:, :, :h * wp].reshape(f, b, h, wp)[:, :, :, :w]
    return np.ascontiguousarray(grid.transpose(1, 0, 2, 3))


def _to_flat(g: np.ndarray, wp: int, length: int, n_out: int) -> np.ndarray:
    b, f, h, w = g.shape
    full = np.zeros((f, b, length))
    full[:, :, :h * wp].reshape(f, b, h, wp)[:, :, :, :w] = g.transpose(1, 0, 2, 3)
    return full.reshape(f, b * length)[:, :n_out]


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation of ``x[B,C,H,W]`` with ``w[F,C,kh,kw]``."""
    f, c, kh, kw = w.shape
    b, _, h, wd = x.shape
    if kh == 1 and kw == 1:
        return np.einsum("bchw,fc->bfhw", x, w[:, :, 0, 0], optimize=True)
    flat, wp, length, n_out = _flat_layout(x, kh, kw)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # strided taps miss the BLAS path
    out = np.zeros((f, n_out))
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            out += taps[i, j] @ flat[:, off:off + n_out]
    return _from_flat(out, b, h, wd, wp, length)


def _kernel_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, c, h, wd = x.shape
    f = g.shape[1]
    if kh == 1 and kw == 1:
        return np.einsum("bfhw,bchw->fc", g, x, optimize=True)[:, :, None, None]
    flat, wp, length, n_out = _flat_layout(x, kh, kw)
    gf = _to_flat(g, wp, length, n_out)
    out = np.empty((f, c, kh, kw))
    for i in range(kh):
        for j in range(kw):
            off = i * wp + j
            out[:, :, i, j] = gf @ flat[:, off:off + n_out].T
    return out


def conv2d(x, kernel) -> Tensor:
    """Stride-1 same-padded cross-correlation, ``[B,C,H,W] * [F,C,kh,kw] -> [B,F,H,W]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise InvalidShapeError(
            f"conv2d input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}")
    kh, kw = kernel.shape[2:]
    _check_odd_kernel(kh, kw)

    def backward(g):
        # Adjoint of a same-padded odd-kernel correlation is a same-padded
        # correlation with the spatially flipped, channel-transposed kernel.
        flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _correlate(g, np.ascontiguousarray(flipped)) if x.requires_grad else None
        gk = _kernel_grad(x.data, g, kh, kw) if kernel.requires_grad else None
        return gx, gk

    return make_result(_correlate(x.data, kernel.data), (x, kernel), backward)


def _depthwise(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    kh, kw = w.shape[2:]
    xp = _pad(x, kh // 2, kw // 2)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("bchwij,cij->bchw", windows, w[:, 0], optimize=True)


def depthwise_conv2d(x, kernel) -> Tensor:
    """One ``kh x kw`` filter per channel: ``[B,C,H,W] * [C,1,kh,kw] -> [B,C,H,W]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != 1:
        raise InvalidShapeError(f"depthwise conv expects [C,1,kh,kw] kernel, got {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise InvalidShapeError(
            f"depthwise conv input has {x.shape[1]} channels but kernel has {kernel.shape[0]}")
    kh, kw = kernel.shape[2:]
    _check_odd_kernel(kh, kw)

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gx = _depthwise(g, np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1]))
        if kernel.requires_grad:
            xp = _pad(x.data, kh // 2, kw // 2)
            windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
            gk = np.einsum("bchw,bchwij->cij", g, windows, optimize=True)[:, None]
        return gx, gk

    return make_result(_depthwise(x.data, kernel.data), (x, kernel), backward)


def depthwise_separable_conv2d(x, depth_kernel, point_kernel) -> Tensor:
    """Depthwise ``kh x kw`` stage followed by a 1x1 pointwise conv to ``F`` channels."""
    depth_kernel, point_kernel = as_tensor(depth_kernel), as_tensor(point_kernel)
    if point_kernel.ndim != 4 or point_kernel.shape[2:] != (1, 1):
        raise InvalidShapeError(f"pointwise kernel must be [F,C,1,1], got {point_kernel.shape}")
    return conv2d(depthwise_conv2d(x, depth_kernel), point_kernel)


# ---------------------------------------------------------------- pooling

_POOL_COUNTS: dict[tuple[int, int, int], np.ndarray] = {}


def _window_counts(h: int, w: int, k: int) -> np.ndarray:
    key = (h, w, k)
    if key not in _POOL_COUNTS:
        ones = np.ones((1, 1, h, w))
        _POOL_COUNTS[key] = _window_sum(ones, k)[0, 0]
    return _POOL_COUNTS[key]


def _window_sum(x: np.ndarray, k: int) -> np.ndarray:
    xp = _pad(x, k // 2, k // 2)
    return sliding_window_view(xp, (k, k), axis=(2, 3)).sum(axis=(4, 5))


def pool2d(x, kind: str = "avg", k: int = 3) -> Tensor:
    """Stride-1 same-padded pooling.

    Average pooling divides each window by the number of in-bounds elements.
    Max pooling routes the gradient to the first maximal element of a window
    in row-major order.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise InvalidShapeError(f"pool2d expects [B,C,H,W], got {x.shape}")
    if k % 2 == 0:
        raise InvalidShapeError(f"pool window must be odd, got {k}")
    b, c, h, w = x.shape
    if kind == "avg":
        counts = _window_counts(h, w, k)
        out = _window_sum(x.data, k) / counts
        return make_result(out, (x,), lambda g: (_window_sum(g / counts, k),))
    if kind != "max":
        raise InvalidConfigError(f"unknown pool kind {kind!r}")
    p = k // 2
    xp = _pad(x.data, p, p, value=-np.inf)
    windows = sliding_window_view(xp, (k, k), axis=(2, 3)).reshape(b, c, h, w, k * k)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = np.arange(h)[None, None, :, None] + arg // k
        cols = np.arange(w)[None, None, None, :] + arg % k
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        gp = np.zeros_like(xp)
        np.add.at(gp, (bi, ci, rows, cols), g)
        return (gp[:, :, p:p + h, p:p + w],)

    return make_result(out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial axes: ``[B,C,H,W] -> [B,C]``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise InvalidShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return make_result(x.data.mean(axis=(2, 3)), (x,),
                       lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


# ---------------------------------------------------------------- losses / regularization

def log_softmax(logits) -> Tensor:
    """Row-wise log-softmax of a ``[B, N]`` tensor."""
    logits = as_tensor(logits)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return make_result(out, (logits,),
                       lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidShapeError(f"logits {logits.shape} and labels {labels.shape} do not align")
    n = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise InvalidLabelError(f"labels must lie in [0, {n}), got range "
                                f"[{labels.min()}, {labels.max()}]")
    b = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logz - shifted[rows, labels]))

    def backward(g):
        grad = softmax(logits.data)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return make_result(np.asarray(loss), (logits,), backward)


def dropout(x, p: float, rng: np.random.Generator | None = None, train: bool = True) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and scale survivors by ``1/(1-p)``.

    Identity outside training or when ``p == 0``.
    """
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise InvalidConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise InvalidConfigError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def lstm_cell(x, h, c, w_input, w_hidden, bias):
    """One LSTM step with gate order (input, forget, cell, output).

    ``x: [B, D]``, ``h, c: [B, H]``, ``w_input: [D, 4H]``, ``w_hidden: [H, 4H]``,
    ``bias: [4H]``.  Returns ``(h_next, c_next)``.
    """
    gates = add(add(matmul(x, w_input), matmul(h, w_hidden)), bias)
    hs = as_tensor(h).shape[1]
    i = sigmoid(getitem(gates, (slice(None), slice(0, hs))))
    f = sigmoid(getitem(gates, (slice(None), slice(hs, 2 * hs))))
    g = tanh(getitem(gates, (slice(None), slice(2 * hs, 3 * hs))))
    o = sigmoid(getitem(gates, (slice(None), slice(3 * hs, 4 * hs))))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next
