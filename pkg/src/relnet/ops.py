"""Differentiable neural-network primitives over :class:`~relnet.tensor.Tensor`.

All image tensors are NCHW.  Each op computes its forward pass in numpy and
registers a closure returning the gradient for every parent.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from relnet.tensor import ShapeError, Tensor

__all__ = [
    "activation",
    "batchnorm2d",
    "concat",
    "concat_depth",
    "conv2d",
    "linear",
    "maxpool2d",
    "mse_loss",
    "paired_conv2d",
    "relu",
    "sigmoid",
    "sum_elementwise",
]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, implemented as im2col followed by a matmul.

    ``weight`` is ``[Cout, Cin, k, k]``; the output spatial extent is
    ``(H + 2*padding - k) // stride + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if kh != kw:
        raise ShapeError("conv2d supports square kernels only")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, k={k}, padding={padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and padding <= k - 1:
            # full correlation of the output gradient with the flipped kernel
            gpad = np.pad(g, ((0, 0), (0, 0), (k - 1 - padding,) * 2, (k - 1 - padding,) * 2)) if k - 1 - padding else g
            gcols = sliding_window_view(gpad, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, cout * k * k)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gx = (gcols @ wflip.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        elif x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            span_h = stride * (ho - 1) + 1
            span_w = stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling with floor semantics.

    Trailing rows/columns that do not fill a window are dropped. The gradient
    is routed to the first maximal element of each window in row-major order.
    """
    if kernel != stride:
        raise ValueError("only non-overlapping pooling (kernel == stride) is supported")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"maxpool2d input {h}x{w} is smaller than the {kernel}x{kernel} window")
    ho, wo = h // kernel, w // kernel
    cropped = x.data[:, :, :ho * kernel, :wo * kernel]
    win = cropped.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gcrop = gwin.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kernel, wo * kernel)
        if gcrop.shape == x.shape:
            return (gcrop,)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :ho * kernel, :wo * kernel] = gcrop
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In ``train`` mode the batch statistics over (N, H, W) normalise the input
    and the running buffers are updated in place by an exponential moving
    average (unbiased variance).  ``eval`` mode uses the running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    for label, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm2d {label} must have shape ({c},), got {arr.shape}")
    shape = (1, c, 1, 1)
    if mode == "train":
        count = n * h * w
        if count < 2:
            raise ShapeError("batchnorm2d train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv.reshape(shape)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gamma.data.reshape(shape)
            dx = (inv.reshape(shape) / count) * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
            )
            return dx, dgamma, dbeta

    elif mode == "eval":
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(shape).astype(x.dtype)) * inv.reshape(shape)

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return g * (gamma.data * inv).reshape(shape), dgamma, dbeta

    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped ``[Dout, Din]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects [N,{weight.shape[-1]}] input for weight {weight.shape}, got {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._from_op(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped so that every output lies strictly in (0, 1)."""
    info = np.finfo(x.dtype)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    np.clip(out, info.tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)), out=out)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return Tensor._from_op(out, tensors, backward)


def concat_depth(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two feature maps along the channel axis, ``a`` first."""
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_depth expects 4-D maps, got {a.shape} and {b.shape}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_depth batch/spatial mismatch: {a.shape} vs {b.shape}")
    return concat((a, b), axis=1)


def paired_conv2d(class_maps: Tensor, query_maps: Tensor, weight: Tensor, bias: Tensor | None = None,
                  padding: int = 0) -> Tensor:
    """Convolve every (query, class) depth concatenation without materialising it.

    Equivalent to ``conv2d(concat_depth(class_maps[i], query_maps[j]), weight)``
    for all pairs, in query-major order (row ``j * C + i``).  Because the
    convolution is linear in its input channels, the weight is split by input
    channel and each map is convolved once, costing ``n + C`` instead of
    ``n * C`` convolutions.
    """
    if class_maps.ndim != 4 or query_maps.ndim != 4:
        raise ShapeError("paired_conv2d expects 4-D maps")
    if class_maps.shape[2:] != query_maps.shape[2:]:
        raise ShapeError(f"paired_conv2d spatial mismatch: {class_maps.shape} vs {query_maps.shape}")
    ca, cb = class_maps.shape[1], query_maps.shape[1]
    if weight.shape[1] != ca + cb:
        raise ShapeError(f"paired_conv2d weight expects {weight.shape[1]} input channels, got {ca}+{cb}")
    ya = conv2d(class_maps, weight[:, :ca], bias, padding=padding)
    yb = conv2d(query_maps, weight[:, ca:], None, padding=padding)
    n_c, n_q = ya.shape[0], yb.shape[0]
    tail = ya.shape[1:]
    grid = yb.reshape(n_q, 1, *tail) + ya.reshape(1, n_c, *tail)
    return grid.reshape(n_q * n_c, *tail)


def sum_elementwise(tensors: Sequence[Tensor], keys: Sequence | None = None) -> Tensor:
    """Pointwise sum of equally-shaped tensors.

    Summation is a left fold.  When ``keys`` are given the operands are first
    sorted by key, so any permutation of (tensor, key) pairs gives a bitwise
    identical result.
    """
    tensors = list(tensors)
    if not tensors:
        raise ValueError("sum_elementwise needs a non-empty list")
    if keys is not None:
        if len(keys) != len(tensors):
            raise ValueError("keys and tensors differ in length")
        tensors = [t for _, t in sorted(zip(keys, tensors), key=lambda kv: kv[0])]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"sum_elementwise shape mismatch: {t.shape} vs {shape}")
    if len(tensors) == 1:
        return tensors[0]
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    return Tensor._from_op(out, tensors, lambda g: [g] * len(tensors))


def mse_loss(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Squared error between ``pred`` and a constant ``target``.

    ``reduction="sum"`` is the literal sum of squares; ``"mean"`` divides by
    the element count.
    """
    if isinstance(target, Tensor):
        if target.requires_grad:
            raise ValueError("mse_loss target must not require grad")
        target = target.data
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    diff = pred.data - target
    scale = 1.0 / diff.size if reduction == "mean" else 1.0
    value = np.asarray((diff * diff).sum() * scale, dtype=pred.dtype)
    return Tensor._from_op(value, (pred,), lambda g: (diff * (2.0 * scale) * g,))
