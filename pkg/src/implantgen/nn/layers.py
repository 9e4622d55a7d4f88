"""Dense 3D layer math with hand-written gradients.

Activations are arrays shaped ``(channels, nx, ny, nz)``; weights are
``(out_channels, in_channels, k, k, k)``.  Padding follows the "same"
convention: a stride-``s`` convolution produces ``ceil(n / s)`` samples per
axis, with any odd leftover padding placed after the data.
"""

from __future__ import annotations

import numpy as np

DICE_EPS = 1e-6


def _same_padding(n: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def _check_conv_args(x: np.ndarray, w: np.ndarray, stride: int):
    if x.ndim != 4 or w.ndim != 5:
        raise ValueError(f"expected x (C,X,Y,Z) and w (O,C,k,k,k), got {x.shape} and {w.shape}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"kernel must be cubic with odd size, got {w.shape[2:]}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def _pad_plan(spatial, k: int, stride: int):
    plan = [_same_padding(n, k, stride) for n in spatial]
    out = tuple(p[0] for p in plan)
    pads = ((0, 0),) + tuple((p[1], p[2]) for p in plan)
    return out, pads


def _im2col(xp: np.ndarray, k: int, stride: int, out) -> np.ndarray:
    """Copy every kernel tap of a padded input into a (C*k^3, N) matrix.

    Rows are ordered (channel, a, b, c) to match ``w.reshape(O, -1)``.
    """
    c_in = xp.shape[0]
    ox, oy, oz = out
    cols = np.empty((c_in, k, k, k, ox, oy, oz), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                cols[:, a, b, c] = xp[:, a:a + stride * ox:stride,
                                      b:b + stride * oy:stride,
                                      c:c + stride * oz:stride]
    return cols.reshape(c_in * k ** 3, ox * oy * oz)


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, out) -> np.ndarray:
    """Adjoint of ``_im2col``: accumulate a (C*k^3, N) matrix into a padded array."""
    ox, oy, oz = out
    cols = cols.reshape((padded_shape[0], k, k, k, ox, oy, oz))
    gp = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                gp[:, a:a + stride * ox:stride,
                   b:b + stride * oy:stride,
                   c:c + stride * oz:stride] += cols[:, a, b, c]
    return gp


def _unpad(gp: np.ndarray, pads) -> np.ndarray:
    return gp[tuple(slice(lo, gp.shape[i] - hi) for i, (lo, hi) in enumerate(pads))]


def conv3d_columns(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """The im2col matrix ``conv3d_forward`` multiplies; reusable in backward."""
    out, pads = _pad_plan(x.shape[1:], k, stride)
    return _im2col(np.pad(x, pads), k, stride, out)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                   stride: int = 1, cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation with zero "same" padding."""
    _check_conv_args(x, w, stride)
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"weight expects {w.shape[1]} input channels, got {x.shape[0]}")
    k = w.shape[2]
    out, _ = _pad_plan(x.shape[1:], k, stride)
    if cols is None:
        cols = conv3d_columns(x, k, stride)
    y = (w.reshape(w.shape[0], -1) @ cols).reshape((w.shape[0],) + out)
    if b is not None:
        y += b[:, None, None, None]
    return y


def conv3d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray,
                    stride: int = 1, cols: np.ndarray | None = None
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``conv3d_forward`` wrt input, weight and bias."""
    _check_conv_args(x, w, stride)
    k = w.shape[2]
    out, pads = _pad_plan(x.shape[1:], k, stride)
    if grad_out.shape != (w.shape[0],) + out:
        raise ValueError(f"upstream gradient shape {grad_out.shape} does not match "
                         f"output {(w.shape[0],) + out}")
    if cols is None:
        cols = conv3d_columns(x, k, stride)
    g2 = grad_out.reshape(w.shape[0], -1)
    w2 = w.reshape(w.shape[0], -1)
    grad_w = (g2 @ cols.T).reshape(w.shape)
    grad_b = g2.sum(axis=1)
    padded = (x.shape[0],) + tuple(n + lo + hi for n, (lo, hi) in zip(x.shape[1:], pads[1:]))
    grad_x = _unpad(_col2im(w2.T @ g2, padded, k, stride, out), pads)
    return grad_x, grad_w, grad_b


def deconv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None
                     ) -> np.ndarray:
    """Stride-2 transposed convolution doubling every spatial axis.

    This is exactly the adjoint of a stride-2 ``conv3d_forward`` from the
    doubled grid, whose weight is ``w`` with the channel axes swapped.
    """
    _check_conv_args(x, w, 2)
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"weight expects {w.shape[1]} input channels, got {x.shape[0]}")
    k = w.shape[2]
    big = tuple(2 * n for n in x.shape[1:])
    out, pads = _pad_plan(big, k, 2)
    padded = (w.shape[0],) + tuple(n + lo + hi for n, (lo, hi) in zip(big, pads[1:]))
    # (O, I, k^3) -> (O*k^3, I): rows ordered (out channel, a, b, c)
    wt = w.reshape(w.shape[0], w.shape[1], -1).transpose(0, 2, 1).reshape(-1, w.shape[1])
    cols = wt @ x.reshape(x.shape[0], -1)
    y = _unpad(_col2im(cols, padded, k, 2, out), pads)
    if b is not None:
        y = y + b[:, None, None, None]
    return y


def deconv3d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_conv_args(x, w, 2)
    k = w.shape[2]
    big = tuple(2 * n for n in x.shape[1:])
    if grad_out.shape != (w.shape[0],) + big:
        raise ValueError(f"upstream gradient shape {grad_out.shape} does not match "
                         f"output {(w.shape[0],) + big}")
    cols = conv3d_columns(grad_out, k, 2)  # (O*k^3, N_in)
    x2 = x.reshape(x.shape[0], -1)
    wt = w.reshape(w.shape[0], w.shape[1], -1).transpose(1, 0, 2).reshape(w.shape[1], -1)
    grad_x = (wt @ cols).reshape(x.shape)
    grad_w = (cols @ x2.T).reshape(w.shape[0], k ** 3, w.shape[1]).transpose(0, 2, 1)
    grad_w = grad_w.reshape(w.shape)
    grad_b = grad_out.sum(axis=(1, 2, 3))
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive number only, so neither branch overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient given the sigmoid *output* ``y``."""
    return grad_out * y * (1.0 - y)


def dice_loss(pred: np.ndarray, target: np.ndarray, eps: float = DICE_EPS
              ) -> tuple[float, np.ndarray]:
    """Soft dice loss ``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`` and its gradient."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    target = target.astype(pred.dtype, copy=False)
    inter = float(np.sum(pred * target))
    denom = float(np.sum(pred)) + float(np.sum(target)) + eps
    num = 2.0 * inter + eps
    loss = 1.0 - num / denom
    grad = (num - 2.0 * target * denom) / (denom * denom)
    return loss, grad.astype(pred.dtype, copy=False)
