"""Layer primitives with hand-written forward/backward passes.

Array layout is NHWC throughout.  Each forward returns (out, cache); the
matching backward consumes the upstream gradient and the cache.  All
reductions use fixed numpy evaluation order, so results are
deterministic for a given input and dtype.
"""
from __future__ import annotations

import numpy as np


def _im2col3(x: np.ndarray) -> np.ndarray:
    """3x3 same-padding patch matrix: (N, H, W, C) -> (N*H*W, 9*C)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(n * h * w, 9 * c)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1, pad-1 convolution; w is (3, 3, C_in, F)."""
    n, h, wd, c = x.shape
    f = w.shape[3]
    cols = _im2col3(x)
    out = cols @ w.reshape(9 * c, f) + b
    return out.reshape(n, h, wd, f), (cols, w, x.shape)


def conv3x3_backward(dout: np.ndarray, cache):
    cols, w, x_shape = cache
    n, h, wd, c = x_shape
    f = w.shape[3]
    dflat = dout.reshape(n * h * wd, f)
    dw = (cols.T @ dflat).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(9 * c, f).T).reshape(n, h, wd, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:h + 1, 1:wd + 1, :], dw, db


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling, stride 2; ties resolved to the first window position."""
    n, h, w, c = x.shape
    xt = (x.reshape(n, h // 2, 2, w // 2, 2, c)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(n, h // 2, w // 2, c, 4))
    idx = xt.argmax(axis=-1)
    out = np.take_along_axis(xt, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout: np.ndarray, cache):
    idx, x_shape = cache
    n, h, w, c = x_shape
    dxt = np.zeros((n, h // 2, w // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dxt, idx[..., None], dout[..., None], axis=-1)
    return (dxt.reshape(n, h // 2, w // 2, c, 2, 2)
               .transpose(0, 1, 4, 2, 5, 3)
               .reshape(n, h, w, c))


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dout: np.ndarray, mask: np.ndarray):
    return dout * mask


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, (x, w)


def dense_backward(dout: np.ndarray, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None,
                    train_mode: bool):
    """Inverted dropout: scaling happens at train time, inference is identity."""
    if not train_mode or rate <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dout: np.ndarray, keep):
    return dout if keep is None else dout * keep


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, onehot: np.ndarray,
                  clamp: float = 1e-12) -> float:
    """Mean categorical cross-entropy, -log p_true with p clamped to >= clamp."""
    p_true = (probs * onehot).sum(axis=1)
    return float(np.mean(-np.log(np.maximum(p_true, clamp))))


def softmax_xent_backward(probs: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """Gradient of mean cross-entropy w.r.t. logits."""
    return (probs - onehot) / probs.shape[0]
