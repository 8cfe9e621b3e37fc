"""Pointwise nonlinearities and loss heads, each with its backward pass."""
from dataclasses import dataclass

import numpy as np

from . import _backend

MSE = "mean-squared-error"
SOFTMAX_CE = "softmax-cross-entropy"


def _batched(fn, z, *args):
    z = np.asarray(z, dtype=np.complex128)
    rows = z.reshape(-1, z.shape[-1])
    return fn(rows, *args), z.shape


def modrelu(z, b):
    """ReLU(|z| + b) * z / |z|, elementwise; zero when |z| + b <= 0 or z = 0."""
    b = np.asarray(b, dtype=np.float64)
    out, shape = _batched(_backend.kernels.modrelu_forward, z, b)
    return out.reshape(shape)


def modrelu_vjp(z, b, g_out):
    """Gradients of modReLU.

    Returns ``(g_z, g_b)``: ``g_z`` packed as dL/dRe + i dL/dIm with the
    shape of ``z``; ``g_b`` summed over leading axes.  Both vanish on the dead
    region and at ``z = 0``.
    """
    b = np.asarray(b, dtype=np.float64)
    g = np.asarray(g_out, dtype=np.complex128).reshape(-1, b.shape[-1])
    (gz, gb), shape = _batched(_backend.kernels.modrelu_backward, z, b, g)
    return gz.reshape(shape), gb


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(x):
    return np.tanh(x)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    # sorted summation: the result does not depend on class order
    total = np.sort(np.exp(shifted), axis=-1).sum(axis=-1, keepdims=True)
    return shifted - np.log(total)


@dataclass(frozen=True)
class LossHead:
    kind: str
    class_count: int = 0

    def __post_init__(self):
        if self.kind not in (MSE, SOFTMAX_CE):
            raise ValueError("unknown loss kind %r" % (self.kind,))
        if self.kind == SOFTMAX_CE and self.class_count < 1:
            raise ValueError("cross-entropy head needs a positive class_count")


def loss_and_grad(head, prediction, target):
    """Scalar loss and its gradient with respect to ``prediction``.

    MSE averages the squared residual over every coordinate.  Cross-entropy
    takes logits with classes on the last axis and integer targets, and
    averages the natural-log NLL over all leading positions.
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    if head.kind == MSE:
        target = np.asarray(target, dtype=np.float64)
        if prediction.shape != target.shape:
            raise ValueError("prediction shape %s != target shape %s" % (prediction.shape, target.shape))
        resid = prediction - target
        return float(np.mean(resid ** 2)), 2.0 * resid / resid.size

    target = np.asarray(target)
    if prediction.shape[-1] != head.class_count:
        raise ValueError("expected %d logits, got %d" % (head.class_count, prediction.shape[-1]))
    if prediction.shape[:-1] != target.shape:
        raise ValueError("logits shape %s does not match targets %s" % (prediction.shape, target.shape))
    if target.size and (target.min() < 0 or target.max() >= head.class_count):
        raise ValueError("cross-entropy target index out of range [0, %d)" % head.class_count)
    logp = log_softmax(prediction)
    count = target.size
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    grad = np.exp(logp)
    np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
    return float(-picked.sum() / count), grad / count
