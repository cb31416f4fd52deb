"""Pure numpy kernels for the linear softmax classifier.

Parameter layout is ``theta = [W.ravel(), b]`` with ``W`` of shape
``(n_classes, m)`` in row-major order. These functions are the reference
backend; ``_ckernels`` implements the same signatures in Cython.
"""
import numpy as np


def _split(theta, m, n_classes):
    W = theta[: n_classes * m].reshape(n_classes, m)
    b = theta[n_classes * m : n_classes * m + n_classes]
    return W, b


def _probs_and_logz(theta, X, n_classes):
    m = X.shape[1]
    W, b = _split(theta, m, n_classes)
    z = X @ W.T + b
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    logz = np.log(s[:, 0]) + zmax[:, 0]
    return z, p, logz


def softmax_xent(theta, X, y, n_classes):
    """Mean cross-entropy and its gradient w.r.t. ``theta``."""
    n = X.shape[0]
    z, p, logz = _probs_and_logz(theta, X, n_classes)
    rows = np.arange(n)
    loss = float(np.mean(logz - z[rows, y]))
    delta = p
    delta[rows, y] -= 1.0
    delta /= n
    gW = delta.T @ X
    gb = delta.sum(axis=0)
    return loss, np.concatenate([gW.ravel(), gb])


def softmax_xent_input_grad(theta, X, y, n_classes):
    """Gradient of the mean cross-entropy w.r.t. every input row."""
    n, m = X.shape
    W, _ = _split(theta, m, n_classes)
    _, p, _ = _probs_and_logz(theta, X, n_classes)
    p[np.arange(n), y] -= 1.0
    return (p @ W) / n


def softmax_probs(theta, X, n_classes):
    return _probs_and_logz(theta, X, n_classes)[1]
