"""Softmax classifiers over dense features: losses, gradients and data containers.

Linear models go through :mod:`domainshift.kernels` (compiled when
available). Small MLPs with tanh hidden layers use a numpy path whose head
reuses the same kernels on the hidden representation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from domainshift import kernels

TAU_NORM = 1e-12


class ConfigurationError(ValueError):
    """Inconsistent shapes, sizes or settings."""


class NumericError(FloatingPointError):
    """A non-finite value appeared; ``index`` is the offending parameter."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DivergenceError(RuntimeError):
    pass


class Example(NamedTuple):
    x: np.ndarray
    y: int
    d: int


@dataclass
class DomainDataset:
    """Examples stacked row-wise, each tagged with a class and a domain.

    ``X`` is ``(N, m)``; ``y`` and ``d`` are integer vectors of length N.
    """

    X: np.ndarray
    y: np.ndarray
    d: np.ndarray
    n_classes: int
    n_domains: int
    domain_names: tuple = ()

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        self.d = np.ascontiguousarray(self.d, dtype=np.int64)
        if self.X.ndim != 2:
            raise ConfigurationError(f"X must be 2-d, got shape {self.X.shape}")
        n = self.X.shape[0]
        if self.y.shape != (n,) or self.d.shape != (n,):
            raise ConfigurationError("X, y and d disagree on the number of examples")
        if n and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ConfigurationError(f"class index outside [0, {self.n_classes})")
        if n and (self.d.min() < 0 or self.d.max() >= self.n_domains):
            raise ConfigurationError(f"domain index outside [0, {self.n_domains})")
        if self.domain_names and len(self.domain_names) != self.n_domains:
            raise ConfigurationError("domain_names must have one entry per domain")

    @classmethod
    def from_examples(cls, examples: Sequence[Example], n_classes, n_domains, domain_names=()):
        X = np.array([e.x for e in examples], dtype=np.float64)
        y = np.array([e.y for e in examples], dtype=np.int64)
        d = np.array([e.d for e in examples], dtype=np.int64)
        return cls(X, y, d, n_classes, n_domains, tuple(domain_names))

    @classmethod
    def from_domains(cls, parts, n_classes, domain_names=()):
        """Build from a list of per-domain ``(X_i, y_i)`` pairs."""
        X = np.concatenate([np.asarray(p[0], dtype=np.float64) for p in parts])
        y = np.concatenate([np.asarray(p[1], dtype=np.int64) for p in parts])
        d = np.concatenate([np.full(len(p[1]), i, dtype=np.int64) for i, p in enumerate(parts)])
        return cls(X, y, d, n_classes, len(parts), tuple(domain_names))

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def sizes(self):
        return np.bincount(self.d, minlength=self.n_domains)

    def domain(self, i):
        mask = self.d == i
        return self.X[mask], self.y[mask]

    def examples(self):
        return [Example(x, int(y), int(d)) for x, y, d in zip(self.X, self.y, self.d)]

    def validate(self):
        empty = np.flatnonzero(self.sizes == 0)
        if empty.size:
            name = self.name_of(int(empty[0]))
            raise ConfigurationError(f"domain {name} has no examples")

    def name_of(self, i):
        return self.domain_names[i] if self.domain_names else str(i)


@dataclass
class ModelParams:
    """Softmax head ``W (C, m_last)``, ``b (C,)`` on top of optional tanh layers.

    ``hidden`` holds ``(W_h, b_h)`` pairs with ``W_h`` of shape
    ``(units, fan_in)``. The flat layout is head first (``W`` row-major,
    then ``b``), then each hidden layer, so a linear model's flat vector is
    exactly the kernel layout.
    """

    W: np.ndarray
    b: np.ndarray
    hidden: tuple = field(default_factory=tuple)

    @classmethod
    def zeros(cls, n_features, n_classes):
        return cls(np.zeros((n_classes, n_features)), np.zeros(n_classes))

    @classmethod
    def init(cls, n_features, n_classes, hidden_sizes=(), seed=0):
        """Zero head; hidden layers uniform in +-1/sqrt(fan_in) from ``seed``."""
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5EED])))
        layers = []
        fan_in = n_features
        for units in hidden_sizes:
            bound = 1.0 / np.sqrt(fan_in)
            layers.append((rng.uniform(-bound, bound, (units, fan_in)), rng.uniform(-bound, bound, units)))
            fan_in = units
        return cls(np.zeros((n_classes, fan_in)), np.zeros(n_classes), tuple(layers))

    @property
    def n_classes(self):
        return self.W.shape[0]

    @property
    def n_features(self):
        return self.hidden[0][0].shape[1] if self.hidden else self.W.shape[1]

    @property
    def is_linear(self):
        return not self.hidden

    @property
    def n_params(self):
        return self.W.size + self.b.size + sum(Wh.size + bh.size for Wh, bh in self.hidden)

    def flat(self):
        parts = [self.W.ravel(), self.b]
        for Wh, bh in self.hidden:
            parts += [Wh.ravel(), bh]
        return np.concatenate(parts)

    def with_flat(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ConfigurationError(f"expected {self.n_params} parameters, got {theta.shape}")
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            out = theta[pos : pos + size].reshape(shape).copy()
            pos += size
            return out

        W = take(self.W.shape)
        b = take(self.b.shape)
        hidden = tuple((take(Wh.shape), take(bh.shape)) for Wh, bh in self.hidden)
        return ModelParams(W, b, hidden)

    def head_flat(self):
        return np.concatenate([self.W.ravel(), self.b])


class GradientSet(NamedTuple):
    losses: np.ndarray  # (k,)
    grads: np.ndarray  # (k, P)


@dataclass(frozen=True)
class Minibatch:
    size: int
    seed: int


def _check_dims(params: ModelParams, X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ConfigurationError("batch must be a non-empty 2-d array")
    if X.shape[1] != params.n_features:
        raise ConfigurationError(f"model expects {params.n_features} features, batch has {X.shape[1]}")
    if y.shape != (X.shape[0],):
        raise ConfigurationError("labels must have one entry per example")
    if y.min() < 0 or y.max() >= params.n_classes:
        raise ConfigurationError(f"label outside [0, {params.n_classes})")
    return X, y


def _check_finite(theta, what):
    bad = np.flatnonzero(~np.isfinite(theta))
    if bad.size:
        raise NumericError(f"non-finite {what} at parameter index {bad[0]}", index=int(bad[0]))


def features(params: ModelParams, X):
    """Hidden representation and per-layer activations (inputs first)."""
    acts = [X]
    H = X
    for Wh, bh in params.hidden:
        H = np.tanh(H @ Wh.T + bh)
        acts.append(H)
    return H, acts


def _mlp_loss_and_grad(params, X, y, want_input=False):
    H, acts = features(params, X)
    head = params.head_flat()
    C = params.n_classes
    loss, ghead = kernels.softmax_xent(head, H, y, C)
    dH = kernels.softmax_xent_input_grad(head, H, y, C)
    grads = [ghead]
    layer_grads = []
    for li in range(len(params.hidden) - 1, -1, -1):
        Wh, _ = params.hidden[li]
        a_out = acts[li + 1]
        dz = dH * (1.0 - a_out * a_out)
        layer_grads.append(np.concatenate([(dz.T @ acts[li]).ravel(), dz.sum(axis=0)]))
        dH = dz @ Wh
    grads.extend(reversed(layer_grads))
    grad = np.concatenate(grads)
    if want_input:
        return loss, grad, dH
    return loss, grad


def loss_and_grad(params: ModelParams, X, y):
    """Mean cross-entropy over the batch and its exact gradient (flat layout)."""
    X, y = _check_dims(params, X, y)
    theta = params.flat()
    _check_finite(theta, "parameter")
    if params.is_linear:
        loss, grad = kernels.softmax_xent(theta, X, y, params.n_classes)
    else:
        loss, grad = _mlp_loss_and_grad(params, X, y)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    _check_finite(grad, "gradient")
    return float(loss), grad


def input_grad(params: ModelParams, X, y):
    """Gradient of the mean cross-entropy with respect to the inputs ``X``."""
    X, y = _check_dims(params, X, y)
    if params.is_linear:
        return kernels.softmax_xent_input_grad(params.flat(), X, y, params.n_classes)
    return _mlp_loss_and_grad(params, X, y, want_input=True)[2]


def predict_proba(params: ModelParams, X):
    X = np.asarray(X, dtype=np.float64)
    H, _ = features(params, X)
    return kernels.softmax_probs(params.head_flat(), H, params.n_classes)


def evaluate(params: ModelParams, data: DomainDataset):
    """Per-domain mean cross-entropy and accuracy, shape ``(k,)`` each."""
    losses = np.empty(data.n_domains)
    accs = np.empty(data.n_domains)
    for i in range(data.n_domains):
        Xi, yi = data.domain(i)
        p = predict_proba(params, Xi)
        rows = np.arange(len(yi))
        losses[i] = -np.mean(np.log(np.maximum(p[rows, yi], np.finfo(float).tiny)))
        accs[i] = np.mean(p.argmax(axis=1) == yi)
    return losses, accs


def domain_stats(params: ModelParams, data: DomainDataset, sampling: Minibatch | None = None) -> GradientSet:
    """Per-domain loss and gradient; row ``i`` belongs to domain ``i``.

    ``sampling=None`` uses every example (deterministic). A ``Minibatch``
    draws ``min(size, n_i)`` examples per domain without replacement from a
    generator keyed by ``(seed, i)``.
    """
    losses = np.empty(data.n_domains)
    grads = np.empty((data.n_domains, params.n_params))
    for i in range(data.n_domains):
        Xi, yi = data.domain(i)
        if len(yi) == 0:
            raise ConfigurationError(f"domain {data.name_of(i)} has no examples")
        if sampling is not None:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([sampling.seed, i])))
            idx = np.sort(rng.choice(len(yi), size=min(sampling.size, len(yi)), replace=False))
            Xi, yi = Xi[idx], yi[idx]
        losses[i], grads[i] = loss_and_grad(params, Xi, yi)
    return GradientSet(losses, grads)


def scale_gradient(g, loss, p=0.5):
    """Rescale ``g`` to unit direction times ``loss**p``; zero below ``TAU_NORM``."""
    g = np.asarray(g, dtype=np.float64)
    norm = np.linalg.norm(g)
    if norm < TAU_NORM:
        return np.zeros_like(g)
    return g / norm * float(loss) ** p


def fd_gradient(loss_fn: Callable, params, h=1e-6):
    """Central-difference gradient, one coordinate at a time.

    ``params`` may be a flat array or a :class:`ModelParams`; in the latter
    case ``loss_fn`` receives ``ModelParams`` rebuilt from the perturbed
    flat vector.
    """
    if h <= 0:
        raise ConfigurationError("h must be positive")
    if isinstance(params, ModelParams):
        theta = params.flat()
        f = lambda v: loss_fn(params.with_flat(v))  # noqa: E731
    else:
        theta = np.asarray(params, dtype=np.float64)
        f = loss_fn
    theta = theta.astype(np.float64).copy()
    out = np.empty(theta.size)
    flat = theta.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(theta)
        flat[i] = orig - h
        fm = f(theta)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(theta.shape)
