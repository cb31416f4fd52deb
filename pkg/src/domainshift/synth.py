"""Seeded generators for the synthetic multi-domain settings.

Randomness: every stream is a PCG64 generator seeded through
``SeedSequence([seed, split, domain, purpose])``, so domains and splits
draw from independent, reproducible streams. Normal deviates use the
Box-Muller transform on PCG64 uniforms. Output is a deterministic function
of (task parameters, seed) for a given numpy version.

Label noise and feature corruption pick an exact count of examples
(``round(rate * n)``) without replacement, so measured rates match the
requested ones.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from domainshift.model import ConfigurationError, DomainDataset

KINDS = ("dg_example", "noise_simple", "rotation_simple", "spurious_simple")
TRAIN, TEST = 0, 1
ROTATION_WEIGHTS = ((1.0, 0.0), (0.87, 0.5), (0.5, 0.87))


def make_rng(seed, *keys):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def normal(rng, size):
    """Standard normal deviates via Box-Muller; ``size`` may be a shape tuple."""
    shape = (size,) if np.isscalar(size) else tuple(size)
    count = int(np.prod(shape))
    half = (count + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1]
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * half)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:count].reshape(shape)


def exact_subset(rng, n, rate):
    """Indices of exactly ``round(rate * n)`` examples, without replacement."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"rate {rate} outside [0, 1]")
    return np.sort(rng.choice(n, size=int(round(rate * n)), replace=False))


@dataclass
class GenerativeSpec:
    """Common/specific generative setting: ``x = y (e_c + E_s beta_d) + noise_d``.

    ``beta`` has one row per domain (``D x k``). ``sigma`` gives each
    domain's isotropic noise standard deviation.
    """

    e_c: np.ndarray
    E_s: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.e_c = np.asarray(self.e_c, dtype=np.float64)
        self.E_s = np.asarray(self.E_s, dtype=np.float64).reshape(len(self.e_c), -1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1, self.E_s.shape[1])
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if len(self.sigma) != len(self.beta):
            raise ConfigurationError("beta and sigma need one entry per domain")
        gram = np.column_stack([self.e_c, self.E_s])
        gram = gram.T @ gram
        if not np.allclose(gram - np.diag(np.diag(gram)), 0.0, atol=1e-10):
            raise ConfigurationError("e_c and columns of E_s must be mutually orthogonal")
        if np.any(self.sigma < 0):
            raise ConfigurationError("noise scales must be non-negative")

    @property
    def n_domains(self):
        return len(self.beta)


def gen_generative(spec: GenerativeSpec, n, seed, split=TRAIN):
    """Sample ``n[d]`` examples per domain; class 1 means ``y=+1``."""
    n = np.broadcast_to(np.asarray(n, dtype=np.int64), (spec.n_domains,))
    parts = []
    for d in range(spec.n_domains):
        rng = make_rng(seed, split, d, 0)
        sign = np.where(rng.random(n[d]) < 0.5, -1.0, 1.0)
        direction = spec.e_c + spec.E_s @ spec.beta[d]
        X = sign[:, None] * direction[None, :] + spec.sigma[d] * normal(rng, (n[d], len(spec.e_c)))
        parts.append((X, (sign > 0).astype(np.int64)))
    return DomainDataset.from_domains(parts, n_classes=2)


def gen_dg_example(beta=(-1.0, 2.0, -4.0), sigma=(0.2, 0.5, 0.4), n=500, seed=0, e_c=(1.0, 0.0), e_s=(0.0, 1.0),
                   split=TRAIN):
    """Two-feature common/specific data, one domain per ``beta`` entry."""
    spec = GenerativeSpec(e_c, np.asarray(e_s, dtype=np.float64)[:, None], np.asarray(beta)[:, None], sigma)
    return gen_generative(spec, n, seed, split)


def _gaussian_domain(seed, split, d, n, m=2):
    rng = make_rng(seed, split, d, 0)
    return rng, normal(rng, (n, m))


def gen_noise_simple(seed=0, sizes=(450, 450, 100), flip_rate=0.2, test_size=1000, noisy_test=False):
    """Label ``1[x1 + x2 > 0]``; the first domain has ``flip_rate`` labels flipped.

    Noise is applied to the training split only unless ``noisy_test``.
    """
    names = ("Noisy-Majority", "Clean-Majority", "Clean-Minority")

    def split(which, domain_sizes, noisy):
        parts = []
        for d, n in enumerate(domain_sizes):
            rng, X = _gaussian_domain(seed, which, d, n)
            y = (X[:, 0] + X[:, 1] > 0).astype(np.int64)
            if d == 0 and noisy:
                idx = exact_subset(make_rng(seed, which, d, 1), n, flip_rate)
                y[idx] = 1 - y[idx]
            parts.append((X, y))
        return DomainDataset.from_domains(parts, 2, names)

    return split(TRAIN, sizes, True), split(TEST, (test_size,) * len(sizes), noisy_test)


def gen_rotation_simple(seed=0, sizes=(499, 499, 2), test_size=1000, weights=ROTATION_WEIGHTS):
    """Label ``1[w_d . x > 0]`` with the three rotated directions as printed (0.87/0.5)."""
    names = ("Left", "Center", "Right")

    def split(which, domain_sizes):
        parts = []
        for d, n in enumerate(domain_sizes):
            _, X = _gaussian_domain(seed, which, d, n)
            y = (X @ np.asarray(weights[d]) > 0).astype(np.int64)
            parts.append((X, y))
        return DomainDataset.from_domains(parts, 2, names)

    return split(TRAIN, sizes), split(TEST, (test_size,) * len(sizes))


def rotation_labels(x):
    """Labels of a single point under each rotation-domain rule."""
    x = np.asarray(x, dtype=np.float64)
    return tuple(int(np.dot(w, x) > 0) for w in ROTATION_WEIGHTS)


def gen_spurious_simple(seed=0, sizes=(490, 490, 20), corruption_rate=0.4, agree_rate=0.6, test_size=1000,
                        corrupt_test=False):
    """Three features; the third is spurious.

    ``x3 = y`` in domain 0, ``x3 = y`` for exactly ``agree_rate`` of domain
    1 (``1 - y`` otherwise) and ``x3 = 1 - y`` in domain 2. In domain 0 the
    sign of ``(x1, x2)`` is reversed for ``corruption_rate`` of the
    examples, so the first two features predict the label for only
    ``1 - corruption_rate`` of them. The corruption is applied to the
    training split only unless ``corrupt_test``.
    """
    names = ("Spurious-Majority", "Clean-Majority", "Spurious-Minority")

    def split(which, domain_sizes, corrupt):
        parts = []
        for d, n in enumerate(domain_sizes):
            _, X = _gaussian_domain(seed, which, d, n)
            y = (X[:, 0] + X[:, 1] > 0).astype(np.int64)
            if d == 0 and corrupt:
                idx = exact_subset(make_rng(seed, which, d, 1), n, corruption_rate)
                X[idx] = -X[idx]
            if d == 0:
                x3 = y.copy()
            elif d == 1:
                x3 = 1 - y
                idx = exact_subset(make_rng(seed, which, d, 2), n, agree_rate)
                x3[idx] = y[idx]
            else:
                x3 = 1 - y
            parts.append((np.column_stack([X, x3.astype(np.float64)]), y))
        return DomainDataset.from_domains(parts, 2, names)

    return split(TRAIN, sizes, True), split(TEST, (test_size,) * len(sizes), corrupt_test)


@dataclass
class SynthTask:
    kind: str
    seed: int = 0
    sizes: tuple | None = None
    test_size: int = 1000
    flip_rate: float = 0.2
    corruption_rate: float = 0.4
    agree_rate: float = 0.6
    beta: tuple = (-1.0, 2.0, -4.0)
    sigma: tuple = (0.2, 0.5, 0.4)
    noisy_test: bool = False
    corrupt_test: bool = False
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        for name in ("flip_rate", "corruption_rate", "agree_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.sizes is not None and min(self.sizes) < 1:
            raise ConfigurationError("domain sizes must be positive")


def generate(task: SynthTask):
    """``(train, test)`` datasets for a task description.

    For ``dg_example`` every domain but the last is a training domain; the
    test set holds fresh samples of all domains, including the held-out
    last one.
    """
    kw = {} if task.sizes is None else {"sizes": tuple(task.sizes)}
    if task.kind == "noise_simple":
        return gen_noise_simple(task.seed, flip_rate=task.flip_rate, test_size=task.test_size,
                                noisy_test=task.noisy_test, **kw)
    if task.kind == "rotation_simple":
        return gen_rotation_simple(task.seed, test_size=task.test_size, **kw)
    if task.kind == "spurious_simple":
        return gen_spurious_simple(task.seed, corruption_rate=task.corruption_rate, agree_rate=task.agree_rate,
                                   test_size=task.test_size, corrupt_test=task.corrupt_test, **kw)
    D = len(task.beta)
    sizes = task.sizes if task.sizes is not None else (500,) * (D - 1)
    full_train = gen_dg_example(task.beta[:-1], task.sigma[:-1], sizes, task.seed, split=TRAIN)
    test = gen_dg_example(task.beta, task.sigma, task.test_size, task.seed, split=TEST)
    return full_train, test


def write_csv(data: DomainDataset, path):
    """Flat CSV with columns ``x1..xm, y, d``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j + 1}" for j in range(data.n_features)] + ["y", "d"])
        for x, y, d in zip(data.X, data.y, data.d):
            writer.writerow([repr(float(v)) for v in x] + [int(y), int(d)])


def read_csv(path, n_classes=None, n_domains=None):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    X, y, d = rows[:, :-2], rows[:, -2].astype(np.int64), rows[:, -1].astype(np.int64)
    return DomainDataset(X, y, d, n_classes or int(y.max()) + 1, n_domains or int(d.max()) + 1)
