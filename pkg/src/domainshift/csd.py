"""Common-specific low-rank decomposition of per-domain classifiers.

Two halves live here:

* closed-form linear algebra on a bank of per-domain classifiers
  ``W = w_c 1^T + W_s Gamma^T`` with ``w_c`` orthogonal to ``span(W_s)``
  (:func:`svd_decompose` and helpers), and
* CSD training, where only the final softmax layer is decomposed into a
  common head plus a rank-``k`` domain-specific part and inference uses the
  common head alone (:func:`csd_train`).

SVD factors follow one convention throughout: singular values descending,
first non-negligible entry of every left singular vector positive.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from domainshift import kernels
from domainshift.model import (
    ConfigurationError,
    DivergenceError,
    DomainDataset,
    ModelParams,
    NumericError,
    evaluate,
    features,
)
from domainshift.reweighting import RunResult

TAU_SVD = 1e-10


class DegenerateInputError(ValueError):
    pass


class NonUniqueDecompositionWarning(UserWarning):
    pass


@dataclass
class Decomposition:
    w_c: np.ndarray  # (m,)
    W_s: np.ndarray  # (m, k)
    Gamma: np.ndarray  # (D, k)
    non_unique: bool = False

    @property
    def k(self):
        return self.W_s.shape[1]

    def matrix(self):
        return np.outer(self.w_c, np.ones(self.Gamma.shape[0])) + self.W_s @ self.Gamma.T


def _as_bank(W):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ConfigurationError("classifier bank must be an m x D matrix")
    if not np.all(np.isfinite(W)):
        raise NumericError("classifier bank has non-finite entries")
    return W


def signed_svd(A):
    """Thin SVD with the sign convention applied to ``U`` and ``Vt`` jointly."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    for j in range(U.shape[1]):
        col = U[:, j]
        big = np.flatnonzero(np.abs(col) > 1e-12 * max(1.0, np.abs(col).max()))
        if big.size and col[big[0]] < 0:
            U[:, j] = -col
            Vt[j] = -Vt[j]
    return U, s, Vt


def pinv(A, rtol=TAU_SVD):
    """Moore-Penrose pseudoinverse, dropping singular values below ``rtol * s_max``."""
    U, s, Vt = signed_svd(np.asarray(A, dtype=np.float64))
    if s.size == 0 or s[0] == 0:
        return np.zeros(A.shape[::-1])
    keep = s > rtol * s[0]
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


def _rank_k_factors(A, k):
    U, s, Vt = signed_svd(A)
    r = min(k, len(s))
    Ws = np.zeros((A.shape[0], k))
    Gamma = np.zeros((A.shape[1], k))
    Ws[:, :r] = U[:, :r] * s[:r]
    Gamma[:, :r] = Vt[:r].T
    return Ws, Gamma, s


def decomposition_objective(W, dec: Decomposition):
    """Squared Frobenius residual ``||W - w_c 1^T - W_s Gamma^T||_F^2``."""
    W = _as_bank(W)
    if dec.w_c.shape != (W.shape[0],) or dec.Gamma.shape[0] != W.shape[1] or dec.W_s.shape[0] != W.shape[0]:
        raise ConfigurationError("decomposition shapes do not match the classifier bank")
    R = W - dec.matrix()
    return float(np.sum(R * R))


def common_mean(W):
    return _as_bank(W).mean(axis=1)


def common_pinv(W, rtol=TAU_SVD):
    """``W^+ 1 / ||W^+ 1||^2``: the common part when every direction is specific.

    ``W^+ 1`` is read as the m-vector ``v`` with ``W^T v = 1`` of least norm,
    i.e. ``(W^+)^T 1``; then ``W^T w_c = ||w_c||^2 1`` makes every column of
    ``W - w_c 1^T`` orthogonal to ``w_c``.
    """
    W = _as_bank(W)
    v = pinv(W, rtol).T @ np.ones(W.shape[1])
    norm2 = float(v @ v)
    scale = max(1.0, np.abs(W).max())
    if np.sqrt(norm2) < rtol / scale:
        raise DegenerateInputError("W^+ 1 vanishes: the all-ones vector is orthogonal to the row space of W")
    return v / norm2


def svd_decompose(W, k, rtol=TAU_SVD) -> Decomposition:
    """Minimise ``||W - w_c 1^T - W_s Gamma^T||_F`` subject to ``w_c`` orthogonal to ``span(W_s)``.

    Centre the columns, keep the top-``k`` singular directions of the
    residual, then re-split the resulting rank-``k+1`` matrix ``M`` so the
    common part is orthogonal to the specific span:
    ``w_c = M^+ 1 / ||M^+ 1||^2`` and ``W_s Gamma^T = M - w_c 1^T``.

    If ``M`` has fewer than ``k + 1`` significant singular values, the split
    is not unique; a :class:`NonUniqueDecompositionWarning` is issued and the
    result is flagged. The closed form is still returned; orthogonality of
    ``w_c`` to ``span(W_s)`` is then guaranteed only if ``1`` lies in the
    row space of ``M``.
    """
    W = _as_bank(W)
    m, D = W.shape
    if not 0 <= k <= D - 1:
        raise ConfigurationError(f"rank k={k} must lie in [0, D-1] = [0, {D - 1}]")
    ones = np.ones(D)
    w_mean = W.mean(axis=1)
    Ws, Gamma, _ = _rank_k_factors(W - np.outer(w_mean, ones), k)
    M = np.outer(w_mean, ones) + Ws @ Gamma.T

    sM = np.linalg.svd(M, compute_uv=False)
    smax = sM[0] if sM.size else 0.0
    non_unique = smax == 0 or len(sM) < k + 1 or sM[k] < rtol * smax
    if non_unique:
        warnings.warn(f"rank of the fitted matrix is below k+1={k + 1}; decomposition is not unique",
                      NonUniqueDecompositionWarning, stacklevel=2)

    # w_c is homogeneous of degree one in M; solving at unit scale avoids overflow
    Mu = M / smax if smax > 0 else M
    v = pinv(Mu, rtol).T @ ones
    norm2 = float(v @ v)
    if norm2 == 0.0:
        w_c = np.zeros(m)
        non_unique = True
    else:
        w_c = smax * (v / norm2)
    Ws_new, Gamma_new, _ = _rank_k_factors(M - np.outer(w_c, ones), k)
    return Decomposition(w_c, Ws_new, Gamma_new, non_unique)


def project_orthogonal(e_c, E_s, rtol=TAU_SVD):
    """Component of ``e_c`` orthogonal to the column span of ``E_s``."""
    e_c = np.asarray(e_c, dtype=np.float64)
    E_s = np.asarray(E_s, dtype=np.float64).reshape(len(e_c), -1)
    if E_s.shape[1] == 0:
        return e_c.copy()
    s = np.linalg.svd(E_s, compute_uv=False)
    if s[-1] <= rtol * s[0] or E_s.shape[1] > E_s.shape[0]:
        raise ConfigurationError("E_s must have full column rank")
    coef, *_ = np.linalg.lstsq(E_s, e_c, rcond=None)
    return e_c - E_s @ coef


def lemma_check(W, dec: Decomposition, e_c, E_s, tol=1e-8):
    """Does ``dec`` respect the identifiability characterisation for ``W``?

    ``W`` must be the rank-``(k+1)`` matrix ``e_c 1^T + E_s Gamma_hat^T``.
    Returns True when ``dec`` reconstructs ``W`` and the two conditions
    "``w_c`` equals ``e_c`` projected off ``span(E_s)``" and
    "``w_c`` is orthogonal to ``span(W_s)``" are both true or both false.
    A decomposition that does not reproduce ``W`` fails the check.
    """
    W = _as_bank(W)
    scale = max(1.0, np.abs(W).max())
    if np.abs(W - dec.matrix()).max() > tol * scale:
        return False
    target = project_orthogonal(e_c, E_s)
    is_projection = np.abs(dec.w_c - target).max() <= tol * scale
    if dec.k == 0:
        is_orthogonal = True
    else:
        is_orthogonal = np.abs(dec.w_c @ dec.W_s).max() <= tol * scale * scale
    return bool(is_projection == is_orthogonal)


def orthonormality_penalty(w_c, W_s):
    """``sum_y ||I - What[y]^T What[y]||_F^2`` with ``What[y] = [w_c[y], W_s[y]]``.

    ``w_c`` is ``(C, m)`` (or ``(m,)`` for one class) and ``W_s`` is
    ``(C, m, k)`` (or ``(m, k)``).
    """
    w_c = np.asarray(w_c, dtype=np.float64)
    W_s = np.asarray(W_s, dtype=np.float64)
    if w_c.ndim == 1:
        w_c, W_s = w_c[None], W_s[None]
    total = 0.0
    for y in range(w_c.shape[0]):
        What = np.column_stack([w_c[y], W_s[y]])
        E = np.eye(What.shape[1]) - What.T @ What
        total += float(np.sum(E * E))
    return total


def _penalty_grad(w_c, W_s):
    gw = np.empty_like(w_c)
    gS = np.empty_like(W_s)
    for y in range(w_c.shape[0]):
        What = np.column_stack([w_c[y], W_s[y]])
        G = -4.0 * What @ (np.eye(What.shape[1]) - What.T @ What)
        gw[y] = G[:, 0]
        gS[y] = G[:, 1:]
    return gw, gS


@dataclass
class CSDTrainConfig:
    k: int = 1
    lam: float = 1.0
    kappa: float = 1.0
    epochs: int = 400
    lr: float = 0.1
    seed: int = 0
    hidden: tuple = ()
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.k < 0 or self.lam < 0 or self.kappa < 0:
            raise ConfigurationError("k, lam and kappa must be non-negative")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigurationError("epochs must be >= 1 and lr > 0")


@dataclass
class CSDParams:
    """Feature layers plus the decomposed softmax head.

    ``w_c (C, m)``, ``W_s (C, m, k)``, ``gamma (D, k)`` and a bias ``b (C,)``
    shared by the common and domain heads. Flat layout: ``w_c, W_s, gamma,
    b``, then hidden layers.
    """

    w_c: np.ndarray
    W_s: np.ndarray
    gamma: np.ndarray
    b: np.ndarray
    hidden: tuple = field(default_factory=tuple)

    @classmethod
    def init(cls, n_features, n_classes, n_domains, k, hidden_sizes=(), seed=0):
        base = ModelParams.init(n_features, n_classes, hidden_sizes, seed)
        m = base.W.shape[1]
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xC5D])))
        bound = 1.0 / np.sqrt(m)
        W_s = rng.uniform(-bound, bound, (n_classes, m, k))
        return cls(np.zeros((n_classes, m)), W_s, np.zeros((n_domains, k)), np.zeros(n_classes), base.hidden)

    @property
    def n_classes(self):
        return self.w_c.shape[0]

    @property
    def k(self):
        return self.gamma.shape[1]

    def flat(self):
        parts = [self.w_c.ravel(), self.W_s.ravel(), self.gamma.ravel(), self.b]
        for Wh, bh in self.hidden:
            parts += [Wh.ravel(), bh]
        return np.concatenate(parts)

    def with_flat(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        pos = 0

        def take(like):
            nonlocal pos
            out = theta[pos : pos + like.size].reshape(like.shape).copy()
            pos += like.size
            return out

        new = CSDParams(take(self.w_c), take(self.W_s), take(self.gamma), take(self.b),
                        tuple((take(Wh), take(bh)) for Wh, bh in self.hidden))
        if pos != theta.size:
            raise ConfigurationError(f"expected {pos} parameters, got {theta.size}")
        return new

    def domain_head(self, d):
        return self.w_c + self.W_s @ self.gamma[d]

    def common_model(self):
        """The inference model: feature layers and the common head only."""
        return ModelParams(self.w_c.copy(), self.b.copy(), self.hidden)

    def bank(self, y):
        """Per-domain classifiers for class ``y`` as an ``m x D`` matrix."""
        return np.column_stack([self.domain_head(d)[y] for d in range(self.gamma.shape[0])])


def csd_loss_and_grad(params: CSDParams, data: DomainDataset, lam, kappa):
    """Mean of ``CE(domain head) + lam * CE(common head)`` plus ``kappa`` times the penalty."""
    C = params.n_classes
    N = len(data.y)
    H, acts = features(params, data.X) if params.hidden else (data.X, [data.X])
    g_wc = np.zeros_like(params.w_c)
    g_Ws = np.zeros_like(params.W_s)
    g_gamma = np.zeros_like(params.gamma)
    g_b = np.zeros_like(params.b)
    dH = np.zeros_like(H)
    loss = 0.0
    m = params.w_c.shape[1]
    for d in range(data.n_domains):
        mask = data.d == d
        nd = int(mask.sum())
        if nd == 0:
            continue
        Hd, yd = H[mask], data.y[mask]
        w_d = params.domain_head(d)
        theta_d = np.concatenate([w_d.ravel(), params.b])
        ld, gd = kernels.softmax_xent(theta_d, Hd, yd, C)
        frac = nd / N
        loss += frac * ld
        gw_d = frac * gd[: C * m].reshape(C, m)
        g_wc += gw_d
        g_Ws += gw_d[:, :, None] * params.gamma[d][None, None, :]
        g_gamma[d] = np.einsum("cm,cmk->k", gw_d, params.W_s)
        g_b += frac * gd[C * m :]
        if params.hidden:
            dH[mask] += frac * kernels.softmax_xent_input_grad(theta_d, Hd, yd, C)
    if lam:
        theta_c = np.concatenate([params.w_c.ravel(), params.b])
        lc, gc = kernels.softmax_xent(theta_c, H, data.y, C)
        loss += lam * lc
        g_wc += lam * gc[: C * m].reshape(C, m)
        g_b += lam * gc[C * m :]
        if params.hidden:
            dH += lam * kernels.softmax_xent_input_grad(theta_c, H, data.y, C)
    if kappa:
        loss += kappa * orthonormality_penalty(params.w_c, params.W_s)
        pw, pS = _penalty_grad(params.w_c, params.W_s)
        g_wc += kappa * pw
        g_Ws += kappa * pS
    parts = [g_wc.ravel(), g_Ws.ravel(), g_gamma.ravel(), g_b]
    layer_grads = []
    for li in range(len(params.hidden) - 1, -1, -1):
        Wh, _ = params.hidden[li]
        dz = dH * (1.0 - acts[li + 1] ** 2)
        layer_grads.append(np.concatenate([(dz.T @ acts[li]).ravel(), dz.sum(axis=0)]))
        dH = dz @ Wh
    parts.extend(reversed(layer_grads))
    return float(loss), np.concatenate(parts)


def csd_train(data: DomainDataset, cfg: CSDTrainConfig | None = None, test: DomainDataset | None = None):
    """Full-batch gradient descent on the CSD objective.

    Returns a :class:`RunResult` whose ``params`` is the common-head model;
    ``extra`` carries the full :class:`CSDParams`, the per-epoch objective
    trace, and the SVD decomposition of each class's final classifier bank.
    """
    cfg = cfg if cfg is not None else CSDTrainConfig()
    data.validate()
    D = data.n_domains
    if cfg.k > D - 1:
        raise ConfigurationError(f"rank k={cfg.k} exceeds D-1={D - 1}")
    params = CSDParams.init(data.n_features, data.n_classes, D, cfg.k, cfg.hidden, cfg.seed)
    theta = params.flat()
    trace = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        loss, grad = csd_loss_and_grad(params, data, cfg.lam, cfg.kappa)
        if not np.isfinite(loss) or loss > cfg.divergence_threshold:
            raise DivergenceError(f"CSD diverged at epoch {epoch}: loss {loss}")
        trace[epoch] = loss
        theta = theta - cfg.lr * grad
        params = params.with_flat(theta)
    model = params.common_model()
    train_losses, train_accs = evaluate(model, data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonUniqueDecompositionWarning)
        decomps = [svd_decompose(params.bank(y), cfg.k) for y in range(data.n_classes)] if D >= 2 else []
    result = RunResult("CSD", cfg.seed, model, np.full((cfg.epochs, D), 1.0 / D), np.tile(trace[:, None], (1, D)),
                       train_losses, train_accs,
                       extra={"csd_params": params, "objective_trace": trace, "decompositions": decomps})
    if test is not None:
        result.test_losses, result.test_accs = evaluate(model, test)
    return result
