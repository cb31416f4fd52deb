"""Domain-reweighted training: ERM, ERM-UW, Group-DRO and Common Gradient Descent.

Every algorithm here takes the same kind of step,
``theta <- theta - eta * sum_i alpha_i g_i``, and differs only in how the
domain weights ``alpha`` are produced. Routing all of them through
:func:`weighted_step` is what makes the degenerate settings (CGD with
``eta_alpha=0``, ERM-UW with ``C=0``) reproduce uniform-weight descent
bit for bit.

Group-DRO is the hard-argmax variant: each step trains only on the domain
with the largest (choice-adjusted) loss. The exponentiated-gradient variant
used by some Group-DRO implementations is not provided.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from domainshift.model import (
    ConfigurationError,
    DivergenceError,
    DomainDataset,
    GradientSet,
    Minibatch,
    ModelParams,
    NumericError,
    TAU_NORM,
    domain_stats,
    evaluate,
    scale_gradient,
)

ALGORITHMS = ("ERM", "ERM-UW", "Group-DRO", "CGD", "CrossGrad")
VARIANTS = ("inner_product", "scaled_cosine")
SIMPLEX_TOL = 1e-9


@dataclass
class CGDConfig:
    """Training settings shared by the reweighting algorithms.

    ``eta`` is the parameter step size and ``eta_alpha`` the domain-weight
    step size. ``C`` is the choice-adjustment strength (also the ERM-UW
    up-weighting constant). ``batch_size=None`` means full-batch per-domain
    gradients.
    """

    eta: float = 0.1
    eta_alpha: float = 0.3
    p: float = 0.5
    C: float = 0.0
    variant: str = "scaled_cosine"
    epochs: int = 400
    seed: int = 0
    batch_size: int | None = None
    scale_theta_grads: bool = False
    hidden: tuple = ()
    early_stopping: bool = False
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.eta < 0 or self.eta_alpha < 0:
            raise ConfigurationError("step sizes must be non-negative")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.p < 0 or self.C < 0:
            raise ConfigurationError("p and C must be non-negative")


@dataclass(frozen=True)
class ConvergenceBudget:
    B: float
    L: float
    G: float
    T: int
    epsilon: float = 0.05

    def __post_init__(self):
        if min(self.B, self.L, self.G, self.T, self.epsilon) <= 0:
            raise ConfigurationError("budget constants must be positive")


@dataclass
class RunResult:
    algorithm: str
    seed: int
    params: ModelParams
    alpha_trace: np.ndarray  # (epochs, k) weights used at each epoch
    loss_trace: np.ndarray  # (epochs, k) train losses seen at each epoch
    train_losses: np.ndarray
    train_accs: np.ndarray
    test_losses: np.ndarray | None = None
    test_accs: np.ndarray | None = None
    theta_trace: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def check_simplex(alpha, tol=SIMPLEX_TOL):
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size == 0:
        raise ConfigurationError("domain weights must be a non-empty vector")
    if np.any(~np.isfinite(alpha)) or np.any(alpha <= 0) or abs(alpha.sum() - 1.0) > tol:
        raise ConfigurationError(f"not a strictly positive simplex point: {alpha}")
    return alpha


def uniform_weights(k):
    return _normalize_log(np.zeros(k))


def _normalize_log(logits):
    """exp-normalize with max subtraction."""
    shifted = logits - logits.max()
    if not np.all(np.isfinite(shifted)):
        raise NumericError(f"non-finite domain-weight exponent: {logits}")
    w = np.exp(shifted)
    return w / w.sum()


def erm_weights(n):
    n = np.asarray(n, dtype=np.float64)
    return n / n.sum()


def erm_uw_weights(n, C):
    """Fixed up-weighting ``alpha_i proportional to exp(C / sqrt(n_i))``."""
    n = np.asarray(n, dtype=np.float64)
    if np.any(n < 1):
        raise ConfigurationError("domain sizes must be >= 1")
    return _normalize_log(C / np.sqrt(n))


def choice_adjust(losses, n, C):
    losses = np.asarray(losses, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if losses.shape != n.shape:
        raise ConfigurationError("losses and sizes differ in length")
    if C == 0:
        return losses.copy()
    return losses + C / np.sqrt(n)


def group_dro_select(adjusted_losses):
    """Index of the largest loss; ties go to the lowest index."""
    adjusted_losses = np.asarray(adjusted_losses)
    if adjusted_losses.size == 0:
        raise ConfigurationError("no domains to select from")
    return int(np.argmax(adjusted_losses))


def transfer_scores(gs: GradientSet, variant="scaled_cosine", p=0.5, C=0.0, n=None):
    """Per-domain exponent of the CGD weight update (before ``eta_alpha``).

    ``inner_product``: ``<g_i, sum_j g_j>``. ``scaled_cosine``:
    ``sum_j (l_i l_j)**p cos(g_i, g_j)`` on choice-adjusted losses, with the
    cosine of a (near) zero gradient taken as 0.
    """
    G = np.asarray(gs.grads, dtype=np.float64)
    if variant == "inner_product":
        return G @ G.sum(axis=0)
    if variant != "scaled_cosine":
        raise ConfigurationError(f"unknown variant {variant!r}")
    losses = np.asarray(gs.losses, dtype=np.float64)
    if C:
        if n is None:
            raise ConfigurationError("choice adjustment needs domain sizes")
        losses = choice_adjust(losses, n, C)
    norms = np.linalg.norm(G, axis=1)
    live = norms >= TAU_NORM
    U = np.zeros_like(G)
    U[live] = G[live] / norms[live, None]
    cos = U @ U.T
    scale = np.power(losses, p)
    return scale * (cos @ scale)


def cgd_alpha_update(alpha, gs: GradientSet, eta_alpha, variant="scaled_cosine", p=0.5, C=0.0, n=None):
    """One multiplicative-weights step on the simplex toward transferable domains."""
    alpha = check_simplex(alpha)
    if len(alpha) != len(gs.losses):
        raise ConfigurationError("alpha and gradient set disagree on the number of domains")
    if not np.all(np.isfinite(gs.grads)):
        raise NumericError("non-finite domain gradient")
    with np.errstate(over="ignore", invalid="ignore"):
        logits = np.log(alpha) + eta_alpha * transfer_scores(gs, variant, p, C, n)
        return _normalize_log(logits)


def weighted_step(theta, alpha, grads, eta):
    return theta - eta * (alpha @ grads)


def _theta_grads(gs: GradientSet, cfg: CGDConfig):
    if not cfg.scale_theta_grads:
        return gs.grads
    return np.array([scale_gradient(g, l, cfg.p) for g, l in zip(gs.grads, gs.losses)])


def cgd_step(params: ModelParams, alpha, data: DomainDataset, cfg: CGDConfig, gs: GradientSet | None = None):
    """Update ``alpha`` from gradients at ``theta^t``, then step ``theta``.

    Returns ``(params', alpha')``. The parameter step uses raw gradients
    unless ``cfg.scale_theta_grads`` is set.
    """
    if gs is None:
        gs = domain_stats(params, data)
    new_alpha = cgd_alpha_update(alpha, gs, cfg.eta_alpha, cfg.variant, cfg.p, cfg.C, data.sizes)
    theta = weighted_step(params.flat(), new_alpha, _theta_grads(gs, cfg), cfg.eta)
    return params.with_flat(theta), new_alpha


def macro_loss(params: ModelParams, data: DomainDataset):
    return float(domain_stats(params, data).losses.mean())


def fosp_norm(params: ModelParams, data: DomainDataset):
    """Norm of the gradient of the unweighted mean of domain losses."""
    gs = domain_stats(params, data)
    return float(np.linalg.norm(gs.grads.mean(axis=0)))


def theorem_step_sizes(budget: ConvergenceBudget):
    """Step sizes ``(eta, eta_alpha)`` that guarantee an eps-FOSP in T steps."""
    B, L, G, T = budget.B, budget.L, budget.G, budget.T
    eta = 2.0 * math.sqrt(B / (L * G**2 * T))
    eta_alpha = math.sqrt(B * L / (G**6 * T))
    return eta, eta_alpha


def iterations_for(B, L, G, epsilon):
    """Smallest T whose averaged squared-gradient bound 3 sqrt(BLG^2/T) is <= eps^2."""
    return int(math.ceil(9.0 * B * L * G**2 / epsilon**4))


def estimate_budget(data: DomainDataset, params: ModelParams, epsilon=0.05):
    """Numerical constants for a linear softmax model on ``data``.

    ``B`` is the macro loss at ``params`` (descent never exceeds it),
    ``L`` bounds the Hessian of the macro loss by half the largest
    eigenvalue of each domain's augmented second-moment matrix, and ``G``
    bounds every domain gradient by ``sqrt(2) * E||[x, 1]||``.
    """
    if not params.is_linear:
        raise ConfigurationError("budget estimate is only defined for linear models")
    Ls, Gs = [], []
    for i in range(data.n_domains):
        Xi, _ = data.domain(i)
        Xa = np.hstack([Xi, np.ones((len(Xi), 1))])
        Ls.append(0.5 * np.linalg.eigvalsh(Xa.T @ Xa / len(Xa))[-1])
        Gs.append(math.sqrt(2.0) * np.linalg.norm(Xa, axis=1).mean())
    B = macro_loss(params, data)
    L = float(np.mean(Ls))
    G = float(max(Gs))
    return ConvergenceBudget(B=B, L=L, G=G, T=iterations_for(B, L, G, epsilon), epsilon=epsilon)


def _epoch_batches(cfg: CGDConfig, data: DomainDataset, epoch):
    if cfg.batch_size is None:
        return [None]
    steps = max(1, int(math.ceil(data.sizes.max() / cfg.batch_size)))
    return [Minibatch(cfg.batch_size, int(np.random.SeedSequence([cfg.seed, epoch, s]).generate_state(1)[0]))
            for s in range(steps)]


def train(algorithm, data: DomainDataset, cfg=None, test: DomainDataset | None = None,
          valid: DomainDataset | None = None, keep_thetas=False) -> RunResult:
    """Train a softmax model on ``data`` with one of :data:`ALGORITHMS`.

    The alpha and loss traces hold one row per epoch (the weights used for
    that epoch's last step and the losses that produced them).
    """
    if algorithm == "CrossGrad":
        from domainshift.crossgrad import CrossGradConfig, crossgrad_train

        return crossgrad_train(data, cfg if cfg is not None else CrossGradConfig(), test=test, keep_thetas=keep_thetas)
    if algorithm not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {algorithm!r}")
    cfg = cfg if cfg is not None else CGDConfig()
    data.validate()
    k = data.n_domains
    n = data.sizes
    params = ModelParams.init(data.n_features, data.n_classes, cfg.hidden, cfg.seed)
    theta = params.flat()

    if algorithm == "ERM":
        alpha = erm_weights(n)
    elif algorithm == "ERM-UW":
        alpha = erm_uw_weights(n, cfg.C)
    else:
        alpha = uniform_weights(k)

    alpha_trace = np.empty((cfg.epochs, k))
    loss_trace = np.empty((cfg.epochs, k))
    thetas = [theta.copy()] if keep_thetas else []
    best = (np.inf, theta.copy())
    for epoch in range(cfg.epochs):
        for batch in _epoch_batches(cfg, data, epoch):
            gs = domain_stats(params, data, batch)
            if not np.all(gs.losses <= cfg.divergence_threshold):
                raise DivergenceError(
                    f"{algorithm} diverged at epoch {epoch}: domain losses {gs.losses}")
            if algorithm == "Group-DRO":
                j = group_dro_select(choice_adjust(gs.losses, n, cfg.C))
                alpha = np.zeros(k)
                alpha[j] = 1.0
            elif algorithm == "CGD":
                alpha = cgd_alpha_update(alpha, gs, cfg.eta_alpha, cfg.variant, cfg.p, cfg.C, n)
            step_grads = _theta_grads(gs, cfg) if algorithm == "CGD" else gs.grads
            theta = weighted_step(theta, alpha, step_grads, cfg.eta)
            params = params.with_flat(theta)
        alpha_trace[epoch] = alpha
        loss_trace[epoch] = gs.losses
        if keep_thetas:
            thetas.append(theta.copy())
        if cfg.early_stopping and valid is not None:
            worst = evaluate(params, valid)[0].max()
            if worst < best[0]:
                best = (worst, theta.copy())

    if cfg.early_stopping and valid is not None:
        params = params.with_flat(best[1])
    train_losses, train_accs = evaluate(params, data)
    result = RunResult(algorithm, cfg.seed, params, alpha_trace, loss_trace, train_losses, train_accs,
                       theta_trace=thetas)
    if test is not None:
        result.test_losses, result.test_accs = evaluate(params, test)
    return result
