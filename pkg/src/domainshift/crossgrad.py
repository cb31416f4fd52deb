"""CrossGrad: label and domain classifiers trained on each other's input perturbations.

Each step perturbs the batch along the input gradient of one network's loss
and trains the other network on a mix of clean and perturbed inputs::

    X_d = X + eps_label * grad_x J_domain(x_i)   (row-wise, per-example loss)
    X_l = X + eps_domain * grad_x J_label(x_i)
    label  net: (1 - alpha_label)  J_label(X)  + alpha_label  J_label(X_d)
    domain net: (1 - alpha_domain) J_domain(X) + alpha_domain J_domain(X_l)

``eps_label`` sizes the perturbation the label network trains on, even
though that perturbation follows the domain network's gradient (and
symmetrically for ``eps_domain``).

Both networks are updated simultaneously from perturbations computed at the
start of the step. Losses are averaged per domain and combined with
population weights ``n_i / N`` through the same weighted step as ERM, so
``eps_label = 0`` (or ``alpha_label = 0``) trains the label network exactly
like full-batch ERM.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from domainshift.model import (
    ConfigurationError,
    DivergenceError,
    DomainDataset,
    ModelParams,
    evaluate,
    input_grad,
    loss_and_grad,
)
from domainshift.reweighting import RunResult, erm_weights, weighted_step

__all__ = ["CrossGradConfig", "DualParams", "input_grad", "example_input_grad", "perturb", "crossgrad_step", "crossgrad_train"]


@dataclass
class CrossGradConfig:
    eps_label: float = 1.0
    eps_domain: float = 1.0
    alpha_label: float = 0.5
    alpha_domain: float = 0.5
    lr: float = 0.1
    epochs: int = 400
    seed: int = 0
    label_hidden: tuple = ()
    domain_hidden: tuple = (8,)
    divergence_threshold: float = 1e6

    def __post_init__(self):
        if self.eps_label < 0 or self.eps_domain < 0:
            raise ConfigurationError("perturbation sizes must be non-negative")
        if not (0.0 <= self.alpha_label <= 1.0 and 0.0 <= self.alpha_domain <= 1.0):
            raise ConfigurationError("mixing weights must lie in [0, 1]")
        if self.lr <= 0 or self.epochs < 1:
            raise ConfigurationError("lr must be positive and epochs >= 1")


class DualParams(NamedTuple):
    label: ModelParams
    domain: ModelParams


def example_input_grad(params: ModelParams, X, targets):
    """Row ``i`` is the gradient of example ``i``'s own loss w.r.t. ``x_i``.

    :func:`input_grad` differentiates the batch mean, so its rows carry a
    ``1/N`` factor; the perturbation is defined per example, without it.
    """
    return len(X) * input_grad(params, X, targets)


def perturb(X, grad, eps):
    """``X + eps * grad``; returns ``X`` itself when ``eps == 0``."""
    if eps == 0:
        return X
    return X + eps * grad


def _grouped(params: ModelParams, X, targets, groups, weights):
    """Per-group losses ``(k,)`` and gradients ``(k, P)``; empty groups get zeros."""
    k = len(weights)
    losses = np.zeros(k)
    grads = np.zeros((k, params.n_params))
    for i in range(k):
        mask = groups == i
        if mask.any():
            losses[i], grads[i] = loss_and_grad(params, X[mask], targets[mask])
    return losses, grads


def _mixed(params, X, X_aug, targets, groups, weights, mix):
    losses, grads = _grouped(params, X, targets, groups, weights)
    if mix == 0 or X_aug is X:
        return losses, grads
    _, grads_aug = _grouped(params, X_aug, targets, groups, weights)
    return losses, (1.0 - mix) * grads + mix * grads_aug


def label_update(theta_label: ModelParams, X, X_d, Y, groups, weights, alpha_label, lr):
    """Label-network step on clean and domain-perturbed inputs (never sees domain targets)."""
    losses, grads = _mixed(theta_label, X, X_d, Y, groups, weights, alpha_label)
    return theta_label.with_flat(weighted_step(theta_label.flat(), weights, grads, lr)), losses


def domain_update(theta_domain: ModelParams, X, X_l, D, weights, alpha_domain, lr):
    """Domain-network step on clean and label-perturbed inputs (never sees class labels)."""
    losses, grads = _mixed(theta_domain, X, X_l, D, D, weights, alpha_domain)
    return theta_domain.with_flat(weighted_step(theta_domain.flat(), weights, grads, lr)), losses


def crossgrad_step(dual: DualParams, X, Y, D, cfg: CrossGradConfig, weights=None):
    """One simultaneous update of both networks on the batch ``(X, Y, D)``.

    ``weights`` combines per-domain mean losses; it defaults to the batch's
    domain proportions. Returns ``(dual', label_losses)``.
    """
    k = dual.domain.n_classes
    if weights is None:
        weights = erm_weights(np.bincount(D, minlength=k))
    X_d = perturb(X, example_input_grad(dual.domain, X, D), cfg.eps_label) if cfg.eps_label else X
    X_l = perturb(X, example_input_grad(dual.label, X, Y), cfg.eps_domain) if cfg.eps_domain else X
    new_label, label_losses = label_update(dual.label, X, X_d, Y, D, weights, cfg.alpha_label, cfg.lr)
    new_domain, _ = domain_update(dual.domain, X, X_l, D, weights, cfg.alpha_domain, cfg.lr)
    return DualParams(new_label, new_domain), label_losses


def crossgrad_train(data: DomainDataset, cfg: CrossGradConfig | None = None, test: DomainDataset | None = None,
                    keep_thetas=False):
    """Full-batch CrossGrad; the returned ``params`` is the label network.

    ``keep_thetas`` records the label network's flat parameters after every
    epoch (initial point first), as :func:`domainshift.reweighting.train` does.
    """
    cfg = cfg if cfg is not None else CrossGradConfig()
    data.validate()
    k = data.n_domains
    if k < 2:
        raise ConfigurationError("CrossGrad needs at least two domains")
    dual = DualParams(ModelParams.init(data.n_features, data.n_classes, cfg.label_hidden, cfg.seed),
                      ModelParams.init(data.n_features, k, cfg.domain_hidden, cfg.seed + 1))
    weights = erm_weights(data.sizes)
    alpha_trace = np.tile(weights, (cfg.epochs, 1))
    loss_trace = np.empty((cfg.epochs, k))
    thetas = [dual.label.flat()] if keep_thetas else []
    for epoch in range(cfg.epochs):
        dual, losses = crossgrad_step(dual, data.X, data.y, data.d, cfg, weights)
        if not np.all(losses <= cfg.divergence_threshold):
            raise DivergenceError(f"CrossGrad diverged at epoch {epoch}: domain losses {losses}")
        loss_trace[epoch] = losses
        if keep_thetas:
            thetas.append(dual.label.flat())
    train_losses, train_accs = evaluate(dual.label, data)
    result = RunResult("CrossGrad", cfg.seed, dual.label, alpha_trace, loss_trace, train_losses, train_accs,
                       theta_trace=thetas, extra={"domain_params": dual.domain})
    if test is not None:
        result.test_losses, result.test_accs = evaluate(dual.label, test)
    return result
