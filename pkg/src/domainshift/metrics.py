"""Aggregate metrics over domains and seeds."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from domainshift.model import ConfigurationError, ModelParams, NumericError


def worst_and_macro(per_domain_losses):
    """``(max, unweighted mean)`` of per-domain losses."""
    losses = np.asarray(per_domain_losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ConfigurationError("need a non-empty vector of per-domain losses")
    return float(losses.max()), float(losses.mean())


def solution_variance(params_per_seed):
    """Total sample variance of L-infinity normalised solutions across seeds.

    Each flat parameter vector is divided by its largest absolute entry;
    the per-coordinate variances (``ddof=1``) are summed.
    """
    thetas = np.array([np.asarray(p.flat() if isinstance(p, ModelParams) else p, dtype=np.float64)
                       for p in params_per_seed])
    if thetas.ndim != 2 or thetas.shape[0] < 2:
        raise ConfigurationError("solution variance needs at least two seeds")
    scale = np.abs(thetas).max(axis=1)
    if np.any(scale == 0):
        raise NumericError("a zero solution cannot be L-infinity normalised")
    return float(np.var(thetas / scale[:, None], axis=0, ddof=1).sum())


@dataclass
class MetricsReport:
    """Per-seed domain metrics plus across-seed aggregates for one (task, algorithm)."""

    task: str
    algorithm: str
    seeds: list
    test_losses: np.ndarray  # (seeds, k)
    test_accs: np.ndarray
    train_losses: np.ndarray
    params: list = field(default_factory=list)

    @classmethod
    def from_runs(cls, task, runs):
        if not runs:
            raise ConfigurationError("no runs to report")
        return cls(task, runs[0].algorithm, [r.seed for r in runs],
                   np.array([r.test_losses for r in runs]), np.array([r.test_accs for r in runs]),
                   np.array([r.train_losses for r in runs]), [r.params for r in runs])

    @property
    def worst_losses(self):
        return self.test_losses.max(axis=1)

    @property
    def macro_losses(self):
        return self.test_losses.mean(axis=1)

    @property
    def worst_accs(self):
        return self.test_accs.min(axis=1)

    @property
    def average_accs(self):
        return self.test_accs.mean(axis=1)

    @property
    def train_macro(self):
        return self.train_losses.mean(axis=1)

    @property
    def variance(self):
        return solution_variance(self.params) if len(self.params) >= 2 else float("nan")

    def summary(self):
        def ms(v):
            return float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

        return {
            "worst_loss": ms(self.worst_losses),
            "macro_loss": ms(self.macro_losses),
            "worst_accuracy": ms(self.worst_accs),
            "average_accuracy": ms(self.average_accs),
            "train_macro_loss": ms(self.train_macro),
            "solution_variance": (self.variance, 0.0),
        }
