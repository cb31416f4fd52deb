"""Robust training across annotated domains on small softmax models.

Modules: :mod:`~domainshift.model` (losses, gradients, datasets),
:mod:`~domainshift.reweighting` (ERM, ERM-UW, Group-DRO, CGD),
:mod:`~domainshift.csd` (common-specific decomposition),
:mod:`~domainshift.crossgrad`, :mod:`~domainshift.synth` (toy data) and the
harness (:mod:`~domainshift.bench`, :mod:`~domainshift.cli`).
"""
from domainshift.kernels import BACKEND
from domainshift.model import ConfigurationError, DivergenceError, DomainDataset, ModelParams, NumericError

__version__ = "0.1.0"
__all__ = ["BACKEND", "ConfigurationError", "DivergenceError", "DomainDataset", "ModelParams", "NumericError"]
