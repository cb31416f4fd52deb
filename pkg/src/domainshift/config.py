"""Experiment configuration in INI form.

Sections::

    [experiment]        algorithm, seeds, out
    [task]              SynthTask fields
    [algorithm.cgd]     CGDConfig fields (ERM, ERM-UW, Group-DRO and CGD)
    [algorithm.crossgrad]
    [algorithm.csd]

Unknown keys are configuration errors. ``DOMAINSHIFT_SEED`` shifts the
seed list so that it starts at the given value.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field

from domainshift.crossgrad import CrossGradConfig
from domainshift.csd import CSDTrainConfig
from domainshift.model import ConfigurationError
from domainshift.reweighting import ALGORITHMS, CGDConfig
from domainshift.synth import SynthTask

ALL_ALGORITHMS = ALGORITHMS + ("CSD",)
SEED_ENV = "DOMAINSHIFT_SEED"


@dataclass
class ExperimentConfig:
    task: SynthTask = field(default_factory=lambda: SynthTask("noise_simple"))
    algorithm: str = "CGD"
    cgd: CGDConfig = field(default_factory=CGDConfig)
    crossgrad: CrossGradConfig = field(default_factory=CrossGradConfig)
    csd: CSDTrainConfig = field(default_factory=CSDTrainConfig)
    seeds: list = field(default_factory=lambda: list(range(6)))
    out: str = "runs"

    def __post_init__(self):
        if self.algorithm not in ALL_ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}; expected one of {ALL_ALGORITHMS}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")

    def algorithm_config(self, seed):
        """The algorithm's own config with ``seed`` filled in."""
        if self.algorithm == "CrossGrad":
            base = self.crossgrad
        elif self.algorithm == "CSD":
            base = self.csd
        else:
            base = self.cgd
        return dataclasses.replace(base, seed=seed)


def _parse_value(text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple) or default is None and "," in text:
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(float(t) if "." in t or "e" in t.lower() else int(t) for t in items)
        if default is None:
            if text.lower() in ("", "none"):
                return None
            return int(text)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse {text!r}") from exc


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _fill(cls, section, skip=()):
    defaults = cls() if cls is not SynthTask else SynthTask("noise_simple")
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    for key, text in section.items():
        if key not in names:
            raise ConfigurationError(f"unknown key {key!r} in [{section.name}]")
        kwargs[key] = _parse_value(text, getattr(defaults, key))
    return kwargs


def load_config(path=None, text=None) -> ExperimentConfig:
    """Parse an INI file (or string); missing keys keep their defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc

    known = {"experiment", "task", "algorithm.cgd", "algorithm.crossgrad", "algorithm.csd"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigurationError(f"unknown config sections: {sorted(extra)}")
    try:
        exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
        unknown = set(exp) - {"algorithm", "seeds", "out"}
        if unknown:
            raise ConfigurationError(f"unknown keys in [experiment]: {sorted(unknown)}")
        task_kw = _fill(SynthTask, parser["task"], skip=("options",)) if parser.has_section("task") else {}
        task = SynthTask(**{"kind": "noise_simple", **task_kw})
        cgd = CGDConfig(**_fill(CGDConfig, parser["algorithm.cgd"])) if parser.has_section("algorithm.cgd") else CGDConfig()
        cg = (CrossGradConfig(**_fill(CrossGradConfig, parser["algorithm.crossgrad"]))
              if parser.has_section("algorithm.crossgrad") else CrossGradConfig())
        csd = CSDTrainConfig(**_fill(CSDTrainConfig, parser["algorithm.csd"])) if parser.has_section("algorithm.csd") else CSDTrainConfig()
        seeds = [int(s) for s in exp.get("seeds", "0, 1, 2, 3, 4, 5").split(",") if s.strip()]
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from exc
    cfg = ExperimentConfig(task, exp.get("algorithm", "CGD").strip(), cgd, cg, csd, seeds, exp.get("out", "runs").strip())
    return apply_seed_env(cfg)


def apply_seed_env(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return cfg
    try:
        base = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
    cfg.seeds = [base + i for i in range(len(cfg.seeds))]
    cfg.task.seed = base
    return cfg


def dump_config(cfg: ExperimentConfig | None = None) -> str:
    """INI text listing every setting, defaults included."""
    cfg = cfg if cfg is not None else ExperimentConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["experiment"] = {"algorithm": cfg.algorithm, "seeds": _format_value(cfg.seeds), "out": cfg.out}
    sections = (("task", cfg.task, ("options",)), ("algorithm.cgd", cfg.cgd, ()),
                ("algorithm.crossgrad", cfg.crossgrad, ()), ("algorithm.csd", cfg.csd, ()))
    for name, obj, skip in sections:
        parser[name] = {f.name: _format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                        if f.name not in skip}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
