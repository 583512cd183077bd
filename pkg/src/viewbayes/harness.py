"""Paired recognition experiments: worlds, trials, reports.

Every random draw is keyed by the master seed and a label path, so a run's
output does not depend on how trials are scheduled across threads.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import edm, observers
from .bayes import MonteCarloParams
from .errors import ConfigError, ViewBayesError
from .geometry import Priors, add_noise, project, sample_model, sample_rotation
from .streams import derive_stream

OBSERVERS = ("3d", "strongly_2d", "nn", "kernel", "map")


@dataclass(frozen=True)
class ExperimentConfig:
    k: int = 4
    n_objects: int = 3
    r: int = 8
    sigma: float = 0.05
    tau: float = 1.0
    trials: int = 500
    mc: MonteCarloParams = field(default_factory=MonteCarloParams)
    master_seed: int = 0
    observers: tuple = OBSERVERS
    output_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "observers", tuple(self.observers))
        if self.k < 1 or self.n_objects < 2 or self.r < 1 or self.trials < 0:
            raise ConfigError("need k >= 1, n_objects >= 2, r >= 1, trials >= 0")
        if not self.sigma >= 0 or not self.tau > 0:
            raise ConfigError("need sigma >= 0 and tau > 0")
        unknown = [o for o in self.observers if o not in OBSERVERS]
        if unknown or not self.observers or len(set(self.observers)) != len(self.observers):
            raise ConfigError(f"observers must be distinct names from {OBSERVERS}, got {self.observers}")
        if "strongly_2d" in self.observers and self.n_objects * self.r < 2 * self.k + 1:
            raise ConfigError(f"strongly_2d needs n_objects * r >= 2k+1 = {2 * self.k + 1} views")

    @property
    def labels(self) -> list:
        return list(range(self.n_objects))

    def priors(self) -> Priors:
        return Priors.uniform(self.labels, self.tau, self.sigma)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "mc"}
        out["observers"] = list(self.observers)
        mc = asdict(self.mc)
        mc["proposal_scales"] = list(mc["proposal_scales"])
        out["mc"] = mc
        return out


_ALIASES = {"views_per_object": "r", "seed": "master_seed"}
_MC_FIELDS = {f.name: f for f in fields(MonteCarloParams)}
_TOP_FIELDS = {f.name: f for f in fields(ExperimentConfig) if f.name != "mc"}


def _convert(name, raw: str):
    if name in ("observers", "proposal_scales"):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        return tuple(float(x) for x in items) if name == "proposal_scales" else tuple(items)
    if name in ("output_path", "stream_label", "inplane", "proposal"):
        return raw
    if name in ("sigma", "tau", "pose_scale", "defensive"):
        return float(raw)
    return int(raw)


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Build a config from flat ``key = value`` lines.

    Blank lines and ``#`` comments are ignored.  Monte-Carlo settings use
    their own names (``rotation_samples = 1024``) or an ``mc.`` prefix.
    """
    top, mc = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key.startswith("mc."):
            key = key[3:]
            if key not in _MC_FIELDS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _TOP_FIELDS:
                top[key] = _convert(key, raw)
            elif key in _MC_FIELDS:
                mc[key] = _convert(key, raw)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {raw!r}") from exc
    top.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(mc=MonteCarloParams(**mc), **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return parse_config(text, **overrides)


# World and trials ---------------------------------------------------------

@dataclass
class World:
    models: dict
    training: dict
    base: list
    anchors: observers.AnchorInfo | None


def generate_world(config: ExperimentConfig, rng: np.random.Generator | None = None) -> World:
    """Models from the prior and ``r`` noisy training views of each."""
    if rng is None:
        rng = derive_stream(config.master_seed, "world")
    priors = config.priors()
    models, training, base = {}, {}, []
    for label in config.labels:
        models[label] = sample_model(priors, config.k, label, rng)
    for label in config.labels:
        views = [add_noise(project(models[label], sample_rotation(rng)), priors.noise, rng)
                 for _ in range(config.r)]
        training[label] = np.array(views)
        base.extend((label, i, view) for i, view in enumerate(views))
    anchors = None
    if "strongly_2d" in config.observers:
        anchors = observers.make_anchors(base, config.k)
    return World(models, training, base, anchors)


def draw_target(config: ExperimentConfig, world: World, trial: int):
    rng = derive_stream(config.master_seed, "target", trial)
    priors = config.priors()
    probs = np.array([priors.class_prior[lab] for lab in config.labels])
    label = config.labels[int(rng.choice(len(probs), p=probs))]
    view = add_noise(project(world.models[label], sample_rotation(rng)), priors.noise, rng)
    return label, view


@dataclass
class TrialRecord:
    trial: int
    truth: object
    decisions: dict
    times: dict
    quality: float | None = None
    errors: dict = field(default_factory=dict)


def run_trial(config: ExperimentConfig, world: World, trial: int, cache=None,
              kernel=None) -> TrialRecord:
    priors = config.priors()
    mc, seed = config.mc, config.master_seed
    truth, v = draw_target(config, world, trial)
    sims = edm.similarity_set(v, world.base)
    calls = {
        "3d": lambda: observers.observer_3d(v, world.base, priors, mc, seed, trial, cache),
        "strongly_2d": lambda: observers.observer_strongly_2d(sims, world.anchors, priors, mc,
                                                              seed, trial, cache),
        "nn": lambda: observers.observer_nn(sims),
        "kernel": lambda: observers.score_kernel(sims, kernel),
        "map": lambda: observers.observer_map(v, world.base, priors, mc, seed, trial, cache),
    }
    decisions, times, errors = {}, {}, {}
    quality = None
    for name in config.observers:
        start = time.perf_counter()
        try:
            decisions[name] = calls[name]()
        except ViewBayesError as exc:
            decisions[name] = None
            errors[name] = type(exc).__name__
        times[name] = time.perf_counter() - start
        if name == "strongly_2d" and decisions[name] is not None:
            quality = decisions[name].meta.get("anchor_residual")
    return TrialRecord(trial, truth, decisions, times, quality, errors)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> "Report":
    """Run every enabled observer on the same worlds, targets and draws."""
    world = generate_world(config)
    cache = observers.PosteriorCache()
    kernel = observers.train_kernel(world.base) if "kernel" in config.observers else None
    work = lambda t: run_trial(config, world, t, cache, kernel)  # noqa: E731
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(work, range(config.trials)))
    else:
        records = [work(t) for t in range(config.trials)]
    return Report.build(config, records)


# Reporting ----------------------------------------------------------------

def binomial_ci(errors: int, n: int, level: float = 0.95):
    """Normal-approximation interval with continuity correction, clipped to [0, 1]."""
    if n == 0:
        return 0.0, 1.0
    p = errors / n
    half = norm.ppf(0.5 + level / 2) * math.sqrt(p * (1 - p) / n) + 0.5 / n
    return float(max(0.0, p - half)), float(min(1.0, p + half))


def _label(x):
    return None if x is None else str(x)


def _num(x):
    return None if x is None else float(x)


@dataclass
class Report:
    """Everything written to disk.  ``timings`` is kept aside and not compared."""

    config: dict
    observers: list
    n_trials: int
    error_rates: dict
    agreement: dict
    mean_margins: dict
    flags: dict
    trials: list
    timings: dict = field(default_factory=dict, compare=False)

    @classmethod
    def build(cls, config: ExperimentConfig, records) -> "Report":
        names = list(config.observers)
        n = len(records)
        rows = []
        for rec in records:
            row = {"trial": rec.trial, "truth": _label(rec.truth), "quality": _num(rec.quality),
                   "decisions": {}}
            for name in names:
                dec = rec.decisions[name]
                if dec is None:
                    row["decisions"][name] = {"chosen": None, "margin": None,
                                              "flags": ["error:" + rec.errors[name]]}
                else:
                    row["decisions"][name] = {"chosen": _label(dec.chosen),
                                              "margin": float(dec.margin),
                                              "flags": list(dec.flags)}
            rows.append(row)
        error_rates, margins, flags = {}, {}, {}
        for name in names:
            wrong = sum(r["decisions"][name]["chosen"] != r["truth"] for r in rows)
            lo, hi = binomial_ci(wrong, n)
            error_rates[name] = {"errors": wrong, "rate": wrong / n if n else 0.0,
                                 "ci_low": lo, "ci_high": hi}
            finite = [r["decisions"][name]["margin"] for r in rows
                      if r["decisions"][name]["margin"] is not None
                      and math.isfinite(r["decisions"][name]["margin"])]
            margins[name] = float(np.mean(finite)) if finite else None
            counts = {}
            for r in rows:
                for f in r["decisions"][name]["flags"]:
                    counts[f] = counts.get(f, 0) + 1
            flags[name] = counts
        agreement = {a: {b: (1.0 if a == b else
                             (sum(r["decisions"][a]["chosen"] == r["decisions"][b]["chosen"]
                                  for r in rows) / n if n else 1.0))
                         for b in names} for a in names}
        timings = {name: float(sum(rec.times[name] for rec in records)) for name in names}
        return cls(config.to_dict(), names, n, error_rates, agreement, margins, flags, rows,
                   timings)

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {"config": self.config, "observers": self.observers, "n_trials": self.n_trials,
               "error_rates": self.error_rates, "agreement": self.agreement,
               "mean_margins": self.mean_margins, "flags": self.flags, "trials": self.trials}
        if include_timing:
            out["timings"] = self.timings
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Report":
        return cls(data["config"], data["observers"], data["n_trials"], data["error_rates"],
                   data["agreement"], data["mean_margins"], data["flags"], data["trials"],
                   data.get("timings", {}))

    def csv_rows(self):
        header = ["trial", "truth"]
        for name in self.observers:
            header += [f"{name}_chosen", f"{name}_margin"]
        yield header
        for row in self.trials:
            line = [row["trial"], row["truth"]]
            for name in self.observers:
                dec = row["decisions"][name]
                line += [dec["chosen"], "" if dec["margin"] is None else repr(dec["margin"])]
            yield line


def report_json(report: Report, include_timing: bool = False) -> str:
    return json.dumps(report.to_dict(include_timing), sort_keys=True, indent=2) + "\n"


def report_csv(report: Report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in report.csv_rows():
        writer.writerow(row)
    return buf.getvalue()


def write_report(report: Report, fmt: str, path, include_timing: bool = False) -> Path:
    """Write the JSON report or the per-trial CSV table to ``path``."""
    if fmt == "json":
        text = report_json(report, include_timing)
    elif fmt == "csv":
        text = report_csv(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return path


def read_report(path) -> Report:
    try:
        return Report.from_dict(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def with_overrides(config: ExperimentConfig, **kwargs) -> ExperimentConfig:
    """Copy of ``config`` with top-level fields replaced (None keeps the old value)."""
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
