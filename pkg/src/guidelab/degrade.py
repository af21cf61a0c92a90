"""Post-hoc model corruptions and the matched/mismatched guidance experiment.

A trained denoiser is damaged in one of two ways: unit dropout inside the
trunk, or querying at an inflated noise level with matching extra input
noise. Guiding a lightly damaged model with a heavily damaged copy of itself
should repair sample quality when the damage is of the same kind, and do
nothing useful when the kinds differ.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import evalmetrics
from . import guidance
from . import netmodel as nm
from . import sampler
from .streams import derive_rng

CORRUPTION_KINDS = ("dropout", "input_noise")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.kind == "dropout" and not 0.0 <= self.strength < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.kind == "input_noise" and self.strength < 0.0:
            raise ValueError("input-noise fraction must be >= 0")


class DropoutModel:
    """Zeroes each hidden unit with probability rate at every evaluation,
    rescaling survivors by 1/(1-rate) so activations keep their mean.

    frozen=True draws one unit-level mask per activation site at wrap time
    instead, turning the wrapper into a fixed pruned network.
    """

    def __init__(self, model, rate: float, seed: int, frozen: bool = False):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if not hasattr(model, "params"):
            raise TypeError("dropout needs a network-backed model")
        self.base = model
        self.rate = rate
        self.frozen = frozen
        self._rng = derive_rng(seed, 23)
        self._sites = len(model.params.layer_weights) - 1
        self._width = model.params.arch.hidden_width
        if frozen:
            self._frozen_masks = [self._draw(1) for _ in range(self._sites)]

    def _draw(self, rows: int) -> np.ndarray:
        keep = self._rng.random((rows, self._width)) >= self.rate
        return keep / (1.0 - self.rate)

    def _masks(self, rows: int):
        if self.rate == 0.0:
            return None
        if self.frozen:
            return self._frozen_masks
        return [self._draw(rows) for _ in range(self._sites)]

    @property
    def conditional(self) -> bool:
        return self.base.conditional

    @property
    def has_energy(self) -> bool:
        return getattr(self.base, "has_energy", False)

    def _rows(self, x) -> int:
        x = np.asarray(x)
        return 1 if x.ndim == 1 else x.shape[0]

    def denoise(self, x, sigma, cls=None):
        return nm.model_denoise(self.base.params, x, sigma, cls, masks=self._masks(self._rows(x)))

    def score(self, x, sigma, cls=None):
        return nm.model_score(self.base.params, x, sigma, cls, masks=self._masks(self._rows(x)))

    def energy(self, x, sigma, cls=None):
        return nm.model_energy(self.base.params, x, sigma, cls, masks=self._masks(self._rows(x)))


class InputNoiseModel:
    """Answers queries at sigma' = (1+delta) sigma: adds the matching extra
    noise to the input and tells the base model the truthfully larger level."""

    def __init__(self, model, delta: float, seed: int):
        if delta < 0.0:
            raise ValueError("input-noise fraction must be >= 0")
        self.base = model
        self.delta = delta
        self._rng = derive_rng(seed, 29)

    @property
    def conditional(self) -> bool:
        return self.base.conditional

    def _perturb(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        if self.delta == 0.0:
            return x, sigma
        sig = np.asarray(sigma, dtype=np.float64)
        extra = sig * np.sqrt((1.0 + self.delta) ** 2 - 1.0)
        shaped = extra if sig.ndim == 0 else extra[:, None]
        return x + shaped * self._rng.standard_normal(x.shape), sig * (1.0 + self.delta)

    def denoise(self, x, sigma, cls=None):
        if self.delta == 0.0:
            return self.base.denoise(x, sigma, cls)
        xn, s2 = self._perturb(x, sigma)
        return self.base.denoise(xn, s2, cls)


def wrap_dropout(model, rate: float, seed: int, frozen: bool = False):
    if rate == 0.0:
        return model  # bit-transparent
    return DropoutModel(model, rate, seed, frozen=frozen)


def wrap_input_noise(model, delta: float, seed: int):
    if delta == 0.0:
        return model
    return InputNoiseModel(model, delta, seed)


def apply_corruption(model, spec: CorruptionSpec, seed_offset: int = 0):
    seed = spec.seed + 1000003 * seed_offset
    if spec.kind == "dropout":
        return wrap_dropout(model, spec.strength, seed)
    return wrap_input_noise(model, spec.strength, seed)


DEFAULT_W_GRID = tuple(np.round(np.arange(1.0, 3.01, 0.25), 2))


@dataclass
class ExperimentResult:
    main: CorruptionSpec
    guide: CorruptionSpec
    w_grid: tuple
    reports: dict
    best_w: float

    @property
    def best_report(self) -> evalmetrics.MetricReport:
        return self.reports[self.best_w]


def degradation_experiment(base_model, main_corruption: CorruptionSpec,
                           guide_corruption: CorruptionSpec, w_grid=DEFAULT_W_GRID,
                           *, spec, cls=0, count: int = 2048,
                           schedule: sampler.SigmaSchedule | None = None,
                           seed: int = 0) -> ExperimentResult:
    """Guide a lightly corrupted model with a heavily corrupted one across a
    weight grid; scores each weight with the composite metric.

    All weights reuse the same initial sample points (common random numbers),
    so the argmin reflects guidance strength rather than draw luck.
    """
    sched = schedule if schedule is not None else sampler.build_schedule()
    reports = {}
    for wi, w in enumerate(w_grid):
        main = apply_corruption(base_model, main_corruption, seed_offset=wi)
        guide = apply_corruption(base_model, guide_corruption, seed_offset=wi + 7919)
        gspec = guidance.GuidanceSpec(main=main, mode="autoguidance", weight=float(w),
                                      guides=(guide,))
        pts = sampler.sample_population(guidance.GuidedModel(gspec), sched, cls, count, seed)
        tag = (f"{main_corruption.kind}:{main_corruption.strength}|"
               f"{guide_corruption.kind}:{guide_corruption.strength}|w={w}")
        reports[float(w)] = evalmetrics.metric_report(pts, spec, cls, fingerprint=tag)
    best_w = min(reports, key=lambda w: (reports[w].composite, w))
    return ExperimentResult(main=main_corruption, guide=guide_corruption,
                            w_grid=tuple(float(w) for w in w_grid), reports=reports,
                            best_w=best_w)


def experiment_to_csv(path, results) -> None:
    """Emit (kind_main, kind_guide, strength_main, strength_guide, w, metric)
    rows for one or several experiments."""
    if isinstance(results, ExperimentResult):
        results = [results]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind_main", "kind_guide", "strength_main", "strength_guide",
                    "w", "metric"])
        for res in results:
            for wv in res.w_grid:
                w.writerow([res.main.kind, res.guide.kind,
                            repr(res.main.strength), repr(res.guide.strength),
                            repr(wv), repr(res.reports[wv].composite)])
