"""Composing denoisers: classifier-free guidance, autoguidance, naive score
truncation, an optional active-sigma interval, and two-guide blending.

All modes are affine extrapolations in denoiser space, D_main plus
(w - 1) times (D_main - D_guide) per guide; the score-space form is the same
affine map, so the two are interchangeable and tested as an identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("none", "cfg", "autoguidance", "naive_truncation", "multi")


def _is_conditional(handle) -> bool | None:
    """None when the handle doesn't say."""
    flag = getattr(handle, "conditional", None)
    return flag if isinstance(flag, bool) else None


def _has_energy(handle) -> bool:
    if not callable(getattr(handle, "energy", None)):
        return False
    return bool(getattr(handle, "has_energy", True))


@dataclass
class GuidanceSpec:
    main: object
    mode: str = "none"
    weight: float = 1.0
    blend_alpha: float = 0.5
    truncation_factor: float = 1.40
    interval: tuple[float, float] | None = None
    guides: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.main is None:
            raise ValueError("main model handle is required")
        need = {"cfg": 1, "autoguidance": 1, "multi": 2}.get(self.mode, 0)
        if len(self.guides) != need:
            raise ValueError(f"mode {self.mode} needs {need} guide handle(s), got {len(self.guides)}")
        if not 0.0 <= self.blend_alpha <= 1.0:
            raise ValueError("blend_alpha must lie in [0, 1]")
        if self.interval is not None:
            lo, hi = self.interval
            if not 0.0 <= lo < hi:
                raise ValueError("interval must satisfy 0 <= lo < hi")
        if self.mode == "cfg" and _is_conditional(self.guides[0]) is True:
            raise ValueError("cfg guide must be the unconditional model")
        if self.mode == "autoguidance" and _is_conditional(self.guides[0]) is False:
            raise ValueError("autoguidance guide must be conditional (same task, worse model)")
        if self.mode == "multi":
            if _is_conditional(self.guides[0]) is True or _is_conditional(self.guides[1]) is False:
                raise ValueError("multi guides must be (unconditional, conditional)")

    def blend_weights(self) -> tuple[float, float]:
        """Per-guide weights for multi mode: unconditional then conditional."""
        w, a = self.weight, self.blend_alpha
        return (1.0 - a) * (w - 1.0) + 1.0, a * (w - 1.0) + 1.0


def _active(spec: GuidanceSpec, sigma) -> bool:
    if spec.interval is None:
        return True
    sig = float(sigma)
    lo, hi = spec.interval
    return lo < sig <= hi


def guided_denoise(spec: GuidanceSpec, x, sigma, cls=None):
    if spec.mode == "none" or not _active(spec, sigma):
        return spec.main.denoise(x, sigma, cls)
    if spec.mode == "naive_truncation":
        xb = np.asarray(x, dtype=np.float64)
        return xb + float(sigma) ** 2 * spec.truncation_factor * spec.main.score(x, sigma, cls)
    w = spec.weight
    dm = spec.main.denoise(x, sigma, cls)
    if spec.mode == "cfg":
        return w * dm + (1.0 - w) * spec.guides[0].denoise(x, sigma, None)
    if spec.mode == "autoguidance":
        return w * dm + (1.0 - w) * spec.guides[0].denoise(x, sigma, cls)
    wu, wc = spec.blend_weights()
    du = spec.guides[0].denoise(x, sigma, None)
    dc = spec.guides[1].denoise(x, sigma, cls)
    return dm + (wu - 1.0) * (dm - du) + (wc - 1.0) * (dm - dc)


def guided_score(spec: GuidanceSpec, x, sigma, cls=None):
    """Same affine composition in score space; equals
    (guided_denoise - x) / sigma^2 identically."""
    if spec.mode == "none" or not _active(spec, sigma):
        return spec.main.score(x, sigma, cls)
    if spec.mode == "naive_truncation":
        return spec.truncation_factor * spec.main.score(x, sigma, cls)
    w = spec.weight
    sm = spec.main.score(x, sigma, cls)
    if spec.mode == "cfg":
        return w * sm + (1.0 - w) * spec.guides[0].score(x, sigma, None)
    if spec.mode == "autoguidance":
        return w * sm + (1.0 - w) * spec.guides[0].score(x, sigma, cls)
    wu, wc = spec.blend_weights()
    su = spec.guides[0].score(x, sigma, None)
    sc = spec.guides[1].score(x, sigma, cls)
    return sm + (wu - 1.0) * (sm - su) + (wc - 1.0) * (sm - sc)


class GuidedModel:
    """Denoiser-shaped handle over a GuidanceSpec, for the sampler."""

    def __init__(self, spec: GuidanceSpec):
        self.spec = spec

    @property
    def conditional(self):
        return _is_conditional(self.spec.main)

    def denoise(self, x, sigma, cls=None):
        return guided_denoise(self.spec, x, sigma, cls)

    def score(self, x, sigma, cls=None):
        return guided_score(self.spec, x, sigma, cls)


@dataclass
class LogRatioField:
    """log(p_main / p_guide) values and gradient over a set of points."""

    points: np.ndarray
    sigma: float
    values: np.ndarray | None
    grads: np.ndarray


def log_ratio_field(main, guide, points, sigma, cls_main=None, cls_guide=None,
                    want_scalar: bool = True) -> LogRatioField:
    """Difference of model energies and of model scores over points.

    The gradient field is available for any handles; the scalar field needs
    both to expose an energy (direct_score heads are rejected unless
    want_scalar is False).
    """
    pts = np.asarray(points, dtype=np.float64)
    grads = main.score(pts, sigma, cls_main) - guide.score(pts, sigma, cls_guide)
    values = None
    if _has_energy(main) and _has_energy(guide):
        values = np.asarray(main.energy(pts, sigma, cls_main)) \
            - np.asarray(guide.energy(pts, sigma, cls_guide))
    elif want_scalar:
        raise ValueError("scalar log-ratio needs energy-head models on both sides")
    return LogRatioField(points=pts, sigma=float(sigma), values=values, grads=grads)
