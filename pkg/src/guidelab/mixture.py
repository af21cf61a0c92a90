"""Two-class fractal Gaussian mixture with exact smoothed densities and scores.

Each class is a branching-tree arrangement of anisotropic Gaussians. Because
the data density is a finite mixture, the density convolved with isotropic
Gaussian noise of scale sigma is again a mixture (component covariances gain
sigma^2 I), so densities, scores, and the ideal denoiser are all available in
closed form at every noise level.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._kernels import mixture_eval
from .streams import derive_rng

SIGMA_DATA = 0.5          # per-axis data std after normalization
LOG_DENSITY_FLOOR = -745.0

# fractal layout constants; frozen, changing any of them changes the dataset
ROOT_LENGTH = 1.5
BRANCH_LEVELS = 6
BRANCH_ANGLE = np.deg2rad(25.0)
ANGLE_JITTER = np.deg2rad(8.0)
LENGTH_RATIO = 0.72
LENGTH_JITTER = 0.05
WEIGHT_DECAY = 0.62
COMPONENTS_PER_BRANCH = 8
ALONG_STD_FRACTION = 1.0 / 16.0
CROSS_STD_FRACTION = 1.0 / 10.0
ROOT_SEPARATION = 0.9


@dataclass(frozen=True)
class MixtureComponent:
    """One Gaussian component: weight >= 0, SPD 2x2 covariance."""

    weight: float
    mean: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class Normalization:
    """Affine layout step applied to raw tree coordinates.

    Order of application: subtract shift, multiply y by aspect, multiply both
    axes by scale. Aspect equalizes the per-axis spread before the common
    scale pins it to SIGMA_DATA exactly.
    """

    shift: tuple[float, float]
    aspect: float
    scale: float


@dataclass(eq=False)
class MixtureSpec:
    """Packed two-class mixture. Covariances stored as (a, b, c) per row."""

    seed: int
    sigma_data: float
    class_weights: list[np.ndarray]
    class_means: list[np.ndarray]
    class_covs: list[np.ndarray]
    normalization: Normalization
    class_priors: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    outlier_thresholds: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self._packs: dict = {}
        self.validate()

    @property
    def n_classes(self) -> int:
        return len(self.class_weights)

    def validate(self) -> None:
        if len(self.class_means) != self.n_classes or len(self.class_covs) != self.n_classes:
            raise ValueError("per-class arrays disagree on class count")
        if not np.isclose(self.class_priors.sum(), 1.0, atol=1e-9):
            raise ValueError("class priors must sum to 1")
        for c in range(self.n_classes):
            w, mu, cov = self.class_weights[c], self.class_means[c], self.class_covs[c]
            if w.shape[0] != mu.shape[0] or w.shape[0] != cov.shape[0]:
                raise ValueError(f"class {c}: component arrays disagree on length")
            if not (np.isfinite(w).all() and np.isfinite(mu).all() and np.isfinite(cov).all()):
                raise ValueError(f"class {c}: non-finite component data")
            if (w < 0).any():
                raise ValueError(f"class {c}: negative component weight")
            if not np.isclose(w.sum(), 1.0, atol=1e-9):
                raise ValueError(f"class {c}: weights must sum to 1, got {w.sum()!r}")
            det = cov[:, 0] * cov[:, 2] - cov[:, 1] ** 2
            if (cov[:, 0] <= 0).any() or (det <= 0).any():
                raise ValueError(f"class {c}: covariance not positive definite")

    def components(self, cls: int):
        w, mu, cov = self.class_weights[cls], self.class_means[cls], self.class_covs[cls]
        for i in range(w.shape[0]):
            a, b, c = cov[i]
            yield MixtureComponent(float(w[i]), mu[i].copy(), np.array([[a, b], [b, c]]))

    def packed(self, cls: int | None):
        """(log_weight, means, packed_cov) arrays for one class or the marginal."""
        if cls not in self._packs:
            if cls is None:
                lw = np.concatenate([
                    _safe_log(self.class_weights[c]) + np.log(self.class_priors[c])
                    for c in range(self.n_classes)
                ])
                mu = np.concatenate(self.class_means, axis=0)
                cov = np.concatenate(self.class_covs, axis=0)
            else:
                lw = _safe_log(self.class_weights[cls])
                mu = self.class_means[cls]
                cov = self.class_covs[cls]
            self._packs[cls] = (np.ascontiguousarray(lw), np.ascontiguousarray(mu),
                                np.ascontiguousarray(cov))
        return self._packs[cls]


def _safe_log(w: np.ndarray) -> np.ndarray:
    out = np.full(w.shape, -np.inf)
    np.log(w, out=out, where=w > 0)
    return out


def _grow_tree(rng: np.random.Generator) -> list[tuple[float, float, float, float, int]]:
    """Branch segments (start_x, start_y, angle, length, level) of one tree."""
    trunk = (0.0, 0.0, 0.5 * np.pi, ROOT_LENGTH, 0)
    segments = [trunk]
    frontier = [trunk]
    for level in range(1, BRANCH_LEVELS + 1):
        grown = []
        for sx, sy, ang, length, _ in frontier:
            tx = sx + length * np.cos(ang)
            ty = sy + length * np.sin(ang)
            for side in (1.0, -1.0):
                child_ang = ang + side * BRANCH_ANGLE + rng.uniform(-ANGLE_JITTER, ANGLE_JITTER)
                child_len = length * LENGTH_RATIO * (1.0 + rng.uniform(-LENGTH_JITTER, LENGTH_JITTER))
                child = (tx, ty, child_ang, child_len, level)
                grown.append(child)
        segments.extend(grown)
        frontier = grown
    return segments


def _tree_components(segments) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(segments) * COMPONENTS_PER_BRANCH
    w = np.empty(n)
    mu = np.empty((n, 2))
    cov = np.empty((n, 3))
    i = 0
    for sx, sy, ang, length, level in segments:
        ca, sa = np.cos(ang), np.sin(ang)
        va = (length * ALONG_STD_FRACTION) ** 2
        vc = (length * CROSS_STD_FRACTION) ** 2
        branch_w = WEIGHT_DECAY ** level / COMPONENTS_PER_BRANCH
        for k in range(COMPONENTS_PER_BRANCH):
            t = (k + 0.5) / COMPONENTS_PER_BRANCH * length
            mu[i, 0] = sx + ca * t
            mu[i, 1] = sy + sa * t
            # rotate diag(va, vc) by the branch angle
            cov[i, 0] = ca * ca * va + sa * sa * vc
            cov[i, 1] = ca * sa * (va - vc)
            cov[i, 2] = sa * sa * va + ca * ca * vc
            w[i] = branch_w
            i += 1
    w /= w.sum()
    return w, mu, cov


def _marginal_moments(priors, weights, means, covs):
    wbar = np.concatenate([priors[c] * weights[c] for c in range(len(weights))])
    mu = np.concatenate(means, axis=0)
    cov = np.concatenate(covs, axis=0)
    m = (wbar[:, None] * mu).sum(axis=0)
    vx = (wbar * (cov[:, 0] + mu[:, 0] ** 2)).sum() - m[0] ** 2
    vy = (wbar * (cov[:, 2] + mu[:, 1] ** 2)).sum() - m[1] ** 2
    return m, vx, vy


def build_fractal(seed: int) -> MixtureSpec:
    """Deterministic two-tree mixture for a seed, normalized so the class
    marginal has zero mean and per-axis std equal to SIGMA_DATA."""
    rng = derive_rng(seed)
    weights, means, covs = [], [], []
    for cls in range(2):
        w, mu, cov = _tree_components(_grow_tree(rng))
        if cls == 1:
            # mirror the second tree in x
            mu[:, 0] *= -1.0
            cov[:, 1] *= -1.0
            mu[:, 0] += ROOT_SEPARATION
        else:
            mu[:, 0] -= ROOT_SEPARATION
        weights.append(w)
        means.append(mu)
        covs.append(cov)

    priors = np.array([0.5, 0.5])
    shift, vx, vy = _marginal_moments(priors, weights, means, covs)
    aspect = float(np.sqrt(vx / vy))
    for c in range(2):
        means[c] = means[c] - shift
        means[c][:, 1] *= aspect
        covs[c][:, 1] *= aspect
        covs[c][:, 2] *= aspect * aspect
    _, vx, _ = _marginal_moments(priors, weights, means, covs)
    scale = float(SIGMA_DATA / np.sqrt(vx))
    for c in range(2):
        means[c] *= scale
        covs[c] *= scale * scale

    return MixtureSpec(
        seed=int(seed),
        sigma_data=SIGMA_DATA,
        class_weights=weights,
        class_means=means,
        class_covs=covs,
        normalization=Normalization(shift=(float(shift[0]), float(shift[1])),
                                    aspect=aspect, scale=scale),
    )


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _eval(spec: MixtureSpec, cls: int | None, x, sigma) -> tuple[np.ndarray, bool]:
    xb, squeeze = _as_batch(x)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (xb.shape[0],))
    lw, mu, cov = spec.packed(cls)
    out = mixture_eval(np.ascontiguousarray(xb), np.ascontiguousarray(sig), lw, mu, cov)
    return out, squeeze


def log_density(spec: MixtureSpec, cls: int | None, x, sigma):
    """Log of the sigma-smoothed density, floored at LOG_DENSITY_FLOOR."""
    out, squeeze = _eval(spec, cls, x, sigma)
    lp = np.maximum(out[:, 2], LOG_DENSITY_FLOOR)
    return float(lp[0]) if squeeze else lp


def density(spec: MixtureSpec, cls: int | None, x, sigma):
    """Sigma-smoothed density; underflows to 0 far from support."""
    out, squeeze = _eval(spec, cls, x, sigma)
    p = np.exp(out[:, 2])
    return float(p[0]) if squeeze else p


def score(spec: MixtureSpec, cls: int | None, x, sigma, return_flags: bool = False):
    """Gradient of log density wrt x at noise level sigma.

    Where every component term underflows the result falls back to the
    nearest component's score direction; return_flags exposes which rows
    that happened for.
    """
    out, squeeze = _eval(spec, cls, x, sigma)
    s = out[:, :2]
    flags = out[:, 3] > 0.0
    if squeeze:
        s, flags = s[0], bool(flags[0])
    if return_flags:
        return s, flags
    return s


def oracle_denoiser(spec: MixtureSpec, cls: int | None, x, sigma):
    """Posterior mean E[clean | noisy]: x + sigma^2 * score."""
    xb = np.asarray(x, dtype=np.float64)
    sig = np.asarray(sigma, dtype=np.float64)
    s2 = (sig * sig)[..., None] if sig.ndim else sig * sig
    return xb + s2 * score(spec, cls, x, sigma)


def sample(spec: MixtureSpec, cls: int | None, count: int, sigma, rng: np.random.Generator):
    """Draw count points from the sigma-smoothed mixture.

    Consumes exactly count uniforms (component choice) then count standard
    normal pairs, in that order.
    """
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (count,))
    lw, mu, cov = spec.packed(cls)
    cum = np.cumsum(np.exp(lw))
    cum /= cum[-1]
    idx = np.minimum(np.searchsorted(cum, rng.random(count)), lw.shape[0] - 1)
    z = rng.standard_normal((count, 2))
    s2 = sig * sig
    a = cov[idx, 0] + s2
    b = cov[idx, 1]
    c = cov[idx, 2] + s2
    # closed-form Cholesky of the 2x2 smoothed covariance
    l11 = np.sqrt(a)
    l21 = b / l11
    l22 = np.sqrt(c - l21 * l21)
    out = np.empty((count, 2))
    out[:, 0] = mu[idx, 0] + l11 * z[:, 0]
    out[:, 1] = mu[idx, 1] + l21 * z[:, 0] + l22 * z[:, 1]
    return out


class MixtureDenoiser:
    """Analytic denoiser handle; drop-in wherever a trained model is accepted.

    fixed_class pins the conditioning: pass an int for one class, None for
    the class marginal, or leave unset to follow the per-call argument.
    """

    _UNSET = object()

    def __init__(self, spec: MixtureSpec, fixed_class=_UNSET):
        self.spec = spec
        self.fixed_class = fixed_class

    @property
    def conditional(self) -> bool:
        return self.fixed_class is MixtureDenoiser._UNSET or self.fixed_class is not None

    def _cls(self, cls):
        if self.fixed_class is MixtureDenoiser._UNSET:
            return cls
        return self.fixed_class

    def denoise(self, x, sigma, cls=None):
        return oracle_denoiser(self.spec, self._cls(cls), x, sigma)

    def score(self, x, sigma, cls=None):
        return score(self.spec, self._cls(cls), x, sigma)

    def energy(self, x, sigma, cls=None):
        return log_density(self.spec, self._cls(cls), x, sigma)


def spec_to_json(spec: MixtureSpec) -> str:
    payload = {
        "seed": spec.seed,
        "sigma_data": spec.sigma_data,
        "class_priors": spec.class_priors.tolist(),
        "normalization": {
            "shift": list(spec.normalization.shift),
            "aspect": spec.normalization.aspect,
            "scale": spec.normalization.scale,
        },
        "classes": [
            {
                "weights": spec.class_weights[c].tolist(),
                "means": spec.class_means[c].tolist(),
                "covs": spec.class_covs[c].tolist(),
            }
            for c in range(spec.n_classes)
        ],
        "outlier_thresholds": spec.outlier_thresholds,
    }
    return json.dumps(payload, sort_keys=True)


def spec_from_json(text: str) -> MixtureSpec:
    payload = json.loads(text)
    norm = payload["normalization"]
    spec = MixtureSpec(
        seed=int(payload["seed"]),
        sigma_data=float(payload["sigma_data"]),
        class_weights=[np.asarray(c["weights"], dtype=np.float64) for c in payload["classes"]],
        class_means=[np.asarray(c["means"], dtype=np.float64) for c in payload["classes"]],
        class_covs=[np.asarray(c["covs"], dtype=np.float64) for c in payload["classes"]],
        normalization=Normalization(shift=tuple(norm["shift"]), aspect=float(norm["aspect"]),
                                    scale=float(norm["scale"])),
        class_priors=np.asarray(payload["class_priors"], dtype=np.float64),
        outlier_thresholds={str(k): float(v) for k, v in payload.get("outlier_thresholds", {}).items()},
    )
    return spec


def save_spec(spec: MixtureSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec_to_json(spec))
        fh.write("\n")


def load_spec(path) -> MixtureSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_json(fh.read())
