"""Deterministic probability-flow ODE sampling with 2nd-order Heun steps.

Noise level doubles as integration time. The sigma ladder follows the
rho-warped spacing, ends exactly at zero, and the last step is plain Euler
since d = (x - D)/sigma is undefined at sigma = 0. Cost is
2N - 1 denoiser evaluations for N steps.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .streams import derive_rng


class SamplingDivergedError(RuntimeError):
    def __init__(self, step: int, rows):
        super().__init__(f"non-finite state at step {step} (rows {list(rows)[:8]})")
        self.step = step
        self.rows = list(rows)


@dataclass(frozen=True)
class SigmaSchedule:
    n_steps: int
    sigma_min: float
    sigma_max: float
    rho: float
    ladder: tuple[float, ...]

    @property
    def nfe(self) -> int:
        return 2 * self.n_steps - 1


def build_schedule(n: int = 32, sigma_min: float = 0.002, sigma_max: float = 5.0,
                   rho: float = 7.0) -> SigmaSchedule:
    if n < 2 or not 0.0 < sigma_min < sigma_max or rho < 1.0:
        raise ValueError("need n >= 2, 0 < sigma_min < sigma_max, rho >= 1")
    i = np.arange(n, dtype=np.float64)
    inv = 1.0 / rho
    ladder = (sigma_max ** inv + (i / (n - 1)) * (sigma_min ** inv - sigma_max ** inv)) ** rho
    ladder = np.append(ladder, 0.0)
    return SigmaSchedule(n_steps=n, sigma_min=sigma_min, sigma_max=sigma_max, rho=rho,
                         ladder=tuple(float(s) for s in ladder))


@dataclass
class TrajectoryRecord:
    """States at every ladder position plus the per-step first evaluations."""

    sigmas: np.ndarray      # (N+1,)
    states: np.ndarray      # (N+1, ..., 2)
    denoised: np.ndarray    # (N, ..., 2) denoiser output at each step start
    slopes: np.ndarray      # (N, ..., 2) d = (x - D)/sigma at each step start


def heun_sample(denoiser, schedule: SigmaSchedule, cls, x_init, record: bool = False):
    """Integrate from sigma_max down to 0; returns the final state, plus a
    TrajectoryRecord when record is set. x_init may be (2,) or (B, 2)."""
    x = np.asarray(x_init, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if not np.isfinite(x).all():
        raise SamplingDivergedError(-1, np.flatnonzero(~np.isfinite(x).all(axis=1)))
    lad = schedule.ladder
    n = schedule.n_steps
    states = [x.copy()] if record else None
    denoised = [] if record else None
    slopes = [] if record else None
    for i in range(n):
        sig, nxt = lad[i], lad[i + 1]
        D = denoiser.denoise(x, sig, cls)
        d = (x - D) / sig
        x_pred = x + (nxt - sig) * d
        if nxt > 0.0:
            D2 = denoiser.denoise(x_pred, nxt, cls)
            d2 = (x_pred - D2) / nxt
            x = x + (nxt - sig) * 0.5 * (d + d2)
        else:
            x = x_pred
        if not np.isfinite(x).all():
            raise SamplingDivergedError(i, np.flatnonzero(~np.isfinite(x).all(axis=1)))
        if record:
            states.append(x.copy())
            denoised.append(D)
            slopes.append(d)
    out = x[0] if squeeze else x
    if not record:
        return out
    rec = TrajectoryRecord(
        sigmas=np.asarray(lad),
        states=np.stack([s[0] for s in states]) if squeeze else np.stack(states),
        denoised=np.stack([d[0] for d in denoised]) if squeeze else np.stack(denoised),
        slopes=np.stack([d[0] for d in slopes]) if squeeze else np.stack(slopes),
    )
    return out, rec


def initial_points(schedule: SigmaSchedule, count: int, seed: int) -> np.ndarray:
    """N(0, sigma_max^2 I) draws from per-sample streams keyed by (seed, k),
    so any subset or reordering of samples sees the same values."""
    out = np.empty((count, 2))
    for k in range(count):
        out[k] = derive_rng(seed, k).standard_normal(2)
    return out * schedule.sigma_max


def sample_population(denoiser, schedule: SigmaSchedule, cls, count: int, seed: int,
                      record: bool = False):
    if count == 0:
        return (np.empty((0, 2)), None) if record else np.empty((0, 2))
    x0 = initial_points(schedule, count, seed)
    return heun_sample(denoiser, schedule, cls, x0, record=record)


# ---------------------------------------------------------------------------
# CSV interchange

def population_to_csv(path, points: np.ndarray, cls) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class", "x", "y"])
        label = "" if cls is None else int(cls)
        for i, (px, py) in enumerate(np.asarray(points)):
            w.writerow([i, label, repr(float(px)), repr(float(py))])


def population_from_csv(path):
    pts, cls = [], None
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["sample_id", "class", "x", "y"]:
            raise ValueError("not a population file")
        for row in reader:
            cls = None if row[1] == "" else int(row[1])
            pts.append((float(row[2]), float(row[3])))
    return np.asarray(pts).reshape(-1, 2), cls


def trajectories_to_csv(path, record: TrajectoryRecord) -> None:
    states = record.states
    if states.ndim == 2:
        states = states[:, None, :]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "step", "sigma", "x", "y"])
        for b in range(states.shape[1]):
            for i in range(states.shape[0]):
                w.writerow([b, i, repr(float(record.sigmas[i])),
                            repr(float(states[i, b, 0])), repr(float(states[i, b, 1]))])


def trajectories_from_csv(path):
    """Returns (sigmas (N+1,), states (N+1, B, 2))."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["sample_id", "step", "sigma", "x", "y"]:
            raise ValueError("not a trajectory file")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3]), float(row[4])))
    if not rows:
        return np.empty(0), np.empty((0, 0, 2))
    n_steps = max(r[1] for r in rows) + 1
    n_samples = max(r[0] for r in rows) + 1
    sigmas = np.zeros(n_steps)
    states = np.zeros((n_steps, n_samples, 2))
    for b, i, sig, px, py in rows:
        sigmas[i] = sig
        states[i, b] = (px, py)
    return sigmas, states
