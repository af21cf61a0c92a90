"""Quality checks on fully trained denoisers.

These use the session model cache (see conftest.ModelCache): the first run
trains the checkpoints, later runs load them from disk.
"""
from __future__ import annotations

import numpy as np

from guidelab import mixture


def high_density_points(spec, cls, sigma, count=200, seed=11):
    """Points where the smoothed density exceeds 10% of the empirical max."""
    rng = np.random.default_rng(seed)
    cand = mixture.sample(spec, cls, 20 * count, sigma, rng)
    dens = mixture.density(spec, cls, cand, sigma)
    keep = cand[dens > 0.1 * dens.max()]
    assert len(keep) >= count
    return keep[:count]


def cosine_rows(a, b):
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return num / den


def test_trained_score_tracks_mixture_score(model_cache, calibrated_spec):
    model = model_cache.model("d1_s0")
    pts = high_density_points(calibrated_spec, 0, 0.1)
    got = model.score(pts, 0.1, cls=0)
    want = mixture.score(calibrated_spec, 0, pts, 0.1)
    med = np.median(cosine_rows(got, want))
    assert med >= 0.99


def test_trained_denoiser_mse_small(model_cache, calibrated_spec):
    model = model_cache.model("d1_s0")
    pts = high_density_points(calibrated_spec, 0, 0.1)
    got = model.denoise(pts, 0.1, cls=0)
    want = mixture.oracle_denoiser(calibrated_spec, 0, pts, 0.1)
    mse = float(np.mean((got - want) ** 2))
    assert mse <= 1e-2


def test_exact_and_denoising_losses_agree(model_cache, calibrated_spec):
    """Same architecture trained with either loss lands on a similar score field."""
    exact = model_cache.model("d1_s0")
    dn = model_cache.model("d1_dn_s0")
    meds = []
    for cls in (0, 1):
        pts = high_density_points(calibrated_spec, cls, 0.1, seed=13 + cls)
        meds.append(np.median(cosine_rows(exact.score(pts, 0.1, cls=cls),
                                          dn.score(pts, 0.1, cls=cls))))
    assert min(meds) >= 0.95


def test_full_run_loss_descends(model_cache):
    losses = model_cache.losses("d1_s0")
    assert len(losses) == 4096
    assert np.mean(losses[-512:]) <= 0.2 * losses[0]


def test_weak_model_ends_with_higher_loss(model_cache):
    d1 = model_cache.losses("d1_s0")
    d0 = model_cache.losses("d0c_s0")
    assert np.mean(d0[-50:]) > np.mean(d1[-50:])
    assert d0[-1] > d1[-1]
