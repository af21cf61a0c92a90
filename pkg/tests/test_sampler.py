from __future__ import annotations

import numpy as np
import pytest

from guidelab import guidance, mixture, sampler

from conftest import make_single_gaussian_spec


def exact_multiplier(s: float, sigma: float) -> float:
    """For N(0, s^2 I) data the flow ODE solution is x(sigma) = m(sigma) x(sigma_max)
    with m(sigma) = sqrt((s^2 + sigma^2) / (s^2 + sigma_max^2)); this is m at one end."""
    return np.sqrt(s * s + sigma * sigma)


def scalar_heun_multiplier(ladder, s: float) -> float:
    # independent plain-float transcription of the stepper for the linear case,
    # where D(x, sigma) = x * s^2 / (s^2 + sigma^2) and the map stays scalar
    x = 1.0
    for i in range(len(ladder) - 1):
        sig, nxt = ladder[i], ladder[i + 1]
        d = x * sig / (s * s + sig * sig)
        x_pred = x + (nxt - sig) * d
        if nxt > 0.0:
            d2 = x_pred * nxt / (s * s + nxt * nxt)
            x = x + (nxt - sig) * 0.5 * (d + d2)
        else:
            x = x_pred
    return x


class IdentityDenoiser:
    conditional = False

    def denoise(self, x, sigma, cls=None):
        return np.asarray(x, dtype=np.float64).copy()


class BlowupDenoiser:
    """Returns NaN for selected rows once sigma drops below a threshold."""

    conditional = False

    def __init__(self, below, rows):
        self.below = below
        self.rows = rows

    def denoise(self, x, sigma, cls=None):
        out = np.asarray(x, dtype=np.float64).copy()
        if sigma < self.below:
            out[self.rows] = np.nan
        return out


# ---------------------------------------------------------------------------
# schedule


def test_schedule_endpoints():
    sched = sampler.build_schedule()
    assert sched.n_steps == 32
    assert len(sched.ladder) == 33
    assert sched.ladder[-1] == 0.0
    assert np.isclose(sched.ladder[0], 5.0, rtol=1e-12)
    assert np.isclose(sched.ladder[-2], 0.002, rtol=1e-12)
    assert sched.nfe == 63


def test_schedule_strictly_decreasing():
    lad = np.asarray(sampler.build_schedule().ladder)
    assert (np.diff(lad) < 0).all()


def test_schedule_interior_value_matches_formula():
    sched = sampler.build_schedule()
    i, n, rho = 16, 32, 7.0
    want = (5.0 ** (1 / rho) + (i / (n - 1)) * (0.002 ** (1 / rho) - 5.0 ** (1 / rho))) ** rho
    assert np.isclose(sched.ladder[i], want, rtol=1e-13)


def test_schedule_rho_one_is_linear():
    sched = sampler.build_schedule(n=5, sigma_min=1.0, sigma_max=5.0, rho=1.0)
    assert np.allclose(sched.ladder[:-1], [5.0, 4.0, 3.0, 2.0, 1.0], rtol=1e-12)


def test_schedule_minimal_n():
    sched = sampler.build_schedule(n=2)
    assert np.allclose(sched.ladder, [5.0, 0.002, 0.0], rtol=1e-12)
    assert sched.nfe == 3


@pytest.mark.parametrize("kwargs", [
    dict(n=1),
    dict(sigma_min=0.0),
    dict(sigma_min=-0.1),
    dict(sigma_min=6.0),
    dict(rho=0.5),
])
def test_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        sampler.build_schedule(**kwargs)


# ---------------------------------------------------------------------------
# stepper accuracy on the analytically solvable case


def test_gaussian_flow_matches_scalar_reference():
    spec = make_single_gaussian_spec()
    den = mixture.MixtureDenoiser(spec, fixed_class=0)
    sched = sampler.build_schedule()
    x0 = np.array([[1.0, -2.0], [0.3, 0.7], [-4.0, 0.01]])
    out = sampler.heun_sample(den, sched, None, x0)
    m_ref = scalar_heun_multiplier(sched.ladder, 0.5)
    assert np.allclose(out, x0 * m_ref, rtol=1e-12, atol=0.0)


def test_gaussian_flow_truncation_error():
    # the 32-step ladder leaves a scheme-level truncation error near 5.1e-3
    # on this problem; the bound below freezes that plateau
    spec = make_single_gaussian_spec()
    den = mixture.MixtureDenoiser(spec, fixed_class=0)
    sched = sampler.build_schedule()
    out = sampler.heun_sample(den, sched, None, np.array([1.0, 1.0]))
    m_exact = exact_multiplier(0.5, 0.0) / exact_multiplier(0.5, 5.0)
    rel = abs(out[0] / m_exact - 1.0)
    assert rel < 6e-3


def test_gaussian_flow_second_order_convergence():
    spec = make_single_gaussian_spec()
    m_exact = exact_multiplier(0.5, 0.0) / exact_multiplier(0.5, 5.0)
    errs = []
    for n in (16, 32, 64):
        lad = sampler.build_schedule(n=n).ladder
        errs.append(abs(scalar_heun_multiplier(lad, 0.5) / m_exact - 1.0))
    slope = np.polyfit(np.log([16, 32, 64]), np.log(errs), 1)[0]
    assert -2.6 < slope < -1.6
    assert errs[2] < errs[1] / 3.0


def test_identity_denoiser_is_fixed_point():
    sched = sampler.build_schedule(n=8)
    x0 = np.array([[0.4, -0.9], [2.0, 2.0]])
    out = sampler.heun_sample(IdentityDenoiser(), sched, None, x0)
    assert np.array_equal(out, x0)


def test_divergence_reports_step_and_rows():
    sched = sampler.build_schedule(n=8)
    lad = sched.ladder
    den = BlowupDenoiser(below=0.5 * (lad[2] + lad[3]), rows=[1])
    x0 = np.zeros((3, 2)) + 0.5
    with pytest.raises(sampler.SamplingDivergedError) as exc:
        sampler.heun_sample(den, sched, None, x0)
    # first NaN enters at the second evaluation of step 2, which lands on lad[3]
    assert exc.value.step == 2
    assert exc.value.rows == [1]


def test_nonfinite_init_rejected():
    sched = sampler.build_schedule(n=4)
    with pytest.raises(sampler.SamplingDivergedError) as exc:
        sampler.heun_sample(IdentityDenoiser(), sched, None, np.array([np.nan, 0.0]))
    assert exc.value.step == -1


# ---------------------------------------------------------------------------
# populations


def test_initial_points_keyed_by_sample():
    sched = sampler.build_schedule()
    a = sampler.initial_points(sched, 5, seed=3)
    b = sampler.initial_points(sched, 3, seed=3)
    assert np.array_equal(a[:3], b)
    assert not np.array_equal(a, sampler.initial_points(sched, 5, seed=4))
    assert np.isclose(np.std(sampler.initial_points(sched, 4000, seed=0)), 5.0, rtol=0.05)


def test_population_empty():
    sched = sampler.build_schedule(n=4)
    out = sampler.sample_population(IdentityDenoiser(), sched, None, 0, seed=0)
    assert out.shape == (0, 2)
    out, rec = sampler.sample_population(IdentityDenoiser(), sched, None, 0, seed=0, record=True)
    assert out.shape == (0, 2) and rec is None


def test_population_deterministic():
    spec = make_single_gaussian_spec()
    den = mixture.MixtureDenoiser(spec, fixed_class=0)
    sched = sampler.build_schedule(n=8)
    a = sampler.sample_population(den, sched, None, 16, seed=9)
    b = sampler.sample_population(den, sched, None, 16, seed=9)
    assert np.array_equal(a, b)


def test_population_matches_data_moments(fractal_spec):
    # ideal-denoiser samples should land on the data law: zero mean and
    # per-axis std 0.5 within Monte Carlo slack at 1e4 draws
    den = mixture.MixtureDenoiser(fractal_spec, fixed_class=None)
    sched = sampler.build_schedule()
    pts = sampler.sample_population(den, sched, None, 10_000, seed=1)
    assert np.abs(pts.mean(axis=0)).max() < 0.01
    assert np.abs(pts.std(axis=0) / 0.5 - 1.0).max() < 0.02


def test_guided_weight_one_matches_main(fractal_spec):
    main = mixture.MixtureDenoiser(fractal_spec)
    guide = mixture.MixtureDenoiser(fractal_spec, fixed_class=None)
    gspec = guidance.GuidanceSpec(main=main, mode="cfg", weight=1.0, guides=(guide,))
    gm = guidance.GuidedModel(gspec)
    sched = sampler.build_schedule(n=6)
    x0 = sampler.initial_points(sched, 8, seed=2)
    assert np.array_equal(
        sampler.heun_sample(gm, sched, 0, x0),
        sampler.heun_sample(main, sched, 0, x0),
    )


# ---------------------------------------------------------------------------
# trajectory records and CSV interchange


def test_trajectory_record_shapes():
    spec = make_single_gaussian_spec()
    den = mixture.MixtureDenoiser(spec, fixed_class=0)
    sched = sampler.build_schedule(n=8)
    x0 = np.array([[1.0, 2.0], [0.5, -0.5], [0.0, 3.0]])
    out, rec = sampler.heun_sample(den, sched, None, x0, record=True)
    assert rec.sigmas.shape == (9,)
    assert rec.states.shape == (9, 3, 2)
    assert rec.denoised.shape == (8, 3, 2)
    assert rec.slopes.shape == (8, 3, 2)
    assert np.array_equal(rec.states[0], x0)
    assert np.array_equal(rec.states[-1], out)
    d0 = (x0 - rec.denoised[0]) / rec.sigmas[0]
    assert np.allclose(rec.slopes[0], d0, rtol=1e-15)


def test_trajectory_record_single_point():
    sched = sampler.build_schedule(n=4)
    out, rec = sampler.heun_sample(IdentityDenoiser(), sched, None,
                                   np.array([1.0, -1.0]), record=True)
    assert out.shape == (2,)
    assert rec.states.shape == (5, 2)


def test_population_csv_round_trip(tmp_path):
    pts = np.array([[0.1, -0.2], [1e-17, 3.0], [np.pi, -np.e]])
    path = tmp_path / "pop.csv"
    sampler.population_to_csv(path, pts, 1)
    back, cls = sampler.population_from_csv(path)
    assert np.array_equal(back, pts)
    assert cls == 1
    sampler.population_to_csv(path, pts, None)
    back, cls = sampler.population_from_csv(path)
    assert np.array_equal(back, pts) and cls is None


def test_population_csv_rejects_other_files(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("foo,bar\n1,2\n")
    with pytest.raises(ValueError):
        sampler.population_from_csv(path)


def test_trajectory_csv_round_trip(tmp_path):
    spec = make_single_gaussian_spec()
    den = mixture.MixtureDenoiser(spec, fixed_class=0)
    sched = sampler.build_schedule(n=5)
    x0 = np.array([[1.0, 2.0], [-0.5, 0.25]])
    _, rec = sampler.heun_sample(den, sched, None, x0, record=True)
    path = tmp_path / "traj.csv"
    sampler.trajectories_to_csv(path, rec)
    sigmas, states = sampler.trajectories_from_csv(path)
    assert np.array_equal(sigmas, rec.sigmas)
    assert np.array_equal(states, rec.states)
