import numpy as np
import pytest

from guidelab import mixture, netmodel as nm, render


@pytest.fixture(scope="module")
def init_model():
    params = nm.init_params(nm.ArchDescriptor(hidden_width=16), seed=3)
    return nm.DenoiserModel(params)


@pytest.fixture(scope="module")
def uncond_model():
    arch = nm.ArchDescriptor(hidden_width=16, conditional=False)
    return nm.DenoiserModel(nm.init_params(arch, seed=4))


def gaussian_raster(var, extent=(-2.0, -2.0, 2.0, 2.0), resolution=(64, 64)):
    r = render.FieldRaster(extent=extent, resolution=resolution,
                           values=np.zeros((resolution[1], resolution[0])),
                           kind="density")
    pts = r.centers()
    vals = np.exp(-0.5 * (pts ** 2).sum(axis=1) / var) / (2.0 * np.pi * var)
    r.values = vals.reshape(resolution[1], resolution[0])
    return r


class TestFieldRaster:
    def test_rejects_small_resolution(self):
        with pytest.raises(ValueError):
            render.FieldRaster(extent=(-1, -1, 1, 1), resolution=(8, 32),
                               values=np.zeros((32, 8)), kind="density")

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            render.FieldRaster(extent=(-1, -1, 1, 1), resolution=(16, 16),
                               values=np.zeros((16, 16)), kind="heatmap")

    def test_rejects_nonfinite_values(self):
        vals = np.zeros((16, 16))
        vals[3, 3] = np.inf
        with pytest.raises(ValueError):
            render.FieldRaster(extent=(-1, -1, 1, 1), resolution=(16, 16),
                               values=vals, kind="density")

    def test_rejects_degenerate_extent(self):
        with pytest.raises(ValueError):
            render.FieldRaster(extent=(1, -1, 1, 1), resolution=(16, 16),
                               values=np.zeros((16, 16)), kind="density")

    def test_centers_orientation(self):
        r = render.FieldRaster(extent=(0.0, 0.0, 1.0, 2.0), resolution=(16, 16),
                               values=np.zeros((16, 16)), kind="density")
        pts = r.centers().reshape(16, 16, 2)
        assert pts[0, 0, 1] > pts[-1, 0, 1]  # row 0 is the top
        assert pts[0, 0, 0] == pytest.approx(0.5 / 16)
        assert pts[0, -1, 0] == pytest.approx(1.0 - 0.5 / 16)


class TestRasterDensity:
    def test_mixture_mass_close_to_one(self, fractal_spec):
        r = render.raster_density(fractal_spec, None, 0.1, resolution=(128, 128))
        assert r.values.sum() * r.cell_area == pytest.approx(1.0, abs=0.01)

    def test_init_model_matches_isotropic_gaussian(self, init_model):
        # freshly initialized energy head is exactly the Gaussian prior
        sigma = 0.2
        r = render.raster_density(init_model, 0, sigma, resolution=(64, 64))
        ref = gaussian_raster(sigma ** 2 + 0.25)
        ref_vals = ref.values / (ref.values.sum() * ref.cell_area)
        assert np.abs(r.values - ref_vals).max() <= 1e-6 * ref_vals.max()

    def test_model_raster_entropy_grows_with_sigma(self, init_model):
        def entropy(sigma):
            r = render.raster_density(init_model, 0, sigma, resolution=(64, 64))
            p = r.values * r.cell_area
            p = p[p > 0]
            return float(-(p * np.log(p)).sum())

        assert entropy(0.5) > entropy(0.01)

    def test_model_raster_is_grid_normalized(self, init_model):
        r = render.raster_density(init_model, 1, 0.05, resolution=(64, 64))
        assert r.values.sum() * r.cell_area == pytest.approx(1.0, rel=1e-12)

    def test_score_field_shape_and_values(self, fractal_spec):
        r = render.raster_score_field(fractal_spec, 0, 0.3)
        assert r.values.shape == (render.QUIVER_GRID, render.QUIVER_GRID, 2)
        want = mixture.score(fractal_spec, 0, r.centers(), 0.3)
        assert np.array_equal(r.values.reshape(-1, 2), want)

    def test_log_ratio_of_identical_sources_is_zero(self, fractal_spec):
        r = render.raster_log_ratio(fractal_spec, fractal_spec, 0, 0.2,
                                    resolution=(32, 32), cls_guide=0)
        assert np.abs(r.values).max() < 1e-12


class TestContourLevels:
    def test_full_mass_gives_min_cell(self, single_gaussian_spec):
        r = render.raster_density(single_gaussian_spec, 0, 0.1, resolution=(64, 64))
        (level,) = render.contour_levels(r, [1.0])
        assert level == r.values.min()

    def test_gaussian_one_sigma_level(self):
        # a 2D isotropic Gaussian holds 1 - exp(-1/2) = 0.3935 of its mass
        # inside the one-sigma circle
        var = 0.09
        r = gaussian_raster(var, extent=(-2.0, -2.0, 2.0, 2.0), resolution=(256, 256))
        (level,) = render.contour_levels(r, [1.0 - np.exp(-0.5)])
        want = np.exp(-0.5) / (2.0 * np.pi * var)
        assert level == pytest.approx(want, rel=0.02)

    def test_levels_nested_monotone(self, fractal_spec):
        r = render.raster_density(fractal_spec, None, 0.05, resolution=(96, 96))
        levels = render.contour_levels(r, [0.2, 0.5, 0.9, 0.99])
        assert all(a > b for a, b in zip(levels, levels[1:]))

    def test_rejects_bad_fraction(self, single_gaussian_spec):
        r = render.raster_density(single_gaussian_spec, 0, 0.1, resolution=(32, 32))
        with pytest.raises(ValueError):
            render.contour_levels(r, [0.0])
        with pytest.raises(ValueError):
            render.contour_levels(r, [1.5])

    def test_rejects_vector_raster(self, fractal_spec):
        r = render.raster_score_field(fractal_spec, 0, 0.3)
        with pytest.raises(ValueError):
            render.contour_levels(r, [0.5])


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    assert data.startswith(b"P6\n")
    _, dims, maxval, rest = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    assert maxval == b"255"
    img = np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
    return img, data


class TestRenderFigure:
    def test_empty_layers_solid_background(self, tmp_path):
        style = render.FigureStyle(size=(40, 30), background=(7, 8, 9))
        out = tmp_path / "blank.ppm"
        render.render_figure([], style, out)
        img, _ = read_ppm(out)
        assert img.shape == (30, 40, 3)
        assert (img == np.array([7, 8, 9], dtype=np.uint8)).all()
        assert (tmp_path / "blank.csv").exists()

    def test_repeat_render_byte_identical(self, tmp_path, fractal_spec):
        style = render.FigureStyle(size=(96, 96))
        raster = render.raster_density(fractal_spec, 0, 0.05, resolution=(48, 48))
        layers = [render.RasterLayer(raster),
                  render.ScatterLayer(points=np.array([[0.0, 0.5], [-0.3, -0.2]]))]
        render.render_figure(layers, style, tmp_path / "a.ppm")
        render.render_figure(layers, style, tmp_path / "b.ppm")
        _, da = read_ppm(tmp_path / "a.ppm")
        _, db = read_ppm(tmp_path / "b.ppm")
        assert da == db

    def test_layer_extent_must_match_style(self, tmp_path, fractal_spec):
        style = render.FigureStyle(extent=(-1.0, -1.0, 1.0, 1.0))
        raster = render.raster_density(fractal_spec, 0, 0.1)  # default +-2 extent
        with pytest.raises(ValueError):
            render.render_figure([render.RasterLayer(raster)], style, tmp_path / "x.ppm")

    def test_unwritable_path_raises_oserror(self, fractal_spec):
        style = render.FigureStyle(size=(32, 32))
        with pytest.raises(OSError):
            render.render_figure([], style, "/nonexistent-dir/fig.ppm")

    def test_scatter_marks_expected_pixel(self, tmp_path):
        style = render.FigureStyle(size=(64, 64), extent=(-2.0, -2.0, 2.0, 2.0),
                                   background=(0, 0, 0))
        layer = render.ScatterLayer(points=np.array([[0.0, 0.0]]),
                                    color=(255, 0, 0), radius=0)
        render.render_figure([layer], style, tmp_path / "dot.ppm")
        img, _ = read_ppm(tmp_path / "dot.ppm")
        ys, xs = np.nonzero(img[:, :, 0])
        assert len(ys) == 1
        # data origin sits at the image center
        assert abs(ys[0] - 31.5) <= 1 and abs(xs[0] - 31.5) <= 1

    def test_trajectory_connects_endpoints(self, tmp_path):
        style = render.FigureStyle(size=(64, 64), background=(0, 0, 0))
        states = np.array([[[-1.5, -1.5]], [[1.5, 1.5]]])
        layer = render.TrajectoryLayer(states=states, color=(0, 255, 0))
        render.render_figure([layer], style, tmp_path / "seg.ppm")
        img, _ = read_ppm(tmp_path / "seg.ppm")
        assert img[:, :, 1].sum() > 0
        # a diagonal line lights about one pixel per row it spans
        assert (img[:, :, 1] > 0).sum() >= 40


class TestSidecarRoundTrip:
    def test_all_layer_kinds_round_trip(self, tmp_path, fractal_spec, init_model):
        style = render.FigureStyle(size=(80, 80), background=(12, 12, 20))
        dens = render.raster_density(fractal_spec, 0, 0.05, resolution=(40, 40))
        field = render.raster_score_field(fractal_spec, 0, 0.3,
                                          resolution=(16, 16))
        layers = [
            render.RasterLayer(dens, gamma=0.5),
            render.ContourLayer(raster=dens, levels=tuple(render.contour_levels(dens, [0.9])),
                                color=(10, 200, 30)),
            render.ScatterLayer(points=np.array([[0.1, 0.2], [-0.4, 0.9]]),
                                color=(250, 40, 40), radius=2),
            render.VectorLayer(raster=field, color=(200, 200, 0), scale=0.07),
            render.TrajectoryLayer(states=np.array([[[0.0, 1.2], [1.0, 1.0]],
                                                    [[0.3, 0.4], [0.9, -0.2]],
                                                    [[0.5, 0.0], [0.7, -0.7]]]),
                                   color=(90, 90, 255)),
        ]
        render.render_figure(layers, style, tmp_path / "full.ppm")
        loaded_layers, loaded_style = render.load_figure_csv(tmp_path / "full.csv")
        assert loaded_style == style
        render.render_figure(loaded_layers, loaded_style, tmp_path / "replay.ppm")
        _, original = read_ppm(tmp_path / "full.ppm")
        _, replay = read_ppm(tmp_path / "replay.ppm")
        assert original == replay

    def test_sidecar_values_exact(self, tmp_path, fractal_spec):
        style = render.FigureStyle(size=(48, 48))
        dens = render.raster_density(fractal_spec, 1, 0.08, resolution=(24, 24))
        render.render_figure([render.RasterLayer(dens)], style, tmp_path / "r.ppm")
        (layer,), _ = render.load_figure_csv(tmp_path / "r.csv")
        assert np.array_equal(layer.raster.values, dens.values)
        assert layer.raster.extent == tuple(dens.extent)

    def test_rejects_foreign_csv(self, tmp_path):
        p = tmp_path / "junk.csv"
        p.write_text("iteration,loss\n0,1.0\n")
        with pytest.raises(ValueError):
            render.load_figure_csv(p)


class TestPresets:
    def test_fig1_writes_image_and_sidecar(self, tmp_path, fractal_spec):
        rng = np.random.default_rng(0)
        pops = {0: rng.normal(size=(40, 2)) * 0.4, 1: rng.normal(size=(40, 2)) * 0.4}
        style = render.FigureStyle(size=(96, 96))
        render.preset_fig1(fractal_spec, pops, tmp_path / "fig1_gt.ppm", style=style)
        img, _ = read_ppm(tmp_path / "fig1_gt.ppm")
        assert img.shape == (96, 96, 3)
        assert (tmp_path / "fig1_gt.csv").exists()

    def test_fig2_emits_three_panels(self, tmp_path, init_model, uncond_model, fractal_spec):
        style = render.FigureStyle(size=(64, 64))
        paths = render.preset_fig2(fractal_spec, init_model, uncond_model, 0,
                                   str(tmp_path / "fig2"), style=style)
        assert len(paths) == 3
        for p in paths:
            img, _ = read_ppm(p)
            assert img.shape == (64, 64, 3)

    def test_fig9_emits_grid(self, tmp_path, init_model, uncond_model, fractal_spec):
        style = render.FigureStyle(size=(48, 48))
        paths = render.preset_fig9(fractal_spec, init_model, uncond_model, 0, 3.0,
                                   str(tmp_path), sigmas=(0.5, 0.03), style=style)
        assert len(paths) == 10
        names = {p.rsplit("/", 1)[1] for p in paths}
        assert "fig9_sigma0.5_gt.ppm" in names
        assert "fig9_sigma0.03_guided.ppm" in names
