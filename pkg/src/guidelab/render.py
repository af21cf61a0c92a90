"""Figure rendering: density rasters, mass contours, scatters, vector fields,
and trajectory overlays, composited to binary PPM with a CSV sidecar.

Everything here is a pure function of its inputs; output bytes are
reproducible. Pixel row 0 is the top of the image (largest y).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import mixture

RASTER_KINDS = ("density", "log_ratio", "score_field")
MIN_RESOLUTION = 16
QUIVER_GRID = 24

# color ramp anchors for density rasters, dark to bright
_RAMP = np.array([
    [20, 16, 44], [52, 41, 110], [64, 96, 156], [70, 150, 158],
    [96, 200, 130], [180, 235, 100], [250, 250, 220],
], dtype=np.float64)


@dataclass
class FieldRaster:
    extent: tuple          # (x0, y0, x1, y1)
    resolution: tuple      # (w, h) pixels
    values: np.ndarray     # (h, w) scalars or (h, w, 2) vectors
    kind: str

    def __post_init__(self):
        x0, y0, x1, y1 = self.extent
        w, h = self.resolution
        if self.kind not in RASTER_KINDS:
            raise ValueError(f"unknown raster kind {self.kind!r}")
        if w < MIN_RESOLUTION or h < MIN_RESOLUTION:
            raise ValueError("resolution must be at least 16x16")
        if not (x1 > x0 and y1 > y0):
            raise ValueError("degenerate extent")
        if self.values.shape[:2] != (h, w) or not np.isfinite(self.values).all():
            raise ValueError("values must be finite with shape (h, w[, 2])")

    @property
    def cell_area(self) -> float:
        x0, y0, x1, y1 = self.extent
        w, h = self.resolution
        return ((x1 - x0) / w) * ((y1 - y0) / h)

    def centers(self) -> np.ndarray:
        """(h*w, 2) pixel-center coordinates, row-major from the top row."""
        x0, y0, x1, y1 = self.extent
        w, h = self.resolution
        xs = x0 + (np.arange(w) + 0.5) * (x1 - x0) / w
        ys = y1 - (np.arange(h) + 0.5) * (y1 - y0) / h
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


def raster_density(source, cls, sigma: float, extent=(-2.0, -2.0, 2.0, 2.0),
                   resolution=(128, 128)) -> FieldRaster:
    """Exact density for a mixture source; exp(energy) normalized to unit
    grid mass for an energy-head model (its true normalizer is intractable,
    so the grid sum stands in and the raster is explicitly grid-normalized).
    """
    x0, y0, x1, y1 = extent
    raster = FieldRaster(extent=(x0, y0, x1, y1), resolution=tuple(resolution),
                         values=np.zeros((resolution[1], resolution[0])), kind="density")
    pts = raster.centers()
    if isinstance(source, mixture.MixtureSpec):
        vals = mixture.density(source, cls, pts, sigma)
    else:
        g = source.energy(pts, sigma, cls)
        g = g - g.max()
        vals = np.exp(g)
        vals = vals / (vals.sum() * raster.cell_area)
    raster.values = vals.reshape(resolution[1], resolution[0])
    return raster


def raster_log_ratio(main, guide, cls, sigma: float, extent=(-2.0, -2.0, 2.0, 2.0),
                     resolution=(128, 128), cls_guide=None) -> FieldRaster:
    """log of main density over guide density, each grid-normalized."""
    a = raster_density(main, cls, sigma, extent, resolution)
    b = raster_density(guide, cls_guide, sigma, extent, resolution)
    floor = np.exp(mixture.LOG_DENSITY_FLOOR)
    vals = np.log(np.maximum(a.values, floor)) - np.log(np.maximum(b.values, floor))
    return FieldRaster(extent=a.extent, resolution=a.resolution, values=vals,
                       kind="log_ratio")


def raster_score_field(model, cls, sigma: float, extent=(-2.0, -2.0, 2.0, 2.0),
                       resolution=(QUIVER_GRID, QUIVER_GRID)) -> FieldRaster:
    raster = FieldRaster(extent=extent, resolution=tuple(resolution),
                         values=np.zeros((resolution[1], resolution[0], 2)),
                         kind="score_field")
    if isinstance(model, mixture.MixtureSpec):
        vecs = mixture.score(model, cls, raster.centers(), sigma)
    else:
        vecs = model.score(raster.centers(), sigma, cls)
    raster.values = vecs.reshape(resolution[1], resolution[0], 2)
    return raster


def contour_levels(raster: FieldRaster, mass_fractions) -> list:
    """Density thresholds enclosing each requested fraction of the raster's
    total mass (sorted-cell cumulative sum)."""
    if raster.values.ndim != 2:
        raise ValueError("contours need a scalar raster")
    flat = np.sort(raster.values.ravel())[::-1]
    cum = np.cumsum(flat)
    total = cum[-1]
    out = []
    for f in mass_fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError("mass fractions must lie in (0, 1]")
        idx = int(np.searchsorted(cum, f * total))
        out.append(float(flat[min(idx, flat.size - 1)]))
    return out


# ---------------------------------------------------------------------------
# layers


@dataclass
class RasterLayer:
    raster: FieldRaster
    gamma: float = 0.35    # value compression before the color ramp


@dataclass
class ContourLayer:
    raster: FieldRaster
    levels: tuple
    color: tuple = (255, 255, 255)


@dataclass
class ScatterLayer:
    points: np.ndarray
    color: tuple = (255, 120, 30)
    radius: int = 1


@dataclass
class VectorLayer:
    raster: FieldRaster    # kind score_field or log_ratio gradients
    color: tuple = (230, 230, 230)
    scale: float = 0.05    # data units of displacement per unit vector length


@dataclass
class TrajectoryLayer:
    states: np.ndarray     # (T, B, 2) or (T, 2)
    color: tuple = (255, 255, 255)


@dataclass
class FigureStyle:
    size: tuple = (512, 512)
    extent: tuple = (-2.0, -2.0, 2.0, 2.0)
    background: tuple = (10, 10, 14)


# ---------------------------------------------------------------------------
# drawing primitives


def _to_px(style: FigureStyle, pts: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = style.extent
    w, h = style.size
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    cx = (pts[:, 0] - x0) / (x1 - x0) * w - 0.5
    cy = (y1 - pts[:, 1]) / (y1 - y0) * h - 0.5
    return np.column_stack([np.rint(cx), np.rint(cy)]).astype(np.int64)


def _put(img, ix, iy, color):
    h, w, _ = img.shape
    if 0 <= ix < w and 0 <= iy < h:
        img[iy, ix] = color


def _disk(img, ix, iy, radius, color):
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy <= radius * radius:
                _put(img, ix + dx, iy + dy, color)


def _line(img, p0, p1, color):
    # integer Bresenham segment
    x0, y0 = int(p0[0]), int(p0[1])
    x1, y1 = int(p1[0]), int(p1[1])
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        _put(img, x0, y0, color)
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _ramp_color(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0) * (len(_RAMP) - 1)
    i = np.minimum(t.astype(np.int64), len(_RAMP) - 2)
    frac = (t - i)[..., None]
    return _RAMP[i] * (1.0 - frac) + _RAMP[i + 1] * frac


def _resample_to(style: FigureStyle, raster: FieldRaster) -> np.ndarray:
    """Nearest-neighbor resample of raster values onto the figure pixels."""
    w, h = style.size
    rw, rh = raster.resolution
    ix = np.minimum((np.arange(w) * rw) // w, rw - 1)
    iy = np.minimum((np.arange(h) * rh) // h, rh - 1)
    return raster.values[np.ix_(iy.astype(int), ix.astype(int))]


def _draw_raster(img, style, layer: RasterLayer):
    vals = _resample_to(style, layer.raster)
    if layer.raster.kind == "log_ratio":
        # signed field: map zero to mid-ramp
        vmax = np.abs(vals).max()
        t = 0.5 if vmax == 0 else 0.5 + 0.5 * vals / vmax
    else:
        vmax = vals.max()
        t = np.zeros_like(vals) if vmax <= 0 else (vals / vmax) ** layer.gamma
    img[:] = np.rint(_ramp_color(t)).astype(np.uint8)


def _draw_contours(img, style, layer: ContourLayer):
    vals = _resample_to(style, layer.raster)
    for level in layer.levels:
        above = vals >= level
        # boundary: above cells with at least one 4-neighbor below
        nb = np.zeros_like(above)
        nb[1:, :] |= ~above[:-1, :]
        nb[:-1, :] |= ~above[1:, :]
        nb[:, 1:] |= ~above[:, :-1]
        nb[:, :-1] |= ~above[:, 1:]
        mask = above & nb
        img[mask] = layer.color


def _draw_scatter(img, style, layer: ScatterLayer):
    for ix, iy in _to_px(style, layer.points):
        _disk(img, ix, iy, layer.radius, layer.color)


def _draw_vectors(img, style, layer: VectorLayer):
    raster = layer.raster
    if raster.values.ndim != 3:
        raise ValueError("vector layer needs a 2-vector raster")
    starts = raster.centers()
    vecs = raster.values.reshape(-1, 2)
    ends = starts + vecs * layer.scale
    for p0, p1 in zip(_to_px(style, starts), _to_px(style, ends)):
        _line(img, p0, p1, layer.color)


def _draw_trajectories(img, style, layer: TrajectoryLayer):
    states = np.asarray(layer.states, dtype=np.float64)
    if states.ndim == 2:
        states = states[:, None, :]
    for b in range(states.shape[1]):
        px = _to_px(style, states[:, b, :])
        for i in range(px.shape[0] - 1):
            _line(img, px[i], px[i + 1], layer.color)


_DRAWERS = {
    RasterLayer: _draw_raster,
    ContourLayer: _draw_contours,
    ScatterLayer: _draw_scatter,
    VectorLayer: _draw_vectors,
    TrajectoryLayer: _draw_trajectories,
}


def render_figure(layers, style: FigureStyle, out_path) -> None:
    """Composite layers in order onto the style's canvas; write PPM P6 plus
    a CSV sidecar holding every plotted datum (same basename, .csv)."""
    for layer in layers:
        raster = getattr(layer, "raster", None)
        if raster is not None and tuple(raster.extent) != tuple(style.extent):
            raise ValueError("layer extent differs from figure extent")
    w, h = style.size
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = style.background
    for layer in layers:
        _DRAWERS[type(layer)](img, style, layer)
    try:
        with open(out_path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (w, h))
            fh.write(img.tobytes())
        write_figure_csv(_sidecar_path(out_path), layers, style)
    except OSError as exc:
        raise OSError(f"cannot write figure to {out_path}: {exc}") from exc


def _sidecar_path(out_path) -> str:
    s = str(out_path)
    return (s[:-4] if s.endswith(".ppm") else s) + ".csv"


# ---------------------------------------------------------------------------
# CSV sidecar: enough to re-render the identical image


def _fmt(values) -> list:
    return [repr(float(v)) for v in values]


def write_figure_csv(path, layers, style: FigureStyle) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["layer", "kind", "a", "b", "c", "d", "e"])
        wr.writerow([-1, "style", style.size[0], style.size[1],
                     ",".join(_fmt(style.extent)), ",".join(str(c) for c in style.background), ""])
        for li, layer in enumerate(layers):
            if isinstance(layer, RasterLayer):
                _write_raster(wr, li, "raster", layer.raster, extra=repr(float(layer.gamma)))
            elif isinstance(layer, ContourLayer):
                _write_raster(wr, li, "contour", layer.raster,
                              extra=",".join(str(c) for c in layer.color))
                wr.writerow([li, "contour_levels", ",".join(_fmt(layer.levels)), "", "", "", ""])
            elif isinstance(layer, ScatterLayer):
                wr.writerow([li, "scatter_meta", ",".join(str(c) for c in layer.color),
                             layer.radius, "", "", ""])
                for p in np.asarray(layer.points).reshape(-1, 2):
                    wr.writerow([li, "scatter", repr(float(p[0])), repr(float(p[1])), "", "", ""])
            elif isinstance(layer, VectorLayer):
                _write_raster(wr, li, "vectors", layer.raster,
                              extra=",".join(str(c) for c in layer.color) + ";" + repr(float(layer.scale)))
            elif isinstance(layer, TrajectoryLayer):
                states = np.asarray(layer.states, dtype=np.float64)
                if states.ndim == 2:
                    states = states[:, None, :]
                wr.writerow([li, "trajectory_meta", ",".join(str(c) for c in layer.color),
                             states.shape[0], states.shape[1], "", ""])
                for b in range(states.shape[1]):
                    for t in range(states.shape[0]):
                        wr.writerow([li, "trajectory", b, t,
                                     repr(float(states[t, b, 0])), repr(float(states[t, b, 1])), ""])


def _write_raster(wr, li, kind, raster: FieldRaster, extra="") -> None:
    w, h = raster.resolution
    wr.writerow([li, kind + "_meta", w, h, ",".join(_fmt(raster.extent)), raster.kind, extra])
    vals = raster.values
    if vals.ndim == 2:
        for iy in range(h):
            wr.writerow([li, kind + "_row", iy, ",".join(_fmt(vals[iy])), "", "", ""])
    else:
        for iy in range(h):
            wr.writerow([li, kind + "_row", iy, ",".join(_fmt(vals[iy, :, 0])),
                         ",".join(_fmt(vals[iy, :, 1])), "", ""])


def load_figure_csv(path):
    """Rebuild (layers, style) from a sidecar; re-rendering reproduces the
    image bytes exactly."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header[:2] != ["layer", "kind"]:
            raise ValueError("not a figure sidecar")
        rows = list(rd)
    style = None
    layers: dict[int, object] = {}
    pending: dict[int, dict] = {}

    def _colors(s):
        return tuple(int(c) for c in s.split(","))

    def _floats(s):
        return tuple(float(v) for v in s.split(","))

    for row in rows:
        li, kind = int(row[0]), row[1]
        if kind == "style":
            style = FigureStyle(size=(int(row[2]), int(row[3])),
                                extent=_floats(row[4]), background=_colors(row[5]))
        elif kind.endswith("_meta") and kind.split("_")[0] in ("raster", "contour", "vectors"):
            pending[li] = {"role": kind[:-5], "w": int(row[2]), "h": int(row[3]),
                           "extent": _floats(row[4]), "rkind": row[5], "extra": row[6],
                           "rows": {}, "rows2": {}}
        elif kind.endswith("_row"):
            p = pending[li]
            p["rows"][int(row[2])] = _floats(row[3])
            if row[4]:
                p["rows2"][int(row[2])] = _floats(row[4])
        elif kind == "contour_levels":
            pending[li]["levels"] = _floats(row[2])
        elif kind == "scatter_meta":
            pending[li] = {"role": "scatter", "color": _colors(row[2]),
                           "radius": int(row[3]), "pts": []}
        elif kind == "scatter":
            pending[li]["pts"].append((float(row[2]), float(row[3])))
        elif kind == "trajectory_meta":
            pending[li] = {"role": "trajectory", "color": _colors(row[2]),
                           "t": int(row[3]), "b": int(row[4]), "pts": {}}
        elif kind == "trajectory":
            pending[li]["pts"][(int(row[3]), int(row[2]))] = (float(row[4]), float(row[5]))

    for li, p in pending.items():
        if p["role"] in ("raster", "contour", "vectors"):
            h, w = p["h"], p["w"]
            if p["rows2"]:
                vals = np.zeros((h, w, 2))
                for iy in range(h):
                    vals[iy, :, 0] = p["rows"][iy]
                    vals[iy, :, 1] = p["rows2"][iy]
            else:
                vals = np.array([p["rows"][iy] for iy in range(h)])
            raster = FieldRaster(extent=p["extent"], resolution=(w, h), values=vals,
                                 kind=p["rkind"])
            if p["role"] == "raster":
                layers[li] = RasterLayer(raster=raster, gamma=float(p["extra"]))
            elif p["role"] == "contour":
                layers[li] = ContourLayer(raster=raster, levels=p["levels"],
                                          color=_colors(p["extra"]))
            else:
                color_s, scale_s = p["extra"].split(";")
                layers[li] = VectorLayer(raster=raster, color=_colors(color_s),
                                         scale=float(scale_s))
        elif p["role"] == "scatter":
            layers[li] = ScatterLayer(points=np.array(p["pts"]).reshape(-1, 2),
                                      color=p["color"], radius=p["radius"])
        elif p["role"] == "trajectory":
            states = np.zeros((p["t"], p["b"], 2))
            for (t, b), xy in p["pts"].items():
                states[t, b] = xy
            layers[li] = TrajectoryLayer(states=states, color=p["color"])
    return [layers[li] for li in sorted(layers)], style


# ---------------------------------------------------------------------------
# figure presets

FIG9_SIGMAS = (0.5, 0.25, 0.08, 0.03, 0.01)
CLASS_COLORS = ((200, 200, 200), (255, 150, 40))


def preset_fig1(spec: mixture.MixtureSpec, pops_by_class: dict, out_path,
                contour_mass=(0.99,), style: FigureStyle | None = None) -> None:
    """One sampling condition: ground-truth class contours over the marginal
    density, with the condition's samples scattered per class."""
    style = style or FigureStyle()
    layers = [RasterLayer(raster_density(spec, None, 0.03, style.extent, (160, 160)))]
    for cls in range(spec.n_classes):
        r = raster_density(spec, cls, 0.03, style.extent, (160, 160))
        layers.append(ContourLayer(raster=r, levels=tuple(contour_levels(r, contour_mass)),
                                   color=CLASS_COLORS[cls % len(CLASS_COLORS)]))
    for cls, pts in sorted(pops_by_class.items()):
        layers.append(ScatterLayer(points=np.asarray(pts),
                                   color=CLASS_COLORS[cls % len(CLASS_COLORS)], radius=1))
    render_figure(layers, style, out_path)


def _class_for(source, cls):
    # unconditional models ignore labels; keep the sidecar honest about it
    if getattr(source, "conditional", True):
        return cls
    return None


def preset_fig2(spec, main_model, guide_model, cls, out_stem, sigma_mid: float = 0.03,
                style: FigureStyle | None = None) -> list:
    """Main density, guide density, and their log ratio with its gradient
    field; returns the emitted paths."""
    style = style or FigureStyle()
    paths = []
    for name, src in (("pmain", main_model), ("pguide", guide_model)):
        r = raster_density(src, _class_for(src, cls), sigma_mid, style.extent, (128, 128))
        path = f"{out_stem}_{name}.ppm"
        render_figure([RasterLayer(r)], style, path)
        paths.append(path)
    ratio = raster_log_ratio(main_model, guide_model, cls, sigma_mid,
                             style.extent, (128, 128),
                             cls_guide=_class_for(guide_model, cls))
    grads = _ratio_gradients(main_model, guide_model, cls, sigma_mid, style.extent)
    path = f"{out_stem}_ratio.ppm"
    render_figure([RasterLayer(ratio), VectorLayer(raster=grads)], style, path)
    paths.append(path)
    return paths


def _ratio_gradients(main_model, guide_model, cls, sigma, extent) -> FieldRaster:
    a = raster_score_field(main_model, cls, sigma, extent)
    b = raster_score_field(guide_model, _class_for(guide_model, cls), sigma, extent)
    return FieldRaster(extent=extent, resolution=a.resolution,
                       values=a.values - b.values, kind="score_field")


def preset_fig9(spec, main_model, guide_model, cls, weight, out_dir,
                sigmas=FIG9_SIGMAS, style: FigureStyle | None = None) -> list:
    """5x5 grid of per-sigma panels: ground truth, guide, main, log ratio,
    and the guided implied density exp(w*G1 - (w-1)*G0)."""
    style = style or FigureStyle()
    paths = []
    for sigma in sigmas:
        panels = {
            "gt": RasterLayer(raster_density(spec, cls, sigma, style.extent, (128, 128))),
            "guide": RasterLayer(raster_density(guide_model, _class_for(guide_model, cls),
                                                sigma, style.extent, (128, 128))),
            "main": RasterLayer(raster_density(main_model, cls, sigma, style.extent, (128, 128))),
            "ratio": RasterLayer(raster_log_ratio(main_model, guide_model, cls, sigma,
                                                  style.extent, (128, 128),
                                                  cls_guide=_class_for(guide_model, cls))),
            "guided": RasterLayer(_guided_density(main_model, guide_model, cls, weight,
                                                  sigma, style.extent)),
        }
        for name, layer in panels.items():
            path = f"{out_dir}/fig9_sigma{sigma}_{name}.ppm"
            render_figure([layer], style, path)
            paths.append(path)
    return paths


def _guided_density(main_model, guide_model, cls, weight, sigma, extent) -> FieldRaster:
    raster = FieldRaster(extent=extent, resolution=(128, 128),
                         values=np.zeros((128, 128)), kind="density")
    pts = raster.centers()
    g1 = main_model.energy(pts, sigma, cls)
    g0 = guide_model.energy(pts, sigma, _class_for(guide_model, cls))
    g = weight * g1 - (weight - 1.0) * g0
    g -= g.max()
    vals = np.exp(g)
    raster.values = (vals / (vals.sum() * raster.cell_area)).reshape(128, 128)
    return raster
