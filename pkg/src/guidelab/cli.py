"""Command-line entry point binding all modules.

Configuration comes from flat key=value files (# comments allowed) merged
with flags; flags win. Every run writes the resolved configuration and the
tool version into its output directory. Heavy imports happen after the
--threads cap is applied so BLAS/numba pools honor it.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O failure;
failures emit one machine-readable JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__

OUTPUT_ROOT_ENV = "GUIDELAB_OUT"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS", "NUMBA_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config schema: key -> (default, parser). Flag and file values arrive as
# strings and go through the same parser, so precedence is the only
# difference between the two sources.


def _bool(s):
    v = str(s).strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {s!r}")


def _floats(s):
    if isinstance(s, tuple):
        return s
    return tuple(float(v) for v in str(s).split(",") if v.strip())


def _opt_cls(s):
    v = str(s).strip().lower()
    return None if v in ("", "none", "marginal") else int(v)


def _str(s):
    return str(s)


# schema defaults are stored in final (parsed) form; only file and flag
# values pass through the per-key parser
_DEFAULT_W_GRID = tuple(1.0 + 0.25 * i for i in range(9))

_SAMPLING_KEYS = {
    "count": (2048, int),
    "steps": (32, int),
    "sigma_min": (0.002, float),
    "sigma_max": (5.0, float),
    "rho": (7.0, float),
    "cls": (0, _opt_cls),
    "ema": ("", _str),          # sigma_rel of the EMA table; empty = raw weights
    "seed": (0, int),
}

SCHEMAS: dict[str, dict] = {
    "make-data": {
        "seed": (0, int),
        "calibrate": (False, _bool),   # also cache outlier thresholds (slow)
        "calibration_draws": (1_000_000, int),
    },
    "train": {
        "data": ("", _str),
        "width": (64, int),
        "iterations": (4096, int),
        "batch_size": (4096, int),
        "head": ("energy", _str),
        "conditional": (True, _bool),
        "loss_kind": ("exact_sm", _str),
        "checkpoint_every": (0, int),
        "resume": ("", _str),
        "seed": (0, int),
    },
    "sample": {
        "checkpoint": ("", _str),
        "guide": ("", _str),           # comma list for multi
        "mode": ("none", _str),
        "w": (1.0, float),
        "truncation": (1.40, float),
        "blend_alpha": (0.5, float),
        "interval": ("", _str),        # "lo,hi" in sigma
        **_SAMPLING_KEYS,
    },
    "eval": {
        "population": ("", _str),
        "data": ("", _str),
        "cls": (None, _opt_cls),
        "seed": (0, int),
    },
    "sweep": {
        "checkpoint": ("", _str),
        "guide": ("", _str),
        "mode": ("autoguidance", _str),
        "data": ("", _str),
        "w_grid": (_DEFAULT_W_GRID, _floats),
        "budget": (64, int),
        "k_repeats": (3, int),
        "resume": ("", _str),
        **_SAMPLING_KEYS,
    },
    "corrupt-experiment": {
        "checkpoint": ("", _str),
        "data": ("", _str),
        "kind_main": ("dropout", _str),
        "strength_main": (0.05, float),
        "kind_guide": ("dropout", _str),
        "strength_guide": (0.10, float),
        "corruption_seed": (0, int),
        "w_grid": (_DEFAULT_W_GRID, _floats),
        **_SAMPLING_KEYS,
    },
    "render": {
        "preset": ("fig1", _str),
        "data": ("", _str),
        "population": ("", _str),      # comma list of population CSVs (fig1)
        "checkpoint": ("", _str),
        "guide": ("", _str),
        "cls": (0, _opt_cls),
        "sigma_mid": (0.03, float),
        "w": (4.0, float),
        "contour_mass": (0.99, float),
        "size": (512, int),
        "name": ("", _str),
        "ema": ("", _str),
    },
    "repro": {
        "seed": (0, int),
        "d1_width": (64, int),
        "d1_iterations": (4096, int),
        "d0_width": (32, int),
        "d0_iterations": (512, int),
        "batch_size": (4096, int),
        "count": (2048, int),
        "steps": (32, int),
        "cfg_w": (4.0, float),
        "auto_w": (3.0, float),
        "truncation": (1.40, float),
        "ema": ("0.010", _str),
        "render": (True, _bool),
        "size": (512, int),
        "calibration_draws": (1_000_000, int),
    },
}


def read_config_file(path) -> dict:
    """Flat key=value lines; # starts a comment; keys use underscores."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{ln}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_config(subcommand: str, args: argparse.Namespace) -> dict:
    schema = SCHEMAS[subcommand]
    cfg = {k: d for k, (d, _) in schema.items()}
    if args.config:
        for key, value in read_config_file(args.config).items():
            if key == "out":
                if args.out is None:
                    args.out = value
                continue
            if key not in schema:
                raise UsageError(f"unknown config key {key!r} for {subcommand}")
            cfg[key] = schema[key][1](value)
    for key in schema:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            cfg[key] = schema[key][1](flag_value)
    return cfg


def resolve_out_dir(subcommand: str, args: argparse.Namespace) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        out = Path(root) / subcommand
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_snapshot(out_dir: Path, subcommand: str, cfg: dict) -> None:
    # output placement is not configuration, so `out` stays out of the file
    lines = [f"# guidelab {__version__}", f"# subcommand: {subcommand}"]
    for key in sorted(cfg):
        lines.append(f"{key}={_fmt_value(cfg[key])}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if v is None:
        return "none"
    return str(v)


# ---------------------------------------------------------------------------
# shared pieces (imports deferred until after the thread cap)


def _modules():
    from . import degrade, evalmetrics, guidance, mixture, netmodel, render, sampler, trainer
    return degrade, evalmetrics, guidance, mixture, netmodel, render, sampler, trainer


def _load_spec(path: str):
    _, _, _, mixture, _, _, _, _ = _modules()
    if not path:
        raise UsageError("a mixture spec is required; pass --data or run make-data first")
    return mixture.load_spec(path)


def _load_model(path: str, ema: str):
    _, _, _, _, nm, _, _, _ = _modules()
    if not path:
        raise UsageError("--checkpoint is required")
    bundle = nm.load_checkpoint(path)
    if ema:
        rel = float(ema)
        if rel not in bundle.ema:
            raise UsageError(f"checkpoint has no EMA table {ema}; available: "
                             f"{sorted(bundle.ema)}")
        return nm.DenoiserModel(bundle.ema[rel])
    return nm.DenoiserModel(bundle.params)


def _build_guided(cfg: dict, main_model):
    """Model handle for the configured guidance mode; w=1 with no guide given
    collapses to the unguided model (exact identity for every affine mode)."""
    _, _, guidance, _, _, _, _, _ = _modules()
    mode = cfg["mode"]
    if mode == "none":
        return main_model
    interval = None
    if cfg.get("interval"):
        lo_hi = _floats(cfg["interval"])
        if len(lo_hi) != 2:
            raise UsageError("--interval takes two comma-separated sigmas")
        interval = lo_hi
    guide_paths = [p for p in cfg.get("guide", "").split(",") if p.strip()]
    need = {"cfg": 1, "autoguidance": 1, "multi": 2}.get(mode, 0)
    if need and not guide_paths:
        if cfg["w"] == 1.0 and interval is None:
            return main_model
        raise UsageError(f"mode {mode} needs --guide")
    if len(guide_paths) != need:
        raise UsageError(f"mode {mode} needs {need} guide checkpoint(s)")
    guides = tuple(_load_model(p, cfg.get("ema", "")) for p in guide_paths)
    spec = guidance.GuidanceSpec(main=main_model, mode=mode, weight=cfg["w"],
                                 truncation_factor=cfg.get("truncation", 1.40),
                                 blend_alpha=cfg.get("blend_alpha", 0.5),
                                 interval=interval, guides=guides)
    return guidance.GuidedModel(spec)


def _schedule(cfg: dict):
    _, _, _, _, _, _, sampler, _ = _modules()
    return sampler.build_schedule(cfg["steps"], cfg["sigma_min"], cfg["sigma_max"],
                                  cfg["rho"])


# ---------------------------------------------------------------------------
# subcommands


def _cmd_make_data(cfg: dict, out: Path) -> int:
    _, evalmetrics, _, mixture, _, _, _, _ = _modules()
    spec = mixture.build_fractal(cfg["seed"])
    if cfg["calibrate"]:
        for cls in (None, *range(spec.n_classes)):
            evalmetrics.outlier_threshold(spec, cls, draws=cfg["calibration_draws"])
    mixture.save_spec(spec, out / "spec.json")
    return 0


def _cmd_train(cfg: dict, out: Path) -> int:
    _, _, _, mixture, nm, _, _, trainer = _modules()
    spec = mixture.load_spec(cfg["data"]) if cfg["data"] else mixture.build_fractal(0)
    arch = nm.ArchDescriptor(hidden_width=cfg["width"], head=cfg["head"],
                             conditional=cfg["conditional"])
    params = nm.init_params(arch, seed=cfg["seed"])
    tc = trainer.TrainConfig(iterations=cfg["iterations"], batch_size=cfg["batch_size"],
                             loss_kind=cfg["loss_kind"], seed=cfg["seed"])
    resume = nm.load_checkpoint(cfg["resume"]) if cfg["resume"] else None
    result = trainer.train(params, spec, tc, resume=resume,
                           checkpoint_path=out / "model.ckpt",
                           checkpoint_every=cfg["checkpoint_every"])
    nm.save_checkpoint(out / "model.ckpt", result.params, step=result.steps,
                       rng_state=result.rng_state, ema=result.ema)
    trainer.save_loss_curve(out / "loss_curve.csv", result.losses, tc)
    return 0


def _cmd_sample(cfg: dict, out: Path) -> int:
    _, _, _, _, _, _, sampler, _ = _modules()
    model = _build_guided(cfg, _load_model(cfg["checkpoint"], cfg["ema"]))
    points = sampler.sample_population(model, _schedule(cfg), cfg["cls"],
                                       cfg["count"], cfg["seed"])
    sampler.population_to_csv(out / "population.csv", points, cfg["cls"])
    return 0


def _cmd_eval(cfg: dict, out: Path) -> int:
    _, evalmetrics, _, _, _, _, sampler, _ = _modules()
    if not cfg["population"]:
        raise UsageError("--population is required")
    points, file_cls = sampler.population_from_csv(cfg["population"])
    cls = cfg["cls"] if cfg["cls"] is not None else file_cls
    spec = _load_spec(cfg["data"])
    report = evalmetrics.metric_report(points, spec, cls,
                                       fingerprint=Path(cfg["population"]).name)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def _cmd_sweep(cfg: dict, out: Path) -> int:
    _, evalmetrics, _, _, _, _, sampler, _ = _modules()
    spec = _load_spec(cfg["data"])
    main_model = _load_model(cfg["checkpoint"], cfg["ema"])
    sched = _schedule(cfg)
    space = {"w": tuple(cfg["w_grid"])}

    def objective(values, repeat):
        wcfg = dict(cfg, w=float(values[0]))
        model = _build_guided(wcfg, main_model)
        pts = sampler.sample_population(model, sched, cfg["cls"], cfg["count"],
                                        cfg["seed"] + 7919 * repeat)
        return evalmetrics.metric_report(pts, spec, cfg["cls"]).composite

    state = None
    if cfg["resume"]:
        state = evalmetrics.SweepState.from_json(Path(cfg["resume"]).read_text())
    state = evalmetrics.sweep(objective, space, cfg["budget"],
                              k_repeats=cfg["k_repeats"], state=state)
    (out / "sweep_state.json").write_text(state.to_json() + "\n", encoding="utf-8")
    best = {"w": state.point_values(state.best_point)[0],
            "composite": state.best_value, "evals_used": state.evals_used,
            "converged": state.converged}
    (out / "sweep_best.json").write_text(json.dumps(best, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return 0


def _cmd_corrupt_experiment(cfg: dict, out: Path) -> int:
    degrade, _, _, _, _, _, _, _ = _modules()
    spec = _load_spec(cfg["data"])
    model = _load_model(cfg["checkpoint"], cfg["ema"])
    main_c = degrade.CorruptionSpec(kind=cfg["kind_main"], strength=cfg["strength_main"],
                                    seed=cfg["corruption_seed"])
    guide_c = degrade.CorruptionSpec(kind=cfg["kind_guide"], strength=cfg["strength_guide"],
                                     seed=cfg["corruption_seed"] + 1)
    result = degrade.degradation_experiment(model, main_c, guide_c, cfg["w_grid"],
                                            spec=spec, cls=cfg["cls"], count=cfg["count"],
                                            schedule=_schedule(cfg), seed=cfg["seed"])
    degrade.experiment_to_csv(out / "experiment.csv", result)
    base = result.reports[result.w_grid[0]].composite
    summary = {"best_w": result.best_w, "best_composite": result.best_report.composite,
               "baseline_w": result.w_grid[0], "baseline_composite": base}
    (out / "experiment_best.json").write_text(json.dumps(summary, sort_keys=True) + "\n",
                                              encoding="utf-8")
    return 0


def _cmd_render(cfg: dict, out: Path) -> int:
    import numpy as np

    _, _, _, _, _, render, sampler, _ = _modules()
    spec = _load_spec(cfg["data"])
    style = render.FigureStyle(size=(cfg["size"], cfg["size"]))
    preset = cfg["preset"]
    if preset == "fig1":
        paths = [p for p in cfg["population"].split(",") if p.strip()]
        if not paths:
            raise UsageError("preset fig1 needs --population")
        pops: dict[int, list] = {}
        for path in paths:
            pts, file_cls = sampler.population_from_csv(path)
            key = 0 if file_cls is None else int(file_cls)
            pops.setdefault(key, []).append(pts)
        merged = {c: np.concatenate(v) for c, v in pops.items()}
        name = cfg["name"] or "fig1"
        render.preset_fig1(spec, merged, out / f"{name}.ppm",
                           contour_mass=(cfg["contour_mass"],), style=style)
    elif preset == "fig2":
        main = _load_model(cfg["checkpoint"], cfg["ema"])
        guide = _load_model(cfg["guide"], cfg["ema"])
        stem = str(out / (cfg["name"] or "fig2"))
        render.preset_fig2(spec, main, guide, cfg["cls"], stem,
                           sigma_mid=cfg["sigma_mid"], style=style)
    elif preset == "fig9":
        main = _load_model(cfg["checkpoint"], cfg["ema"])
        guide = _load_model(cfg["guide"], cfg["ema"])
        render.preset_fig9(spec, main, guide, cfg["cls"], cfg["w"], str(out),
                           style=style)
    else:
        raise UsageError(f"unknown preset {preset!r}")
    return 0


def _cmd_repro(cfg: dict, out: Path) -> int:
    """Full toy pipeline: data, both denoisers, the five sampling conditions,
    metrics, and figure panels, all derived from one seed."""
    degrade, evalmetrics, guidance, mixture, nm, render, sampler, trainer = _modules()
    seed = cfg["seed"]

    spec = mixture.build_fractal(seed)
    for cls in (None, *range(spec.n_classes)):
        evalmetrics.outlier_threshold(spec, cls, draws=cfg["calibration_draws"])
    mixture.save_spec(spec, out / "spec.json")

    def train_one(name, width, iterations, conditional, train_seed):
        sub = out / name
        sub.mkdir(exist_ok=True)
        arch = nm.ArchDescriptor(hidden_width=width, conditional=conditional)
        params = nm.init_params(arch, seed=train_seed)
        tc = trainer.TrainConfig(iterations=iterations, batch_size=cfg["batch_size"],
                                 seed=train_seed)
        result = trainer.train(params, spec, tc)
        nm.save_checkpoint(sub / "model.ckpt", result.params, step=result.steps,
                           rng_state=result.rng_state, ema=result.ema)
        trainer.save_loss_curve(sub / "loss_curve.csv", result.losses, tc)
        write_snapshot(sub, "train", {
            "data": "spec.json", "width": width, "iterations": iterations,
            "batch_size": cfg["batch_size"], "head": "energy",
            "conditional": conditional, "loss_kind": tc.loss_kind,
            "checkpoint_every": 0, "resume": "", "seed": train_seed,
        })
        rel = float(cfg["ema"]) if cfg["ema"] else None
        return nm.DenoiserModel(result.ema[rel] if rel else result.params)

    d1 = train_one("d1", cfg["d1_width"], cfg["d1_iterations"], True, seed)
    d0c = train_one("d0_conditional", cfg["d0_width"], cfg["d0_iterations"], True, seed + 1)
    d0u = train_one("d0_unconditional", cfg["d0_width"], cfg["d0_iterations"], False, seed + 2)

    conditions = {
        "gt": mixture.MixtureDenoiser(spec),
        "unguided": d1,
        "cfg": guidance.GuidedModel(guidance.GuidanceSpec(
            main=d1, mode="cfg", weight=cfg["cfg_w"], guides=(d0u,))),
        "autoguidance": guidance.GuidedModel(guidance.GuidanceSpec(
            main=d1, mode="autoguidance", weight=cfg["auto_w"], guides=(d0c,))),
        "truncation": guidance.GuidedModel(guidance.GuidanceSpec(
            main=d1, mode="naive_truncation", truncation_factor=cfg["truncation"])),
    }

    sched = sampler.build_schedule(cfg["steps"])
    pop_dir = out / "populations"
    pop_dir.mkdir(exist_ok=True)
    metrics: dict = {}
    populations: dict = {}
    for ci, (name, model) in enumerate(conditions.items()):
        per_class = {}
        metrics[name] = {}
        for cls in range(spec.n_classes):
            pts = sampler.sample_population(model, sched, cls, cfg["count"],
                                            seed * 100003 + ci * 101 + cls)
            sampler.population_to_csv(pop_dir / f"{name}_cls{cls}.csv", pts, cls)
            per_class[cls] = pts
            report = evalmetrics.metric_report(pts, spec, cls,
                                               fingerprint=f"{name}/cls{cls}")
            metrics[name][f"cls{cls}"] = json.loads(report.to_json())
        metrics[name]["mean_composite"] = sum(
            metrics[name][f"cls{c}"]["composite"] for c in range(spec.n_classes)
        ) / spec.n_classes
        populations[name] = per_class
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1) + "\n",
                                      encoding="utf-8")

    if cfg["render"]:
        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        style = render.FigureStyle(size=(cfg["size"], cfg["size"]))
        for name in conditions:
            render.preset_fig1(spec, populations[name], fig_dir / f"fig1_{name}.ppm",
                               style=style)
        render.preset_fig2(spec, d1, d0u, 0, str(fig_dir / "fig2"), style=style)
        render.preset_fig9(spec, d1, d0u, 0, cfg["cfg_w"], str(fig_dir), style=style)
    return 0


_COMMANDS = {
    "make-data": _cmd_make_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "corrupt-experiment": _cmd_corrupt_experiment,
    "render": _cmd_render,
    "repro": _cmd_repro,
}


# ---------------------------------------------------------------------------
# argv handling


def _apply_thread_cap(argv) -> None:
    """Honor --threads before anything imports numpy or numba."""
    n = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif arg.startswith("--threads="):
            n = arg.split("=", 1)[1]
    if n is None:
        return
    try:
        count = max(1, int(n))
    except ValueError:
        raise UsageError(f"--threads expects an integer, got {n!r}")
    for var in _THREAD_VARS:
        os.environ[var] = str(count)


def build_parser() -> _Parser:
    parser = _Parser(prog="guidelab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"guidelab {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file; flags override it")
        p.add_argument("--out", default=None,
                       help=f"output directory (default ${OUTPUT_ROOT_ENV}/{name})")
        p.add_argument("--threads", default=None, type=int,
                       help="cap BLAS/numba thread pools")
        for key in schema:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return parser


def _emit_error(code: int, kind: str, exc: BaseException) -> None:
    line = json.dumps({"error": kind, "message": str(exc), "exit_code": code})
    print(line, file=sys.stderr)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _apply_thread_cap(argv)
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.subcommand, args)
        out = resolve_out_dir(args.subcommand, args)
        write_snapshot(out, args.subcommand, cfg)
        return _COMMANDS[args.subcommand](cfg, out)
    except UsageError as exc:
        _emit_error(1, "usage", exc)
        return 1
    except OSError as exc:
        _emit_error(3, "io", exc)
        return 3
    except (ValueError, ArithmeticError, RuntimeError, KeyError) as exc:
        _emit_error(2, "numeric", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
