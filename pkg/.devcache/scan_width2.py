"""Scan fractal branch cross-width: train the seed-0 model trio per variant
and report the guidance-ordering and degradation margins that depend on it."""
import time

import numpy as np

from guidelab import degrade, evalmetrics as ev, guidance, mixture, sampler
from guidelab import netmodel as nm, trainer as tr

EMA = 0.010
SCAN_DRAWS = 300_000


def condition_metrics(denoiser, sched, spec, seed):
    rows = []
    for cls in (0, 1):
        pts = sampler.sample_population(denoiser, sched, cls, 5000, seed)
        rows.append(ev.metric_report(pts, spec, cls))
    return {"outlier": float(np.mean([r.outlier_fraction for r in rows])),
            "coverage": float(np.mean([r.coverage for r in rows])),
            "grid_kl": float(np.mean([r.grid_kl for r in rows]))}


def run_variant(cross):
    mixture.CROSS_STD_FRACTION = cross
    print(f"\n=== cross fraction 1/{1/cross:.0f} ===", flush=True)
    spec = mixture.build_fractal(0)
    t0 = time.time()
    for cls in (0, 1):
        ev.outlier_threshold(spec, cls, draws=SCAN_DRAWS)
    print(f"thresholds ({time.time()-t0:.0f}s): {spec.outlier_thresholds}", flush=True)

    models = {}
    for name, arch, cfg in (
        ("d1", nm.ArchDescriptor(hidden_width=64), tr.TrainConfig(iterations=4096, seed=0)),
        ("d0c", nm.ArchDescriptor(hidden_width=32), tr.TrainConfig(iterations=512, seed=100)),
        ("d0u", nm.ArchDescriptor(hidden_width=32, conditional=False),
         tr.TrainConfig(iterations=512, seed=200)),
    ):
        t0 = time.time()
        res = tr.train(nm.init_params(arch, seed=cfg.seed), spec, cfg)
        models[name] = nm.DenoiserModel(res.ema[EMA])
        print(f"{name}: {time.time()-t0:.0f}s first={res.losses[0]:.4f} "
              f"last50={res.losses[-50:].mean():.4f}", flush=True)

    sched = sampler.build_schedule()
    d1, d0c, d0u = models["d1"], models["d0c"], models["d0u"]
    conds = {
        "gt": mixture.MixtureDenoiser(spec),
        "unguided": d1,
        "cfg4": guidance.GuidedModel(guidance.GuidanceSpec(
            main=d1, mode="cfg", weight=4.0, guides=(d0u,))),
        "auto3": guidance.GuidedModel(guidance.GuidanceSpec(
            main=d1, mode="autoguidance", weight=3.0, guides=(d0c,))),
        "naive": guidance.GuidedModel(guidance.GuidanceSpec(
            main=d1, mode="naive_truncation", truncation_factor=1.40)),
    }
    m = {}
    for name, den in conds.items():
        t0 = time.time()
        m[name] = condition_metrics(den, sched, spec, 1000)
        print(f"  {name:9s} outlier {m[name]['outlier']:.4f} coverage "
              f"{m[name]['coverage']:.4f} kl {m[name]['grid_kl']:.4f} "
              f"({time.time()-t0:.0f}s)", flush=True)
    print("checks:", flush=True)
    print(f"  1 unguided>2xGT:   {m['unguided']['outlier']:.4f} > {2*m['gt']['outlier']:.4f} "
          f"-> {m['unguided']['outlier'] > 2*m['gt']['outlier']}", flush=True)
    print(f"  2 auto<0.5xungd:   {m['auto3']['outlier']:.4f} < {0.5*m['unguided']['outlier']:.4f} "
          f"-> {m['auto3']['outlier'] < 0.5*m['unguided']['outlier']}", flush=True)
    print(f"  3 cov>=0.9xungd:   {m['auto3']['coverage']:.4f} >= {0.9*m['unguided']['coverage']:.4f} "
          f"-> {m['auto3']['coverage'] >= 0.9*m['unguided']['coverage']}", flush=True)
    print(f"  4 covcfg<covauto:  {m['cfg4']['coverage']:.4f} < {m['auto3']['coverage']:.4f} "
          f"-> {m['cfg4']['coverage'] < m['auto3']['coverage']}", flush=True)
    print(f"  5 klauto<klnaive:  {m['auto3']['grid_kl']:.4f} < {m['naive']['grid_kl']:.4f} "
          f"-> {m['auto3']['grid_kl'] < m['naive']['grid_kl']}", flush=True)

    cases = [
        ("matched dropout", degrade.CorruptionSpec("dropout", 0.05, seed=11),
         degrade.CorruptionSpec("dropout", 0.10, seed=12)),
        ("matched noise", degrade.CorruptionSpec("input_noise", 0.10, seed=13),
         degrade.CorruptionSpec("input_noise", 0.20, seed=14)),
        ("mismatched", degrade.CorruptionSpec("dropout", 0.05, seed=15),
         degrade.CorruptionSpec("input_noise", 0.20, seed=16)),
        ("matched dropout b", degrade.CorruptionSpec("dropout", 0.05, seed=21),
         degrade.CorruptionSpec("dropout", 0.10, seed=22)),
        ("matched noise b", degrade.CorruptionSpec("input_noise", 0.10, seed=23),
         degrade.CorruptionSpec("input_noise", 0.20, seed=24)),
        ("mismatched b", degrade.CorruptionSpec("dropout", 0.05, seed=25),
         degrade.CorruptionSpec("input_noise", 0.20, seed=26)),
    ]
    for label, cm, cg in cases:
        res = degrade.degradation_experiment(d1, cm, cg, spec=spec, cls=0,
                                             count=2048, seed=77)
        at1 = res.reports[1.0].composite
        best = res.best_report.composite
        print(f"  {label}: argmin w={res.best_w} at1={at1:.4f} best={best:.4f} "
              f"improvement={(1-best/at1)*100:.1f}%", flush=True)


for cross in (1.0 / 10.0, 1.0 / 8.0):
    run_variant(cross)
