"""Post-retrain validation: 3-seed criterion-6 orderings and criterion-7
degradation sweeps against the .testcache checkpoints, mirroring
tests/test_acceptance.py exactly."""
import time

import numpy as np

from guidelab import degrade, evalmetrics as ev, guidance, mixture, sampler
from guidelab import netmodel as nm

spec = mixture.load_spec(".testcache/spec_fractal0.json")
print(f"thresholds: {spec.outlier_thresholds}", flush=True)
sched = sampler.build_schedule()
EMA = 0.010


def condition_metrics(denoiser, seed):
    reps = []
    for cls in (0, 1):
        pts = sampler.sample_population(denoiser, sched, cls, 5000, seed)
        reps.append(ev.metric_report(pts, spec, cls))
    return {
        "outlier": np.mean([r.outlier_fraction for r in reps]),
        "coverage": np.mean([r.coverage for r in reps]),
        "grid_kl": np.mean([r.grid_kl for r in reps]),
    }


def model(name):
    return nm.DenoiserModel(nm.load_checkpoint(f".testcache/{name}.ckpt").ema[EMA])


per_seed = {}
for seed in (0, 1, 2):
    t0 = time.time()
    d1 = model(f"d1_s{seed}")
    d0c = model(f"d0c_s{seed}")
    d0u = model(f"d0u_s{seed}")
    pop_seed = 1000 + seed

    conds = {}
    conds["gt"] = condition_metrics(mixture.MixtureDenoiser(spec), pop_seed)
    conds["unguided"] = condition_metrics(d1, pop_seed)
    conds["cfg4"] = condition_metrics(guidance.GuidedModel(guidance.GuidanceSpec(
        main=d1, mode="cfg", weight=4.0, guides=(d0u,))), pop_seed)
    conds["auto3"] = condition_metrics(guidance.GuidedModel(guidance.GuidanceSpec(
        main=d1, mode="autoguidance", weight=3.0, guides=(d0c,))), pop_seed)
    conds["naive"] = condition_metrics(guidance.GuidedModel(guidance.GuidanceSpec(
        main=d1, mode="naive_truncation", truncation_factor=1.40)), pop_seed)
    per_seed[seed] = conds
    print(f"seed {seed} done in {time.time() - t0:.0f}s", flush=True)
    for name, m in conds.items():
        print(f"  {name:9s} outlier {m['outlier']:.4f} coverage {m['coverage']:.4f} "
              f"kl {m['grid_kl']:.4f}", flush=True)

avg = {name: {k: np.mean([per_seed[s][name][k] for s in per_seed])
              for k in ("outlier", "coverage", "grid_kl")}
       for name in per_seed[0]}
print("\nseed-averaged:", flush=True)
for name, m in avg.items():
    print(f"  {name:9s} outlier {m['outlier']:.4f} coverage {m['coverage']:.4f} "
          f"kl {m['grid_kl']:.4f}", flush=True)

checks = [
    ("1 unguided>2xGT", avg["unguided"]["outlier"] > 2 * avg["gt"]["outlier"],
     f"{avg['unguided']['outlier']:.4f} > {2 * avg['gt']['outlier']:.4f}"),
    ("2 auto<0.5xungd", avg["auto3"]["outlier"] < 0.5 * avg["unguided"]["outlier"],
     f"{avg['auto3']['outlier']:.4f} < {0.5 * avg['unguided']['outlier']:.4f}"),
    ("3 cov>=0.9xungd", avg["auto3"]["coverage"] >= 0.9 * avg["unguided"]["coverage"],
     f"{avg['auto3']['coverage']:.4f} >= {0.9 * avg['unguided']['coverage']:.4f}"),
    ("4 covcfg<covauto", avg["cfg4"]["coverage"] < avg["auto3"]["coverage"],
     f"{avg['cfg4']['coverage']:.4f} < {avg['auto3']['coverage']:.4f}"),
    ("5 klauto<klnaive", avg["auto3"]["grid_kl"] < avg["naive"]["grid_kl"],
     f"{avg['auto3']['grid_kl']:.4f} < {avg['naive']['grid_kl']:.4f}"),
]
print("checks:", flush=True)
for name, ok, detail in checks:
    print(f"  {name}: {detail} -> {ok}", flush=True)

d1 = model("d1_s0")
cases = {
    "matched_dropout": (degrade.CorruptionSpec("dropout", 0.05, seed=11),
                        degrade.CorruptionSpec("dropout", 0.10, seed=12)),
    "matched_noise": (degrade.CorruptionSpec("input_noise", 0.10, seed=13),
                      degrade.CorruptionSpec("input_noise", 0.20, seed=14)),
    "mismatched": (degrade.CorruptionSpec("dropout", 0.05, seed=15),
                   degrade.CorruptionSpec("input_noise", 0.20, seed=16)),
}
for label, (cm, cg) in cases.items():
    t0 = time.time()
    res = degrade.degradation_experiment(d1, cm, cg, spec=spec, cls=0,
                                         count=2048, seed=77)
    at1 = res.composites[res.weights.index(1.0)]
    best_i = int(np.argmin(res.composites))
    gain = 1.0 - res.composites[best_i] / at1
    print(f"  {label}: argmin w={res.weights[best_i]} at1={at1:.4f} "
          f"best={res.composites[best_i]:.4f} improvement={gain:.1%} "
          f"({time.time() - t0:.0f}s)", flush=True)
print("done", flush=True)
