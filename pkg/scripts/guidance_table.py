"""Per-condition metric table: ground truth vs unguided vs guided sampling.

Expects the directory layout produced by scripts/train_all.sh. Prints one row
per condition with outlier fraction, coverage, and grid KL averaged over the
two classes.
"""
import argparse
import time

import numpy as np

from guidelab import evalmetrics, guidance, mixture, netmodel, sampler


def model_of(path, rel):
    bundle = netmodel.load_checkpoint(path)
    return netmodel.DenoiserModel(bundle.ema[rel] if rel else bundle.params)


def metrics_for(denoiser, sched, spec, count, seed):
    rows = [evalmetrics.metric_report(
        sampler.sample_population(denoiser, sched, cls, count, seed), spec, cls)
        for cls in (0, 1)]
    return tuple(float(np.mean([getattr(r, k) for r in rows]))
                 for k in ("outlier_fraction", "coverage", "grid_kl"))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--run", default="runs", help="directory from train_all.sh")
    ap.add_argument("--count", type=int, default=5000, help="samples per class")
    ap.add_argument("--seed", type=int, default=1000)
    ap.add_argument("--ema", type=float, default=0.010)
    ap.add_argument("--cfg-w", type=float, default=4.0)
    ap.add_argument("--auto-w", type=float, default=3.0)
    ap.add_argument("--truncation", type=float, default=1.40)
    args = ap.parse_args()

    spec = mixture.load_spec(f"{args.run}/data/spec.json")
    d1 = model_of(f"{args.run}/d1/model.ckpt", args.ema)
    d0c = model_of(f"{args.run}/d0c/model.ckpt", args.ema)
    d0u = model_of(f"{args.run}/d0u/model.ckpt", args.ema)
    sched = sampler.build_schedule()

    conditions = {
        "ground truth": mixture.MixtureDenoiser(spec),
        "unguided": d1,
        f"cfg w={args.cfg_w}": guidance.GuidedModel(guidance.GuidanceSpec(
            main=d1, mode="cfg", weight=args.cfg_w, guides=(d0u,))),
        f"autoguidance w={args.auto_w}": guidance.GuidedModel(guidance.GuidanceSpec(
            main=d1, mode="autoguidance", weight=args.auto_w, guides=(d0c,))),
        f"truncation x{args.truncation}": guidance.GuidedModel(guidance.GuidanceSpec(
            main=d1, mode="naive_truncation", truncation_factor=args.truncation)),
    }
    print(f"{'condition':24s} {'outlier':>8s} {'coverage':>9s} {'grid_kl':>8s}")
    for name, den in conditions.items():
        t0 = time.time()
        out, cov, kl = metrics_for(den, sched, spec, args.count, args.seed)
        print(f"{name:24s} {out:8.4f} {cov:9.4f} {kl:8.4f}   ({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
