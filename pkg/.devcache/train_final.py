"""Populate .testcache for the final layout: calibrated spec, all nine
seed models, and the denoising-loss variant, with loss curves. Uses the
exact conftest ModelCache recipe so pytest gets cache hits, not retrains."""
import time
from pathlib import Path

from guidelab import evalmetrics, mixture, netmodel as nm, trainer as tr

root = Path(".testcache")
root.mkdir(exist_ok=True)

spec = mixture.build_fractal(0)
for cls in (None, 0, 1):
    t0 = time.time()
    evalmetrics.outlier_threshold(spec, cls)
    print(f"threshold {cls}: {time.time() - t0:.0f}s", flush=True)
mixture.save_spec(spec, root / "spec_fractal0.json")
print(f"thresholds: {spec.outlier_thresholds}", flush=True)

jobs = []
for seed in (0, 1, 2):
    jobs.append((f"d1_s{seed}", nm.ArchDescriptor(hidden_width=64),
                 tr.TrainConfig(iterations=4096, seed=seed)))
    jobs.append((f"d0c_s{seed}", nm.ArchDescriptor(hidden_width=32),
                 tr.TrainConfig(iterations=512, seed=seed + 100)))
    jobs.append((f"d0u_s{seed}", nm.ArchDescriptor(hidden_width=32, conditional=False),
                 tr.TrainConfig(iterations=512, seed=seed + 200)))
jobs.append(("d1_dn_s0", nm.ArchDescriptor(hidden_width=64),
             tr.TrainConfig(iterations=4096, seed=0, loss_kind="denoising_sm")))

for name, arch, cfg in jobs:
    t0 = time.time()
    params = nm.init_params(arch, seed=cfg.seed)
    res = tr.train(params, spec, cfg)
    nm.save_checkpoint(root / f"{name}.ckpt", res.params, step=res.steps,
                       rng_state=res.rng_state, ema=res.ema)
    tr.save_loss_curve(root / f"{name}_loss.csv", res.losses, cfg)
    print(f"{name}: {time.time() - t0:.0f}s first={res.losses[0]:.4f} "
          f"last512={res.losses[-512:].mean():.4f} "
          f"last50={res.losses[-50:].mean():.4f} last={res.losses[-1]:.4f}", flush=True)
print("done", flush=True)
