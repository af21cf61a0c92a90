"""Seed .testcache with the dev checkpoints so pytest skips retraining.

Retrains d1_s0 / d0c_s0 / d1_dn_s0 through the exact conftest recipe (also
producing the loss CSVs the quality tests read), bit-compares against the
dev checkpoints, and copies the rest over.
"""
import shutil
import time
from pathlib import Path

from guidelab import evalmetrics, mixture, netmodel as nm, trainer as tr

root = Path(".testcache")
root.mkdir(exist_ok=True)
dev = Path(".devcache")

spec_path = root / "spec_fractal0.json"
if spec_path.exists():
    spec = mixture.load_spec(spec_path)
else:
    spec = mixture.build_fractal(0)
    for cls in (None, 0, 1):
        t0 = time.time()
        evalmetrics.outlier_threshold(spec, cls)
        print(f"threshold {cls}: {time.time() - t0:.0f}s", flush=True)
    mixture.save_spec(spec, spec_path)
    print(f"thresholds: {spec.outlier_thresholds}", flush=True)


def train_one(name, arch, cfg):
    t0 = time.time()
    params = nm.init_params(arch, seed=cfg.seed)
    res = tr.train(params, spec, cfg)
    nm.save_checkpoint(root / f"{name}.ckpt", res.params, step=res.steps,
                       rng_state=res.rng_state, ema=res.ema)
    tr.save_loss_curve(root / f"{name}_loss.csv", res.losses, cfg)
    print(f"{name}: {time.time() - t0:.0f}s first={res.losses[0]:.4f} "
          f"last512={res.losses[-512:].mean():.4f} last={res.losses[-1]:.4f}", flush=True)


train_one("d1_s0", nm.ArchDescriptor(hidden_width=64), tr.TrainConfig(iterations=4096, seed=0))
train_one("d0c_s0", nm.ArchDescriptor(hidden_width=32), tr.TrainConfig(iterations=512, seed=100))
train_one("d1_dn_s0", nm.ArchDescriptor(hidden_width=64),
          tr.TrainConfig(iterations=4096, seed=0, loss_kind="denoising_sm"))

for name in ("d1_s0", "d0c_s0"):
    same = (root / f"{name}.ckpt").read_bytes() == (dev / f"{name}.ckpt").read_bytes()
    print(f"{name} matches devcache: {same}", flush=True)

for name in ("d1_s1", "d1_s2", "d0c_s1", "d0c_s2", "d0u_s0", "d0u_s1", "d0u_s2"):
    shutil.copy2(dev / f"{name}.ckpt", root / f"{name}.ckpt")
print("copied remaining checkpoints", flush=True)
