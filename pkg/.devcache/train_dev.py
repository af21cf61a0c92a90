import sys, time
from guidelab import mixture as mx, netmodel as nm, trainer as tr

spec = mx.build_fractal(0)
jobs = []
for seed in (0, 1, 2):
    jobs.append((f"d1_s{seed}", nm.ArchDescriptor(hidden_width=64), tr.TrainConfig(iterations=4096, seed=seed)))
    jobs.append((f"d0c_s{seed}", nm.ArchDescriptor(hidden_width=32), tr.TrainConfig(iterations=512, seed=seed + 100)))
    jobs.append((f"d0u_s{seed}", nm.ArchDescriptor(hidden_width=32, conditional=False), tr.TrainConfig(iterations=512, seed=seed + 200)))
for name, arch, cfg in jobs:
    t0 = time.time()
    p = nm.init_params(arch, seed=cfg.seed)
    res = tr.train(p, spec, cfg)
    nm.save_checkpoint(f".devcache/{name}.ckpt", res.params, step=res.steps, rng_state=res.rng_state, ema=res.ema)
    print(f"{name}: {time.time()-t0:.0f}s loss[0]={res.losses[0]:.4f} loss[-50:].mean={res.losses[-50:].mean():.4f}", flush=True)
