import time

import numpy as np

from guidelab import mixture as mx
from guidelab import netmodel as nm
from guidelab import trainer as tr
from guidelab.streams import derive_rng

spec = mx.build_fractal(0)
bundle = nm.load_checkpoint("/root/pkg/.devcache/d1_s1.ckpt")
cfg = tr.TrainConfig(iterations=8192, seed=1, ema_sigma_rels=(0.010, 0.050))

# dev checkpoint lacks rng state; replay the per-iteration stream consumption
rng = derive_rng(1, 13)
B = cfg.batch_size
for _ in range(4096):
    rng.standard_normal(B)
    rng.random(B)
    rng.standard_normal((B, 2))
bundle = nm.CheckpointBundle(params=bundle.params, step=4096,
                             rng_state=rng.bit_generator.state, ema=bundle.ema)

t0 = time.time()
res = tr.train(bundle.params, spec, cfg, resume=bundle)
print(f"continued to 8192 in {time.time() - t0:.0f}s", flush=True)
ls = res.losses
for a, b in [(0, 512), (512, 1024), (1024, 2048), (2048, 3072), (3072, 4096)]:
    if b <= len(ls):
        print(f"steps {4096 + a}..{4096 + b}: mean loss {ls[a:b].mean():.5f}", flush=True)
nm.save_checkpoint("/root/pkg/.devcache/d1_s1_8192.ckpt", res.params, step=8192,
                   rng_state=res.rng_state, ema=res.ema)
