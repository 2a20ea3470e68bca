import time, json
import numpy as np
from embedmask import scenes as sc, training as tr, inference as inf, evaluation as ev

t0 = time.time()
spec = sc.SceneSpec()
train_scenes = sc.generate_dataset(7, spec, 120)
val_scenes = sc.generate_dataset(7001, spec, 40)

base = dict(total_iters=1200, warmup_iters=100)
configs = [
    ("learnable", tr.TrainConfig(**base)),
    ("fixed_hinge", tr.TrainConfig(margin_mode="fixed_hinge", **base)),
    ("pixel", tr.TrainConfig(center_mode="pixel", **base)),
    ("dim8", tr.TrainConfig(embed_dim=8, **base)),
    ("constant", tr.TrainConfig(margin_mode="constant", **base)),
]
for name, cfg in configs:
    res = tr.train(train_scenes, cfg, seed=0)
    preds = [inf.infer_masks(s.image, res.params, cfg) for s in val_scenes]
    rep = ev.evaluate(preds, [s.instances for s in val_scenes])
    print("%-12s AP=%.3f AP50=%.3f AP75=%.3f skipsteps=%d (%.0fs)" % (
        name, rep.ap, rep.ap50, rep.ap75, res.skipped_steps, time.time()-t0), flush=True)
