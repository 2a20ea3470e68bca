# quick training sanity with silu: 1200 iters + eval, learnable + fixed_hinge
import time
import numpy as np
from embedmask import scenes as sc, training as tr, inference as inf, evaluation as ev

t0 = time.time()
spec = sc.SceneSpec()
train_scenes = sc.generate_dataset(7, spec, 120)
val_scenes = sc.generate_dataset(7001, spec, 40)
for name, cfg in [("learnable", tr.TrainConfig(total_iters=1200, warmup_iters=100)),
                  ("fixed_hinge", tr.TrainConfig(margin_mode="fixed_hinge", total_iters=1200, warmup_iters=100))]:
    res = tr.train(train_scenes, cfg, seed=0)
    preds = [inf.infer_masks(s.image, res.params, cfg) for s in val_scenes]
    rep = ev.evaluate(preds, [s.instances for s in val_scenes])
    print("%-12s AP=%.3f AP50=%.3f AP75=%.3f final_total=%.3f cls=%.3f skipsteps=%d (%.0fs)" % (
        name, rep.ap, rep.ap50, rep.ap75, res.log[-1]["breakdown"]["total"],
        res.log[-1]["breakdown"]["cls"], res.skipped_steps, time.time()-t0), flush=True)
