import time, json
import numpy as np
from embedmask import scenes as sc, training as tr, inference as inf, evaluation as ev

t0 = time.time()
spec = sc.SceneSpec()
train_scenes = sc.generate_dataset(7, spec, 200)
val_scenes = sc.generate_dataset(7001, spec, 50)
cfg = tr.TrainConfig()  # defaults: 3000 iters, batch 8
print("data ready %.1fs" % (time.time() - t0), flush=True)

milestones = {500, 1000, 1500, 2000, 2500, 2999}
def progress(it, entry):
    if it % 100 == 0:
        print("it %4d lr %.4f total %.4f cls %.3f ctr %.3f box %.3f mask %.3f smooth %.3f skip %d  (%.1fs)" % (
            it, entry["lr"], entry["breakdown"]["total"], entry["breakdown"]["cls"],
            entry["breakdown"]["center"], entry["breakdown"]["box"],
            entry["breakdown"]["mask"], entry["breakdown"]["smooth"],
            entry["skipped"], time.time() - t0), flush=True)

res = tr.train(train_scenes, cfg, seed=0, progress=progress)
print("train done %.1fs, skipped steps %d nonfinite %d" % (time.time()-t0, res.skipped_steps, res.nonfinite_events), flush=True)
preds = [inf.infer_masks(s.image, res.params, cfg) for s in val_scenes]
rep = ev.evaluate(preds, [s.instances for s in val_scenes])
print("EVAL", json.dumps(rep.to_dict()), flush=True)
print("AP=%.3f AP50=%.3f AP75=%.3f (%.1fs total)" % (rep.ap, rep.ap50, rep.ap75, time.time()-t0), flush=True)
