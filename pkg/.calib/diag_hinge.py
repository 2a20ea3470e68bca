import numpy as np
from embedmask import scenes as sc, training as tr, inference as inf, evaluation as ev
from embedmask.geometry import mask_iou, Box, box_iou

spec = sc.SceneSpec()
train_scenes = sc.generate_dataset(7, spec, 120)
val_scenes = sc.generate_dataset(7001, spec, 10)
cfg = tr.TrainConfig(margin_mode='fixed_hinge', total_iters=1200, warmup_iters=100)
res = tr.train(train_scenes, cfg, seed=0)
print('final:', res.log[-1]['breakdown'], flush=True)
for si, scene in enumerate(val_scenes[:4]):
    preds = inf.infer_masks(scene.image, res.params, cfg)
    print('scene %d gt:' % si, [(i.category, i.mask.area) for i in scene.instances])
    rows = []
    for p in preds[:8]:
        best = max((mask_iou(p.mask, g.mask), g.category) for g in scene.instances) if scene.instances else (0, -1)
        bestbox = max((box_iou(p.box, g.box)) for g in scene.instances) if scene.instances else 0
        rows.append((p.category, round(p.score, 3), p.mask.area, round(best[0], 3), best[1], round(bestbox, 2)))
    print('  preds (cat, score, area, best-mask-iou, gt-cat, best-box-iou):', rows, flush=True)
# also eval
preds = [inf.infer_masks(s.image, res.params, cfg) for s in val_scenes]
rep = ev.evaluate(preds, [s.instances for s in val_scenes])
print('AP=%.3f AP50=%.3f' % (rep.ap, rep.ap50))
