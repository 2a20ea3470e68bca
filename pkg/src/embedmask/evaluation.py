"""COCO-style mask mAP at desk scale, plus the ablation harness.

AP follows the COCO conventions that transfer to small synthetic data:
greedy score-ordered matching per image (one match per ground truth,
same category, mask IoU at each threshold in 0.50:0.95:0.05), 101-point
interpolated precision, categories averaged, and small/medium/large
area buckets. The absolute COCO area cutoffs are meaningless on tiny
images, so the buckets are dataset-relative terciles of ground-truth
mask area; out-of-bucket ground truths and detections are ignored
rather than counted as errors.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import mask_iou
from .scenes import CATEGORIES

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 1.0, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def match_predictions(preds, gts, iou_thresh, ignore_gt=None):
    """Greedy TP/FP matching for one image at one threshold.

    ``preds`` must be sorted by descending score. Each prediction
    matches the highest-IoU unmatched ground truth of its category with
    IoU >= ``iou_thresh``; each ground truth matches at most once.
    Returns (tp flags, matched gt index or -1) per prediction; a match
    to an entry flagged in ``ignore_gt`` yields tp=False with the match
    recorded (the caller drops such predictions from the tally).
    """
    matched = [False] * len(gts)
    tp = np.zeros(len(preds), dtype=bool)
    match_idx = np.full(len(preds), -1, dtype=np.int64)
    for i, pred in enumerate(preds):
        best, best_iou = -1, iou_thresh
        for j, gt in enumerate(gts):
            if matched[j] or gt.category != pred.category:
                continue
            iou = mask_iou(pred.mask, gt.mask)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            matched[best] = True
            match_idx[i] = best
            tp[i] = not (ignore_gt is not None and ignore_gt[best])
    return tp, match_idx


def average_precision(flags, total_gt):
    """101-point interpolated AP from score-ordered TP flags."""
    if total_gt < 0:
        raise ValueError(f"total_gt must be >= 0, got {total_gt}")
    if total_gt == 0:
        return float("nan")
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / total_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope from the right, then sample the recall grid
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    per_category: dict
    ap_small: float
    ap_medium: float
    ap_large: float
    num_images: int
    num_instances: int
    area_cuts: tuple = (0.0, 0.0)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _ap_over_thresholds(preds_per_image, gts_per_image, gt_in_bucket=None,
                        pred_in_bucket=None):
    """Mean AP per threshold, averaged over categories with ground truth."""
    n_cat = len(CATEGORIES)
    ap_by_thresh = {}
    for thresh in IOU_THRESHOLDS:
        per_cat = []
        for cat in range(n_cat):
            scored = []
            total_gt = 0
            for img, (preds, gts) in enumerate(zip(preds_per_image, gts_per_image)):
                gt_ignore = None if gt_in_bucket is None else \
                    [not gt_in_bucket[img][j] for j in range(len(gts))]
                cat_gts = [g for g in gts if g.category == cat]
                cat_gt_ignore = None if gt_ignore is None else \
                    [ig for g, ig in zip(gts, gt_ignore) if g.category == cat]
                total_gt += len(cat_gts) if cat_gt_ignore is None else \
                    sum(1 for ig in cat_gt_ignore if not ig)
                cat_pred_pos = [i for i, p in enumerate(preds) if p.category == cat]
                cat_preds = [preds[i] for i in cat_pred_pos]
                order = sorted(range(len(cat_preds)),
                               key=lambda i: (-cat_preds[i].score, i))
                cat_preds = [cat_preds[i] for i in order]
                tp, match = match_predictions(cat_preds, cat_gts, thresh,
                                              ignore_gt=cat_gt_ignore)
                for i, p in enumerate(cat_preds):
                    if match[i] >= 0 and not tp[i]:
                        continue  # matched an ignored gt: dropped
                    if match[i] < 0 and pred_in_bucket is not None and \
                            not pred_in_bucket[img][cat_pred_pos[order[i]]]:
                        continue  # unmatched out-of-bucket detection: dropped
                    scored.append((p.score, bool(tp[i])))
            if total_gt == 0:
                continue
            scored.sort(key=lambda t: -t[0])
            per_cat.append(average_precision([s[1] for s in scored], total_gt))
        ap_by_thresh[thresh] = float(np.mean(per_cat)) if per_cat else float("nan")
    return ap_by_thresh


def evaluate(preds_per_image, gts_per_image) -> EvalReport:
    """Full report over a dataset split."""
    if len(preds_per_image) != len(gts_per_image):
        raise ValueError("prediction and ground-truth image counts differ")
    areas = np.array([g.mask.area for gts in gts_per_image for g in gts], dtype=np.float64)
    n_inst = areas.size
    if n_inst:
        cut_lo, cut_hi = np.percentile(areas, [100 / 3, 200 / 3])
    else:
        cut_lo = cut_hi = 0.0

    overall = _ap_over_thresholds(preds_per_image, gts_per_image)
    ap_vals = [v for v in overall.values() if not np.isnan(v)]
    ap = float(np.mean(ap_vals)) if ap_vals else 0.0
    ap50 = overall.get(0.5, float("nan"))
    ap75 = overall.get(0.75, float("nan"))

    per_category = {}
    for cat, name in enumerate(CATEGORIES):
        sub_preds = [[p for p in preds if p.category == cat] for preds in preds_per_image]
        sub_gts = [[g for g in gts if g.category == cat] for gts in gts_per_image]
        if sum(len(g) for g in sub_gts) == 0:
            continue
        vals = [v for v in _ap_over_thresholds(sub_preds, sub_gts).values()
                if not np.isnan(v)]
        per_category[name] = float(np.mean(vals)) if vals else 0.0

    buckets = {}
    for bname, lo, hi in (("small", -np.inf, cut_lo), ("medium", cut_lo, cut_hi),
                          ("large", cut_hi, np.inf)):
        gt_in = [[lo < g.mask.area <= hi if bname != "small" else g.mask.area <= hi
                  for g in gts] for gts in gts_per_image]
        pred_in = [[lo < p.mask.area <= hi if bname != "small" else p.mask.area <= hi
                    for p in preds] for preds in preds_per_image]
        if not any(any(row) for row in gt_in):
            buckets[bname] = float("nan")
            continue
        vals = [v for v in _ap_over_thresholds(preds_per_image, gts_per_image,
                                               gt_in_bucket=gt_in,
                                               pred_in_bucket=pred_in).values()
                if not np.isnan(v)]
        buckets[bname] = float(np.mean(vals)) if vals else 0.0

    return EvalReport(ap=ap, ap50=float(ap50), ap75=float(ap75),
                      per_category=per_category,
                      ap_small=buckets.get("small", float("nan")),
                      ap_medium=buckets.get("medium", float("nan")),
                      ap_large=buckets.get("large", float("nan")),
                      num_images=len(gts_per_image), num_instances=int(n_inst),
                      area_cuts=(float(cut_lo), float(cut_hi)))


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

@dataclass
class AblationRun:
    name: str
    seed: int
    report: EvalReport = None
    diverged: bool = False


@dataclass
class AblationResult:
    rows: list = field(default_factory=list)  # (name, per-seed APs, mean AP, mean AP50)
    runs: list = field(default_factory=list)
    deltas: dict = field(default_factory=dict)   # (name_a, name_b) -> mean AP delta
    verdicts: list = field(default_factory=list)

    def table_text(self):
        out = io.StringIO()
        out.write(f"{'config':<22}{'AP':>8}{'AP50':>8}{'AP75':>8}  per-seed AP\n")
        for name, seeds_ap, mean_ap, mean_ap50, mean_ap75 in self.rows:
            per_seed = " ".join(f"{v:.3f}" for v in seeds_ap)
            out.write(f"{name:<22}{mean_ap:>8.3f}{mean_ap50:>8.3f}{mean_ap75:>8.3f}  {per_seed}\n")
        for (a, b), d in self.deltas.items():
            out.write(f"delta {a} - {b}: {d:+.4f} AP\n")
        for v in self.verdicts:
            out.write(v + "\n")
        return out.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["config", "mean_ap", "mean_ap50", "mean_ap75", "per_seed_ap"])
            for name, seeds_ap, mean_ap, mean_ap50, mean_ap75 in self.rows:
                wr.writerow([name, f"{mean_ap:.6f}", f"{mean_ap50:.6f}",
                             f"{mean_ap75:.6f}",
                             ";".join(f"{v:.6f}" for v in seeds_ap)])


def _ablation_run(payload):
    """One (config, seed) training + evaluation; proper function so the
    parallel path can pickle it."""
    from .inference import infer_masks
    from .training import train

    name, config, seed, train_scenes, val_scenes, run_dir = payload
    tr = train(train_scenes, config, seed, out_dir=run_dir)
    diverged = (tr.nonfinite_events > 0 and
                tr.last_nonfinite_iter >= int(0.9 * config.total_iters))
    run = AblationRun(name=name, seed=seed, diverged=diverged)
    if not diverged:
        preds = [infer_masks(s.image, tr.params, config) for s in val_scenes]
        run.report = evaluate(preds, [s.instances for s in val_scenes])
        if run_dir:
            run.report.to_json(os.path.join(run_dir, "eval.json"))
    return run


def run_ablation(grid, train_scenes, val_scenes, seeds, out_dir=None,
                 progress=None, workers=1) -> AblationResult:
    """Train and evaluate every (config, seed) pair under one budget.

    ``grid`` is a list of (name, TrainConfig). Runs that go non-finite
    near the end of training are excluded from the means and flagged.
    With ``workers`` > 1 the runs execute in separate processes; each
    run is deterministic on its own, so the result does not depend on
    the worker count.
    """
    result = AblationResult()
    payloads = []
    for name, config in grid:
        for seed in seeds:
            run_dir = os.path.join(out_dir, f"{name}_seed{seed}") if out_dir else None
            payloads.append((name, config, seed, train_scenes, val_scenes, run_dir))

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_ablation_run, payloads))
    else:
        runs = []
        for payload in payloads:
            runs.append(_ablation_run(payload))
            if progress is not None:
                progress(runs[-1])
    if workers > 1 and progress is not None:
        for run in runs:
            progress(run)
    result.runs = runs

    means = {}
    by_name = {}
    for run in runs:
        by_name.setdefault(run.name, []).append(run)
    for name, _config in grid:
        good = [r.report for r in by_name.get(name, []) if not r.diverged]
        per_seed = [r.ap for r in good]
        mean_ap = float(np.mean(per_seed)) if per_seed else float("nan")
        result.rows.append((name, per_seed, mean_ap,
                            float(np.mean([r.ap50 for r in good])) if good else float("nan"),
                            float(np.mean([r.ap75 for r in good])) if good else float("nan")))
        means[name] = mean_ap
    names = [name for name, _ in grid]
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            result.deltas[(a, b)] = means[a] - means[b]
    for a, b, label in (("learnable", "fixed_hinge", "learnable margin beats fixed hinge"),
                        ("proposal", "pixel", "proposal centers beat pixel centers")):
        if a in means and b in means:
            d = means[a] - means[b]
            verdict = "PASS" if d > 0 else "FAIL"
            result.verdicts.append(f"{verdict} {label}: {d:+.4f} AP")
    if out_dir:
        result.write_csv(os.path.join(out_dir, "ablation.csv"))
        with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
            fh.write(result.table_text())
    return result
