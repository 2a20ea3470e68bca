import math

import numpy as np
import pytest

from embedmask import inference as inf
from embedmask.coupling import PHI_HALF_RADIUS, hard_assign
from embedmask.geometry import Box, box_iou
from embedmask.model import init_params
from embedmask.scenes import SceneSpec, generate_scene
from embedmask.training import TrainConfig


def _reference_nms(boxes, scores, categories, loc_idx, score_thresh, iou_thresh, top):
    """Independent quadratic NMS for cross-checking."""
    n = len(scores)
    cand = [i for i in range(n) if scores[i] >= score_thresh]
    cand.sort(key=lambda i: (-scores[i], loc_idx[i]))
    kept = []
    for i in cand:
        ok = True
        for j in kept:
            if categories[i] != categories[j]:
                continue
            try:
                bi, bj = Box(*boxes[i]), Box(*boxes[j])
            except ValueError:
                ok = False
                break
            if bi.area <= 0:
                ok = False
                break
            if box_iou(bi, bj) > iou_thresh:
                ok = False
                break
        if ok:
            kept.append(i)
            if len(kept) >= top:
                break
    return kept


def test_nms_identical_boxes_same_category():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    kept = inf.nms(boxes, np.array([0.9, 0.8]), np.array([0, 0]))
    assert list(kept) == [0]


def test_nms_different_categories_survive():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11]], dtype=float)
    kept = inf.nms(boxes, np.array([0.9, 0.8]), np.array([0, 1]))
    assert sorted(kept) == [0, 1]


def test_nms_score_threshold_and_top():
    boxes = np.array([[i * 20, 0, i * 20 + 10, 10] for i in range(30)], dtype=float)
    scores = np.linspace(1.0, 0.01, 30)
    kept = inf.nms(boxes, scores, np.zeros(30, dtype=int), top=20)
    assert len(kept) == 20
    assert all(scores[i] >= 0.05 for i in kept)


def test_nms_tie_broken_by_location_index():
    boxes = np.array([[0, 0, 10, 10], [100, 0, 110, 10]], dtype=float)
    kept = inf.nms(boxes, np.array([0.5, 0.5]), np.array([0, 0]),
                   loc_idx=np.array([7, 3]))
    assert list(kept)[0] == 1  # lower location index wins the tie


def test_nms_matches_reference_on_random_inputs():
    rng = np.random.default_rng(0)
    for trial in range(30):
        n = int(rng.integers(1, 40))
        x1 = rng.uniform(0, 50, n)
        y1 = rng.uniform(0, 50, n)
        boxes = np.stack([x1, y1, x1 + rng.uniform(1, 30, n),
                          y1 + rng.uniform(1, 30, n)], axis=1)
        scores = rng.uniform(0, 1, n)
        categories = rng.integers(0, 3, n)
        loc_idx = rng.permutation(n)
        kept = inf.nms(boxes, scores, categories, loc_idx=loc_idx,
                       score_thresh=0.1, iou_thresh=0.5, top=10)
        ref = _reference_nms(boxes, scores, categories, loc_idx, 0.1, 0.5, 10)
        assert list(kept) == ref, f"trial {trial}"


def test_infer_runs_on_untrained_params():
    scene = generate_scene(3, SceneSpec())
    cfg = TrainConfig(width=4, embed_dim=4, total_iters=10, warmup_iters=1)
    preds = inf.infer_masks(scene.image, init_params(0, cfg.model_config()), cfg)
    assert isinstance(preds, list)  # possibly empty; must not raise


def test_infer_masks_respect_box_restriction():
    scene = generate_scene(5, SceneSpec())
    cfg = TrainConfig(width=4, embed_dim=4, total_iters=10, warmup_iters=1,
                      score_thresh=0.0)
    preds = inf.infer_masks(scene.image, init_params(1, cfg.model_config()), cfg)
    assert preds, "score_thresh 0 must yield candidates"
    for p in preds:
        rows, cols = np.nonzero(p.mask.bits)
        if rows.size == 0:
            continue
        xs, ys = cols + 0.5, rows + 0.5
        assert xs.min() >= p.box.x1 and xs.max() <= p.box.x2
        assert ys.min() >= p.box.y1 and ys.max() <= p.box.y2


def test_phi_threshold_equals_hard_assign_duality():
    # the phi >= 0.5 mask equals the hard assignment at
    # delta = sigma * sqrt(2 ln 2), pixel for pixel
    rng = np.random.default_rng(11)
    for _ in range(20):
        d = 4
        emb = rng.normal(size=(8, 8, d))
        center = rng.normal(size=d)
        sigma = float(rng.uniform(0.3, 2.0))
        box = Box(0.0, 0.0, 16.0, 16.0)
        via_phi = inf._clusters_to_mask(emb, center, box, (16, 16), 2, sigma=sigma)
        via_delta = inf._clusters_to_mask(emb, center, box, (16, 16), 2,
                                          delta=sigma * PHI_HALF_RADIUS)
        assert via_phi == via_delta
        flat = hard_assign(emb.reshape(-1, d), center,
                           sigma * PHI_HALF_RADIUS).reshape(8, 8)
        up = np.repeat(np.repeat(flat.astype(bool), 2, 0), 2, 1)
        assert np.array_equal(via_phi.bits, up)


def test_clusters_to_mask_rejects_ambiguous_rule():
    with pytest.raises(ValueError, match="exactly one"):
        inf._clusters_to_mask(np.zeros((4, 4, 2)), np.zeros(2),
                              Box(0, 0, 8, 8), (8, 8), 2, sigma=1.0, delta=1.0)


def test_trained_model_segments_a_lone_circle():
    # single-scene overfit: a converged model must find the one instance
    from embedmask.training import train
    spec = SceneSpec(min_instances=1, max_instances=1, min_size=24, max_size=32,
                     occlusion=False)
    scene = generate_scene(momentum_seed := 21, spec)
    cfg = TrainConfig(width=8, embed_dim=8, total_iters=260, warmup_iters=30,
                      batch=2, lr=0.02)
    res = train([scene], cfg, seed=0)
    preds = inf.infer_masks(scene.image, res.params, cfg)
    assert preds
    from embedmask.geometry import mask_iou
    best = max(mask_iou(p.mask, scene.instances[0].mask) for p in preds)
    assert best > 0.55, f"best overfit mask IoU only {best}"
