"""Inference: NMS over proposals, then per-proposal pixel clustering.

Each surviving proposal carries its own embedding center and margin
(taken straight from its location, no averaging at inference time). The
embedding map is bilinearly resized to the training resolution, the
coupling probability is computed for every grid pixel whose center lies
inside the predicted box, thresholded at 0.5, and the binary decision is
upscaled to image resolution by nearest neighbor. Pixels outside the
predicted box are always 0.

Thresholding the coupling at 0.5 is exactly the hard assignment with
radius sigma * sqrt(2 ln 2), so the fixed-margin and learnable-margin
modes share one assignment path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .coupling import PHI_HALF_RADIUS
from .geometry import BitMask, Box, box_iou
from .model import ModelParams, forward
from .sampling import decode_boxes, map_to_grid
from .training import TrainConfig


@dataclass
class PredictedInstance:
    box: Box
    category: int
    score: float
    mask: BitMask  # image resolution; empty masks are permitted


def nms(boxes, scores, categories, loc_idx=None, score_thresh=0.05,
        iou_thresh=0.6, top=20):
    """Greedy per-category suppression; returns kept indices.

    Candidates below ``score_thresh`` are dropped first. Survivors are
    processed in descending score order (ties by ascending location
    index) and suppressed by an already-kept box of the same category
    when the IoU exceeds ``iou_thresh``. At most ``top`` survivors are
    returned, highest scores first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    categories = np.asarray(categories).reshape(-1)
    if loc_idx is None:
        loc_idx = np.arange(scores.size)
    loc_idx = np.asarray(loc_idx).reshape(-1)

    alive = np.flatnonzero(scores >= score_thresh)
    order = alive[np.lexsort((loc_idx[alive], -scores[alive]))]
    kept = []
    for i in order:
        bi = Box(*boxes[i]) if boxes[i, 2] > boxes[i, 0] and boxes[i, 3] > boxes[i, 1] \
            else None
        suppressed = False
        for j in kept:
            if categories[i] != categories[j]:
                continue
            if bi is None:
                suppressed = True  # degenerate boxes collapse onto the keeper
                break
            bj = Box(*boxes[j])
            if box_iou(bi, bj) > iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(int(i))
            if len(kept) >= top:
                break
    return np.asarray(kept, dtype=np.int64)


def _clusters_to_mask(emb_grid, center, box, image_extents, scale,
                      sigma=None, delta=None):
    """Threshold the coupling (or the hard radius) inside one box.

    ``emb_grid`` is the (hg, wg, d) embedding map at training
    resolution; exactly one of ``sigma`` (phi >= 0.5 rule) or ``delta``
    (hard distance rule) must be given. Returns an image-resolution
    BitMask honoring the box restriction.
    """
    if (sigma is None) == (delta is None):
        raise ValueError("pass exactly one of sigma / delta")
    h, w = image_extents
    hg, wg = emb_grid.shape[:2]
    scale_y, scale_x = h / hg, w / wg
    xs = (np.arange(wg) + 0.5) * scale_x
    ys = (np.arange(hg) + 0.5) * scale_y
    cols = np.flatnonzero((xs >= box.x1) & (xs <= box.x2))
    rows = np.flatnonzero((ys >= box.y1) & (ys <= box.y2))
    grid_bits = np.zeros((hg, wg), dtype=bool)
    if cols.size and rows.size:
        patch = emb_grid[np.ix_(rows, cols)]
        dist_sq = ((patch - center) ** 2).sum(axis=-1)
        if sigma is not None:
            phi = np.exp(-dist_sq / (2.0 * sigma * sigma))
            inside = phi >= 0.5
        else:
            inside = dist_sq <= delta * delta
        grid_bits[np.ix_(rows, cols)] = inside

    full = np.repeat(np.repeat(grid_bits, int(round(scale_y)), axis=0),
                     int(round(scale_x)), axis=1)[:h, :w]
    # the box restriction also binds at image resolution
    xs_f = np.arange(w) + 0.5
    ys_f = np.arange(h) + 0.5
    in_box = ((ys_f[:, None] >= box.y1) & (ys_f[:, None] <= box.y2) &
              (xs_f[None, :] >= box.x1) & (xs_f[None, :] <= box.x2))
    return BitMask(full & in_box)


def infer_masks(image, params: ModelParams, config: TrainConfig):
    """Detect instances and cluster their masks for one image."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h % config.mask_train_scale or w % config.mask_train_scale:
        raise ValueError(f"image extents {h}x{w} not divisible by "
                         f"mask_train_scale {config.mask_train_scale}")
    with ad.no_grad():
        outputs = forward(image, params)
    hf, wf = outputs.cls_logits.shape[:2]
    hw = hf * wf
    num_classes = outputs.cls_logits.shape[2]

    cls_prob = 1.0 / (1.0 + np.exp(-outputs.cls_logits.data.reshape(hw, num_classes)))
    ctr_prob = 1.0 / (1.0 + np.exp(-outputs.centerness.data.reshape(hw, 1)))
    scores = (cls_prob * ctr_prob).reshape(-1)
    categories = np.tile(np.arange(num_classes), hw)
    loc_of_candidate = np.repeat(np.arange(hw), num_classes)
    boxes_per_loc = decode_boxes(outputs.ltrb.data, outputs.locations, (h, w))
    boxes = boxes_per_loc[loc_of_candidate]

    kept = nms(boxes, scores, categories, loc_idx=loc_of_candidate,
               score_thresh=config.score_thresh, iou_thresh=config.nms_iou,
               top=config.max_detections)

    grid = (h // config.mask_train_scale, w // config.mask_train_scale)
    emb = outputs.embeddings
    if (emb.shape[0], emb.shape[1]) != grid:
        emb = ad.bilinear_resize(emb, grid)
    emb_grid = emb.data
    q_flat = outputs.proposal_embeddings.data.reshape(hw, -1)
    sigma_flat = outputs.sigma.data.reshape(hw)
    emb_flat = emb_grid.reshape(-1, emb_grid.shape[-1])
    loc_flat = outputs.locations.reshape(-1, 2)

    results = []
    for idx in kept:
        loc = int(loc_of_candidate[idx])
        box = Box(*boxes[idx])
        if config.center_mode == "pixel":
            center = emb_flat[map_to_grid(loc_flat[loc:loc + 1], grid, (h, w))[0]]
        else:
            center = q_flat[loc]
        if config.margin_mode == "fixed_hinge":
            mask = _clusters_to_mask(emb_grid, center, box, (h, w),
                                     config.mask_train_scale, delta=config.delta)
        elif config.margin_mode == "constant":
            mask = _clusters_to_mask(emb_grid, center, box, (h, w),
                                     config.mask_train_scale, sigma=config.sigma0)
        else:
            mask = _clusters_to_mask(emb_grid, center, box, (h, w),
                                     config.mask_train_scale,
                                     sigma=float(sigma_flat[loc]))
        results.append(PredictedInstance(box=box, category=int(categories[idx]),
                                         score=float(scores[idx]), mask=mask))
    return results
