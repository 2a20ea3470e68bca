"""Training-sample selection: detection positives, center samples, pixel sets.

Three progressively stricter sets are built per ground-truth instance:

* detection positives: feature-grid locations in the center region of
  the instance box and on the instance mask; contested locations go to
  the instance with the smallest box area,
* center samples (for the embedding/margin averages): detection
  positives whose currently predicted box overlaps the ground-truth box
  with IoU strictly greater than 0.5,
* pixel supervision sets: all embedding-grid pixels whose centers fall
  inside the (optionally expanded) ground-truth box, labeled
  foreground/background by the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, box_iou, centerness_target, expand_box


@dataclass
class DetectionTargets:
    labels: np.ndarray               # (hw,) category id or -1
    instance_ids: np.ndarray         # (hw,) instance index or -1
    pos_idx: np.ndarray              # (npos,) flat grid indices
    box_targets: np.ndarray          # (npos, 4) l, t, r, b distances
    centerness: np.ndarray           # (npos,)
    positives_per_instance: list = field(default_factory=list)
    instances_without_positives: list = field(default_factory=list)


@dataclass
class SampleSets:
    detection: DetectionTargets
    center_samples: list   # per instance: flat grid indices (may be empty)
    pixel_sets: list       # per instance: (flat training-grid indices, fg bits)
    skipped_instances: int = 0


def _mask_at_points(mask_bits, xs, ys):
    """Sample an image-resolution mask at continuous points (x, y)."""
    h, w = mask_bits.shape
    cols = np.clip(xs.astype(np.int64), 0, w - 1)
    rows = np.clip(ys.astype(np.int64), 0, h - 1)
    return mask_bits[rows, cols]


def sample_detection_targets(locations, instances, stride, radius_factor=1.5):
    """Positive locations plus their box / center-ness / category targets.

    A location is positive for an instance when it lies inside the
    center region (box center +- radius_factor * stride, clipped to the
    box) and on the instance mask. Contested locations are claimed by
    the instance with the smallest box area.
    """
    locs = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    hw = locs.shape[0]
    n = len(instances)
    labels = np.full(hw, -1, dtype=np.int64)
    instance_ids = np.full(hw, -1, dtype=np.int64)
    if n == 0:
        return DetectionTargets(labels=labels, instance_ids=instance_ids,
                                pos_idx=np.zeros(0, dtype=np.int64),
                                box_targets=np.zeros((0, 4)),
                                centerness=np.zeros(0),
                                positives_per_instance=[],
                                instances_without_positives=[])

    xs, ys = locs[:, 0], locs[:, 1]
    radius = radius_factor * stride
    claims = np.zeros((n, hw), dtype=bool)
    areas = np.empty(n)
    for k, inst in enumerate(instances):
        b = inst.box
        areas[k] = b.area
        cx, cy = b.center
        x_lo, x_hi = max(b.x1, cx - radius), min(b.x2, cx + radius)
        y_lo, y_hi = max(b.y1, cy - radius), min(b.y2, cy + radius)
        region = (xs >= x_lo) & (xs <= x_hi) & (ys >= y_lo) & (ys <= y_hi)
        claims[k] = region & _mask_at_points(inst.mask.bits, xs, ys)

    contested = np.where(claims, areas[:, None], np.inf)
    winner = np.argmin(contested, axis=0)
    has = claims.any(axis=0)
    instance_ids[has] = winner[has]
    pos_idx = np.flatnonzero(has)

    box_targets = np.zeros((pos_idx.size, 4))
    centerness = np.zeros(pos_idx.size)
    for i, loc in enumerate(pos_idx):
        inst = instances[instance_ids[loc]]
        labels[loc] = inst.category
        l, t, r, b = (xs[loc] - inst.box.x1, ys[loc] - inst.box.y1,
                      inst.box.x2 - xs[loc], inst.box.y2 - ys[loc])
        box_targets[i] = (l, t, r, b)
        centerness[i] = centerness_target(l, t, r, b)

    per_instance = [pos_idx[instance_ids[pos_idx] == k] for k in range(n)]
    missing = [k for k in range(n) if per_instance[k].size == 0]
    return DetectionTargets(labels=labels, instance_ids=instance_ids,
                            pos_idx=pos_idx, box_targets=box_targets,
                            centerness=centerness,
                            positives_per_instance=per_instance,
                            instances_without_positives=missing)


def decode_boxes(ltrb, locations, image_extents=None):
    """Turn per-location side distances into (x1, y1, x2, y2) arrays."""
    ltrb = np.asarray(ltrb).reshape(-1, 4)
    locs = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    out = np.empty_like(ltrb, dtype=np.float64)
    out[:, 0] = locs[:, 0] - ltrb[:, 0]
    out[:, 1] = locs[:, 1] - ltrb[:, 1]
    out[:, 2] = locs[:, 0] + ltrb[:, 2]
    out[:, 3] = locs[:, 1] + ltrb[:, 3]
    if image_extents is not None:
        h, w = image_extents
        out[:, 0::2] = np.clip(out[:, 0::2], 0.0, float(w))
        out[:, 1::2] = np.clip(out[:, 1::2], 0.0, float(h))
    return out


def sample_embed_targets(detection: DetectionTargets, pred_boxes, instances):
    """Center samples per instance: detection positives whose predicted
    box overlaps the ground-truth box with IoU strictly above 0.5."""
    pred_boxes = np.asarray(pred_boxes).reshape(-1, 4)
    out = []
    for k, inst in enumerate(instances):
        pos = detection.positives_per_instance[k] if k < len(
            detection.positives_per_instance) else np.zeros(0, dtype=np.int64)
        keep = []
        for loc in pos:
            x1, y1, x2, y2 = pred_boxes[loc]
            if x2 <= x1 or y2 <= y1:
                continue
            if box_iou(Box(x1, y1, x2, y2), inst.box) > 0.5:
                keep.append(loc)
        out.append(np.asarray(keep, dtype=np.int64))
    return out


def pixel_supervision_set(instance, expand_factor, grid_extents, image_extents):
    """All training-grid pixels whose centers fall inside the expanded box.

    Returns (flat grid indices, foreground bits). Foreground means the
    pixel center lands on the instance mask at image resolution.
    """
    if expand_factor < 1.0:
        raise ValueError(f"expand factor must be >= 1, got {expand_factor}")
    hg, wg = grid_extents
    h, w = image_extents
    scale_y, scale_x = h / hg, w / wg
    box = expand_box(instance.box, expand_factor, image_extents)
    xs = (np.arange(wg) + 0.5) * scale_x
    ys = (np.arange(hg) + 0.5) * scale_y
    in_x = (xs >= box.x1) & (xs <= box.x2)
    in_y = (ys >= box.y1) & (ys <= box.y2)
    cols = np.flatnonzero(in_x)
    rows = np.flatnonzero(in_y)
    if cols.size == 0 or rows.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    gj, gi = np.meshgrid(cols, rows)
    idx = (gi * wg + gj).reshape(-1)
    fg = _mask_at_points(instance.mask.bits,
                         xs[gj.reshape(-1)], ys[gi.reshape(-1)])
    return idx, fg


def map_to_grid(locations, grid_extents, image_extents):
    """Flat training-grid index of the pixel containing each (x, y) point."""
    hg, wg = grid_extents
    h, w = image_extents
    locs = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    cols = np.clip((locs[:, 0] * (wg / w)).astype(np.int64), 0, wg - 1)
    rows = np.clip((locs[:, 1] * (hg / h)).astype(np.int64), 0, hg - 1)
    return rows * wg + cols


def build_sample_sets(outputs, instances, image_extents, grid_extents,
                      expand_factor=1.2, radius_factor=1.5) -> SampleSets:
    """Assemble all three sampling strategies for one scene."""
    detection = sample_detection_targets(outputs.locations, instances,
                                         outputs.stride, radius_factor)
    pred_boxes = decode_boxes(outputs.ltrb.data, outputs.locations, image_extents)
    center_samples = sample_embed_targets(detection, pred_boxes, instances)
    pixel_sets = [pixel_supervision_set(inst, expand_factor, grid_extents,
                                        image_extents) for inst in instances]
    skipped = sum(1 for k in range(len(instances))
                  if center_samples[k].size == 0 or pixel_sets[k][0].size == 0)
    return SampleSets(detection=detection, center_samples=center_samples,
                      pixel_sets=pixel_sets, skipped_instances=skipped)
