"""Deterministic synthetic multi-instance scenes with pixel-exact masks.

Scenes are small RGB images containing 1-8 colored shapes (circle,
rectangle, triangle) over a noisy background. Shapes are drawn
back-to-front; the visible mask of each instance is its full mask minus
everything drawn on top of it, so visible masks are pairwise disjoint by
construction.

Randomness: every scene draws from a numpy PCG64 generator whose seed is
taken from a splitmix64 stream of the dataset seed, so dataset bytes
depend only on (seed, spec) and are reproducible across platforms.

On disk a dataset is a directory of binary PPM (P6) images plus one JSON
annotation document per split and a manifest listing the splits. Masks
are stored as column-major run-length encodings.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import BitMask, Box, rle_decode, rle_encode
from .seeding import rng_for, stream_seed

CATEGORIES = ("circle", "rectangle", "triangle")

# base paint per category; jitter is added on top
_PALETTE = (
    (0.85, 0.30, 0.25),
    (0.25, 0.60, 0.85),
    (0.35, 0.80, 0.35),
)
_MIN_VISIBLE_AREA = 16


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    min_instances: int = 1
    max_instances: int = 4
    min_size: float = 10.0
    max_size: float = 40.0
    occlusion: bool = True
    color_jitter: float = 0.05
    noise: float = 0.04

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError(f"scene extents must be >= 32, got {self.height}x{self.width}")
        if not (1 <= self.min_instances <= self.max_instances <= 8):
            raise ValueError(f"instance count range [{self.min_instances}, "
                             f"{self.max_instances}] outside [1, 8]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class InstanceTarget:
    mask: BitMask
    box: Box
    category: int


@dataclass
class Scene:
    image: np.ndarray  # (h, w, 3) float32 in [0, 1]
    instances: list
    seed: int
    underfilled: bool = False


def _shape_mask(category, cx, cy, size, rot, aspect, height, width):
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    if category == 0:  # circle
        r = 0.5 * size
        return (gx - cx) ** 2 + (gy - cy) ** 2 <= r * r
    if category == 1:  # axis-aligned rectangle
        hw = 0.5 * size
        hh = 0.5 * size * aspect
        return (np.abs(gx - cx) <= hw) & (np.abs(gy - cy) <= hh)
    # triangle inscribed in the bounding circle
    r = 0.5 * size
    angles = rot + np.array([0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0])
    vx = cx + r * np.cos(angles)
    vy = cy + r * np.sin(angles)
    inside = np.ones((height, width), dtype=bool)
    for i in range(3):
        x0, y0 = vx[i], vy[i]
        x1, y1 = vx[(i + 1) % 3], vy[(i + 1) % 3]
        cross = (x1 - x0) * (gy - y0) - (y1 - y0) * (gx - x0)
        inside &= cross >= 0
    return inside


def generate_scene(seed: int, spec: SceneSpec) -> Scene:
    """Deterministically generate one scene for (seed, spec).

    Shapes are placed with up to 100 attempts each; placements that
    violate the occlusion rule (full overlap bans when occlusion is off,
    heavy burial of earlier shapes otherwise) are retried. If a slot
    cannot be placed the scene is returned with fewer instances and
    flagged ``underfilled``.
    """
    rng = rng_for(seed)
    h, w = spec.height, spec.width
    count = int(rng.integers(spec.min_instances, spec.max_instances + 1))

    full_masks, categories, colors = [], [], []
    underfilled = False
    for _ in range(count):
        placed = False
        for _attempt in range(100):
            category = int(rng.integers(0, len(CATEGORIES)))
            size = float(rng.uniform(spec.min_size, spec.max_size))
            cx = float(rng.uniform(0.35 * size, w - 0.35 * size))
            cy = float(rng.uniform(0.35 * size, h - 0.35 * size))
            rot = float(rng.uniform(0.0, 2.0 * math.pi))
            aspect = float(rng.uniform(0.5, 1.0))
            mask = _shape_mask(category, cx, cy, size, rot, aspect, h, w)
            if mask.sum() < _MIN_VISIBLE_AREA:
                continue
            if full_masks:
                if not spec.occlusion:
                    if any((mask & m).any() for m in full_masks):
                        continue
                else:
                    # the new shape is drawn on top; keep earlier shapes
                    # mostly visible so no instance is buried
                    buried = False
                    cover = mask.copy()
                    for m in full_masks:
                        vis = int((m & ~cover).sum())
                        if vis < max(_MIN_VISIBLE_AREA, int(0.4 * m.sum())):
                            buried = True
                            break
                    if buried:
                        continue
            full_masks.append(mask)
            categories.append(category)
            base = np.array(_PALETTE[category])
            colors.append(np.clip(base + rng.uniform(-0.15, 0.15, size=3), 0.05, 0.95))
            placed = True
            break
        if not placed:
            underfilled = True

    # visibility after occlusion: later shapes cover earlier ones
    visible = []
    for k, m in enumerate(full_masks):
        vis = m.copy()
        for later in full_masks[k + 1:]:
            vis &= ~later
        visible.append(vis)

    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = 0.55
    image += rng.uniform(-spec.noise, spec.noise, size=(h, w, 3))
    instances = []
    for k, vis in enumerate(visible):
        area = int(vis.sum())
        jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, size=(h, w, 1))
        paint = colors[k][None, None, :] + jitter
        image = np.where(vis[:, :, None], paint, image)
        if area < _MIN_VISIBLE_AREA:
            continue  # occluded below the visibility floor: dropped
        bm = BitMask(vis)
        instances.append(InstanceTarget(mask=bm, box=bm.tight_box(), category=categories[k]))

    return Scene(image=np.clip(image, 0.0, 1.0).astype(np.float32),
                 instances=instances, seed=seed, underfilled=underfilled)


def generate_dataset(seed: int, spec: SceneSpec, count: int) -> list:
    return [generate_scene(stream_seed(seed, i + 1), spec) for i in range(count)]


# ---------------------------------------------------------------------------
# PPM (P6, 8-bit) image io
# ---------------------------------------------------------------------------

def write_ppm(path, image):
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"write_ppm expects (h, w, 3), got {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 PPM")
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pixels = parts[4][:height * width * 3]
    if len(pixels) != height * width * 3:
        raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------

def write_dataset(root, splits: dict) -> None:
    """Write {split: [Scene, ...]} under ``root`` and a manifest."""
    os.makedirs(root, exist_ok=True)
    os.makedirs(os.path.join(root, "annotations"), exist_ok=True)
    manifest = {"format_version": 1, "splits": {}}
    for split, scenes in splits.items():
        img_dir = os.path.join(root, "images", split)
        os.makedirs(img_dir, exist_ok=True)
        records = []
        for i, scene in enumerate(scenes):
            rel = f"images/{split}/scene_{i:05d}.ppm"
            write_ppm(os.path.join(root, rel), scene.image)
            records.append({
                "id": i,
                "image": rel,
                "height": int(scene.image.shape[0]),
                "width": int(scene.image.shape[1]),
                "seed": int(scene.seed),
                "instances": [{
                    "category": int(inst.category),
                    "box": [inst.box.x1, inst.box.y1, inst.box.x2, inst.box.y2],
                    "rle": rle_encode(inst.mask),
                } for inst in scene.instances],
            })
        ann_rel = f"annotations/{split}.json"
        with open(os.path.join(root, ann_rel), "w") as fh:
            json.dump({"split": split, "scenes": records}, fh, indent=1, sort_keys=True)
        manifest["splits"][split] = {"annotations": ann_rel, "count": len(scenes)}
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def read_dataset(root, split: str) -> list:
    """Load one split back into Scene objects; validates every RLE."""
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    if split not in manifest["splits"]:
        raise ValueError(f"split {split!r} not in manifest "
                         f"(has {sorted(manifest['splits'])})")
    with open(os.path.join(root, manifest["splits"][split]["annotations"])) as fh:
        doc = json.load(fh)
    scenes = []
    for rec in doc["scenes"]:
        image = read_ppm(os.path.join(root, rec["image"]))
        h, w = rec["height"], rec["width"]
        instances = []
        for j, inst in enumerate(rec["instances"]):
            try:
                mask = rle_decode(inst["rle"], h, w)
            except ValueError as e:
                raise ValueError(f"scene {rec['id']} instance {j}: {e}") from e
            box = Box(*inst["box"])
            instances.append(InstanceTarget(mask=mask, box=box, category=int(inst["category"])))
        scenes.append(Scene(image=image, instances=instances, seed=int(rec.get("seed", 0))))
    return scenes
