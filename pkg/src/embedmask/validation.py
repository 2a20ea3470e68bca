"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .geometry import BitMask
from .scenes import CATEGORIES, InstanceTarget


class NotFittedError(ValueError, AttributeError):
    """Estimator used before ``fit`` (same bases as scikit-learn's)."""


def check_image(x, stride=2, scale=2, index=None):
    """Validate one (h, w, 3) float image in [0, 1]; returns float32."""
    where = "" if index is None else f" (image {index})"
    arr = np.asarray(x)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image{where}, got shape {arr.shape}")
    h, w = arr.shape[:2]
    div = max(stride, scale)
    if h % div or w % div or h < 32 or w < 32:
        raise ValueError(f"image extents {h}x{w}{where} must be >= 32 and divisible by {div}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"image{where} contains non-finite values")
    if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
        raise ValueError(f"image{where} values must lie in [0, 1], got "
                         f"[{arr.min():.3f}, {arr.max():.3f}]")
    return arr.astype(np.float32)


def check_images(X, stride=2, scale=2):
    if len(X) == 0:
        raise ValueError("expected at least one image")
    return [check_image(x, stride, scale, index=i) for i, x in enumerate(X)]


def check_instances(y_i, image_shape, index=None):
    """Validate one image's instance list; accepts InstanceTarget or
    {"mask", "category"} dicts. Returns a list of InstanceTarget."""
    where = "" if index is None else f" (image {index})"
    out = []
    for j, inst in enumerate(y_i):
        if isinstance(inst, InstanceTarget):
            mask, category = inst.mask, inst.category
        elif isinstance(inst, dict):
            mask, category = inst["mask"], inst["category"]
        else:
            raise TypeError(f"instance {j}{where} must be an InstanceTarget or dict, "
                            f"got {type(inst).__name__}")
        if not isinstance(mask, BitMask):
            mask = BitMask(np.asarray(mask))
        if (mask.height, mask.width) != tuple(image_shape[:2]):
            raise ValueError(f"instance {j}{where}: mask {mask.height}x{mask.width} "
                             f"does not match image {image_shape[0]}x{image_shape[1]}")
        if mask.area == 0:
            raise ValueError(f"instance {j}{where}: empty mask")
        category = int(category)
        if not 0 <= category < len(CATEGORIES):
            raise ValueError(f"instance {j}{where}: category {category} outside "
                             f"[0, {len(CATEGORIES)})")
        out.append(InstanceTarget(mask=mask, box=mask.tight_box(), category=category))
    return out


def check_fitted(estimator, attr="params_"):
    if getattr(estimator, attr, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} instance is not fitted yet; call fit first")
