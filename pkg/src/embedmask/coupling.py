"""Embedding-coupling losses and cluster-center machinery.

Pixels are assigned to an instance when their embedding lands inside the
instance's margin around its center. The pieces here cover both
supervision regimes:

* fixed margins: a squared two-sided hinge on the embedding distance,
* learnable margins: a Gaussian coupling that maps distance to a
  foreground probability, trained with the Lovasz hinge (a convex
  surrogate of the Jaccard set loss), plus a smooth loss that keeps the
  per-location samples close to their averaged center.

All losses are differentiable through the autodiff suite wherever
training needs them; sorting inside the Lovasz hinge is treated as a
fixed permutation in the backward pass (the standard subgradient
choice), with ties broken by ascending pixel index for determinism.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# phi >= 0.5 is equivalent to a hard distance threshold at sigma * this
PHI_HALF_RADIUS = math.sqrt(2.0 * math.log(2.0))

_DIST_EPS = 1e-12  # keeps sqrt differentiable when a distance is exactly 0


@dataclass(frozen=True)
class MarginConfig:
    """Fixed margins: pull foreground inside delta_a, push background
    beyond delta_b; delta is the inference assignment radius."""
    delta_a: float = 0.5
    delta_b: float = 1.5
    delta: float = 0.8

    def __post_init__(self):
        if not (0.0 < self.delta_a < self.delta <= self.delta_b):
            raise ValueError(f"margins must satisfy 0 < delta_a < delta <= delta_b, "
                             f"got ({self.delta_a}, {self.delta}, {self.delta_b})")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


@dataclass
class ClusterCenter:
    q: Tensor            # (d,) embedding center
    sigma: Tensor        # scalar margin, > 0
    source: str = "averaged-training"  # or "single-proposal-inference"


def _as_center(q):
    q = ad.as_tensor(q)
    if q.ndim != 1:
        raise ad.ShapeError(f"cluster center must be a vector, got shape {q.shape}")
    return q


def hard_assign(p, q, delta) -> np.ndarray:
    """1 where ||p - q|| <= delta (boundary inclusive), else 0.

    ``p`` is (d,) or (n, d); returns a uint8 scalar/vector. Not
    differentiable; this is the inference-time assignment rule.
    """
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    if p.shape[-1:] != q.shape or q.ndim != 1:
        raise ad.ShapeError(f"hard_assign dimensions {p.shape} vs {q.shape} do not match")
    dist = np.sqrt(((p - q) ** 2).sum(axis=-1))
    return (dist <= float(delta)).astype(np.uint8)


def gaussian_phi(p, q, sigma):
    """exp(-||p - q||^2 / (2 sigma^2)): foreground probability in (0, 1]."""
    q = _as_center(q)
    sigma = ad.as_tensor(sigma)
    if np.any(sigma.data <= 0.0):
        raise ValueError(f"sigma must be > 0, got {float(np.min(sigma.data))}")
    sq = ad.sqdist(ad.as_tensor(p), q)
    return ad.exp(ad.neg(sq / (2.0 * sigma * sigma)))


def hinge_loss(instances, margins: MarginConfig):
    """Two-sided squared hinge on embedding distances, averaged twice.

    ``instances`` is a list of (embeddings (n_k, d) Tensor, fg bits
    (n_k,), center (d,) Tensor). Per instance, foreground pixels pay
    [dist - delta_a]_+^2 and background pixels [delta_b - dist]_+^2,
    both normalized by the full pixel count n_k; instances are averaged.
    """
    if not instances:
        warnings.warn("hinge_loss over an empty instance list is 0")
        return Tensor(0.0)
    terms = []
    for p, gt, q in instances:
        p = ad.as_tensor(p)
        gt = np.asarray(gt).astype(bool).reshape(-1)
        if p.shape[0] != gt.size or p.shape[0] == 0:
            raise ValueError(f"instance pixel set is empty or mismatched: "
                             f"{p.shape} vs {gt.size} labels")
        q = _as_center(q)
        n = gt.size
        d = ad.sqrt(ad.sqdist(p, q) + _DIST_EPS)
        fg_idx = np.flatnonzero(gt)
        bg_idx = np.flatnonzero(~gt)
        total = None
        if fg_idx.size:
            t = ad.relu(d[fg_idx] - margins.delta_a)
            total = ad.tsum(t * t)
        if bg_idx.size:
            t = ad.relu(margins.delta_b - d[bg_idx])
            s = ad.tsum(t * t)
            total = s if total is None else total + s
        terms.append(total / float(n))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out / float(len(terms))


def lovasz_grad(gt_sorted) -> np.ndarray:
    """Jaccard-extension weights for errors already sorted descending.

    With p positives total: intersection_j = p - cumsum(gt)_j,
    union_j = p + cumsum(1 - gt)_j, jaccard_j = 1 - intersection/union;
    the weights are the first difference of the jaccard sequence.
    """
    gt = np.asarray(gt_sorted, dtype=np.float64).reshape(-1)
    p = gt.sum()
    if p == 0:
        return np.zeros_like(gt)
    intersection = p - np.cumsum(gt)
    union = p + np.cumsum(1.0 - gt)
    jaccard = 1.0 - intersection / union
    weights = jaccard.copy()
    weights[1:] = jaccard[1:] - jaccard[:-1]
    return weights


def lovasz_hinge(phi, gt):
    """Lovasz hinge over one pixel set.

    ``phi`` holds foreground probabilities; they are mapped to signed
    scores s = 2 phi - 1 against signed labels y in {-1, +1}. Hinge
    errors max(0, 1 - s y) are sorted descending (ties by ascending
    index) and weighted by the Jaccard-extension gradient of the ground
    truth under the same permutation.
    """
    phi = ad.as_tensor(phi)
    gt = np.asarray(gt).reshape(-1)
    if phi.ndim != 1 or phi.shape[0] != gt.size:
        raise ad.ShapeError(f"lovasz_hinge lengths differ: {phi.shape} vs {gt.size}")
    if gt.size == 0:
        raise ValueError("lovasz_hinge over an empty pixel set")
    y = (2.0 * gt.astype(np.float64) - 1.0)
    e = ad.relu(1.0 - (2.0 * phi - 1.0) * Tensor(y, dtype=phi.data.dtype))
    order = np.lexsort((np.arange(gt.size), -e.data))
    weights = lovasz_grad(gt[order])
    return ad.tsum(e[order] * Tensor(weights, dtype=phi.data.dtype))


def mask_loss(instances):
    """Mean Lovasz hinge of the Gaussian coupling over the instances.

    ``instances`` is a list of (embeddings (n_k, d), gt bits (n_k,),
    center (d,), sigma scalar). Differentiable w.r.t. embeddings,
    centers, and sigmas.
    """
    if not instances:
        warnings.warn("mask_loss over an empty instance list is 0")
        return Tensor(0.0)
    total = None
    for p, gt, q, sigma in instances:
        phi = gaussian_phi(p, q, sigma)
        term = lovasz_hinge(phi, gt)
        total = term if total is None else total + term
    return total / float(len(instances))


def aggregate_center(q_samples, sigma_samples) -> ClusterCenter:
    """Average positive samples into a training-time cluster center."""
    q_samples = ad.as_tensor(q_samples)
    sigma_samples = ad.as_tensor(sigma_samples)
    if q_samples.ndim != 2 or q_samples.shape[0] == 0:
        raise ValueError(f"aggregate_center needs a nonempty (m, d) sample set, "
                         f"got shape {q_samples.shape}")
    if sigma_samples.shape != (q_samples.shape[0],):
        raise ad.ShapeError(f"sigma samples shape {sigma_samples.shape} does not match "
                            f"{(q_samples.shape[0],)}")
    return ClusterCenter(q=ad.tmean(q_samples, axis=0),
                         sigma=ad.tmean(sigma_samples),
                         source="averaged-training")


def smooth_loss(instances):
    """Mean squared deviation of samples from their averaged center.

    ``instances`` is a list of (q_samples (m_k, d), sigma_samples (m_k,)
    or None, center (d,), sigma scalar or None). The sigma term is
    skipped for entries whose sigma side is None (fixed-margin modes).
    """
    if not instances:
        warnings.warn("smooth_loss over an empty instance list is 0")
        return Tensor(0.0)
    q_terms, s_terms = [], []
    for q_samples, sigma_samples, q_center, sigma_center in instances:
        q_samples = ad.as_tensor(q_samples)
        q_terms.append(ad.tmean(ad.sqdist(q_samples, _as_center(q_center))))
        if sigma_samples is not None and sigma_center is not None:
            diff = ad.as_tensor(sigma_samples) - sigma_center
            s_terms.append(ad.tmean(diff * diff))
    k = float(len(instances))
    total = q_terms[0]
    for t in q_terms[1:]:
        total = total + t
    total = total / k
    if s_terms:
        s_total = s_terms[0]
        for t in s_terms[1:]:
            s_total = s_total + t
        total = total + s_total / k
    return total
