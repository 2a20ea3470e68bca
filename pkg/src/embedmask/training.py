"""Joint optimization: detection losses + coupling losses, momentum SGD.

The total objective is

    total = L_cls + L_center + L_box + lambda1 * L_mask + lambda2 * L_smooth

with focal classification over all locations, binary cross-entropy on
center-ness and -ln(IoU) box regression on the positives, the Gaussian
coupling mask loss over the pixel supervision sets, and the smooth loss
tying per-location samples to their averaged centers.

Margin modes:
  * ``learnable``  - sigma predicted per location (the default),
  * ``constant``   - sigma fixed to ``sigma0`` for every instance (the
    smooth loss then carries no sigma term),
  * ``fixed_hinge`` - the two-sided hinge on distances replaces the mask
    loss; the smooth loss drops its sigma term.

Center modes: ``proposal`` averages the predicted per-location centers;
``pixel`` instead averages the pixel embeddings at the same locations
(the margin is still taken from the margin head).

Training is deterministic for a fixed (config, seed): batches come from
a dedicated PCG64 stream, scenes are processed in index order, and
gradients accumulate in that order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from . import coupling as cp
from .autodiff import Tensor
from .model import ModelConfig, ModelParams, forward, init_params, save_checkpoint
from .sampling import build_sample_sets, map_to_grid
from .seeding import rng_for

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2  # applied as an integer power


@dataclass
class TrainConfig:
    lambda1: float = 0.5
    lambda2: float = 0.1
    lr: float = 0.01
    momentum: float = 0.9
    warmup_iters: int = 100
    total_iters: int = 3000
    batch: int = 8
    expand_factor: float = 1.2
    embed_dim: int = 32
    width: int = 16
    margin_mode: str = "learnable"    # learnable | constant | fixed_hinge
    sigma0: float = 1.0               # margin in constant mode
    delta_a: float = 0.5              # fixed_hinge margins
    delta_b: float = 1.5
    delta: float = 0.8                # fixed_hinge inference radius
    center_mode: str = "proposal"     # proposal | pixel
    mask_train_scale: int = 2         # train the coupling at input/scale resolution
    radius_factor: float = 1.5
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    max_detections: int = 20

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.warmup_iters > self.total_iters:
            raise ValueError(f"warmup_iters {self.warmup_iters} exceeds "
                             f"total_iters {self.total_iters}")
        if self.margin_mode not in ("learnable", "constant", "fixed_hinge"):
            raise ValueError(f"unknown margin_mode {self.margin_mode!r}")
        if self.center_mode not in ("proposal", "pixel"):
            raise ValueError(f"unknown center_mode {self.center_mode!r}")
        if self.mask_train_scale < 1:
            raise ValueError(f"mask_train_scale must be >= 1, got {self.mask_train_scale}")
        cp.LossWeights(self.lambda1, self.lambda2)  # validates

    def margins(self) -> cp.MarginConfig:
        return cp.MarginConfig(self.delta_a, self.delta_b, self.delta)

    def model_config(self) -> ModelConfig:
        return ModelConfig(width=self.width, embed_dim=self.embed_dim)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LossBreakdown:
    cls: float = 0.0
    center: float = 0.0
    box: float = 0.0
    mask: float = 0.0
    smooth: float = 0.0
    total: float = 0.0
    skipped: int = 0

    def to_dict(self):
        return asdict(self)


class NonFiniteLossError(RuntimeError):
    """A loss term went non-finite; carries the breakdown for the dump."""

    def __init__(self, breakdown: LossBreakdown):
        super().__init__(f"non-finite loss term: {breakdown.to_dict()}")
        self.breakdown = breakdown


def _bce_with_logits(logits, targets):
    """softplus(x) - x * y, summed."""
    t = Tensor(np.asarray(targets, dtype=logits.data.dtype))
    return ad.tsum(ad.softplus(logits) - logits * t)


def detection_losses(outputs, detection, num_classes):
    """(L_cls, L_center, L_box) tensors, each normalized by max(1, npos)."""
    hw = detection.labels.size
    norm = float(max(1, detection.pos_idx.size))

    logits = ad.reshape(outputs.cls_logits, (hw, num_classes))
    onehot = np.zeros((hw, num_classes), dtype=logits.data.dtype)
    pos_mask = detection.labels >= 0
    onehot[pos_mask, detection.labels[pos_mask]] = 1.0
    t = Tensor(onehot)
    p = ad.sigmoid(logits)
    one = 1.0
    # focal loss, stable: -log p = softplus(-x), -log(1-p) = softplus(x)
    pos_term = t * ((one - p) * (one - p)) * ad.softplus(ad.neg(logits)) * FOCAL_ALPHA
    neg_term = (one - t) * (p * p) * ad.softplus(logits) * (1.0 - FOCAL_ALPHA)
    l_cls = ad.tsum(pos_term + neg_term) / norm

    if detection.pos_idx.size:
        ctr_flat = ad.reshape(outputs.centerness, (hw,))
        l_center = _bce_with_logits(ctr_flat[detection.pos_idx],
                                    detection.centerness) / norm

        ltrb_flat = ad.reshape(outputs.ltrb, (hw, 4))
        pred = ltrb_flat[detection.pos_idx]
        tgt = detection.box_targets.astype(outputs.ltrb.data.dtype)
        iw = ad.minimum_t(pred[:, 0], Tensor(tgt[:, 0])) + \
            ad.minimum_t(pred[:, 2], Tensor(tgt[:, 2]))
        ih = ad.minimum_t(pred[:, 1], Tensor(tgt[:, 1])) + \
            ad.minimum_t(pred[:, 3], Tensor(tgt[:, 3]))
        inter = iw * ih
        area_p = (pred[:, 0] + pred[:, 2]) * (pred[:, 1] + pred[:, 3])
        area_t = Tensor((tgt[:, 0] + tgt[:, 2]) * (tgt[:, 1] + tgt[:, 3]))
        union = area_p + area_t - inter
        l_box = ad.tsum(ad.neg(ad.log(inter / union))) / norm
    else:
        l_center = Tensor(np.zeros((), dtype=logits.data.dtype))
        l_box = Tensor(np.zeros((), dtype=logits.data.dtype))
    return l_cls, l_center, l_box


def total_loss(outputs, scene, config: TrainConfig):
    """Compose the full objective for one scene.

    Returns (total Tensor, LossBreakdown). Instances whose center-sample
    or pixel set is empty are excluded from the coupling losses and
    counted in the breakdown. Raises NonFiniteLossError when any term is
    non-finite.
    """
    h, w = scene.image.shape[:2]
    if h % config.mask_train_scale or w % config.mask_train_scale:
        raise ValueError(f"image extents {h}x{w} not divisible by "
                         f"mask_train_scale {config.mask_train_scale}")
    grid = (h // config.mask_train_scale, w // config.mask_train_scale)
    sets = build_sample_sets(outputs, scene.instances, (h, w), grid,
                             expand_factor=config.expand_factor,
                             radius_factor=config.radius_factor)
    num_classes = outputs.cls_logits.shape[-1]
    l_cls, l_center, l_box = detection_losses(outputs, sets.detection, num_classes)

    emb = outputs.embeddings
    if (emb.shape[0], emb.shape[1]) != grid:
        emb = ad.bilinear_resize(emb, grid)
    d = emb.shape[2]
    emb_flat = ad.reshape(emb, (grid[0] * grid[1], d))
    hw = outputs.locations.shape[0] * outputs.locations.shape[1]
    q_flat = ad.reshape(outputs.proposal_embeddings, (hw, d))
    sigma_flat = ad.reshape(outputs.sigma, (hw,))
    loc_flat = outputs.locations.reshape(-1, 2)

    mask_instances, hinge_instances, smooth_instances = [], [], []
    for k, inst in enumerate(scene.instances):
        m_k = sets.center_samples[k]
        b_idx, b_fg = sets.pixel_sets[k]
        if m_k.size == 0 or b_idx.size == 0:
            continue
        sigma_samples = sigma_flat[m_k]
        if config.center_mode == "proposal":
            q_samples = q_flat[m_k]
        else:  # pixel embeddings at the mapped locations as centers
            q_samples = emb_flat[map_to_grid(loc_flat[m_k], grid, (h, w))]
        center = cp.aggregate_center(q_samples, sigma_samples)
        pixels = emb_flat[b_idx]
        if config.margin_mode == "fixed_hinge":
            hinge_instances.append((pixels, b_fg, center.q))
            smooth_instances.append((q_samples, None, center.q, None))
        elif config.margin_mode == "constant":
            sigma_const = Tensor(np.asarray(config.sigma0, dtype=emb.data.dtype))
            mask_instances.append((pixels, b_fg, center.q, sigma_const))
            smooth_instances.append((q_samples, None, center.q, None))
        else:
            mask_instances.append((pixels, b_fg, center.q, center.sigma))
            smooth_instances.append((q_samples, sigma_samples, center.q, center.sigma))

    zero = Tensor(np.zeros((), dtype=emb.data.dtype))
    if config.margin_mode == "fixed_hinge":
        l_mask = cp.hinge_loss(hinge_instances, config.margins()) if hinge_instances else zero
    else:
        l_mask = cp.mask_loss(mask_instances) if mask_instances else zero
    l_smooth = cp.smooth_loss(smooth_instances) if smooth_instances else zero

    total = l_cls + l_center + l_box + config.lambda1 * l_mask + config.lambda2 * l_smooth
    breakdown = LossBreakdown(
        cls=float(l_cls.data), center=float(l_center.data), box=float(l_box.data),
        mask=float(l_mask.data), smooth=float(l_smooth.data),
        total=float(total.data), skipped=sets.skipped_instances)
    vals = [breakdown.cls, breakdown.center, breakdown.box,
            breakdown.mask, breakdown.smooth, breakdown.total]
    if not all(math.isfinite(v) for v in vals):
        raise NonFiniteLossError(breakdown)
    return total, breakdown


# ---------------------------------------------------------------------------
# momentum SGD with linear warmup and one 10x decay
# ---------------------------------------------------------------------------

def lr_schedule(it, config: TrainConfig) -> float:
    lr = config.lr
    if config.warmup_iters > 0:
        lr *= min(1.0, it / config.warmup_iters)
    if it >= (2 * config.total_iters) // 3:
        lr *= 0.1
    return lr


def sgd_step(params: ModelParams, grads: dict, velocity: dict, it,
             config: TrainConfig):
    """One momentum-SGD update; returns (new params, step_taken).

    Non-finite gradients skip the step (and leave the velocity alone).
    """
    for name, g in grads.items():
        if params.tensors[name].data.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter "
                             f"{params.tensors[name].data.shape} for {name}")
        if not np.all(np.isfinite(g)):
            return params, False
    lr = lr_schedule(it, config)
    new_tensors = {}
    for name, t in params.tensors.items():
        g = grads.get(name)
        if g is None:
            new_tensors[name] = t
            continue
        v = velocity.get(name)
        v = g if v is None else config.momentum * v + g
        velocity[name] = v
        new_tensors[name] = Tensor(t.data - lr * v, requires_grad=True)
    return ModelParams(config=params.config, tensors=new_tensors,
                       seed=params.seed), True


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)  # one dict per iteration
    skipped_steps: int = 0
    nonfinite_events: int = 0
    last_nonfinite_iter: int = -1


def train(train_scenes, config: TrainConfig, seed: int, out_dir=None,
          log_every: int = 1, progress=None) -> TrainResult:
    """Train from scratch on a list of scenes.

    Deterministic for fixed (config, seed). When ``out_dir`` is given,
    writes ``log.jsonl`` (one JSON object per iteration) and a final
    checkpoint under ``checkpoint/``.
    """
    if not train_scenes:
        raise ValueError("train() needs at least one training scene")
    params = init_params(seed, config.model_config())
    velocity = {}
    batch_rng = rng_for(seed, stream=7)
    result = TrainResult(params=params)
    log_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "log.jsonl"), "w")
    try:
        for it in range(config.total_iters):
            idx = batch_rng.integers(0, len(train_scenes), size=config.batch)
            grads = {}
            agg = LossBreakdown()
            aborted = False
            for i in idx:
                scene = train_scenes[int(i)]
                outputs = forward(scene.image, params)
                try:
                    total, bd = total_loss(outputs, scene, config)
                except NonFiniteLossError as e:
                    result.nonfinite_events += 1
                    result.last_nonfinite_iter = it
                    if log_fh:
                        log_fh.write(json.dumps({"iter": it, "aborted": True,
                                                 "breakdown": e.breakdown.to_dict()}) + "\n")
                    aborted = True
                    break
                ad.backward(total)
                for name, t in params.tensors.items():
                    if t.grad is not None:
                        acc = grads.get(name)
                        grads[name] = t.grad.copy() if acc is None else acc + t.grad
                for f in ("cls", "center", "box", "mask", "smooth", "total"):
                    setattr(agg, f, getattr(agg, f) + getattr(bd, f))
                agg.skipped += bd.skipped
            if aborted:
                result.skipped_steps += 1
                continue
            n = float(config.batch)
            for name in grads:
                grads[name] = grads[name] / n
            for f in ("cls", "center", "box", "mask", "smooth", "total"):
                setattr(agg, f, getattr(agg, f) / n)
            params, took = sgd_step(params, grads, velocity, it, config)
            if not took:
                result.skipped_steps += 1
            entry = {"iter": it, "lr": lr_schedule(it, config),
                     "breakdown": agg.to_dict(), "skipped": agg.skipped}
            if it % log_every == 0 or it == config.total_iters - 1:
                result.log.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
            if progress is not None:
                progress(it, entry)
        result.params = params
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "checkpoint"), params)
    finally:
        if log_fh:
            log_fh.close()
    return result
