"""Scaled-down convolutional model: shared backbone, proposal head, pixel head.

The backbone is four 3x3 convolutions with stride schedule 1,2,1,1, so
every head operates on a single feature level at stride 2. The proposal
head runs a two-convolution tower shared by the category, center-ness,
box, and embedding outputs; the margin output is a 1x1 convolution on
the raw box regression output. A separate three-convolution pixel head
produces the per-pixel embedding map at the same stride.

The margin channel r decodes as a = exp(r) with a read as 1/(2 sigma^2),
i.e. sigma = exp(-r/2)/sqrt(2); the exponential keeps sigma positive for
every input and every parameter value. Box outputs decode to positive
l, t, r, b side distances via exp, in image-pixel units scaled by the
stride. Category and center-ness come out as logits.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import rng_for

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16
    embed_dim: int = 32
    num_classes: int = 3
    stride: int = 2  # fixed by the backbone stride schedule 1,2,1,1

    def to_dict(self):
        return asdict(self)


def _layer_specs(cfg: ModelConfig):
    w, d, c = cfg.width, cfg.embed_dim, cfg.num_classes
    return [
        # name, (c_out, c_in, kh, kw), stride
        ("backbone.0", (w, 3, 3, 3), 1),
        ("backbone.1", (w, w, 3, 3), 2),
        ("backbone.2", (w, w, 3, 3), 1),
        ("backbone.3", (w, w, 3, 3), 1),
        ("tower.0", (w, w, 3, 3), 1),
        ("tower.1", (w, w, 3, 3), 1),
        ("head.cls", (c, w, 3, 3), 1),
        ("head.ctr", (1, w, 3, 3), 1),
        ("head.box", (4, w, 3, 3), 1),
        ("head.q", (d, w, 3, 3), 1),
        ("head.sigma", (1, 4, 1, 1), 1),
        ("pixel.0", (w, w, 3, 3), 1),
        ("pixel.1", (w, w, 3, 3), 1),
        ("pixel.2", (w, w, 3, 3), 1),
        ("pixel.out", (d, w, 3, 3), 1),
    ]


_OUTPUT_LAYERS = ("head.cls", "head.ctr", "head.box", "head.q", "head.sigma", "pixel.out")
_PRIOR_FG = 0.01  # initial foreground probability for the category output


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict  # name -> Tensor, insertion-ordered
    seed: int = 0

    def names(self):
        return list(self.tensors)

    def tensor_list(self):
        return [self.tensors[n] for n in self.tensors]

    def replace_tensors(self, tensor_list):
        """Same structure, new tensors (used by gradient checking)."""
        names = self.names()
        if len(tensor_list) != len(names):
            raise ValueError(f"expected {len(names)} tensors, got {len(tensor_list)}")
        return ModelParams(config=self.config, seed=self.seed,
                           tensors=dict(zip(names, tensor_list)))

    def astype(self, dtype):
        return ModelParams(
            config=self.config, seed=self.seed,
            tensors={n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                     for n, t in self.tensors.items()})


def init_params(seed: int, config: ModelConfig = ModelConfig(),
                dtype=np.float32) -> ModelParams:
    """He fan-in initialization; output layers get small weights and the
    category bias is set so the initial foreground probability is ~0.01."""
    rng = rng_for(seed, stream=101)
    tensors = {}
    for name, shape, _stride in _layer_specs(config):
        c_out, c_in, kh, kw = shape
        fan_in = c_in * kh * kw
        std = 0.01 if name in _OUTPUT_LAYERS else math.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=shape)
        b = np.zeros(c_out)
        if name == "head.cls":
            b[:] = -math.log((1.0 - _PRIOR_FG) / _PRIOR_FG)
        tensors[name + ".w"] = Tensor(w.astype(dtype), requires_grad=True)
        tensors[name + ".b"] = Tensor(b.astype(dtype), requires_grad=True)
    return ModelParams(config=config, tensors=tensors, seed=seed)


@dataclass
class HeadOutputs:
    cls_logits: Tensor    # (hf, wf, num_classes)
    centerness: Tensor    # (hf, wf) logits
    ltrb: Tensor          # (hf, wf, 4) positive side distances, image pixels
    proposal_embeddings: Tensor  # (hf, wf, embed_dim)
    sigma: Tensor         # (hf, wf) positive margins
    embeddings: Tensor    # (hf, wf, embed_dim) pixel embedding map
    locations: np.ndarray = field(repr=False, default=None)  # (hf, wf, 2) image (x, y)
    stride: int = 2


def grid_locations(hf, wf, stride):
    xs = (np.arange(wf) + 0.5) * stride
    ys = (np.arange(hf) + 0.5) * stride
    out = np.empty((hf, wf, 2))
    out[:, :, 0] = xs[None, :]
    out[:, :, 1] = ys[:, None]
    return out


def _conv(params, name, x, stride=1):
    return ad.conv2d(x, params.tensors[name + ".w"], params.tensors[name + ".b"],
                     stride=stride)


def forward(image, params: ModelParams) -> HeadOutputs:
    """Run the model on one (h, w, 3) image in [0, 1]."""
    cfg = params.config
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"forward expects an (h, w, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    if h % cfg.stride or w % cfg.stride:
        raise ValueError(f"image extents {h}x{w} not divisible by stride {cfg.stride}")
    dtype = params.tensors["backbone.0.w"].data.dtype
    x = ad.transpose(Tensor(img.astype(dtype)), (2, 0, 1))

    # silu activations: relu-like training dynamics but smooth in the
    # parameters, so finite differences stay meaningful at trained points
    # (relu training piles pre-activations exactly on its kink)
    x = ad.silu(_conv(params, "backbone.0", x, stride=1))
    x = ad.silu(_conv(params, "backbone.1", x, stride=2))
    x = ad.silu(_conv(params, "backbone.2", x, stride=1))
    feat = ad.silu(_conv(params, "backbone.3", x, stride=1))

    t = ad.silu(_conv(params, "tower.0", feat))
    t = ad.silu(_conv(params, "tower.1", t))
    cls = ad.transpose(_conv(params, "head.cls", t), (1, 2, 0))
    ctr = _conv(params, "head.ctr", t)
    ctr = ad.reshape(ctr, ctr.shape[1:])
    box_raw = _conv(params, "head.box", t)
    ltrb = ad.transpose(ad.exp(box_raw) * float(cfg.stride), (1, 2, 0))
    q = ad.transpose(_conv(params, "head.q", t), (1, 2, 0))
    sigma_raw = _conv(params, "head.sigma", box_raw)
    # raw r decodes as a = exp(r) = 1/(2 sigma^2) => sigma = exp(-r/2)/sqrt(2);
    # exponent clamp and floor keep sigma finite and positive under
    # float32 overflow/underflow at extreme weights
    sigma = ad.maximum(ad.exp(ad.clamp(sigma_raw * (-0.5), -45.0, 45.0))
                       * (1.0 / _SQRT2), 1e-6)
    sigma = ad.reshape(sigma, sigma.shape[1:])

    p = ad.silu(_conv(params, "pixel.0", feat))
    p = ad.silu(_conv(params, "pixel.1", p))
    p = ad.silu(_conv(params, "pixel.2", p))
    emb = ad.transpose(_conv(params, "pixel.out", p), (1, 2, 0))

    hf, wf = cls.shape[0], cls.shape[1]
    return HeadOutputs(cls_logits=cls, centerness=ctr, ltrb=ltrb,
                       proposal_embeddings=q, sigma=sigma, embeddings=emb,
                       locations=grid_locations(hf, wf, cfg.stride),
                       stride=cfg.stride)


# ---------------------------------------------------------------------------
# checkpoints: manifest JSON + one binary tensor blob per parameter
# ---------------------------------------------------------------------------

def _blob_name(param_name):
    return re.sub(r"[^A-Za-z0-9_]", "_", param_name) + ".emtn"


def save_checkpoint(path, params: ModelParams, config_hash: str = "") -> None:
    os.makedirs(path, exist_ok=True)
    blob_dir = os.path.join(path, "tensors")
    os.makedirs(blob_dir, exist_ok=True)
    layers = []
    for name, t in params.tensors.items():
        blob = _blob_name(name)
        ad.save_tensor(os.path.join(blob_dir, blob), t.data)
        layers.append({"name": name, "shape": list(t.shape), "file": f"tensors/{blob}"})
    manifest = {
        "format_version": 1,
        "seed": int(params.seed),
        "config_hash": config_hash,
        "model": params.config.to_dict(),
        "layers": layers,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(path):
    """Returns (ModelParams, manifest dict)."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = ModelConfig(**manifest["model"])
    expected = {name + suffix for name, _s, _ in _layer_specs(cfg) for suffix in (".w", ".b")}
    tensors = {}
    for layer in manifest["layers"]:
        arr = ad.load_tensor(os.path.join(path, layer["file"]))
        if list(arr.shape) != layer["shape"]:
            raise ValueError(f"checkpoint tensor {layer['name']}: stored shape "
                             f"{list(arr.shape)} != manifest {layer['shape']}")
        tensors[layer["name"]] = Tensor(arr, requires_grad=True)
    if set(tensors) != expected:
        raise ValueError(f"checkpoint layers {sorted(tensors)} do not match the "
                         f"model configuration")
    params = ModelParams(config=cfg, tensors=tensors, seed=int(manifest.get("seed", 0)))
    return params, manifest
