"""Command-line entry point: data generation, training, inference,
evaluation, ablations, and gradient checks.

Every command is non-interactive, prints exactly one machine-parsable
JSON summary line as its last stdout line, and exits 0 on success, 1
when an acceptance-style validation fails (gradient check or ablation
verdict), and 2 on I/O or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import coupling as cp
from .config import RunConfig, parse_override
from .evaluation import evaluate, run_ablation
from .geometry import rle_encode
from .inference import infer_masks
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint, forward
from .scenes import (SceneSpec, generate_dataset, read_dataset, read_ppm,
                     write_dataset, write_ppm)
from .training import TrainConfig, detection_losses, total_loss, train
from .sampling import build_sample_sets
from .seeding import rng_for

_OVERLAY_COLORS = np.array([
    (1.0, 0.2, 0.2), (0.2, 0.5, 1.0), (0.2, 0.9, 0.3), (1.0, 0.8, 0.1),
    (0.9, 0.3, 0.9), (0.2, 0.9, 0.9), (1.0, 0.5, 0.1), (0.7, 0.7, 0.7),
])


class CliError(Exception):
    """Configuration / IO problem: exit code 2."""


def _summary(payload):
    print(json.dumps(payload, sort_keys=True))


def _threads(args):
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("EMBEDMASK_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as e:
            raise CliError(f"EMBEDMASK_THREADS={env!r} is not an integer") from e
    return 1


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    spec = SceneSpec()
    if args.spec:
        try:
            with open(args.spec) as fh:
                spec = SceneSpec.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as e:
            raise CliError(f"bad scene spec {args.spec}: {e}") from e
    splits = [s for s in args.split.split(",") if s]
    if not splits:
        raise CliError(f"--split {args.split!r} names no splits")
    if args.count == 0:
        print("warning: generating an empty dataset", file=sys.stderr)
    scenes = generate_dataset(args.seed, spec, args.count)
    per_split = {}
    if len(splits) == 1:
        per_split[splits[0]] = scenes
    else:
        # 80/20 between the first two splits; further splits get nothing
        cut = int(round(args.count * 0.8))
        per_split[splits[0]] = scenes[:cut]
        per_split[splits[1]] = scenes[cut:]
        for name in splits[2:]:
            per_split[name] = []
    try:
        write_dataset(args.out, per_split)
        with open(os.path.join(args.out, "gen_config.json"), "w") as fh:
            json.dump({"scenes": spec.to_dict(), "seed": args.seed,
                       "count": args.count, "splits": splits}, fh,
                      indent=1, sort_keys=True)
    except OSError as e:
        raise CliError(f"cannot write dataset to {args.out}: {e}") from e
    _summary({"cmd": "gen-data", "out": args.out,
              "counts": {k: len(v) for k, v in per_split.items()}})
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_run_config(args):
    run = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        key, value = parse_override(item)
        overrides[key] = value
    if overrides:
        run = run.apply_overrides(overrides)
    return run


def cmd_train(args):
    try:
        run = _load_run_config(args)
    except ValueError as e:
        raise CliError(str(e)) from e
    if args.data:
        run.data_dir = args.data
    if args.out:
        run.out_dir = args.out
    if not run.data_dir or not run.out_dir:
        raise CliError("train needs --data and --out (or config entries)")
    try:
        train_scenes = read_dataset(run.data_dir, "train")
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot read dataset {run.data_dir}: {e}") from e
    os.makedirs(run.out_dir, exist_ok=True)
    run.save(os.path.join(run.out_dir, "run_config.json"))
    result = train(train_scenes, run.train, run.seed, out_dir=run.out_dir)
    ckpt = os.path.join(run.out_dir, "checkpoint")
    save_checkpoint(ckpt, result.params, config_hash=run.hash())
    run.save(os.path.join(ckpt, "run_config.json"))
    final = result.log[-1]["breakdown"] if result.log else {}
    _summary({"cmd": "train", "out": run.out_dir, "checkpoint": ckpt,
              "iters": run.train.total_iters, "final": final,
              "skipped_steps": result.skipped_steps,
              "nonfinite_events": result.nonfinite_events,
              "config_hash": run.hash()})
    return 0


def _load_ckpt(path, allow_mismatch=False):
    try:
        params, manifest = load_checkpoint(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise CliError(f"cannot load checkpoint {path}: {e}") from e
    cfg_path = os.path.join(path, "run_config.json")
    if not os.path.exists(cfg_path):
        raise CliError(f"checkpoint {path} has no run_config.json")
    run = RunConfig.load(cfg_path)
    stored = manifest.get("config_hash", "")
    if stored and stored != run.hash():
        if not allow_mismatch:
            raise CliError(
                f"checkpoint config hash {stored} != run config hash {run.hash()}; "
                f"pass --allow-hash-mismatch to load anyway")
        print(f"warning: loading despite config hash mismatch", file=sys.stderr)
    return params, run


def _predictions_payload(image_name, preds):
    return {"image": image_name,
            "instances": [{"category": int(p.category), "score": float(p.score),
                           "box": [p.box.x1, p.box.y1, p.box.x2, p.box.y2],
                           "rle": rle_encode(p.mask)} for p in preds]}


def _erode(bits):
    out = bits.copy()
    out[1:] &= bits[:-1]
    out[:-1] &= bits[1:]
    out[:, 1:] &= bits[:, :-1]
    out[:, :-1] &= bits[:, 1:]
    return out


def render_overlay(image, preds):
    """Instance contours painted over the input image."""
    canvas = np.asarray(image, dtype=np.float64).copy()
    for i, p in enumerate(preds):
        contour = p.mask.bits & ~_erode(p.mask.bits)
        canvas[contour] = _OVERLAY_COLORS[i % len(_OVERLAY_COLORS)]
    return canvas


def cmd_infer(args):
    params, run = _load_ckpt(args.ckpt, args.allow_hash_mismatch)
    if bool(args.images) == bool(args.data):
        raise CliError("infer needs exactly one of --images or --data")
    if args.images:
        names = args.images
        try:
            images = [read_ppm(p) for p in names]
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read image: {e}") from e
    else:
        try:
            scenes = read_dataset(args.data, args.split)
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read dataset {args.data}: {e}") from e
        names = [f"{args.split}/{i:05d}" for i in range(len(scenes))]
        images = [s.image for s in scenes]
    os.makedirs(args.out, exist_ok=True)
    run.save(os.path.join(args.out, "run_config.json"))
    records = []
    for name, img in zip(names, images):
        preds = infer_masks(img, params, run.train)
        records.append(_predictions_payload(name, preds))
        if args.overlay:
            base = os.path.splitext(os.path.basename(name))[0] or name.replace("/", "_")
            write_ppm(os.path.join(args.out, f"overlay_{base}.ppm"),
                      render_overlay(img, preds))
    with open(os.path.join(args.out, "predictions.json"), "w") as fh:
        json.dump({"predictions": records}, fh, indent=1, sort_keys=True)
    _summary({"cmd": "infer", "out": args.out, "images": len(records),
              "instances": sum(len(r["instances"]) for r in records)})
    return 0


def cmd_eval(args):
    params, run = _load_ckpt(args.ckpt, args.allow_hash_mismatch)
    try:
        scenes = read_dataset(args.data, args.split)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read dataset {args.data}: {e}") from e
    preds = [infer_masks(s.image, params, run.train) for s in scenes]
    report = evaluate(preds, [s.instances for s in scenes])
    os.makedirs(args.out, exist_ok=True)
    run.save(os.path.join(args.out, "run_config.json"))
    report.to_json(os.path.join(args.out, "eval.json"))
    _summary({"cmd": "eval", "out": args.out, "ap": report.ap,
              "ap50": report.ap50, "ap75": report.ap75})
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def cmd_ablate(args):
    try:
        with open(args.grid) as fh:
            grid_doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read grid {args.grid}: {e}") from e
    base = RunConfig.load(args.config) if args.config else RunConfig()
    grid = []
    try:
        for entry in grid_doc:
            cfg = base.apply_overrides(entry.get("overrides", {}))
            grid.append((entry["name"], cfg.train))
    except (KeyError, TypeError, ValueError) as e:
        raise CliError(f"bad grid entry: {e}") from e
    try:
        train_scenes = read_dataset(args.data, "train")
        val_scenes = read_dataset(args.data, "val")
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read dataset {args.data}: {e}") from e
    seeds = [int(s) for s in args.seeds.split(",") if s]
    os.makedirs(args.out, exist_ok=True)
    base.save(os.path.join(args.out, "run_config.json"))

    def progress(run):
        status = "diverged" if run.diverged else \
            f"AP {run.report.ap:.3f} AP50 {run.report.ap50:.3f}"
        print(f"[ablate] {run.name} seed {run.seed}: {status}", file=sys.stderr)

    result = run_ablation(grid, train_scenes, val_scenes, seeds,
                          out_dir=args.out, progress=progress,
                          workers=_threads(args))
    print(result.table_text(), end="", file=sys.stderr)
    failed = [v for v in result.verdicts if v.startswith("FAIL")]
    _summary({"cmd": "ablate", "out": args.out,
              "rows": [{"name": name, "mean_ap": mean_ap, "mean_ap50": ap50}
                       for name, _seeds, mean_ap, ap50, _75 in result.rows],
              "verdicts": result.verdicts})
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def composite_point_is_valid(scene, config, params, require_coupling=True,
                             gate_margin=1e-3, side_margin=5e-3,
                             tie_margin=1e-5):
    """True when a trained point sits clear of the objective's piecewise
    boundaries, so central differences measure the gradient of one piece.

    Checked clearances: the IoU > 0.5 center-sample gate, the min() ties
    inside the box IoU loss, and the descending sort of the Lovasz hinge
    errors. All are measure-zero sets; points near them are redrawn by
    the callers rather than checked.
    """
    from .coupling import aggregate_center
    from .geometry import Box, box_iou
    from .sampling import decode_boxes, map_to_grid

    h, w = scene.image.shape[:2]
    grid = (h // config.mask_train_scale, w // config.mask_train_scale)
    with ad.no_grad():
        outputs = forward(scene.image, params)
    sets = build_sample_sets(outputs, scene.instances, (h, w), grid,
                             expand_factor=config.expand_factor,
                             radius_factor=config.radius_factor)
    det = sets.detection
    if det.pos_idx.size == 0:
        return False
    if require_coupling and (not scene.instances or sets.skipped_instances > 0):
        return False

    boxes = decode_boxes(outputs.ltrb.data, outputs.locations, (h, w))
    for k, inst in enumerate(scene.instances):
        for loc in det.positives_per_instance[k]:
            if abs(box_iou(Box(*boxes[loc]), inst.box) - 0.5) < gate_margin:
                return False

    pred = outputs.ltrb.data.reshape(-1, 4)[det.pos_idx]
    if pred.size and np.min(np.abs(pred - det.box_targets)) < side_margin:
        return False

    if require_coupling:
        emb = outputs.embeddings.data.reshape(-1, outputs.embeddings.shape[-1])
        q = outputs.proposal_embeddings.data.reshape(-1, emb.shape[-1])
        sg = outputs.sigma.data.reshape(-1)
        locs = outputs.locations.reshape(-1, 2)
        for k, inst in enumerate(scene.instances):
            m = sets.center_samples[k]
            b_idx, b_fg = sets.pixel_sets[k]
            if m.size == 0 or b_idx.size == 0:
                continue
            if config.center_mode == "pixel":
                center = emb[map_to_grid(locs[m], grid, (h, w))].mean(axis=0)
            else:
                center = q[m].mean(axis=0)
            sigma = float(sg[m].mean())
            dist_sq = ((emb[b_idx] - center) ** 2).sum(axis=1)
            phi = np.exp(-dist_sq / (2.0 * sigma * sigma))
            y = 2.0 * b_fg.astype(np.float64) - 1.0
            e = np.maximum(0.0, 1.0 - (2.0 * phi - 1.0) * y)
            es = np.sort(e)[::-1]
            gaps = np.abs(np.diff(es))
            relevant = np.maximum(es[:-1], es[1:]) > 1e-9
            if np.any(gaps[relevant] < tie_margin):
                return False
    return True


def _gradcheck_cases(which, trials, rng):
    from .scenes import generate_scene

    cases = {}

    def phi_case(r):
        d = 4
        p = ad.Tensor(r.normal(size=(6, d)), requires_grad=True)
        q = ad.Tensor(r.normal(size=d), requires_grad=True)
        s = ad.Tensor(np.asarray(r.uniform(0.3, 2.0)), requires_grad=True)
        return lambda a, b, c: ad.tsum(cp.gaussian_phi(a, b, c)), [p, q, s]

    def hinge_case(r):
        n, d = 8, 3
        gt = r.random(n) < 0.5
        p = ad.Tensor(r.normal(scale=1.2, size=(n, d)), requires_grad=True)
        q = ad.Tensor(r.normal(scale=0.4, size=d), requires_grad=True)
        margins = cp.MarginConfig()
        return lambda a, b: cp.hinge_loss([(a, gt, b)], margins), [p, q]

    def mask_case(r):
        # one random 5x5 instance
        n, d = 25, 4
        gt = r.random(n) < 0.45
        if not gt.any():
            gt[0] = True
        q0 = r.normal(scale=0.6, size=d)
        p = np.where(gt[:, None], q0 + r.normal(scale=0.4, size=(n, d)),
                     q0 + r.normal(scale=1.5, size=(n, d)))
        pt = ad.Tensor(p, requires_grad=True)
        qt = ad.Tensor(q0, requires_grad=True)
        st = ad.Tensor(np.asarray(r.uniform(0.4, 1.4)), requires_grad=True)
        return lambda a, b, c: cp.mask_loss([(a, gt, b, c)]), [pt, qt, st]

    def smooth_case(r):
        q = ad.Tensor(r.normal(size=(5, 3)), requires_grad=True)
        s = ad.Tensor(r.uniform(0.3, 1.5, 5), requires_grad=True)

        def f(a, b):
            c = cp.aggregate_center(a, b)
            return cp.smooth_loss([(a, b, c.q, c.sigma)])
        return f, [q, s]

    def _tiny_setup(r, pretrain):
        # a 32x32 scene and a narrow model; a short pre-training run moves
        # the predicted boxes past the IoU gate so the coupling losses are
        # live at the checked point
        spec = SceneSpec(height=32, width=32, min_instances=1, max_instances=2,
                         min_size=8, max_size=16)
        scene = generate_scene(int(r.integers(0, 2 ** 48)), spec)
        config = TrainConfig(width=2, embed_dim=2, total_iters=pretrain,
                             warmup_iters=min(5, pretrain), batch=1, lr=0.02)
        seed = int(r.integers(0, 2 ** 48))
        if pretrain:
            params = train([scene], config, seed=seed).params.astype(np.float64)
        else:
            params = init_params(seed, config.model_config(), dtype=np.float64)
        return scene, config, params

    def composite_case(r):
        # redraw until the point is clear of the objective's measure-zero
        # discontinuities (sort ties, gate/min boundaries); central
        # differences straddle pieces there and say nothing
        for _attempt in range(25):
            scene, config, params = _tiny_setup(r, pretrain=60)
            if composite_point_is_valid(scene, config, params,
                                        require_coupling=True):
                break

        def f(*tensors):
            p = params.replace_tensors(list(tensors))
            out = forward(scene.image, p)
            total, _ = total_loss(out, scene, config)
            return total

        leaves = [ad.Tensor(t.data.copy(), requires_grad=True)
                  for t in params.tensor_list()]
        return f, leaves

    def detection_case(r):
        # a short pre-train moves activations off the boundaries a width-2
        # random init can sit on exactly
        for _attempt in range(25):
            scene, config, params = _tiny_setup(r, pretrain=40)
            if composite_point_is_valid(scene, config, params,
                                        require_coupling=False):
                break

        def f(*tensors):
            p = params.replace_tensors(list(tensors))
            outputs = forward(scene.image, p)
            sets = build_sample_sets(outputs, scene.instances, (32, 32), (16, 16))
            l_cls, l_ctr, l_box = detection_losses(outputs, sets.detection, 3)
            return l_cls + l_ctr + l_box

        leaves = [ad.Tensor(t.data.copy(), requires_grad=True)
                  for t in params.tensor_list()]
        return f, leaves

    # (builder, tolerance, primary step, fallback steps): simple losses
    # use the standard 1e-4 step; the deep model composites scan a small
    # step set because truncation and roundoff bind different coordinates
    all_cases = {"phi": (phi_case, 1e-4, 1e-4, ()),
                 "hinge": (hinge_case, 1e-4, 1e-4, ()),
                 "mask_loss": (mask_case, 1e-4, 1e-4, ()),
                 "smooth": (smooth_case, 1e-4, 1e-4, ()),
                 "detection": (detection_case, 1e-3, 3e-5, (1e-4, 1e-5)),
                 "composite": (composite_case, 1e-3, 3e-5, (1e-4, 1e-5))}
    if which != "all":
        if which not in all_cases:
            raise CliError(f"unknown gradcheck target {which!r}; "
                           f"choose from {sorted(all_cases)} or 'all'")
        return {which: all_cases[which]}
    return all_cases


def cmd_gradcheck(args):
    rng = rng_for(args.seed, stream=55)
    cases = _gradcheck_cases(args.which, args.trials, rng)
    results = {}
    ok = True
    for name, (builder, tol, step, fallback) in sorted(cases.items()):
        worst = 0.0
        trials = args.trials if name not in ("composite", "detection") else \
            min(args.trials, args.model_trials)
        for _ in range(trials):
            f, pts = builder(rng)
            worst = max(worst, ad.finite_diff_check(f, pts, step=step,
                                                    fallback_steps=fallback))
        passed = bool(worst < tol)
        ok = ok and passed
        results[name] = {"max_rel_err": float(worst), "tol": tol, "pass": passed}
        print(f"{'PASS' if passed else 'FAIL'} {name} max_rel_err {worst:.2e} "
              f"(tol {tol:.0e}, {trials} trials)", file=sys.stderr)
    _summary({"cmd": "gradcheck", "which": args.which, "pass": ok,
              "results": results})
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="embedmask",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", help="scene spec JSON file")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--split", default="train,val",
                   help="comma-separated split names; two splits share 80/20")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--out", help="output directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, e.g. train.lr=0.02")
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict instances for images")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--images", nargs="*", help="PPM image files")
    i.add_argument("--data", help="dataset directory (use with --split)")
    i.add_argument("--split", default="val")
    i.add_argument("--out", required=True)
    i.add_argument("--overlay", action="store_true",
                   help="write contour overlay PPMs")
    i.add_argument("--allow-hash-mismatch", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out", required=True)
    e.add_argument("--allow-hash-mismatch", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train/eval a config grid")
    a.add_argument("--grid", required=True, help="grid JSON file")
    a.add_argument("--config", help="base run config JSON")
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--out", required=True)
    a.add_argument("--threads", type=int)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--which", default="all")
    c.add_argument("--trials", type=int, default=20)
    c.add_argument("--model-trials", type=int, default=20,
                   help="trial cap for the model-composite checks")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
