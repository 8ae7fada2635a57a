"""Command line: generate, train, infer, eval, inspect."""
import argparse
import json
import logging
import os
import sys
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from primpoly import data as pdata
from primpoly import eval as peval
from primpoly import geom
from primpoly.model import ModelConfig
from primpoly.train import TrainConfig

log = logging.getLogger("primpoly")

HASH_KEY = "p2p:config_hash"


class InputError(ValueError):
    pass


@dataclass
class RunConfig:
    """One document holding every setting of a run.

    ``out`` and ``deterministic`` say where and how to run, not what; they are left out of the hash.
    """

    scene: pdata.SceneConfig = field(default_factory=pdata.SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    expansion: float = 1.1  # inference ROI ratio
    max_dets: int = peval.MAX_DETS
    deterministic: bool = False
    out: str = "runs/default"

    def to_dict(self):
        return {
            "scene": self.scene.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "expansion": self.expansion,
            "max_dets": self.max_dets,
            "deterministic": self.deterministic,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {"scene", "model", "train", "expansion", "max_dets", "deterministic", "out"}
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            scene=pdata.SceneConfig.from_dict(d.get("scene", {})),
            model=ModelConfig.from_dict(d.get("model", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            expansion=float(d.get("expansion", 1.1)),
            max_dets=int(d.get("max_dets", peval.MAX_DETS)),
            deterministic=bool(d.get("deterministic", False)),
            out=str(d.get("out", "runs/default")),
        )

    @classmethod
    def load(cls, path):
        import yaml

        if path is None:
            return cls()
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise InputError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)

    def hash(self):
        d = self.to_dict()
        d.pop("out")
        d.pop("deterministic")
        return pdata.config_hash(d)


def num_workers():
    raw = os.environ.get("P2P_NUM_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"P2P_NUM_WORKERS must be an integer, got {raw!r}")


def resolve_config(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.scene = pdata.SceneConfig.from_dict({**cfg.scene.to_dict(), "seed": args.seed})
        cfg.train.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _load_dataset(path, check_files=True):
    p = Path(path)
    if p.is_dir():
        p = p / "annotations.json"
    if not p.exists():
        raise InputError(f"dataset not found: {p}")
    return pdata.load_coco(p, check_files=check_files)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def _scene_chunk(args):
    cfg, start, stop = args
    return pdata.synthetic_samples(cfg, stop - start, start)


def cmd_generate(args):
    cfg = resolve_config(args)
    if args.count < 0:
        raise InputError("--count must be >= 0")
    workers = num_workers()
    if workers > 1 and args.count > 1:
        bounds = np.linspace(0, args.count, workers + 1).astype(int)
        jobs = [(cfg.scene, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ProcessPoolExecutor(workers) as ex:
            samples = [s for chunk in ex.map(_scene_chunk, jobs) for s in chunk]
    else:
        samples = pdata.synthetic_samples(cfg.scene, args.count)
    manifest = {**pdata.dataset_manifest(cfg.scene, args.count), "run_config_hash": cfg.hash()}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    pdata.save_dataset(out, samples, manifest, png_text={HASH_KEY: cfg.hash()})
    print(f"wrote {len(samples)} images to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args):
    import torch

    from primpoly import train as ptrain

    cfg = resolve_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    torch.set_num_threads(num_workers())
    if cfg.deterministic:
        ptrain.set_deterministic(cfg.train.seed)
    ds = _load_dataset(args.dataset)
    if len(ds) == 0:
        raise InputError(f"{args.dataset}: empty dataset")
    val = _load_dataset(args.val) if args.val else None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "run_config.json", {**cfg.to_dict(), "config_hash": cfg.hash()})
    model = ptrain.build_model(cfg.model, seed=cfg.train.seed)
    res = ptrain.fit(
        model, ds.samples, cfg.train, out, root=ds.root, val_samples=val.samples if val else None,
        resume=args.resume, manifest_hash=pdata.manifest_hash(ds.manifest), config_hash=cfg.hash(),
        max_steps=args.max_steps,
    )
    if not res.checkpoints:
        print("checkpoint already at the final epoch; nothing to do")
    else:
        print(f"wrote {len(res.checkpoints)} checkpoint(s); last {res.checkpoints[-1]}")
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def _image_samples(img_dir):
    files = sorted(Path(img_dir).glob("*.png"))
    return [pdata.Sample(i, f.name, 0, 0, []) for i, f in enumerate(files)], Path(img_dir)


def _read_boxes(path, samples):
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected an object mapping image id or file name to boxes")
    out = {}
    for s in samples:
        key = next((k for k in (str(s.image_id), s.file_name, Path(s.file_name).name) if k in doc), None)
        if key is None:
            raise InputError(f"{path}: no boxes for image {s.image_id} ({s.file_name})")
        boxes = doc[key]
        try:
            out[s.image_id] = [tuple(float(v) for v in b) for b in boxes]
        except (TypeError, ValueError) as exc:
            raise InputError(f"{path}: malformed boxes for image {s.image_id}") from exc
        if any(len(b) != 4 for b in out[s.image_id]):
            raise InputError(f"{path}: boxes for image {s.image_id} must have 4 values")
    return out


def _closed(ring):
    v = [[float(x), float(y)] for x, y in ring.vertices]
    return v + [v[0]]


def cmd_infer(args):
    import torch

    from primpoly import pipeline, train as ptrain

    cfg = resolve_config(args)
    torch.set_num_threads(num_workers())
    if cfg.deterministic:
        ptrain.set_deterministic(cfg.train.seed)
    model, _, meta = ptrain.load_checkpoint(args.checkpoint)
    run_hash = meta.get("config_hash", "")
    if args.dataset:
        ds = _load_dataset(args.dataset)
        samples, root = ds.samples, ds.root
    elif args.images:
        samples, root = _image_samples(args.images)
    else:
        raise InputError("one of --dataset or --images is required")
    if args.boxes == "gt":
        if not args.dataset:
            raise InputError("--boxes gt needs --dataset")
        boxes = None
    else:
        boxes = _read_boxes(args.boxes, samples)
    run = pipeline.run_inference(model, samples, boxes, root=root, expansion=cfg.expansion)
    names = {s.image_id: s.file_name for s in samples}
    features = []
    preds = []
    for r in run.results:
        if r.ring is None:
            continue
        score = min(max(float(r.score), 0.0), 1.0)
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [_closed(r.ring)]},
            "properties": {
                "image_id": int(r.image_id),
                "file_name": names[r.image_id],
                "score": score,
                "kind": model.cfg.kind,
                "orders": [int(o) for o in r.orders],
                "roi": [float(v) for v in r.box],
            },
        })
        preds.append(peval.InstancePrediction(r.image_id, r.ring, score, len(preds)))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    crs = "image pixels; x to the right, y down; no geo-referencing"
    _dump(out / "polygons.geojson", {
        "type": "FeatureCollection",
        "metadata": {"config_hash": run_hash, "checkpoint": Path(args.checkpoint).name, "coordinates": crs},
        "features": features,
    })
    _dump(out / "results.json", {"config_hash": run_hash, "results": peval.predictions_to_coco_results(preds)})
    summary = {
        "config_hash": run_hash,
        "images": len(samples),
        "buildings": len(run.results),
        "polygons": len(features),
        "rejected": run.rejected,
        "images_without_boxes": run.images_without_boxes,
    }
    _dump(out / "summary.json", summary)
    print(f"{len(features)} polygons, {run.rejected} rejected, "
          f"{len(run.images_without_boxes)} image(s) without boxes -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_predictions(paths):
    preds, hashes = [], set()
    for p in paths:
        doc = _read_json(p)
        if isinstance(doc, dict):
            hashes.add(doc.get("config_hash", ""))
        else:
            hashes.add("")
        try:
            preds.extend(peval.load_coco_results(doc))
        except (KeyError, TypeError, ValueError, geom.DegenerateRingError) as exc:
            raise InputError(f"{p}: malformed results ({exc})") from exc
    for i, p in enumerate(preds):
        if p.pred_id is None or len(paths) > 1:
            p.pred_id = i
    return preds, hashes


def cmd_eval(args):
    cfg = resolve_config(args)
    ds = _load_dataset(args.dataset, check_files=False)
    preds, hashes = _load_predictions(args.predictions)
    ds_hash = ds.manifest.get("run_config_hash")
    if ds_hash is not None:
        hashes.add(ds_hash)
    if len(hashes) > 1 and not args.force:
        raise InputError(f"inputs come from different configs {sorted(hashes)}; pass --force to evaluate anyway")
    known = {s.image_id for s in ds}
    stray = sorted({p.image_id for p in preds} - known)
    if stray:
        raise InputError(f"predictions refer to image ids not in the dataset: {stray[:10]}")
    gts, sizes = {}, {}
    for s in ds:
        if not (s.width and s.height):
            h, w = s.load_image(ds.root).shape[:2]
        else:
            h, w = s.height, s.width
        gts[s.image_id] = [a.ring for a in s.annotations]
        sizes[s.image_id] = (h, w)
    rep = peval.evaluate(preds, gts, sizes, max_dets=cfg.max_dets)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = sorted(hashes)[0] if len(hashes) == 1 else "mixed"
    _dump(out / "metrics.json", {**rep.to_dict(), "config_hash": tag, "predictions": len(preds)})
    rep.write_pr_csv(out / "pr_curves.csv", config_hash=tag)
    print(rep.table())
    return 0


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------


def _parse_roi(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise InputError(f"--roi must be x0,y0,x1,y1, got {text!r}") from exc
    if len(vals) != 4:
        raise InputError(f"--roi must be x0,y0,x1,y1, got {text!r}")
    return tuple(vals)


def _png(img, path, run_hash):
    from PIL.PngImagePlugin import PngInfo

    info = PngInfo()
    info.add_text(HASH_KEY, run_hash)
    img.save(path, pnginfo=info)


def cmd_inspect(args):
    import torch
    from matplotlib import colormaps
    from PIL import Image, ImageDraw

    from primpoly import train as ptrain
    from primpoly.model import image_tensor, infer_polygon, split_predictions

    cfg = resolve_config(args)
    torch.set_num_threads(num_workers())
    model, _, meta = ptrain.load_checkpoint(args.checkpoint)
    model.eval()
    run_hash = meta.get("config_hash", "")
    mcfg = model.cfg
    try:
        image = np.asarray(Image.open(args.image).convert("L"))[..., None]
    except OSError as exc:
        raise InputError(f"cannot read image {args.image}: {exc}") from exc
    h, w = image.shape[:2]
    x0, y0, x1, y1 = _parse_roi(args.roi)
    if not (x1 > x0 and y1 > y0) or x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise InputError(f"ROI {args.roi} is empty or outside the {w}x{h} image")
    roi = pdata.RoiSpec((x0, y0, x1, y1))
    with torch.no_grad():
        out = model(image_tensor(image), torch.tensor([roi.bbox], dtype=torch.float32), [0], need_weights=True)
    pred = split_predictions(out)[0]
    res = infer_polygon(pred, roi, mcfg.kind, mcfg.score_threshold)
    attn = out["attn"][-1][0].numpy()  # (N*n, side*side), head-averaged
    side = int(round(np.sqrt(attn.shape[1])))
    n = mcfg.points
    ranked = np.argsort(-pred.fg_prob, kind="mergesort")
    chosen = [int(j) for j in ranked[: args.top] if pred.fg_prob[j] >= mcfg.score_threshold] or [int(ranked[0])]

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    scale = args.scale
    ix0, iy0 = int(np.floor(max(x0, 0))), int(np.floor(max(y0, 0)))
    ix1, iy1 = int(np.ceil(min(x1, w))), int(np.ceil(min(y1, h)))
    crop = image[iy0:iy1, ix0:ix1, 0].astype(np.float64) / 255.0
    cw, ch = (ix1 - ix0) * scale, (iy1 - iy0) * scale
    crop_big = np.asarray(Image.fromarray((crop * 255).astype(np.uint8)).resize((cw, ch), Image.NEAREST)) / 255.0
    cmap = colormaps["inferno"]
    written = []
    for j in chosen:
        for k in range(n):
            a = attn[j * n + k].reshape(side, side)
            a = a / a.max() if a.max() > 0 else a
            heat = Image.fromarray((a * 255).astype(np.uint8)).resize(
                (int(round((x1 - x0) * scale)), int(round((y1 - y0) * scale))), Image.BILINEAR)
            # place the ROI-aligned heatmap on the clipped crop
            canvas = np.zeros((ch, cw))
            ox, oy = int(round((x0 - ix0) * scale)), int(round((y0 - iy0) * scale))
            hm = np.asarray(heat, dtype=np.float64) / 255.0
            ys, xs = slice(max(oy, 0), min(oy + hm.shape[0], ch)), slice(max(ox, 0), min(ox + hm.shape[1], cw))
            canvas[ys, xs] = hm[ys.start - oy : ys.stop - oy, xs.start - ox : xs.stop - ox]
            rgb = 0.45 * crop_big[..., None] + 0.55 * cmap(canvas)[..., :3]
            p = outdir / f"attn_prim{j:02d}_query{k}.png"
            _png(Image.fromarray((np.clip(rgb, 0, 1) * 255).astype(np.uint8)), p, run_hash)
            written.append(p.name)

    over = Image.fromarray((crop_big * 255).astype(np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(over)

    def to_canvas(pt):
        return ((pt[0] - ix0) * scale, (pt[1] - iy0) * scale)

    keep = np.nonzero(pred.fg_prob >= mcfg.score_threshold)[0]
    pts = roi.to_pixels(pred.coords[keep].reshape(-1, n, 2)) if len(keep) else np.zeros((0, n, 2))
    if res.ring is not None:
        draw.line([to_canvas(p) for p in res.ring.vertices] + [to_canvas(res.ring.vertices[0])],
                  fill=(255, 200, 0), width=2)
    for prim in pts:
        for k, p in enumerate(prim):
            cx, cy = to_canvas(p)
            r = 3 if (n == 3 and k == 1) or n == 1 else 2
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=(0, 220, 255))
    _png(over, outdir / "overlay.png", run_hash)
    written.append("overlay.png")
    _dump(outdir / "inspect.json", {
        "config_hash": run_hash,
        "roi": list(roi.bbox),
        "primitives": chosen,
        "fg_prob": [float(pred.fg_prob[j]) for j in chosen],
        "accepted": res.ring is not None,
        "reason": res.reason,
        "files": written,
    })
    print(f"wrote {len(written)} image(s) to {outdir}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="run configuration (YAML or JSON)")
    shared.add_argument("--seed", type=int, help="overrides the scene and training seeds")
    shared.add_argument("--deterministic", action="store_true", help="deterministic kernels and seeding")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="primpoly", description="Primitive-based building polygon extraction.")
    sub = ap.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", parents=[shared], help="write a synthetic dataset")
    g.add_argument("--count", type=int, required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", parents=[shared], help="train a model on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--val", help="validation dataset for periodic metrics")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", parents=[shared], help="polygons for given boxes")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset")
    i.add_argument("--images", help="directory of PNG images (needs a box file)")
    i.add_argument("--boxes", default="gt", help="'gt' or a JSON file mapping image id/file name to boxes")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", parents=[shared], help="COCO metrics for predictions")
    e.add_argument("--predictions", nargs="+", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--force", action="store_true", help="accept inputs from different configs")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("inspect", parents=[shared], help="attention heatmaps and overlay for one ROI")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--roi", required=True, help="x0,y0,x1,y1 in pixels")
    s.add_argument("--top", type=int, default=4, help="primitives to render")
    s.add_argument("--scale", type=int, default=4, help="render upsampling")
    s.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, KeyError, FloatingPointError, zipfile.BadZipFile) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
