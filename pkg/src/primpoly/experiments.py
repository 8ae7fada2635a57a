"""Scaled-down training experiments with recorded, fingerprinted results.

    python -m primpoly.experiments overfit --out results/
    python -m primpoly.experiments generalize --out results/
    python -m primpoly.experiments kinds --out results/
"""
import argparse
import hashlib
import json
import math
import platform
import time
from pathlib import Path

import torch

from primpoly import data as pdata
from primpoly import pipeline
from primpoly import train as ptrain
from primpoly.model import ModelConfig

# modules whose source determines experiment outcomes
_RESULT_MODULES = ("geom", "kernels", "data", "model", "train", "eval", "pipeline", "experiments")


def code_fingerprint():
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in _RESULT_MODULES:
        h.update(name.encode())
        h.update((root / f"{name}.py").read_bytes())
    return h.hexdigest()


def _train(samples, mcfg, tcfg, out_dir, steps):
    ptrain.set_deterministic(tcfg.seed)
    model = ptrain.build_model(mcfg, seed=tcfg.seed)
    per_epoch = math.ceil(len(samples) / tcfg.batch_size)
    tcfg.epochs = math.ceil(steps / per_epoch)
    tcfg.ckpt_every = tcfg.epochs
    t0 = time.time()
    res = ptrain.fit(model, samples, tcfg, out_dir, max_steps=steps, log_every=200)
    return res.model, time.time() - t0, len(res.history)


def _metrics(model, samples):
    report, run = pipeline.evaluate_samples(model, samples)
    err, compared, same = pipeline.matched_vertex_error(run, samples)
    return {
        "mAP": report.mAP,
        "AP50": report.AP50,
        "AP75": report.AP75,
        "AR@100": report.AR,
        "buildings": len(run.results),
        "rejected": run.rejected,
        "vertex_error_px": err,
        "vertex_error_rings": compared,
        "rings_with_gt_vertex_count": same,
    }


def _record(name, body):
    return {
        "experiment": name,
        "code_fingerprint": code_fingerprint(),
        "torch": torch.__version__,
        "python": platform.python_version(),
        **body,
    }


def overfit(out_dir, n_images=64, steps=8000, lr=1e-4, seed=0):
    """Train on a small scene set and evaluate on the same scenes (GT boxes)."""
    scene = pdata.SceneConfig(seed=seed)
    samples = pdata.synthetic_samples(scene, n_images)
    mcfg = ModelConfig(kind="corner")
    tcfg = ptrain.TrainConfig(lr=lr, seed=seed)
    model, wall, done = _train(samples, mcfg, tcfg, Path(out_dir) / "overfit_run", steps)
    return _record("overfit", {
        "scene_config": scene.to_dict(), "model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(),
        "images": n_images, "steps": done, "train_seconds": wall, "train_metrics": _metrics(model, samples),
    })


def generalize(out_dir, n_train=2000, n_test=200, steps=8000, lr=1e-4, lr_drop_step=6000, seed=0):
    """Train on one scene range and evaluate on a disjoint held-out range."""
    scene = pdata.SceneConfig(seed=seed)
    train_set = pdata.synthetic_samples(scene, n_train)
    test_set = pdata.synthetic_samples(scene, n_test, start=n_train)
    mcfg = ModelConfig(kind="corner")
    per_epoch = math.ceil(n_train / 4)
    tcfg = ptrain.TrainConfig(lr=lr, seed=seed, lr_drop_epoch=lr_drop_step // per_epoch)
    model, wall, done = _train(train_set, mcfg, tcfg, Path(out_dir) / "generalize_run", steps)
    return _record("generalize", {
        "scene_config": scene.to_dict(), "model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(),
        "train_images": n_train, "test_images": n_test, "steps": done, "train_seconds": wall,
        "test_metrics": _metrics(model, test_set),
    })


def kinds(out_dir, n_train=1000, n_test=200, steps=6000, lr=1e-4, occlusion=0.6, seed=0,
          kind_list=("corner", "line", "vertex")):
    """Same data, seed and step budget for each primitive kind on occlusion-heavy scenes."""
    scene = pdata.SceneConfig(seed=seed, occlusion_rate=occlusion)
    train_set = pdata.synthetic_samples(scene, n_train)
    test_set = pdata.synthetic_samples(scene, n_test, start=n_train)
    per_kind = {}
    for kind in kind_list:
        mcfg = ModelConfig(kind=kind)
        tcfg = ptrain.TrainConfig(lr=lr, seed=seed)
        model, wall, done = _train(train_set, mcfg, tcfg, Path(out_dir) / f"kinds_{kind}_run", steps)
        per_kind[kind] = {"model_config": mcfg.to_dict(), "train_config": tcfg.to_dict(), "steps": done,
                          "train_seconds": wall, "test_metrics": _metrics(model, test_set)}
    return _record("kinds", {
        "scene_config": scene.to_dict(), "train_images": n_train, "test_images": n_test, "kinds": per_kind,
    })


def main(argv=None):
    ap = argparse.ArgumentParser(prog="primpoly.experiments")
    ap.add_argument("name", choices=["overfit", "generalize", "kinds"])
    ap.add_argument("--out", default="results")
    ap.add_argument("--steps", type=int)
    args = ap.parse_args(argv)
    fn = {"overfit": overfit, "generalize": generalize, "kinds": kinds}[args.name]
    kw = {"steps": args.steps} if args.steps else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = fn(out / "runs", **kw)
    (out / f"{args.name}.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    print(json.dumps(rec, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
