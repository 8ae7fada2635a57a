"""Dataset-level inference: boxes in, polygons and metrics out."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from primpoly import data as pdata
from primpoly import eval as peval
from primpoly.model import image_tensor, infer_polygon, split_predictions


@dataclass
class BuildingResult:
    image_id: int
    box: tuple
    ring: Optional[object]
    score: float
    orders: List[int]
    reason: str = ""


@dataclass
class InferenceRun:
    results: List[BuildingResult]
    rejected: int = 0
    images_without_boxes: List[int] = field(default_factory=list)

    def predictions(self):
        out = []
        for r in self.results:
            if r.ring is not None:
                out.append(peval.InstancePrediction(r.image_id, r.ring, min(max(r.score, 0.0), 1.0), len(out)))
        return out


@torch.no_grad()
def predict_image(model, image, boxes, expansion=1.1):
    """Polygons for the given pixel boxes of one image (inference-mode ROI expansion)."""
    cfg = model.cfg
    model.eval()
    h, w = image.shape[:2]
    rois = [pdata.make_roi(b, expansion, image_size=(w, h)) for b in boxes]
    if not rois:
        return []
    dtype = next(model.parameters()).dtype
    out = model(image_tensor(image[None], dtype), torch.tensor([r.bbox for r in rois], dtype=dtype),
                np.zeros(len(rois), dtype=np.int64))
    preds = split_predictions(out)
    return [(roi, p, infer_polygon(p, roi, cfg.kind, cfg.score_threshold)) for roi, p in zip(rois, preds)]


def run_inference(model, samples, boxes: Optional[Dict[int, list]] = None, root=None, expansion=1.1):
    """Predict every sample. ``boxes`` maps image id -> pixel boxes; default is the GT boxes."""
    results = []
    rejected = 0
    empty = []
    for s in samples:
        img = s.load_image(root)
        bxs = [a.bbox for a in s.annotations] if boxes is None else boxes.get(s.image_id, [])
        if not bxs:
            empty.append(s.image_id)
        for roi, _, res in predict_image(model, img, bxs, expansion):
            if res.ring is None:
                rejected += 1
            results.append(BuildingResult(s.image_id, roi.bbox, res.ring, res.score, res.orders, res.reason))
    return InferenceRun(results, rejected, empty)


def gt_tables(samples, root=None):
    gts, sizes = {}, {}
    for s in samples:
        h, w = (s.height, s.width) if s.height and s.width else s.load_image(root).shape[:2]
        gts[s.image_id] = [a.ring for a in s.annotations]
        sizes[s.image_id] = (h, w)
    return gts, sizes


def evaluate_samples(model, samples, root=None, boxes=None):
    run = run_inference(model, samples, boxes, root)
    gts, sizes = gt_tables(samples, root)
    return peval.evaluate(run.predictions(), gts, sizes), run


def ring_vertex_error(pred, gt):
    """Mean vertex distance (px): best cyclic pairing for equal counts, else symmetric nearest-vertex."""
    pv, gv = pred.vertices, gt.vertices
    if len(pv) == len(gv):
        return min(float(np.mean(np.hypot(*(np.roll(pv, -k, axis=0) - gv).T))) for k in range(len(gv)))
    d = np.hypot(pv[:, None, 0] - gv[None, :, 0], pv[:, None, 1] - gv[None, :, 1])
    return float((d.min(0).sum() + d.min(1).sum()) / (len(pv) + len(gv)))


def matched_vertex_error(run, samples):
    """Mean vertex error (px) over accepted polygons, each paired with the GT whose box centre is nearest.

    Returns (mean error, rings compared, rings with the GT vertex count).
    """
    gt_by_image = {s.image_id: [a for a in s.annotations] for s in samples}
    errs, same = [], 0
    for r in run.results:
        if r.ring is None or not gt_by_image.get(r.image_id):
            continue
        cx, cy = (r.box[0] + r.box[2]) / 2, (r.box[1] + r.box[3]) / 2
        ann = min(gt_by_image[r.image_id],
                  key=lambda a: abs((a.bbox[0] + a.bbox[2]) / 2 - cx) + abs((a.bbox[1] + a.bbox[3]) / 2 - cy))
        same += len(ann.ring) == len(r.ring)
        errs.append(ring_vertex_error(r.ring, ann.ring))
    return (float(np.mean(errs)) if errs else float("inf")), len(errs), same
