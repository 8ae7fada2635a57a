"""Mask rasterisation and COCO-style instance AP/AR."""
import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from primpoly import geom
from primpoly.kernels import fill_polygon, pairwise_mask_iou

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


class EvalInputError(ValueError):
    pass


@dataclass
class InstancePrediction:
    image_id: int
    ring: geom.PolygonRing
    score: float
    pred_id: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise EvalInputError(f"score {self.score} outside [0, 1]")


@dataclass
class MetricsReport:
    mAP: float
    AP50: float
    AP75: float
    AR: float
    ap_per_threshold: List[float]
    recall_per_threshold: List[float]
    thresholds: List[float]
    # precision sampled at RECALL_POINTS, one row per threshold
    pr_curves: List[List[float]] = field(repr=False, default_factory=list)

    def to_dict(self):
        return {
            "mAP": self.mAP,
            "AP50": self.AP50,
            "AP75": self.AP75,
            "AR@100": self.AR,
            "thresholds": self.thresholds,
            "ap_per_threshold": self.ap_per_threshold,
            "recall_per_threshold": self.recall_per_threshold,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_pr_csv(self, path, config_hash=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            extra = [config_hash] if config_hash is not None else []
            w.writerow(["iou_threshold", "recall", "precision"] + (["config_hash"] if extra else []))
            for t, curve in zip(self.thresholds, self.pr_curves):
                for r, p in zip(RECALL_POINTS, curve):
                    w.writerow([f"{t:.2f}", f"{r:.2f}", repr(float(p))] + extra)

    def table(self):
        return (
            f"{'mAP':>7} {'AP50':>7} {'AP75':>7} {'AR@100':>7}\n"
            f"{self.mAP:7.3f} {self.AP50:7.3f} {self.AP75:7.3f} {self.AR:7.3f}"
        )


def rasterize(ring, height, width):
    """Even-odd fill sampled at pixel centres; returns a (height, width) uint8 mask."""
    v = ring.vertices if isinstance(ring, geom.PolygonRing) else np.asarray(ring, dtype=np.float64)
    return fill_polygon(np.ascontiguousarray(v[:, 0]), np.ascontiguousarray(v[:, 1]), int(height), int(width))


def mask_iou(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return float(pairwise_mask_iou(a[None], b[None])[0, 0])


def _match_image(ious, thresholds):
    """Greedy COCO matching. ``ious`` is (D, G) with detections sorted by score.

    Returns a (T, D) bool array of true positives.
    """
    d, g = ious.shape
    tp = np.zeros((len(thresholds), d), dtype=bool)
    for ti, t in enumerate(thresholds):
        taken = np.zeros(g, dtype=bool)
        for di in range(d):
            best = min(t, 1 - 1e-10)
            m = -1
            for gi in range(g):
                if taken[gi]:
                    continue
                if ious[di, gi] < best:
                    continue
                best = ious[di, gi]
                m = gi
            if m >= 0:
                taken[m] = True
                tp[ti, di] = True
    return tp


def evaluate(predictions: Sequence[InstancePrediction], gts: Dict[int, Sequence[geom.PolygonRing]], image_sizes,
             iou_thresholds=IOU_THRESHOLDS, max_dets=MAX_DETS):
    """COCO instance AP/AR on rasterised masks.

    ``gts`` maps image id -> GT rings, ``image_sizes`` maps image id -> (height, width).
    Every image id in ``gts`` is evaluated; predictions for unknown ids are an error.
    """
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    ids = [p.pred_id for p in predictions if p.pred_id is not None]
    if len(ids) != len(set(ids)):
        raise EvalInputError("duplicate prediction ids")
    by_image: Dict[int, list] = {}
    for i, p in enumerate(predictions):
        if p.image_id not in gts:
            raise EvalInputError(f"prediction for unknown image id {p.image_id}")
        by_image.setdefault(p.image_id, []).append((i, p))

    scores_all, tp_all = [], []
    n_gt = 0
    for iid in sorted(gts):
        h, w = image_sizes[iid]
        g_rings = list(gts[iid])
        n_gt += len(g_rings)
        dets = by_image.get(iid, [])
        if not dets:
            continue
        # stable sort by descending score; the original index breaks ties
        dets = sorted(dets, key=lambda ip: (-ip[1].score, ip[0]))[:max_dets]
        d_masks = np.stack([rasterize(p.ring, h, w) for _, p in dets])
        if g_rings:
            g_masks = np.stack([rasterize(r, h, w) for r in g_rings])
            ious = pairwise_mask_iou(d_masks, g_masks)
        else:
            ious = np.zeros((len(dets), 0))
        tp_all.append(_match_image(ious, thresholds))
        scores_all.append(np.array([p.score for _, p in dets]))

    t = len(thresholds)
    ap = np.zeros(t)
    rec = np.zeros(t)
    curves = np.zeros((t, len(RECALL_POINTS)))
    if n_gt and scores_all:
        scores = np.concatenate(scores_all)
        tps = np.concatenate(tp_all, axis=1)
        order = np.argsort(-scores, kind="mergesort")
        tps = tps[:, order]
        fps = ~tps
        tp_sum = np.cumsum(tps, axis=1).astype(np.float64)
        fp_sum = np.cumsum(fps, axis=1).astype(np.float64)
        for ti in range(t):
            tp_c, fp_c = tp_sum[ti], fp_sum[ti]
            recall = tp_c / n_gt
            precision = tp_c / (fp_c + tp_c + np.spacing(1))
            rec[ti] = recall[-1] if len(recall) else 0.0
            # monotone envelope from the right
            precision = np.maximum.accumulate(precision[::-1])[::-1]
            idx = np.searchsorted(recall, RECALL_POINTS, side="left")
            q = np.zeros(len(RECALL_POINTS))
            ok = idx < len(precision)
            q[ok] = precision[idx[ok]]
            curves[ti] = q
            ap[ti] = q.mean()

    def at(th):
        hit = np.nonzero(np.isclose(thresholds, th))[0]
        return float(ap[hit[0]]) if hit.size else float("nan")

    return MetricsReport(
        mAP=float(ap.mean()) if t else 0.0,
        AP50=at(0.5),
        AP75=at(0.75),
        AR=float(rec.mean()) if t else 0.0,
        ap_per_threshold=[float(x) for x in ap],
        recall_per_threshold=[float(x) for x in rec],
        thresholds=[float(x) for x in thresholds],
        pr_curves=curves.tolist(),
    )


# ---------------------------------------------------------------------------
# COCO results JSON
# ---------------------------------------------------------------------------


def predictions_to_coco_results(preds):
    return [
        {
            "image_id": int(p.image_id),
            "category_id": 1,
            "segmentation": [[float(c) for c in p.ring.vertices.reshape(-1)]],
            "score": float(p.score),
            **({"id": int(p.pred_id)} if p.pred_id is not None else {}),
        }
        for p in preds
    ]


def load_coco_results(path_or_list):
    doc = path_or_list
    if not isinstance(doc, (list, dict)):
        with open(path_or_list) as fh:
            doc = json.load(fh)
    if isinstance(doc, dict):
        doc = doc.get("results", doc.get("annotations", []))
    out = []
    for k, r in enumerate(doc):
        ring = geom.normalize_ring(np.asarray(r["segmentation"][0], dtype=np.float64).reshape(-1, 2))
        out.append(InstancePrediction(int(r["image_id"]), ring, float(r["score"]), r.get("id")))
    return out
