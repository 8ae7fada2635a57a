"""Shared 20-image jittered-prediction case for the reference-evaluator comparison."""
import numpy as np

from primpoly import data, eval as peval, geom

SIZE = 96


def build_case(seed=2024, n_images=20):
    cfg = data.SceneConfig(image_size=SIZE, buildings_per_image=(1, 3), seed=seed)
    samples = data.synthetic_samples(cfg, n_images)
    rng = np.random.default_rng(seed)
    gts, sizes, preds = {}, {}, []
    for s in samples:
        gts[s.image_id] = [a.ring for a in s.annotations]
        sizes[s.image_id] = (SIZE, SIZE)
        for a in s.annotations:
            if rng.random() < 0.15:
                continue  # missed building
            v = a.ring.vertices + rng.normal(0, rng.uniform(0.3, 3.0), a.ring.vertices.shape)
            preds.append(peval.InstancePrediction(s.image_id, geom.PolygonRing(v), float(rng.uniform(0.05, 1.0))))
        if rng.random() < 0.4:
            # false positive: a random square
            x, y = rng.uniform(5, SIZE - 25, 2)
            sq = geom.PolygonRing(np.array([[x, y], [x + 15, y], [x + 15, y + 15], [x, y + 15]]))
            preds.append(peval.InstancePrediction(s.image_id, sq, float(rng.uniform(0.05, 1.0))))
    for i, p in enumerate(preds):
        p.pred_id = i
    return preds, gts, sizes


def reference_metrics(preds, gts, sizes):
    """Run pycocotools on RLEs of our own rasterised masks."""
    from pycocotools import mask as mask_utils
    from pycocotools.coco import COCO
    from pycocotools.cocoeval import COCOeval

    def rle(ring, h, w):
        m = np.asfortranarray(peval.rasterize(ring, h, w))
        r = mask_utils.encode(m)
        r["counts"] = r["counts"].decode()
        return r, int(m.sum())

    images, anns = [], []
    for iid in sorted(gts):
        h, w = sizes[iid]
        images.append({"id": iid, "height": h, "width": w})
        for ring in gts[iid]:
            seg, area = rle(ring, h, w)
            bbox = list(geom.bounds(ring))
            anns.append({"id": len(anns) + 1, "image_id": iid, "category_id": 1, "segmentation": seg,
                         "area": area, "iscrowd": 0, "bbox": [bbox[0], bbox[1], bbox[2] - bbox[0], bbox[3] - bbox[1]]})
    gt = COCO()
    gt.dataset = {"images": images, "annotations": anns, "categories": [{"id": 1, "name": "building"}]}
    gt.createIndex()
    res = []
    for p in preds:
        h, w = sizes[p.image_id]
        seg, _ = rle(p.ring, h, w)
        res.append({"image_id": p.image_id, "category_id": 1, "segmentation": seg, "score": p.score})
    dt = gt.loadRes(res)
    ev = COCOeval(gt, dt, "segm")
    ev.params.maxDets = [1, 10, 100]
    ev.evaluate()
    ev.accumulate()
    prec = ev.eval["precision"][:, :, 0, 0, 2]  # (T, R) area=all, maxDets=100
    recall = ev.eval["recall"][:, 0, 0, 2]
    return {
        "ap_per_threshold": [float(np.mean(p)) for p in prec],
        "recall_per_threshold": [float(r) for r in recall],
    }
