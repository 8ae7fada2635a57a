import json
from pathlib import Path

import numpy as np
import pytest

from primpoly import eval as peval
from primpoly import geom
from primpoly.eval import EvalInputError, InstancePrediction, evaluate, mask_iou, rasterize

from coco_case import build_case, reference_metrics

SNAPSHOT = Path(__file__).parent / "fixtures" / "coco_snapshot.json"


def square(x0, y0, s):
    return geom.PolygonRing(np.array([[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]], dtype=float))


def star(cx, cy, r_out, r_in, k=7):
    a = np.arange(2 * k) * np.pi / k
    r = np.where(np.arange(2 * k) % 2 == 0, r_out, r_in)
    return geom.PolygonRing(np.stack([cx + r * np.cos(a), cy + r * np.sin(a)], 1))


# --- rasterisation ---------------------------------------------------------------


def test_rasterize_square():
    m = rasterize(square(0, 0, 10), 20, 20)
    assert m.sum() == 100 and m[:10, :10].all()


def test_rasterize_outside():
    assert rasterize(square(50, 50, 10), 20, 20).sum() == 0


@pytest.mark.parametrize("seed", range(10))
def test_rasterize_area(seed):
    rng = np.random.default_rng(seed)
    ring = star(64, 64, rng.uniform(25, 55), rng.uniform(12, 24), int(rng.integers(3, 9)))
    area = abs(geom.signed_area(ring))
    assert area >= 400
    assert abs(rasterize(ring, 128, 128).sum() - area) <= 0.02 * area


# --- mask IoU --------------------------------------------------------------------


def test_mask_iou_examples():
    a = rasterize(square(2, 2, 10), 30, 30)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, rasterize(square(15, 15, 10), 30, 30)) == 0.0
    assert mask_iou(a, rasterize(square(7, 7, 10), 30, 30)) == pytest.approx(25 / 175, abs=1e-12)
    z = np.zeros((4, 4), np.uint8)
    assert mask_iou(z, z) == 0.0


def test_mask_iou_shape_mismatch():
    with pytest.raises(ValueError):
        mask_iou(np.zeros((3, 3)), np.zeros((3, 4)))


# --- evaluate --------------------------------------------------------------------


def gt_set():
    gts = {1: [square(5, 5, 20), square(40, 40, 15)], 2: [square(10, 30, 25)]}
    sizes = {1: (64, 64), 2: (64, 64)}
    return gts, sizes


def perfect(gts, score=1.0):
    return [InstancePrediction(i, r, score) for i, rings in gts.items() for r in rings]


def test_perfect_predictions():
    gts, sizes = gt_set()
    rep = evaluate(perfect(gts), gts, sizes)
    assert rep.mAP == rep.AP50 == rep.AP75 == rep.AR == 1.0


def test_empty_predictions():
    gts, sizes = gt_set()
    rep = evaluate([], gts, sizes)
    assert rep.mAP == rep.AP50 == rep.AP75 == rep.AR == 0.0


def test_duplicate_ids_rejected():
    gts, sizes = gt_set()
    preds = perfect(gts)
    preds[0].pred_id = preds[1].pred_id = 3
    with pytest.raises(EvalInputError):
        evaluate(preds, gts, sizes)


def test_unknown_image_rejected():
    gts, sizes = gt_set()
    with pytest.raises(EvalInputError):
        evaluate([InstancePrediction(9, square(0, 0, 5), 0.5)], gts, sizes)


def test_score_range():
    with pytest.raises(EvalInputError):
        InstancePrediction(1, square(0, 0, 5), 1.5)


def test_permutation_invariance():
    preds, gts, sizes = build_case(seed=7, n_images=8)
    base = evaluate(preds, gts, sizes)
    rng = np.random.default_rng(0)
    for _ in range(3):
        perm = rng.permutation(len(preds))
        rep = evaluate([preds[i] for i in perm], gts, sizes)
        assert rep.ap_per_threshold == base.ap_per_threshold
        assert rep.AR == base.AR


def test_low_score_false_positive_never_helps():
    preds, gts, sizes = build_case(seed=8, n_images=8)
    base = evaluate(preds, gts, sizes)
    iid = sorted(gts)[0]
    # a square in an empty corner cannot overlap the centre-placed buildings
    fp = InstancePrediction(iid, square(0, 0, 2), 0.0)
    rep = evaluate(preds + [fp], gts, sizes)
    for a, b in zip(rep.ap_per_threshold, base.ap_per_threshold):
        assert a <= b


def test_duplicated_perfect_set_keeps_ap50():
    gts, sizes = gt_set()
    rep = evaluate(perfect(gts, 0.9) + perfect(gts, 0.8), gts, sizes)
    assert rep.AP50 == 1.0


def test_precision_envelope_monotone():
    preds, gts, sizes = build_case(seed=9, n_images=8)
    for curve in evaluate(preds, gts, sizes).pr_curves:
        assert all(a >= b for a, b in zip(curve, curve[1:]))


def test_matches_reference_snapshot():
    snap = json.loads(SNAPSHOT.read_text())
    rep = evaluate(*build_case())
    assert np.abs(np.array(rep.ap_per_threshold) - snap["ap_per_threshold"]).max() < 1e-6
    assert np.abs(np.array(rep.recall_per_threshold) - snap["recall_per_threshold"]).max() < 1e-6
    assert rep.mAP == pytest.approx(np.mean(snap["ap_per_threshold"]), abs=1e-6)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_matches_reference_live(seed):
    pytest.importorskip("pycocotools")
    case = build_case(seed=seed, n_images=12)
    ref = reference_metrics(*case)
    rep = evaluate(*case)
    assert np.abs(np.array(rep.ap_per_threshold) - ref["ap_per_threshold"]).max() < 1e-6
    assert np.abs(np.array(rep.recall_per_threshold) - ref["recall_per_threshold"]).max() < 1e-6


# --- serialisation ---------------------------------------------------------------


def test_results_round_trip(tmp_path):
    preds, gts, sizes = build_case(seed=4, n_images=5)
    p = tmp_path / "res.json"
    p.write_text(json.dumps(peval.predictions_to_coco_results(preds)))
    back = peval.load_coco_results(p)
    assert evaluate(back, gts, sizes).ap_per_threshold == evaluate(preds, gts, sizes).ap_per_threshold


def test_report_outputs(tmp_path):
    gts, sizes = gt_set()
    rep = evaluate(perfect(gts), gts, sizes)
    rep.write_json(tmp_path / "m.json")
    rep.write_pr_csv(tmp_path / "pr.csv")
    assert json.loads((tmp_path / "m.json").read_text())["AR@100"] == 1.0
    assert len((tmp_path / "pr.csv").read_text().splitlines()) == 1 + 10 * 101
    assert "AR@100" in rep.table()
