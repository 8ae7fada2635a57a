import itertools
import logging
import math
import zipfile

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from primpoly import data
from primpoly.model import ModelConfig, image_tensor
from primpoly.train import (
    CKPT_VERSION,
    LabelError,
    NumericError,
    ResumeError,
    TargetBuilder,
    TrainConfig,
    batch_loss,
    build_model,
    fit,
    hungarian,
    load_checkpoint,
    make_batch,
    make_optimizer,
    match_batch,
    matching_cost,
    order_loss,
    read_checkpoint_meta,
    save_checkpoint,
    seg_loss,
    total_loss,
    train_step,
)

TINY = ModelConfig(kind="corner", channels=8, queries=4, roi_size=8, heads=2, order_layers=1)
SMALL = ModelConfig(kind="corner", channels=16, queries=12, roi_size=16, heads=2, order_layers=1)


# --- matching ------------------------------------------------------------------


def test_matching_cost_example():
    c = matching_cost([[0.2, 0.2]], [0.8], [[0.1, 0.3]], 5.0, 1.0)
    assert c[0, 0] == pytest.approx(0.2, abs=1e-12)


def test_matching_cost_perfect():
    assert matching_cost([[0.4, 0.6]], [1.0], [[0.4, 0.6]])[0, 0] == -1.0


def test_matching_cost_recomputation():
    rng = np.random.default_rng(0)
    p, t, s = rng.random((3, 6)), rng.random((2, 6)), rng.random(3)
    c = matching_cost(p, s, t, 5.0, 1.0)
    for i in range(3):
        for j in range(2):
            assert c[i, j] == pytest.approx(5.0 * sum(abs(p[i, k] - t[j, k]) for k in range(6)) - s[i], abs=1e-12)


def test_matching_cost_width_mismatch():
    with pytest.raises(ValueError):
        matching_cost(np.zeros((3, 4)), np.zeros(3), np.zeros((2, 6)))


def brute_min(cost):
    n, m = cost.shape
    perms = np.array(list(itertools.permutations(range(n), m)))  # prediction row per target
    return cost[perms, np.arange(m)].sum(1).min()


def matched_cost(cost, res):
    return cost[res.pred_index, res.target_index].sum()


def test_hungarian_identity():
    res = hungarian(1.0 - np.eye(5))
    assert res.sigma.tolist() == list(range(5))


def test_hungarian_6x6_brute():
    rng = np.random.default_rng(1)
    cost = rng.normal(size=(6, 6))
    res = hungarian(cost)
    assert matched_cost(cost, res) == pytest.approx(brute_min(cost), abs=1e-12)
    assert sorted(res.sigma.tolist()) == list(range(6))


def test_hungarian_cardinality():
    res = hungarian(np.random.default_rng(2).random((5, 2)))
    assert res.matched.sum() == 2
    assert sorted(res.sigma.tolist()) == list(range(5))


def test_hungarian_randomized_suite():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(1, n + 1))
        cost = rng.normal(size=(n, m))
        if rng.random() < 0.3:
            cost = np.round(cost * 2)  # ties
        res = hungarian(cost)
        assert matched_cost(cost, res) == brute_min(cost) or abs(matched_cost(cost, res) - brute_min(cost)) < 1e-12


def test_hungarian_no_improving_swap():
    rng = np.random.default_rng(4)
    for _ in range(50):
        cost = rng.random((7, 5))
        res = hungarian(cost)
        col_of = {int(r): int(t) for r, t in zip(res.pred_index, res.target_index)}
        total = matched_cost(cost, res)
        for a, b in itertools.combinations(range(7), 2):
            # swap the targets (or matched/unmatched status) of rows a and b
            ta, tb = col_of.get(a), col_of.get(b)
            if ta is None and tb is None:
                continue
            alt = total
            if ta is not None:
                alt += cost[b, ta] - cost[a, ta]
            if tb is not None:
                alt += cost[a, tb] - cost[b, tb]
            assert alt >= total - 1e-12


def test_hungarian_truncates_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="primpoly.train"):
        res = hungarian(np.random.default_rng(0).random((2, 3)))
    assert res.n_targets == 2 and res.matched.all()
    assert "truncating" in caplog.text


def test_hungarian_non_finite():
    with pytest.raises(NumericError):
        hungarian(np.array([[0.0, np.nan], [1.0, 2.0]]))


def test_hungarian_deterministic_ties():
    a = hungarian(np.zeros((4, 3)))
    b = hungarian(np.zeros((4, 3)))
    assert np.array_equal(a.sigma, b.sigma)


# --- losses --------------------------------------------------------------------


def test_seg_loss_perfect_and_uniform():
    t = torch.rand(3, 6, dtype=torch.float64)
    coords = torch.cat([t, torch.rand(2, 6, dtype=torch.float64)])
    res = hungarian(matching_cost(coords.numpy(), np.ones(5), t.numpy()))
    reg, cls = seg_loss(coords, torch.zeros(5, 2, dtype=torch.float64), t.numpy(), res)
    assert float(reg) == 0.0
    assert float(cls) == pytest.approx(math.log(2), abs=1e-12)


def test_seg_loss_recomputation():
    rng = np.random.default_rng(5)
    coords = torch.tensor(rng.random((6, 4)))
    logits = torch.tensor(rng.normal(size=(6, 2)))
    tgt = rng.random((3, 4))
    res = hungarian(rng.random((6, 3)))
    reg, cls = seg_loss(coords, logits, tgt, res)
    sig = res.sigma
    want_reg = sum(np.abs(coords.numpy()[i] - tgt[sig[i]]).sum() for i in range(6) if sig[i] < 3) / 6
    lg = logits.numpy()
    lse = np.log(np.exp(lg).sum(1))
    want_cls = np.mean([lse[i] - lg[i, int(sig[i] < 3)] for i in range(6)])
    assert float(reg) == pytest.approx(want_reg, abs=1e-12)
    assert float(cls) == pytest.approx(want_cls, abs=1e-12)


def test_order_loss_examples():
    res = hungarian(np.random.default_rng(0).random((5, 3)))
    labels = np.array([3, 17, 30])
    assert float(order_loss(torch.zeros(5, 36, dtype=torch.float64), labels, res)) == pytest.approx(math.log(36), abs=1e-12)
    sharp = torch.full((5, 36), -50.0, dtype=torch.float64)
    for r, t in zip(res.pred_index, res.target_index):
        sharp[r, labels[t]] = 50.0
    assert float(order_loss(sharp, labels, res)) < 1e-12


def test_order_loss_recomputation_and_divisor():
    rng = np.random.default_rng(6)
    logits = torch.tensor(rng.normal(size=(6, 36)))
    labels = rng.integers(0, 36, 4)
    res = hungarian(rng.random((6, 4)))
    lg = logits.numpy()
    lse = np.log(np.exp(lg).sum(1))
    ce = [lse[r] - lg[r, labels[t]] for r, t in zip(res.pred_index, res.target_index)]
    assert float(order_loss(logits, labels, res)) == pytest.approx(np.mean(ce), abs=1e-12)
    assert float(order_loss(logits, labels, res, "all")) == pytest.approx(np.sum(ce) / 6, abs=1e-12)


def test_order_loss_bad_label():
    res = hungarian(np.zeros((3, 1)))
    with pytest.raises(LabelError):
        order_loss(torch.zeros(3, 36), np.array([36]), res)


def test_total_loss_examples():
    cfg = TrainConfig()
    assert total_loss(0.1, 0.2, 1.0, cfg) == pytest.approx(0.8, abs=1e-12)
    assert total_loss(0.0, 0.0, 0.0, cfg) == 0.0
    b0 = TrainConfig(beta=0.0)
    assert total_loss(0.1, 0.2, 1.0, b0) == total_loss(0.1, 0.2, 99.0, b0)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_total_loss_non_negative(a, b, c):
    assert total_loss(a, b, c, TrainConfig()) >= 0


def tiny_batch(cfg, count=2, seed=11, expansion=1.1):
    scfg = data.SceneConfig(image_size=64, buildings_per_image=(1, 2), size_range=(0.3, 0.5), seed=seed)
    samples = data.synthetic_samples(scfg, count)
    builder = TargetBuilder(cfg.kind, cfg.order_classes, cfg.queries)
    return samples, make_batch(samples, list(range(count)), builder, expansion)


def test_loss_invariant_to_target_order():
    model = build_model(SMALL, dtype=torch.float64)
    _, batch = tiny_batch(SMALL)
    out = model(image_tensor(batch["images"], torch.float64), torch.tensor(batch["boxes"]), batch["batch_index"])
    cfg = TrainConfig()
    base, parts = batch_loss(out, batch["targets"], match_batch(out, batch["targets"], cfg), cfg)
    rng = np.random.default_rng(0)
    shuffled = []
    for t in batch["targets"]:
        p = rng.permutation(t.count)
        shuffled.append(data.TrainingTarget(t.kind, t.coords[p], t.orders[p], t.roi))
    again, parts2 = batch_loss(out, shuffled, match_batch(out, shuffled, cfg), cfg)
    assert abs(base.item() - again.item()) < 1e-9
    for k in parts:
        assert abs(parts[k].item() - parts2[k].item()) < 1e-9


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = build_model(TINY, dtype=torch.float64)
    x = torch.randn(1, 1, 16, 16, dtype=torch.float64)
    boxes = torch.tensor([[1.0, 2.0, 14.0, 15.0]], dtype=torch.float64)
    rng = np.random.default_rng(0)
    tgt = data.TrainingTarget("corner", rng.random((3, 6)), np.array([2, 14, 25]), None)
    cfg = TrainConfig()
    with torch.no_grad():
        matches = match_batch(model(x, boxes, [0]), [tgt], cfg)

    def loss():
        return batch_loss(model(x, boxes, [0]), [tgt], matches, cfg)[0]

    model.zero_grad()
    loss().backward()
    eps = 1e-6
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                fd[i] = (up - down) / (2 * eps)
            an = p.grad.view(-1)
            scale = max(an.norm().item(), fd.norm().item(), 1e-8)
            err = (fd - an).norm().item() / scale
            worst = max(worst, err)
            assert err < 1e-4, f"{name}: relative gradient error {err:.2e}"
    assert worst < 1e-4


# --- optimisation ----------------------------------------------------------------


def test_zero_lr_keeps_parameters():
    model = build_model(SMALL)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt = make_optimizer(model, TrainConfig(lr=0.0))
    _, batch = tiny_batch(SMALL)
    train_step(model, opt, batch, TrainConfig(lr=0.0))
    for n, p in model.named_parameters():
        assert torch.equal(before[n], p.detach()), n
    assert len(opt.state) > 0


def test_steps_reproducible():
    _, batch = tiny_batch(SMALL)
    runs = []
    for _ in range(2):
        model = build_model(SMALL, seed=4)
        opt = make_optimizer(model, TrainConfig(lr=1e-3))
        runs.append([train_step(model, opt, batch, TrainConfig(lr=1e-3)).total for _ in range(2)])
    assert runs[0] == runs[1]


def test_overfit_single_batch():
    _, batch = tiny_batch(SMALL, count=2)
    cfg = TrainConfig(lr=1e-3)
    model = build_model(SMALL, seed=0)
    opt = make_optimizer(model, cfg)
    losses = [train_step(model, opt, batch, cfg).total for _ in range(200)]
    assert losses[-1] <= 0.5 * losses[0]


def test_non_finite_loss_aborts():
    _, batch = tiny_batch(SMALL)
    model = build_model(SMALL)
    with torch.no_grad():
        model.predictor.score.bias.fill_(float("nan"))
    with pytest.raises(NumericError, match="batch"):
        train_step(model, make_optimizer(model, TrainConfig()), batch, TrainConfig())


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-4, lr_drop_epoch=3)
    assert cfg.lr_at(2) == 1e-4 and cfg.lr_at(3) == pytest.approx(1e-5)


# --- checkpoints and fit ---------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = build_model(SMALL, seed=2)
    opt = make_optimizer(model, TrainConfig())
    _, batch = tiny_batch(SMALL)
    train_step(model, opt, batch, TrainConfig())
    p = save_checkpoint(tmp_path / "a.ckpt", model, opt, {"step": 1, "epoch": 0})
    meta = read_checkpoint_meta(p)
    assert meta["version"] == CKPT_VERSION and meta["model_config"] == SMALL.to_dict()
    loaded, lopt, _ = load_checkpoint(p, lambda m: make_optimizer(m, TrainConfig()))
    for (n, a), b in zip(model.named_parameters(), loaded.parameters()):
        assert torch.equal(a, b), n
    assert len(lopt.state) == len(opt.state)
    # archive bytes depend only on content
    q = save_checkpoint(tmp_path / "b.ckpt", model, opt, {"step": 1, "epoch": 0})
    assert p.read_bytes() == q.read_bytes()
    with zipfile.ZipFile(p) as zf:
        assert "meta.json" in zf.namelist()


def test_checkpoint_version_check(tmp_path):
    p = tmp_path / "x.ckpt"
    with zipfile.ZipFile(p, "w") as zf:
        zf.writestr("meta.json", '{"version": "other"}')
    with pytest.raises(ResumeError):
        read_checkpoint_meta(p)


def fit_samples():
    scfg = data.SceneConfig(image_size=64, buildings_per_image=(1, 2), size_range=(0.3, 0.5), seed=21)
    return data.synthetic_samples(scfg, 4)


def test_fit_zero_epochs(tmp_path):
    res = fit(build_model(SMALL), fit_samples(), TrainConfig(epochs=0), tmp_path)
    assert [p.name for p in res.checkpoints] == ["epoch_0000.ckpt"]


def test_fit_resume_matches_uninterrupted(tmp_path):
    samples = fit_samples()
    cfg = TrainConfig(epochs=2, batch_size=2, lr=1e-3)
    full = fit(build_model(SMALL, seed=1), samples, cfg, tmp_path / "full", manifest_hash="m", config_hash="c")
    resumed = fit(build_model(SMALL, seed=99), samples, cfg, tmp_path / "res",
                  resume=full.checkpoints[1], manifest_hash="m", config_hash="c")
    for (n, a), b in zip(full.model.named_parameters(), resumed.model.parameters()):
        assert torch.equal(a, b), n
    assert (tmp_path / "full" / "train_log.jsonl").exists()


def test_fit_resume_hash_mismatch(tmp_path):
    samples = fit_samples()
    cfg = TrainConfig(epochs=1, batch_size=2)
    run = fit(build_model(SMALL), samples, cfg, tmp_path / "a", manifest_hash="m1")
    with pytest.raises(ResumeError):
        fit(build_model(SMALL), samples, cfg, tmp_path / "b", resume=run.checkpoints[0], manifest_hash="m2")


def test_fit_empty_dataset(tmp_path):
    with pytest.raises(ValueError):
        fit(build_model(SMALL), [], TrainConfig(), tmp_path)
