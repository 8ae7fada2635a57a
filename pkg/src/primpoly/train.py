"""Bipartite matching, set-prediction losses, optimisation loop and checkpoints."""
import io
import json
import logging
import time
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from primpoly import data as pdata
from primpoly import geom
from primpoly.kernels import linear_assignment
from primpoly.model import ModelConfig, PrimitiveFormer, image_tensor

log = logging.getLogger(__name__)

CKPT_VERSION = "p2p-ckpt-v1"


class NumericError(FloatingPointError):
    pass


class ResumeError(RuntimeError):
    pass


class LabelError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_drop_epoch: Optional[int] = None  # multiply lr by 0.1 from this epoch on
    epochs: int = 24
    batch_size: int = 4
    lambda_reg: float = 5.0
    lambda_cls: float = 1.0
    alpha: float = 1.0
    beta: float = 0.1
    grad_clip: float = 1.0
    expansion: float = 1.1
    seed: int = 0
    ckpt_every: int = 1
    eval_every: int = 0  # epochs between validation passes; 0 disables
    order_divisor: str = "matched"  # or "all": divide by N as written in the order-loss formula

    def __post_init__(self):
        for name in ("lr", "lambda_reg", "lambda_cls", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.order_divisor not in ("matched", "all"):
            raise ValueError("order_divisor must be 'matched' or 'all'")

    def lr_at(self, epoch):
        if self.lr_drop_epoch is not None and epoch >= self.lr_drop_epoch:
            return self.lr * 0.1
        return self.lr

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MatchResult:
    sigma: np.ndarray  # (N,) target index for matched rows; M, M+1, ... for the rest
    n_targets: int

    @property
    def matched(self):
        return self.sigma < self.n_targets

    @property
    def pred_index(self):
        """Matched prediction rows, ordered by their target index."""
        rows = np.nonzero(self.matched)[0]
        return rows[np.argsort(self.sigma[rows], kind="stable")]

    @property
    def target_index(self):
        return np.sort(self.sigma[self.matched])


@dataclass
class LossReport:
    total: float
    seg_reg: float
    seg_cls: float
    order: float

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def matching_cost(coords, fg_prob, targets, lambda_reg=5.0, lambda_cls=1.0):
    """(N, M) grid of ``lambda_reg * L1(pred_i, target_j) - lambda_cls * p_fg_i``."""
    coords = np.asarray(coords, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    fg_prob = np.asarray(fg_prob, dtype=np.float64)
    if coords.ndim != 2 or targets.ndim != 2 or coords.shape[1] != targets.shape[1]:
        raise ValueError(f"coordinate widths differ: {coords.shape} vs {targets.shape}")
    l1 = np.abs(coords[:, None, :] - targets[None, :, :]).sum(-1)
    return lambda_reg * l1 - lambda_cls * fg_prob[:, None]


def hungarian(cost):
    """Optimal one-to-one assignment of the M targets (columns) to N predictions (rows)."""
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise NumericError("matching cost contains non-finite values")
    n, m = cost.shape
    if m > n:
        log.warning("hungarian: %d targets exceed %d predictions; truncating targets", m, n)
        cost = cost[:, :n]
        m = n
    rows = linear_assignment(cost.T)  # prediction row for each target
    sigma = np.full(n, -1, dtype=np.int64)
    sigma[rows] = np.arange(m)
    free = np.nonzero(sigma < 0)[0]
    sigma[free] = m + np.arange(len(free))
    return MatchResult(sigma, m)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def seg_loss(coords, score_logits, target_coords, match):
    """Per-building segmentation terms (regression, classification), both averaged over N."""
    n = coords.shape[0]
    pi = torch.as_tensor(match.pred_index, dtype=torch.long)
    ti = torch.as_tensor(match.target_index, dtype=torch.long)
    tgt = torch.as_tensor(target_coords, dtype=coords.dtype)
    reg = (coords[pi] - tgt[ti]).abs().sum() / n
    labels = torch.zeros(n, dtype=torch.long)
    labels[pi] = 1
    cls = F.cross_entropy(score_logits, labels, reduction="mean")
    return reg, cls


def order_loss(order_logits, target_orders, match, divisor="matched"):
    orders = np.asarray(target_orders)
    if orders.size and (orders.max() >= order_logits.shape[-1] or orders.min() < 0):
        raise LabelError(f"order label outside [0, {order_logits.shape[-1]})")
    pi = torch.as_tensor(match.pred_index, dtype=torch.long)
    if len(pi) == 0:
        return order_logits.sum() * 0.0
    lab = torch.as_tensor(orders[match.target_index], dtype=torch.long)
    ce = F.cross_entropy(order_logits[pi], lab, reduction="sum")
    return ce / (len(pi) if divisor == "matched" else order_logits.shape[0])


def total_loss(seg_reg, seg_cls, order, cfg: TrainConfig):
    return cfg.alpha * (cfg.lambda_reg * seg_reg + cfg.lambda_cls * seg_cls) + cfg.beta * order


def match_batch(out, targets, cfg: TrainConfig):
    with torch.no_grad():
        coords = out["coords"].detach().cpu().numpy().astype(np.float64)
        prob = torch.softmax(out["scores"].detach(), -1)[..., 1].cpu().numpy().astype(np.float64)
    return [
        hungarian(matching_cost(coords[r], prob[r], t.coords, cfg.lambda_reg, cfg.lambda_cls))
        for r, t in enumerate(targets)
    ]


def batch_loss(out, targets, matches, cfg: TrainConfig):
    """Mean of the per-building loss parts over the ROIs of a batch; returns (total tensor, parts).

    ``out`` without ``order_logits`` (auxiliary blocks) contributes a zero order term.
    """
    regs, clss, ords = [], [], []
    for r, (t, m) in enumerate(zip(targets, matches)):
        reg, cls = seg_loss(out["coords"][r], out["scores"][r], t.coords, m)
        regs.append(reg)
        clss.append(cls)
        if "order_logits" in out:
            ords.append(order_loss(out["order_logits"][r], t.orders, m, cfg.order_divisor))
    reg = torch.stack(regs).mean()
    cls = torch.stack(clss).mean()
    order = torch.stack(ords).mean() if ords else reg * 0.0
    total = total_loss(reg, cls, order, cfg)
    return total, {"seg_reg": reg, "seg_cls": cls, "order": order}


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


class TargetBuilder:
    """Training targets per (sample, annotation), with order labels cached."""

    def __init__(self, kind, n_order, max_count):
        self.kind = kind
        self.n_order = n_order
        self.max_count = max_count
        self._labels = {}

    def __call__(self, key, ann, roi):
        hit = self._labels.get(key)
        if hit is None:
            ops = geom.label_primitives(ann.ring, self.kind, self.n_order)
            pts = np.stack([p.points for p in ops.primitives])
            hit = self._labels[key] = (pts, ops.orders.copy())
        pts, orders = hit
        if len(orders) > self.max_count:
            log.warning("building with %d primitives exceeds %d queries; truncated", len(orders), self.max_count)
            pts, orders = pts[: self.max_count], orders[: self.max_count]
        n = pts.shape[1]
        return pdata.TrainingTarget(self.kind, roi.to_unit(pts).reshape(len(pts), 2 * n), orders, roi)


def make_batch(samples, indices, builder, expansion, rng=None, root=None):
    images, boxes, bidx, targets = [], [], [], []
    for b, i in enumerate(indices):
        s = samples[i]
        img = s.load_image(root)
        images.append(img)
        h, w = img.shape[:2]
        for a, ann in enumerate(s.annotations):
            roi = pdata.make_roi(ann.bbox, expansion, rng=rng, image_size=(w, h))
            try:
                t = builder((int(i), a), ann, roi)
            except pdata.TargetError:
                continue
            if np.any(t.coords < -1e-9) or np.any(t.coords > 1 + 1e-9):
                continue
            boxes.append(roi.bbox)
            bidx.append(b)
            targets.append(t)
    return {
        "images": np.stack(images),
        "boxes": np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        "batch_index": np.asarray(bidx, dtype=np.int64),
        "targets": targets,
        "indices": list(int(i) for i in indices),
    }


def train_step(model, optimizer, batch, cfg: TrainConfig, lr=None):
    """One forward/match/backward/AdamW step. Returns the LossReport."""
    if lr is not None:
        for g in optimizer.param_groups:
            g["lr"] = lr
    model.train()
    dtype = next(model.parameters()).dtype
    if len(batch["targets"]) == 0:
        return None
    out = model(image_tensor(batch["images"], dtype), torch.as_tensor(batch["boxes"], dtype=dtype),
                batch["batch_index"])
    for k in ("coords", "scores", "order_logits"):
        if not torch.isfinite(out[k]).all():
            raise NumericError(f"non-finite {k} on batch {batch.get('indices')}")
    matches = match_batch(out, batch["targets"], cfg)
    total, parts = batch_loss(out, batch["targets"], matches, cfg)
    if model.cfg.aux_loss and "aux" in out:
        for coords, _, scores in out["aux"]:
            aux_out = {"coords": coords, "scores": scores}
            aux_matches = match_batch(aux_out, batch["targets"], cfg)
            total = total + batch_loss(aux_out, batch["targets"], aux_matches, cfg)[0]
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss on batch {batch.get('indices')}: "
            + ", ".join(f"{k}={float(v)}" for k, v in parts.items())
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return LossReport(float(total.detach()), *(float(parts[k].detach()) for k in ("seg_reg", "seg_cls", "order")))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write(zf, name, blob):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, blob)


def save_checkpoint(path, model, optimizer=None, meta=None):
    """Single zip archive: ``meta.json`` plus one ``.npy`` per parameter and optimiser slot."""
    names = [n for n, _ in model.named_parameters()]
    meta = dict(meta or {})
    meta.update({"version": CKPT_VERSION, "model_config": model.cfg.to_dict(), "param_names": names})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=2).encode())
        for n, p in model.named_parameters():
            _write(zf, f"params/{n}.npy", _npy_bytes(p.detach().cpu().numpy()))
        for n, b in model.named_buffers():
            _write(zf, f"buffers/{n}.npy", _npy_bytes(b.detach().cpu().numpy()))
        if optimizer is not None:
            params = dict(model.named_parameters())
            for n in names:
                st = optimizer.state.get(params[n], {})
                for k, v in sorted(st.items()):
                    arr = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
                    _write(zf, f"optim/{n}/{k}.npy", _npy_bytes(arr))
    tmp.replace(path)
    return path


def read_checkpoint_meta(path):
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
    if meta.get("version") != CKPT_VERSION:
        raise ResumeError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    return meta


def load_checkpoint(path, optimizer_factory=None, dtype=torch.float32):
    """Rebuild the model (and optionally the optimiser state) from an archive."""
    meta = read_checkpoint_meta(path)
    model = PrimitiveFormer(ModelConfig.from_dict(meta["model_config"])).to(dtype)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    optimizer = None
    with zipfile.ZipFile(path) as zf:
        with torch.no_grad():
            for n in meta["param_names"]:
                params[n].copy_(torch.from_numpy(np.load(io.BytesIO(zf.read(f"params/{n}.npy")))))
            for n, b in buffers.items():
                b.copy_(torch.from_numpy(np.load(io.BytesIO(zf.read(f"buffers/{n}.npy")))))
        if optimizer_factory is not None:
            optimizer = optimizer_factory(model)
            for n in meta["param_names"]:
                prefix = f"optim/{n}/"
                slots = [x for x in zf.namelist() if x.startswith(prefix)]
                if not slots:
                    continue
                st = {}
                for x in slots:
                    arr = np.load(io.BytesIO(zf.read(x)))
                    st[x[len(prefix) : -4]] = torch.from_numpy(arr)
                optimizer.state[params[n]] = st
    return model, optimizer, meta


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def set_deterministic(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.use_deterministic_algorithms(True)


def build_model(cfg: ModelConfig, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return PrimitiveFormer(cfg).to(dtype)


def epoch_batches(n_samples, batch_size, seed, epoch):
    perm = np.random.default_rng([seed, epoch]).permutation(n_samples)
    return [perm[i : i + batch_size] for i in range(0, n_samples, batch_size)]


@dataclass
class FitResult:
    checkpoints: List[Path]
    model: object
    history: list


def fit(model, samples, cfg: TrainConfig, out_dir, root=None, val_samples=None, resume=None,
        manifest_hash="", config_hash="", max_steps=None, log_every=50):
    """Train for ``cfg.epochs`` epochs, checkpointing into ``out_dir``.

    ``resume`` is a checkpoint path; training continues after its epoch with the
    same batch order and ROI jitter as an uninterrupted run.
    """
    from primpoly.pipeline import evaluate_samples

    if not samples:
        raise ValueError("empty training set")
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(model, cfg)
    start_epoch, step = 0, 0
    if resume is not None:
        meta = read_checkpoint_meta(resume)
        if meta.get("dataset_manifest_hash", "") != manifest_hash:
            raise ResumeError("dataset manifest hash differs from the checkpoint")
        if meta.get("config_hash", "") != config_hash:
            raise ResumeError("run config hash differs from the checkpoint")
        loaded, optimizer, meta = load_checkpoint(resume, lambda m: make_optimizer(m, cfg),
                                                  dtype=next(model.parameters()).dtype)
        model.load_state_dict(loaded.state_dict())
        # the optimizer was built around ``loaded``; rebind its state to ``model``
        opt = make_optimizer(model, cfg)
        mapping = dict(zip(loaded.parameters(), model.parameters()))
        for p, st in optimizer.state.items():
            opt.state[mapping[p]] = st
        optimizer = opt
        start_epoch, step = int(meta["epoch"]), int(meta["step"])

    builder = TargetBuilder(model.cfg.kind, model.cfg.order_classes, model.cfg.queries)
    base_meta = {"dataset_manifest_hash": manifest_hash, "config_hash": config_hash,
                 "train_config": cfg.to_dict()}
    ckpts = []
    history = []
    log_path = out / "train_log.jsonl"
    metrics_path = out / "metrics.csv"

    def checkpoint(epoch):
        p = out / "checkpoints" / f"epoch_{epoch:04d}.ckpt"
        save_checkpoint(p, model, optimizer, {**base_meta, "epoch": epoch, "step": step})
        ckpts.append(p)

    if resume is None:
        checkpoint(0)
    t0 = time.time()
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        for bi, idx in enumerate(epoch_batches(len(samples), cfg.batch_size, cfg.seed, epoch)):
            rng = np.random.default_rng([cfg.seed, epoch, bi])
            batch = make_batch(samples, idx, builder, cfg.expansion, rng=rng, root=root)
            rep = train_step(model, optimizer, batch, cfg, lr=lr)
            step += 1
            if rep is None:
                continue
            rec = {"step": step, "epoch": epoch, "lr": lr, **rep.to_dict(), "wall": round(time.time() - t0, 3),
                   "config_hash": config_hash}
            history.append(rec)
            if step % log_every == 0 or step == 1:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(rec) + "\n")
            if max_steps is not None and step >= max_steps:
                break
        done = epoch + 1
        if done % max(cfg.ckpt_every, 1) == 0 or done == cfg.epochs:
            checkpoint(done)
        if val_samples and cfg.eval_every and done % cfg.eval_every == 0:
            report, _ = evaluate_samples(model, val_samples, root=root)
            new = not metrics_path.exists()
            with open(metrics_path, "a") as fh:
                if new:
                    fh.write("epoch,step,mAP,AP50,AP75,AR,config_hash\n")
                fh.write(f"{done},{step},{report.mAP:.6f},{report.AP50:.6f},{report.AP75:.6f},{report.AR:.6f},"
                         f"{config_hash}\n")
        if max_steps is not None and step >= max_steps:
            if ckpts[-1].name != f"epoch_{done:04d}.ckpt":
                checkpoint(done)
            break
    return FitResult(ckpts, model, history)
