"""Backbone, ROI features, group-query primitive segmenter and order decoder."""
import math
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from primpoly import geom


@dataclass
class ModelConfig:
    kind: str = "corner"
    channels: int = 64
    queries: int = 30
    roi_size: int = 32
    scales: int = 3
    decoder_blocks: int = 3
    order_classes: int = 36
    order_layers: int = 3
    heads: int = 4
    score_threshold: float = 0.5
    in_channels: int = 1
    stride: int = 4
    dropout: float = 0.0
    # ablation switches
    multi_scale: bool = True
    shared_pos: bool = True  # one position embedding per primitive, repeated n times
    shared_query: bool = False  # one query embedding per primitive, repeated n times
    update_pos: bool = True
    predict_with_pos: bool = True
    key_pos: bool = True
    aux_loss: bool = False  # experimental: supervise every decoder block

    def __post_init__(self):
        geom.points_per_kind(self.kind)
        if self.roi_size % (2 ** self.scales):
            raise ValueError(f"roi_size {self.roi_size} must be divisible by 2**scales = {2 ** self.scales}")
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.channels % 4:
            raise ValueError("channels must be divisible by 4 (sine encodings)")
        if self.order_classes < 3:
            raise ValueError("order_classes must be at least 3")

    @property
    def points(self):
        return geom.points_per_kind(self.kind)

    @property
    def scale_sizes(self):
        """Token-grid side per decoder block, in block order."""
        if not self.multi_scale:
            return [self.roi_size] * self.decoder_blocks
        sizes = [self.roi_size // 2 ** i for i in range(self.scales)][::-1]
        # more blocks than scales reuse the largest map
        return [sizes[min(i, len(sizes) - 1)] for i in range(self.decoder_blocks)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        return cls(**d)


class ShapeError(ValueError):
    pass


def _groups(ch):
    return math.gcd(8, ch)


def conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(_groups(cout), cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Small stride-4 conv stack with a two-level top-down fusion."""

    def __init__(self, in_channels, channels):
        super().__init__()
        half = max(channels // 2, 1)
        self.stem = nn.Sequential(conv_block(in_channels, half, 2), conv_block(half, half))
        self.c4 = nn.Sequential(conv_block(half, channels, 2), conv_block(channels, channels))
        self.c8 = nn.Sequential(conv_block(channels, channels, 2), conv_block(channels, channels))
        self.lat4 = nn.Conv2d(channels, channels, 1)
        self.lat8 = nn.Conv2d(channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"image side must be divisible by 4, got {tuple(x.shape[-2:])}")
        x = self.stem(x)
        f4 = self.c4(x)
        f8 = self.c8(f4)
        up = F.interpolate(self.lat8(f8), size=f4.shape[-2:], mode="nearest")
        return self.out(F.relu(self.lat4(f4) + up))


def roi_extract(feature, boxes, batch_index, size, stride):
    """Bilinear ROI sampling: one sample per bin centre on a ``size`` x ``size`` grid.

    ``feature`` is (B, C, H, W) at ``stride`` pixels per cell; ``boxes`` is (R, 4)
    pixel boxes; returns (R, C, size, size). Samples outside the map read zero.
    """
    boxes = torch.as_tensor(boxes, dtype=feature.dtype, device=feature.device).reshape(-1, 4)
    idx = torch.as_tensor(batch_index, dtype=torch.long, device=feature.device).reshape(-1)
    if len(boxes) == 0:
        return feature.new_zeros((0, feature.shape[1], size, size))
    h, w = feature.shape[-2:]
    x0, y0, x1, y1 = boxes.unbind(-1)
    if bool(((x1 <= x0) | (y1 <= y0)).any()):
        raise ValueError("degenerate ROI box")
    if bool(((x1 <= 0) | (y1 <= 0) | (x0 >= w * stride) | (y0 >= h * stride)).any()):
        raise ValueError("ROI does not intersect the feature map")
    t = (torch.arange(size, dtype=feature.dtype, device=feature.device) + 0.5) / size
    px = x0[:, None] + t[None] * (x1 - x0)[:, None]  # (R, S)
    py = y0[:, None] + t[None] * (y1 - y0)[:, None]
    # pixel -> grid_sample's [-1, 1] with cell centres at (i + 0.5) / W
    gx = px / (stride * w) * 2 - 1
    gy = py / (stride * h) * 2 - 1
    grid = torch.stack(torch.broadcast_tensors(gx[:, None, :], gy[:, :, None]), dim=-1)
    return F.grid_sample(feature[idx], grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def sine_encoding(side, channels, dtype=torch.float32, device=None):
    """2D sine/cosine encoding for a ``side`` x ``side`` grid, row-major, (side*side, channels)."""
    npf = channels // 2
    eps = 1e-6
    scale = 2 * math.pi
    ys, xs = torch.meshgrid(
        torch.arange(1, side + 1, dtype=torch.float64), torch.arange(1, side + 1, dtype=torch.float64), indexing="ij"
    )
    ys = ys / (side + eps) * scale
    xs = xs / (side + eps) * scale
    dim_t = torch.arange(npf, dtype=torch.float64)
    dim_t = 10000 ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / npf)
    px = xs[..., None] / dim_t
    py = ys[..., None] / dim_t
    px = torch.stack((px[..., 0::2].sin(), px[..., 1::2].cos()), dim=-1).flatten(-2)
    py = torch.stack((py[..., 0::2].sin(), py[..., 1::2].cos()), dim=-1).flatten(-2)
    return torch.cat((py, px), dim=-1).reshape(side * side, channels).to(dtype=dtype, device=device)


class DecoderInputs(nn.Module):
    """Multi-scale token sequences from an ROI feature, smallest grid first."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.down = nn.ModuleList([conv_block(c, c, 2) for _ in range(cfg.scales - 1)]) if cfg.multi_scale else None

    def forward(self, inst):
        cfg = self.cfg
        s = inst.shape[-1]
        if s % (2 ** cfg.scales) or inst.shape[-2] != s:
            raise ShapeError(f"instance feature side {s} not divisible by {2 ** cfg.scales}")
        if cfg.multi_scale:
            maps = [inst]
            for d in self.down:
                maps.append(d(maps[-1]))
            by_side = {m.shape[-1]: m for m in maps}
        else:
            by_side = {s: inst}
        sides = [side * s // cfg.roi_size for side in cfg.scale_sizes]
        out = []
        for side in sides:
            m = by_side[side]
            tokens = m.flatten(2).transpose(1, 2)  # (R, side*side, C) row-major
            out.append((tokens, sine_encoding(side, m.shape[1], m.dtype, m.device)))
        return out


class QueryEmbedding(nn.Module):
    """Group queries: ``N*n`` query rows and ``N`` position rows repeated ``n`` times."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        n, N, c = cfg.points, cfg.queries, cfg.channels
        self.query = nn.Parameter(torch.randn(N if cfg.shared_query else N * n, c) * 0.02)
        self.pos = nn.Parameter(torch.randn(N if cfg.shared_pos else N * n, c))

    def forward(self):
        n = self.cfg.points
        q = self.query.repeat_interleave(n, dim=0) if self.cfg.shared_query else self.query
        p = self.pos.repeat_interleave(n, dim=0) if self.cfg.shared_pos else self.pos
        return q, p


def init_queries(cfg, seed=None):
    if seed is not None:
        torch.manual_seed(seed)
    return QueryEmbedding(cfg)()


class FFN(nn.Sequential):
    def __init__(self, c, hidden, out=None):
        super().__init__(nn.Linear(c, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, out or c))


class DecoderBlock(nn.Module):
    """Cross-attention to ROI tokens, self-attention among queries, additive position update."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.channels
        self.cfg = cfg
        self.norm_ca = nn.LayerNorm(c)
        self.cross = nn.MultiheadAttention(c, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.norm_sa = nn.LayerNorm(c)
        self.self_attn = nn.MultiheadAttention(c, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.pos_ffn = FFN(c, 2 * c)

    def forward(self, q, q_pos, tokens, token_pos, need_weights=False):
        if tokens.shape[-1] != q.shape[-1]:
            raise ShapeError(f"token width {tokens.shape[-1]} != query width {q.shape[-1]}")
        h = self.norm_ca(q)
        keys = tokens + token_pos if self.cfg.key_pos else tokens
        a, w = self.cross(h + q_pos, keys, tokens, need_weights=need_weights, average_attn_weights=True)
        q = q + a
        h = self.norm_sa(q) + q_pos
        s, _ = self.self_attn(h, h, self.norm_sa(q), need_weights=False)
        q = q + s
        if self.cfg.update_pos:
            q_pos = self.pos_ffn(q) + q_pos
        return q, q_pos, w


class PrimitivePredictor(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        c, n = cfg.channels, cfg.points
        self.cfg = cfg
        self.norm = nn.LayerNorm(c)
        cin = 2 * c if cfg.predict_with_pos else c
        self.coord = nn.Sequential(
            nn.Linear(cin, 2 * c), nn.ReLU(inplace=True), nn.Linear(2 * c, 2 * c), nn.ReLU(inplace=True),
            nn.Linear(2 * c, 2),
        )
        self.fuse = nn.Linear(n * c, c)
        self.score = nn.Linear(c, 2)

    def forward(self, q, q_pos):
        cfg = self.cfg
        r, rows, c = q.shape
        n = cfg.points
        q = self.norm(q)
        x = torch.cat([q, q_pos], dim=-1) if cfg.predict_with_pos else q
        coords = torch.sigmoid(self.coord(x)).reshape(r, rows // n, 2 * n)
        q_prim = self.fuse(q.reshape(r, rows // n, n * c))
        return coords, q_prim, self.score(q_prim)


class OrderLayer(nn.Module):
    def __init__(self, c, heads, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(c)
        self.attn = nn.MultiheadAttention(c, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(c)
        self.ffn = FFN(c, 2 * c)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ffn(self.norm2(x))


class OrderDecoder(nn.Module):
    """Self-attention over primitive tokens (no positional encoding), then an order classifier."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.channels
        self.layers = nn.ModuleList([OrderLayer(c, cfg.heads, cfg.dropout) for _ in range(cfg.order_layers)])
        self.norm = nn.LayerNorm(c) if cfg.order_layers else nn.Identity()
        self.head = nn.Linear(c, cfg.order_classes)

    def forward(self, q_prim):
        x = q_prim
        for layer in self.layers:
            x = layer(x)
        return self.head(self.norm(x))


class PrimitiveFormer(nn.Module):
    """Image -> per-ROI primitive coordinates, scores and order logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.in_channels, cfg.channels)
        self.inputs = DecoderInputs(cfg)
        self.queries = QueryEmbedding(cfg)
        self.blocks = nn.ModuleList([DecoderBlock(cfg) for _ in range(cfg.decoder_blocks)])
        self.predictor = PrimitivePredictor(cfg)
        self.order = OrderDecoder(cfg)

    def decode(self, inst, need_weights=False):
        """Run the segmenter and order decoder on ROI features (R, C, S, S)."""
        r = inst.shape[0]
        scales = self.inputs(inst)
        q, q_pos = self.queries()
        q = q[None].expand(r, -1, -1)
        q_pos = q_pos[None].expand(r, -1, -1)
        attn = []
        aux = []
        for block, (tokens, tpos) in zip(self.blocks, scales):
            q, q_pos, w = block(q, q_pos, tokens, tpos[None], need_weights=need_weights)
            attn.append(w)
            if self.cfg.aux_loss:
                aux.append(self.predictor(q, q_pos))
        coords, q_prim, scores = self.predictor(q, q_pos)
        out = {
            "coords": coords,
            "scores": scores,
            "order_logits": self.order(q_prim),
            "q": q,
            "q_pos": q_pos,
        }
        if need_weights:
            out["attn"] = attn
        if aux:
            out["aux"] = aux[:-1]
        return out

    def forward(self, images, boxes, batch_index, need_weights=False):
        feat = self.backbone(images)
        inst = roi_extract(feat, boxes, batch_index, self.cfg.roi_size, self.cfg.stride)
        return self.decode(inst, need_weights=need_weights)


def image_tensor(images, dtype=torch.float32):
    """uint8 (B, H, W, 1) or (H, W, 1) -> normalised float (B, 1, H, W)."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.tensor(arr, dtype=dtype).permute(0, 3, 1, 2)
    return (t / 255.0 - 0.5) / 0.25


@dataclass
class PrimitivePrediction:
    coords: np.ndarray  # (N, 2n) ROI-normalised
    fg_prob: np.ndarray  # (N,)
    order_logits: np.ndarray  # (N, N_order)

    @property
    def orders(self):
        return np.argmax(self.order_logits, axis=1)


def split_predictions(out):
    coords = out["coords"].detach().cpu().numpy().astype(np.float64)
    prob = torch.softmax(out["scores"].detach(), dim=-1)[..., 1].cpu().numpy().astype(np.float64)
    logits = out["order_logits"].detach().cpu().numpy().astype(np.float64)
    return [PrimitivePrediction(c, p, o) for c, p, o in zip(coords, prob, logits)]


@dataclass
class PolygonResult:
    ring: Optional[geom.PolygonRing]
    score: float
    kept: int
    orders: List[int]
    reason: str = ""


def infer_polygon(pred: PrimitivePrediction, roi, kind, threshold=0.5):
    """Filter by score, map to pixels and assemble. Returns a result whose ring is None on rejection."""
    n = geom.points_per_kind(kind)
    keep = np.nonzero(pred.fg_prob >= threshold)[0]
    if len(keep) < 3:
        return PolygonResult(None, 0.0, len(keep), [], "fewer than 3 confident primitives")
    pts = roi.to_pixels(pred.coords[keep].reshape(-1, n, 2))
    prims = [geom.Primitive(kind, p) for p in pts]
    orders = pred.orders[keep]
    conf = pred.fg_prob[keep]
    ops = geom.OrderedPrimitiveSet(prims, orders, conf)
    try:
        ring = geom.assemble_polygon(ops, kind)
    except (geom.DegenerateRingError, geom.InsufficientPrimitivesError) as exc:
        return PolygonResult(None, 0.0, len(keep), [], str(exc))
    return PolygonResult(ring, float(conf.mean()), len(keep), sorted(int(o) for o in orders))
