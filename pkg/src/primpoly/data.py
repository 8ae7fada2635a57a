"""Synthetic rectilinear scenes, COCO ingestion/export, ROIs and training targets."""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from primpoly import geom
from primpoly.kernels import fill_polygon

log = logging.getLogger(__name__)

MAX_RING_VERTICES = 36
DATASET_FORMAT = "primpoly-dataset-v1"


class GenerationError(RuntimeError):
    pass


class CocoParseError(ValueError):
    pass


class IngestionError(ValueError):
    pass


class DegenerateBoxError(ValueError):
    pass


class TargetError(ValueError):
    pass


@dataclass
class SceneConfig:
    image_size: int = 128
    buildings_per_image: Tuple[int, int] = (1, 4)
    vertex_count_range: Tuple[int, int] = (4, 12)
    rotation: Tuple[float, float] = (0.0, 90.0)
    occlusion_rate: float = 0.3
    texture_noise: float = 0.05
    seed: int = 0
    # building extent as a fraction of image_size
    size_range: Tuple[float, float] = (0.16, 0.42)
    # ROI margin reserved around every building at placement time
    roi_margin: float = 1.2
    n_order: int = 36

    def __post_init__(self):
        self.buildings_per_image = tuple(int(v) for v in self.buildings_per_image)
        self.vertex_count_range = tuple(int(v) for v in self.vertex_count_range)
        self.rotation = tuple(float(v) for v in self.rotation)
        self.size_range = tuple(float(v) for v in self.size_range)
        if self.image_size < 64:
            raise ValueError("image_size must be at least 64")
        for name in ("buildings_per_image", "vertex_count_range", "rotation", "size_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        lo, hi = self.vertex_count_range
        if lo < 4 or hi > 12 or not any(v % 2 == 0 for v in range(lo, hi + 1)):
            raise ValueError("vertex_count_range must contain even counts within 4..12")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must lie in [0, 1]")
        if self.buildings_per_image[0] < 0:
            raise ValueError("buildings_per_image must be non-negative")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Annotation:
    ring: geom.PolygonRing
    bbox: Tuple[float, float, float, float]
    occluded: bool = False

    @classmethod
    def from_ring(cls, ring, occluded=False):
        return cls(ring, geom.bounds(ring), occluded)


@dataclass
class Sample:
    image_id: int
    file_name: str
    width: int
    height: int
    annotations: List[Annotation]
    image: Optional[np.ndarray] = None  # H x W x 1 uint8, loaded lazily

    def load_image(self, root=None):
        if self.image is None:
            from PIL import Image

            path = Path(root or ".") / self.file_name
            self.image = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)[..., None]
        return self.image


@dataclass
class LoadedDataset:
    samples: List[Sample]
    root: Path
    dropped: int = 0
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


@dataclass(frozen=True)
class RoiSpec:
    bbox: Tuple[float, float, float, float]
    expansion: float = 1.0

    @property
    def width(self):
        return self.bbox[2] - self.bbox[0]

    @property
    def height(self):
        return self.bbox[3] - self.bbox[1]

    def to_unit(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        x0, y0, x1, y1 = self.bbox
        return (pts - [x0, y0]) / [x1 - x0, y1 - y0]

    def to_pixels(self, unit):
        unit = np.asarray(unit, dtype=np.float64)
        x0, y0, x1, y1 = self.bbox
        return unit * [x1 - x0, y1 - y0] + [x0, y0]


@dataclass
class TrainingTarget:
    kind: str
    coords: np.ndarray  # (M, 2n) in ROI-normalised [0,1]
    orders: np.ndarray  # (M,)
    roi: RoiSpec

    @property
    def count(self):
        return len(self.orders)

    def pixel_coords(self):
        n = geom.points_per_kind(self.kind)
        return self.roi.to_pixels(self.coords.reshape(-1, n, 2)).reshape(len(self.coords), 2 * n)


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

_CORNERS = ("tl", "tr", "br", "bl")


def rectilinear_ring(rng, n_vertices, width, height, angle_deg=0.0):
    """A rectangle with ``(n_vertices - 4) / 2`` notched corners, rotated, centred at the origin."""
    if n_vertices % 2 or not 4 <= n_vertices <= 12:
        raise ValueError("rectilinear rings need an even vertex count in 4..12")
    notched = set(rng.choice(4, size=(n_vertices - 4) // 2, replace=False).tolist())
    w, h = width, height
    pts = []
    for c, name in enumerate(_CORNERS):
        if c not in notched:
            pts.append({"tl": (0, 0), "tr": (w, 0), "br": (w, h), "bl": (0, h)}[name])
            continue
        dx = rng.uniform(0.2, 0.4) * w
        dy = rng.uniform(0.2, 0.4) * h
        pts.extend(
            {
                "tl": [(0, dy), (dx, dy), (dx, 0)],
                "tr": [(w - dx, 0), (w - dx, dy), (w, dy)],
                "br": [(w, h - dy), (w - dx, h - dy), (w - dx, h)],
                "bl": [(dx, h), (dx, h - dy), (0, h - dy)],
            }[name]
        )
    v = np.asarray(pts, dtype=np.float64) - [w / 2.0, h / 2.0]
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return geom.normalize_ring(v @ rot.T)


def labels_are_clean(ring, n_order=36, kinds=geom.KINDS):
    """Every kind gets distinct, cyclically increasing order labels for ``ring``."""
    for kind in kinds:
        ops = geom.label_primitives(ring, kind, n_order)
        if not geom.is_cyclic_increasing(ops.orders):
            return False
    return True


def random_building(rng, cfg):
    lo, hi = cfg.vertex_count_range
    counts = [v for v in range(lo, hi + 1) if v % 2 == 0]
    size_lo, size_hi = (f * cfg.image_size for f in cfg.size_range)
    for _ in range(100):
        nv = int(rng.choice(counts))
        w, h = rng.uniform(size_lo, size_hi, size=2)
        angle = rng.uniform(*cfg.rotation)
        ring = rectilinear_ring(rng, nv, w, h, angle)
        if labels_are_clean(ring, cfg.n_order):
            return ring
    raise GenerationError("could not draw a building with clean order labels")


def _render(rings, occluders, size, rng, noise):
    ss = 2
    canvas = np.full((size * ss, size * ss), rng.uniform(0.15, 0.35))
    for ring in rings:
        v = ring.vertices * ss
        mask = fill_polygon(v[:, 0].copy(), v[:, 1].copy(), size * ss, size * ss).astype(bool)
        canvas[mask] = rng.uniform(0.55, 0.9)
    yy, xx = np.mgrid[0 : size * ss, 0 : size * ss] + 0.5
    for cx, cy, r, val in occluders:
        canvas[(xx - cx * ss) ** 2 + (yy - cy * ss) ** 2 <= (r * ss) ** 2] = val
    img = canvas.reshape(size, ss, size, ss).mean(axis=(1, 3))
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)[..., None]


def generate_scene(config, index):
    """Deterministic synthetic scene for ``(config.seed, index)``.

    Returns the image (H x W x 1 uint8) and per-building annotations. Annotations
    always carry the full ring, even where an occluder hides part of it.
    """
    cfg = config
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, index])
    size = cfg.image_size
    want = int(rng.integers(cfg.buildings_per_image[0], cfg.buildings_per_image[1] + 1))
    placed, boxes = [], []
    restarts = attempts = 0
    while len(placed) < want:
        attempts += 1
        if attempts > 1000:
            # crowded layout: start over with fresh buildings
            restarts += 1
            if restarts >= 1000:
                raise GenerationError(f"scene {index}: could not place {want} buildings after 1000 layouts")
            placed, boxes, attempts = [], [], 0
            continue
        ring = random_building(rng, cfg)
        x0, y0, x1, y1 = geom.bounds(ring)
        bw, bh = x1 - x0, y1 - y0
        mx = (cfg.roi_margin - 1.0) / 2.0 * bw + 1.0
        my = (cfg.roi_margin - 1.0) / 2.0 * bh + 1.0
        lo_x, hi_x = mx - x0, size - mx - x1
        lo_y, hi_y = my - y0, size - my - y1
        if lo_x > hi_x or lo_y > hi_y:
            continue
        ring = ring.translated(rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
        box = geom.bounds(ring)
        gap = 2.0
        if any(
            box[0] < b[2] + gap and b[0] < box[2] + gap and box[1] < b[3] + gap and b[1] < box[3] + gap
            for b in boxes
        ):
            continue
        placed.append(ring)
        boxes.append(box)

    occluders = []
    anns = []
    for ring in placed:
        occluded = bool(rng.random() < cfg.occlusion_rate)
        if occluded:
            v = ring.vertices[rng.integers(len(ring))]
            x0, y0, x1, y1 = geom.bounds(ring)
            r = rng.uniform(0.12, 0.2) * min(x1 - x0, y1 - y0) + 1.5
            jitter = rng.uniform(-0.3, 0.3, size=2) * r
            occluders.append((v[0] + jitter[0], v[1] + jitter[1], r, rng.uniform(0.0, 0.45)))
        anns.append(Annotation.from_ring(ring, occluded))
    image = _render(placed, occluders, size, rng, cfg.texture_noise)
    return image, anns


def synthetic_samples(config, count, start=0):
    out = []
    for i in range(start, start + count):
        image, anns = generate_scene(config, i)
        out.append(Sample(i, f"images/{i:06d}.png", config.image_size, config.image_size, anns, image))
    return out


# ---------------------------------------------------------------------------
# COCO
# ---------------------------------------------------------------------------


def to_coco(samples):
    images, annotations = [], []
    ann_id = 1
    for s in samples:
        images.append({"id": int(s.image_id), "file_name": s.file_name, "width": int(s.width), "height": int(s.height)})
        for a in s.annotations:
            v = a.ring.vertices
            x0, y0, x1, y1 = a.bbox
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": int(s.image_id),
                    "category_id": 1,
                    "segmentation": [[float(c) for c in v.reshape(-1)]],
                    "bbox": [x0, y0, x1 - x0, y1 - y0],
                    "area": abs(geom.signed_area(a.ring)),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    return {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": "building"}],
    }


def load_coco(path, check_files=True):
    """Read a COCO instance-polygon file.

    Only the first ring of each annotation is kept. Rings that are degenerate
    or have more than 36 vertices are dropped; the count is logged and stored
    on the result.
    """
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CocoParseError(f"{path}: line {exc.lineno} column {exc.colno} (offset {exc.pos}): {exc.msg}") from exc
    if not isinstance(doc, dict) or "images" not in doc:
        raise CocoParseError(f"{path}: line 1 column 1 (offset 0): missing 'images' list")
    root = path.parent
    samples = {}
    order = []
    missing = []
    for im in doc["images"]:
        try:
            iid = int(im["id"])
            fname = im["file_name"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CocoParseError(f"{path}: malformed image entry {im!r}") from exc
        if check_files and not (root / fname).exists():
            missing.append(iid)
        samples[iid] = Sample(iid, fname, int(im.get("width", 0)), int(im.get("height", 0)), [])
        order.append(iid)
    if missing:
        raise IngestionError(f"{path}: image files missing for ids {missing}")
    dropped = 0
    for ann in doc.get("annotations", []):
        iid = ann.get("image_id")
        if iid not in samples:
            raise IngestionError(f"{path}: annotation {ann.get('id')} refers to unknown image id {iid}")
        seg = ann.get("segmentation")
        if not isinstance(seg, list) or not seg or not isinstance(seg[0], list):
            dropped += 1
            continue
        coords = np.asarray(seg[0], dtype=np.float64)
        if coords.size % 2:
            dropped += 1
            continue
        try:
            ring = geom.normalize_ring(coords.reshape(-1, 2))
        except geom.DegenerateRingError:
            dropped += 1
            continue
        if len(ring) > MAX_RING_VERTICES:
            dropped += 1
            continue
        samples[iid].annotations.append(Annotation.from_ring(ring))
    if dropped:
        log.info("load_coco: dropped %d annotation(s) from %s", dropped, path)
    manifest = {}
    mpath = root / "manifest.json"
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
    return LoadedDataset([samples[i] for i in order], root, dropped, manifest)


def save_dataset(out_dir, samples, manifest, png_text=None):
    """Write PNG images, ``annotations.json`` and ``manifest.json``.

    ``png_text`` entries are stored as PNG text chunks in every image.
    """
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    info = PngInfo()
    for k, v in (png_text or {}).items():
        info.add_text(k, str(v))
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(s.image[..., 0]).save(out / s.file_name, pnginfo=info)
    (out / "annotations.json").write_text(json.dumps(to_coco(samples), sort_keys=True))
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return out


def dataset_manifest(config, count):
    body = {"format": DATASET_FORMAT, "scene_config": config.to_dict(), "count": int(count), "seed": int(config.seed)}
    return {**body, "config_hash": config_hash(body)}


def manifest_hash(manifest):
    return config_hash(manifest) if manifest else ""


# ---------------------------------------------------------------------------
# ROIs and targets
# ---------------------------------------------------------------------------


def make_roi(bbox, expansion=1.1, rng=None, image_size=None):
    """Scale ``bbox`` about its centre.

    With ``rng`` (training) the ratio is drawn from
    ``[1, 1 + 2 * (expansion - 1)]``; without it the ratio is ``expansion``.
    ``image_size`` is (width, height) or a single side; the box is clipped to it.
    """
    if expansion < 1.0:
        raise ValueError("expansion must be >= 1.0")
    x0, y0, x1, y1 = (float(c) for c in bbox)
    if not (x1 > x0 and y1 > y0):
        raise DegenerateBoxError(f"zero-area box {bbox}")
    ratio = expansion if rng is None else float(rng.uniform(1.0, (expansion - 1.0) * 2.0 + 1.0))
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    hw, hh = (x1 - x0) / 2.0 * ratio, (y1 - y0) / 2.0 * ratio
    box = [cx - hw, cy - hh, cx + hw, cy + hh]
    if image_size is not None:
        w, h = (image_size, image_size) if np.isscalar(image_size) else image_size
        box = [max(box[0], 0.0), max(box[1], 0.0), min(box[2], float(w)), min(box[3], float(h))]
        if not (box[2] > box[0] and box[3] > box[1]):
            raise DegenerateBoxError(f"box {bbox} does not intersect the image")
    return RoiSpec(tuple(box), ratio)


def make_targets(annotation, roi, kind, n_order=36, max_count=None):
    ring = annotation.ring
    x0, y0, x1, y1 = roi.bbox
    v = ring.vertices
    tol = 1e-9
    if v[:, 0].min() < x0 - tol or v[:, 0].max() > x1 + tol or v[:, 1].min() < y0 - tol or v[:, 1].max() > y1 + tol:
        raise TargetError(f"ring bounds {geom.bounds(ring)} exceed ROI {roi.bbox}")
    ops = geom.label_primitives(ring, kind, n_order)
    if max_count is not None and len(ops.primitives) > max_count:
        raise TargetError(f"{len(ops.primitives)} primitives exceed the query count {max_count}")
    n = geom.points_per_kind(kind)
    pts = np.stack([p.points for p in ops.primitives])  # (M, n, 2)
    coords = roi.to_unit(pts).reshape(len(pts), 2 * n)
    return TrainingTarget(kind, coords, ops.orders.copy(), roi)
