"""Rings, primitives, contour sampling, order labels and polygon assembly.

Coordinates are image pixels with +x right and +y down. A ring is "clockwise"
when its shoelace sum is positive in that frame, which is clockwise as seen on
screen.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DUP_TOL = 1e-9
MIN_EDGE = 1e-6

KINDS = ("vertex", "line", "corner")
POINTS_PER_KIND = {"vertex": 1, "line": 2, "corner": 3}


class DegenerateRingError(ValueError):
    pass


class InsufficientPrimitivesError(ValueError):
    pass


def points_per_kind(kind):
    try:
        return POINTS_PER_KIND[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}; expected one of {KINDS}") from None


@dataclass(frozen=True)
class PolygonRing:
    """Closed, orientation-normalised contour. Build it with :func:`normalize_ring`."""

    vertices: np.ndarray  # (V, 2) float64

    def __len__(self):
        return len(self.vertices)

    def __eq__(self, other):
        return isinstance(other, PolygonRing) and np.array_equal(self.vertices, other.vertices)

    def __hash__(self):
        return hash(self.vertices.tobytes())

    def translated(self, dx, dy):
        return PolygonRing(self.vertices + np.array([dx, dy]))


@dataclass(frozen=True)
class Primitive:
    kind: str
    points: np.ndarray  # (n, 2)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) != points_per_kind(self.kind):
            raise ValueError(f"{self.kind} primitive needs {points_per_kind(self.kind)} points, got {len(pts)}")
        object.__setattr__(self, "points", pts)

    @property
    def anchor(self):
        return anchor_of(self.kind, self.points)


@dataclass
class OrderedPrimitiveSet:
    primitives: list
    orders: np.ndarray
    confidences: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.orders = np.asarray(self.orders, dtype=np.int64)
        if len(self.orders) != len(self.primitives):
            raise ValueError("primitives and orders differ in length")
        if self.confidences is not None:
            self.confidences = np.asarray(self.confidences, dtype=np.float64)
            if len(self.confidences) != len(self.primitives):
                raise ValueError("primitives and confidences differ in length")


@dataclass(frozen=True)
class SampledContour:
    points: np.ndarray  # (n_order, 2)
    start_index: int = 0


def anchor_of(kind, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if kind == "vertex":
        return points[0].copy()
    if kind == "line":
        return (points[0] + points[1]) / 2.0
    if kind == "corner":
        return points[1].copy()
    raise ValueError(f"unknown primitive kind {kind!r}")


def _shoelace(v):
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return float(np.sum(x * yn - xn * y))


def normalize_ring(vertices):
    """Drop consecutive duplicates (cyclically) and orient the ring clockwise on screen."""
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2:
        raise DegenerateRingError(f"expected (V, 2) vertices, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DegenerateRingError("ring has non-finite coordinates")
    keep = []
    for p in v:
        if keep and np.all(np.abs(p - keep[-1]) <= DUP_TOL):
            continue
        keep.append(p)
    while len(keep) > 1 and np.all(np.abs(keep[0] - keep[-1]) <= DUP_TOL):
        keep.pop()
    if len(keep) < 3:
        raise DegenerateRingError(f"ring has {len(keep)} distinct vertices, need at least 3")
    out = np.array(keep)
    if _shoelace(out) <= 0:
        # reverse traversal, keeping the first vertex first
        out = np.roll(out[::-1], 1, axis=0).copy()
    return PolygonRing(out)


def signed_area(ring):
    v = ring.vertices if isinstance(ring, PolygonRing) else np.asarray(ring, dtype=np.float64)
    return 0.5 * _shoelace(v)


def centroid(ring):
    v0 = ring.vertices[0]
    return v0 + _centroid_local(ring.vertices - v0)


def _centroid_local(v):
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum()
    if abs(a) < 1e-12:
        return v.mean(axis=0)
    return np.array([((x + xn) * cross).sum() / (3 * a), ((y + yn) * cross).sum() / (3 * a)])


def _edge_table(v):
    nxt = np.roll(v, -1, axis=0)
    lengths = np.hypot(*(nxt - v).T)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    return nxt, lengths, cum


def _twelve_oclock(v, c):
    """Arc-length position of the boundary point hit by the upward ray from ``c``.

    Among all hits the one nearest ``c`` wins. If the ray misses (centroid
    outside a concave ring, above the shape) the whole vertical line is used.
    """
    nxt, lengths, cum = _edge_table(v)
    cx, cy = c
    hits = []  # (y, arc position)
    for i, (p, q) in enumerate(zip(v, nxt)):
        x0, y0 = p
        x1, y1 = q
        if lengths[i] == 0:
            continue
        if x0 == x1:
            if x0 != cx:
                continue
            lo, hi = min(y0, y1), max(y0, y1)
            ys = [min(hi, cy)] if lo <= cy else [lo]
            for y in ys:
                t = (y - y0) / (y1 - y0)
                hits.append((y, cum[i] + t * lengths[i]))
            continue
        if not (min(x0, x1) <= cx <= max(x0, x1)):
            continue
        t = (cx - x0) / (x1 - x0)
        y = y0 + t * (y1 - y0)
        hits.append((y, cum[i] + t * lengths[i]))
    above = [h for h in hits if h[0] <= cy]
    pool = above if above else hits
    if not pool:
        return 0.0
    # nearest to the centroid, ties by arc position
    y, s = min(pool, key=lambda h: (abs(cy - h[0]), h[1]))
    return s


def point_at(v, s):
    """Boundary point at arc-length ``s`` (taken modulo the perimeter)."""
    nxt, lengths, cum = _edge_table(v)
    per = cum[-1]
    s = np.mod(np.asarray(s, dtype=np.float64), per)
    idx = np.searchsorted(cum, s, side="right") - 1
    idx = np.clip(idx, 0, len(v) - 1)
    # skip zero-length edges
    t = np.zeros_like(s)
    nz = lengths[idx] > 0
    t[nz] = (s[nz] - cum[idx][nz]) / lengths[idx][nz]
    return v[idx] + t[:, None] * (nxt[idx] - v[idx])


def sample_contour(ring, n_order):
    """``n_order`` boundary points at equal arc-length spacing, from 12 o'clock, in ring order."""
    if n_order < 3:
        raise ValueError("n_order must be at least 3")
    # work relative to the first vertex so results commute with translation
    v0 = ring.vertices[0]
    v = ring.vertices - v0
    _, _, cum = _edge_table(v)
    per = cum[-1]
    if not per > 0:
        raise DegenerateRingError("ring has zero perimeter")
    s0 = _twelve_oclock(v, _centroid_local(v))
    s = s0 + np.arange(n_order) * (per / n_order)
    return SampledContour(point_at(v, s) + v0, 0)


def extract_primitives(ring, kind):
    v = ring.vertices
    n = len(v)
    if kind == "vertex":
        return [Primitive("vertex", v[i : i + 1]) for i in range(n)]
    if kind == "line":
        return [Primitive("line", np.stack([v[i], v[(i + 1) % n]])) for i in range(n)]
    if kind == "corner":
        return [Primitive("corner", np.stack([v[i - 1], v[i], v[(i + 1) % n]])) for i in range(n)]
    raise ValueError(f"unknown primitive kind {kind!r}")


def assign_orders(primitives, sampled):
    """One order label per primitive from the nearest-primitive partition of the samples.

    Each sample goes to its nearest anchor (ties: lower primitive index). A
    primitive takes the index of the closest sample it received (ties: lower
    index); a primitive that received none takes its globally nearest sample.
    """
    if not primitives:
        raise ValueError("no primitives to label")
    anchors = np.stack([p.anchor for p in primitives])
    pts = sampled.points if isinstance(sampled, SampledContour) else np.asarray(sampled, dtype=np.float64)
    d = np.hypot(pts[:, None, 0] - anchors[None, :, 0], pts[:, None, 1] - anchors[None, :, 1])  # (K, P)
    owner = np.argmin(d, axis=1)
    orders = np.empty(len(primitives), dtype=np.int64)
    for j in range(len(primitives)):
        mine = np.nonzero(owner == j)[0]
        pool = mine if mine.size else np.arange(len(pts))
        orders[j] = pool[np.argmin(d[pool, j])]
    return OrderedPrimitiveSet(list(primitives), orders)


def label_primitives(ring, kind, n_order):
    """Convenience: primitives of ``ring`` with their order labels."""
    return assign_orders(extract_primitives(ring, kind), sample_contour(ring, n_order))


def is_cyclic_increasing(orders):
    """True when ``orders`` are distinct and increase around the cycle (one wrap allowed)."""
    o = np.asarray(orders)
    if len(o) < 2:
        return True
    if len(np.unique(o)) != len(o):
        return False
    descents = np.sum(np.roll(o, -1) < o)
    return descents == 1


def _sort_key(ops):
    n = len(ops.primitives)
    conf = ops.confidences if ops.confidences is not None else np.zeros(n)
    # lexsort: last key is primary
    return np.lexsort((np.arange(n), -conf, ops.orders))


def _orient_lines(lines):
    """Choose a direction for each line so consecutive lines chain end-to-start.

    Greedy around the cycle from the first line, seeded with both directions;
    the seed with the lower total junction distance (closing junction included)
    wins, ties keep the given direction.
    """
    best = None
    for flip_seed in (False, True):
        seed = lines[0][::-1] if flip_seed else lines[0]
        chain = [seed]
        cost = 0.0
        for ln in lines[1:]:
            end = chain[-1][1]
            d_keep = np.hypot(*(ln[0] - end))
            d_flip = np.hypot(*(ln[1] - end))
            if d_flip < d_keep:
                chain.append(ln[::-1])
                cost += d_flip
            else:
                chain.append(ln)
                cost += d_keep
        cost += np.hypot(*(chain[0][0] - chain[-1][1]))
        if best is None or cost < best[0]:
            best = (cost, chain)
    return best[1]


def assemble_polygon(ops, kind):
    """Connect primitives in predicted order into a normalised ring."""
    if len(ops.primitives) < 3:
        raise InsufficientPrimitivesError(f"{len(ops.primitives)} primitives, need at least 3")
    order = _sort_key(ops)
    prims = [ops.primitives[i] for i in order]
    if kind == "vertex":
        verts = np.stack([p.points[0] for p in prims])
    elif kind == "corner":
        verts = np.stack([p.points[1] for p in prims])
    elif kind == "line":
        chain = _orient_lines([p.points for p in prims])
        nxt = chain[1:] + chain[:1]
        verts = np.stack([(a[1] + b[0]) / 2.0 for a, b in zip(chain, nxt)])
    else:
        raise ValueError(f"unknown primitive kind {kind!r}")
    return normalize_ring(verts)


def rings_equal_cyclic(a, b, atol=0.0):
    """Ring equality up to cyclic rotation of the vertex list."""
    va = a.vertices if isinstance(a, PolygonRing) else np.asarray(a)
    vb = b.vertices if isinstance(b, PolygonRing) else np.asarray(b)
    if va.shape != vb.shape:
        return False
    return any(np.all(np.abs(np.roll(vb, -k, axis=0) - va) <= atol) for k in range(len(vb)))


def ring_max_error_cyclic(a, b):
    """Smallest max-vertex distance over cyclic rotations (inf on vertex-count mismatch)."""
    va, vb = a.vertices, b.vertices
    if va.shape != vb.shape:
        return np.inf
    return min(float(np.max(np.hypot(*(np.roll(vb, -k, axis=0) - va).T))) for k in range(len(vb)))


def bounds(ring):
    v = ring.vertices
    return (float(v[:, 0].min()), float(v[:, 1].min()), float(v[:, 0].max()), float(v[:, 1].max()))


def as_primitives(kind, coords: Sequence):
    """Build primitives from an (M, 2n) coordinate array."""
    n = points_per_kind(kind)
    arr = np.asarray(coords, dtype=np.float64).reshape(-1, n, 2)
    return [Primitive(kind, a) for a in arr]
