"""Numeric inner loops: scanline fill, rectangular assignment, mask IoU.

Each kernel has a numba loop implementation (``*_nb``) and a numpy
implementation (``*_np``). The public name is bound to one of them at import
time according to :mod:`primpoly._accel`. Both must agree bit-for-bit; the
test-suite checks this and ``benchmarks/bench_kernels.py`` times them.
"""
import numpy as np

from primpoly._accel import njit, pick

# ---------------------------------------------------------------------------
# even-odd scanline fill, sampled at pixel centres
# ---------------------------------------------------------------------------


@njit
def _fill_nb(xs, ys, height, width):
    out = np.zeros((height, width), dtype=np.uint8)
    nv = xs.shape[0]
    if nv < 3:
        return out
    ymin = ys.min()
    ymax = ys.max()
    r0 = max(0, int(np.ceil(ymin - 0.5)))
    r1 = min(height - 1, int(np.ceil(ymax - 0.5)) - 1)
    nodes = np.empty(nv, dtype=np.float64)
    for r in range(r0, r1 + 1):
        yc = r + 0.5
        k = 0
        j = nv - 1
        for i in range(nv):
            y0 = ys[j]
            y1 = ys[i]
            if (y0 <= yc < y1) or (y1 <= yc < y0):
                x0 = xs[j]
                x1 = xs[i]
                nodes[k] = x0 + (yc - y0) * (x1 - x0) / (y1 - y0)
                k += 1
            j = i
        crossings = np.sort(nodes[:k])
        for p in range(0, k - 1, 2):
            c0 = int(np.ceil(crossings[p] - 0.5))
            c1 = int(np.ceil(crossings[p + 1] - 0.5))
            if c0 < 0:
                c0 = 0
            if c1 > width:
                c1 = width
            for c in range(c0, c1):
                out[r, c] = 1
    return out


def _fill_np(xs, ys, height, width):
    out = np.zeros((height, width), dtype=np.uint8)
    if xs.shape[0] < 3 or height == 0 or width == 0:
        return out
    yc = np.arange(height, dtype=np.float64)[:, None] + 0.5
    x0 = np.roll(xs, 1)[None, :]
    y0 = np.roll(ys, 1)[None, :]
    x1 = xs[None, :]
    y1 = ys[None, :]
    hit = ((y0 <= yc) & (yc < y1)) | ((y1 <= yc) & (yc < y0))
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x0 + (yc - y0) * (x1 - x0) / (y1 - y0)
    xc = np.sort(np.where(hit, xc, np.inf), axis=1)
    if xc.shape[1] % 2:
        xc = np.concatenate([xc, np.full((height, 1), np.inf)], axis=1)
    left = xc[:, 0::2]
    right = xc[:, 1::2]
    ok = np.isfinite(left) & np.isfinite(right)
    rows = np.broadcast_to(np.arange(height)[:, None], left.shape)[ok]
    c0 = np.clip(np.ceil(left[ok] - 0.5), 0, width).astype(np.int64)
    c1 = np.clip(np.ceil(right[ok] - 0.5), 0, width).astype(np.int64)
    keep = c1 > c0
    acc = np.zeros((height, width + 1), dtype=np.int32)
    np.add.at(acc, (rows[keep], c0[keep]), 1)
    np.add.at(acc, (rows[keep], c1[keep]), -1)
    out[:] = np.cumsum(acc[:, :width], axis=1) > 0
    return out


fill_polygon = pick(_fill_nb, _fill_np)

# ---------------------------------------------------------------------------
# rectangular linear assignment (shortest augmenting path, rows <= cols)
# ---------------------------------------------------------------------------


@njit
def _lsap_nb(cost):
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    shortest = np.empty(nc)
    path = np.full(nc, -1, dtype=np.int64)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)
    sr = np.zeros(nr, dtype=np.bool_)
    sc = np.zeros(nc, dtype=np.bool_)
    for cur in range(nr):
        shortest[:] = np.inf
        sr[:] = False
        sc[:] = False
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            sr[i] = True
            lowest = np.inf
            best = -1
            for j in range(nc):
                if sc[j]:
                    continue
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                s = shortest[j]
                if s < lowest or (s == lowest and best != -1 and row4col[j] == -1 and row4col[best] != -1):
                    lowest = s
                    best = j
            if best == -1 or lowest == np.inf:
                return col4row, False
            min_val = lowest
            sc[best] = True
            if row4col[best] == -1:
                sink = best
            else:
                i = row4col[best]
        u[cur] += min_val
        for i in range(nr):
            if sr[i] and i != cur:
                u[i] += min_val - shortest[col4row[i]]
        for j in range(nc):
            if sc[j]:
                v[j] -= min_val - shortest[j]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            nxt = col4row[i]
            col4row[i] = j
            j = nxt
            if i == cur:
                break
    return col4row, True


def _lsap_np(cost):
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    path = np.full(nc, -1, dtype=np.int64)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)
    cols = np.arange(nc)
    for cur in range(nr):
        shortest = np.full(nc, np.inf)
        sr = np.zeros(nr, dtype=bool)
        sc = np.zeros(nc, dtype=bool)
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            sr[i] = True
            r = min_val + cost[i] - u[i] - v
            better = (~sc) & (r < shortest)
            path[better] = i
            shortest[better] = r[better]
            cand = np.where(sc, np.inf, shortest)
            lowest = cand.min()
            if lowest == np.inf:
                return col4row, False
            # ties: first free column, else first column
            tied = cols[(cand == lowest) & ~sc]
            free = tied[row4col[tied] == -1]
            best = int(free[0]) if free.size else int(tied[0])
            min_val = lowest
            sc[best] = True
            if row4col[best] == -1:
                sink = best
            else:
                i = int(row4col[best])
        u[cur] += min_val
        others = sr.copy()
        others[cur] = False
        idx = np.nonzero(others)[0]
        u[idx] += min_val - shortest[col4row[idx]]
        v[sc] -= min_val - shortest[sc]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            nxt = int(col4row[i])
            col4row[i] = j
            j = nxt
            if i == cur:
                break
    return col4row, True


_lsap = pick(_lsap_nb, _lsap_np)


def linear_assignment(cost):
    """Minimum-cost assignment of every row of ``cost`` to a distinct column.

    ``cost`` must be finite with ``rows <= cols``. Returns the column chosen for
    each row. Among equal-cost candidates the lowest column index wins, with a
    preference for unassigned columns, so results are reproducible.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] > cost.shape[1]:
        raise ValueError(f"expected a rows<=cols grid, got shape {cost.shape}")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    col4row, ok = _lsap(cost)
    if not ok:
        raise ValueError("assignment is infeasible")
    return np.asarray(col4row, dtype=np.int64)


# ---------------------------------------------------------------------------
# pairwise mask IoU
# ---------------------------------------------------------------------------


@njit
def _pairwise_iou_nb(a, b):
    na = a.shape[0]
    nb = b.shape[0]
    npx = a.shape[1]
    out = np.zeros((na, nb))
    area_a = np.zeros(na, dtype=np.int64)
    area_b = np.zeros(nb, dtype=np.int64)
    for i in range(na):
        for p in range(npx):
            area_a[i] += a[i, p]
    for j in range(nb):
        for p in range(npx):
            area_b[j] += b[j, p]
    for i in range(na):
        for j in range(nb):
            inter = 0
            for p in range(npx):
                inter += a[i, p] & b[j, p]
            union = area_a[i] + area_b[j] - inter
            if union > 0:
                out[i, j] = inter / union
    return out


def _pairwise_iou_np(a, b):
    fa = a.astype(np.float32)
    fb = b.astype(np.float32)
    # float32 counts are exact below 2**24 pixels
    inter = (fa @ fb.T).astype(np.float64)
    union = fa.sum(1).astype(np.float64)[:, None] + fb.sum(1).astype(np.float64)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


_pairwise_iou = pick(_pairwise_iou_nb, _pairwise_iou_np)


def pairwise_mask_iou(a, b):
    """IoU between every mask in ``a`` (P,H,W) and every mask in ``b`` (G,H,W)."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"mask shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    flat_a = np.ascontiguousarray(a.reshape(a.shape[0], -1))
    flat_b = np.ascontiguousarray(b.reshape(b.shape[0], -1))
    return _pairwise_iou(flat_a, flat_b)
