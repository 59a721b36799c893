"""Depth filtering, point-cloud fusion and evaluation metrics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numba
import numpy as np

from .errors import UsageError
from .features import BORDER_TOL
from .geometry import CameraModel, pixel_grid

logger = logging.getLogger(__name__)

REPROJ_PX_TOL = 1.0
REL_DEPTH_TOL = 0.01
MIN_CONSISTENT = 4
CONFIDENCE_THRESHOLD = 0.5


@dataclass(frozen=True)
class PointCloud:
    """World-frame points with optional uint8 colours and ``(view, u, v)`` provenance."""

    points: np.ndarray
    colors: np.ndarray | None = None
    provenance: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            col = np.asarray(self.colors)
            if col.shape != pts.shape:
                raise ValueError(f"colors {col.shape} do not match points {pts.shape}")
            object.__setattr__(self, "colors", col.astype(np.uint8))
        if self.provenance is not None:
            object.__setattr__(self, "provenance", np.asarray(self.provenance, dtype=np.int64).reshape(-1, 3))

    def __len__(self):
        return len(self.points)


def sample_depth_gated(depth: np.ndarray, coords: np.ndarray, expected: np.ndarray, rel_tol: float):
    """Bilinear inverse-depth lookup using only corners within ``rel_tol`` of ``expected``.

    Weights of the accepted corners are renormalised, so a lookup next to an
    occlusion edge reads the surface that is actually being tested instead of
    a blend of foreground and background.

    Returns:
        (depth, ok) with ``ok`` False where no corner qualifies.
    """
    H, W = depth.shape
    x, y = coords[..., 0], coords[..., 1]
    t = BORDER_TOL
    inside = np.isfinite(x) & np.isfinite(y) & (x >= -t) & (x <= W - 1 + t) & (y >= -t) & (y <= H - 1 + t)
    xs = np.where(inside, np.clip(x, 0, W - 1), 0.0)
    ys = np.where(inside, np.clip(y, 0, H - 1), 0.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), W - 2 if W > 1 else 0)
    y0 = np.minimum(np.floor(ys).astype(np.intp), H - 2 if H > 1 else 0)
    fx, fy = xs - x0, ys - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    num = np.zeros(x.shape)
    den = np.zeros(x.shape)
    for yy, xx, w in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)), (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
        d = depth[yy, xx]
        take = (d > 0) & (np.abs(d - expected) <= rel_tol * np.abs(expected)) & (w > 0)
        # blend inverse depth, which is affine in pixels on any plane
        num += np.where(take, w / np.where(take, d, 1.0), 0.0)
        den += np.where(take, w, 0.0)
    ok = inside & (den > 0)
    return np.where(ok, den / np.where(ok, num, 1.0), 0.0), ok


@dataclass
class ConsistencyCheck:
    """Round-trip test of one reference view against one source view."""

    consistent: np.ndarray  # (H, W) bool
    reprojected_depth: np.ndarray  # source depth carried back into the reference frame
    source_pixel: np.ndarray  # (H, W, 2) rounded source pixel that supports each reference pixel


def check_pair(
    ref_depth: np.ndarray,
    ref_cam: CameraModel,
    src_depth: np.ndarray,
    src_cam: CameraModel,
    reproj_px_tol: float = REPROJ_PX_TOL,
    rel_depth_tol: float = REL_DEPTH_TOL,
) -> ConsistencyCheck:
    H, W = ref_depth.shape
    pix = pixel_grid(W, H)
    valid = ref_depth > 0
    d_ref = np.where(valid, ref_depth, 1.0)
    X = ref_cam.backproject(pix, d_ref)
    p_src, z = src_cam.project(X)
    d_src, ok = sample_depth_gated(src_depth, p_src, z, rel_depth_tol)
    ok &= valid & (z > 0)
    X_back = src_cam.backproject(np.where(ok[..., None], p_src, 0.0), np.where(ok, d_src, 1.0))
    p_back, d_back = ref_cam.project(X_back)
    err_px = np.linalg.norm(p_back - pix, axis=-1)
    with np.errstate(invalid="ignore"):
        good = ok & (err_px <= reproj_px_tol) & (np.abs(d_back - d_ref) <= rel_depth_tol * d_ref)
    src_pix = np.rint(np.where(good[..., None], p_src, 0.0)).astype(np.int64)
    return ConsistencyCheck(good, np.where(good, d_back, 0.0), src_pix)


@dataclass
class FilterResult:
    masks: list
    counts: list
    checks: list  # checks[r][s] for s != r, None on the diagonal
    insufficient_views: bool = False


def geometric_filter(
    depths,
    cams,
    reproj_px_tol: float = REPROJ_PX_TOL,
    rel_depth_tol: float = REL_DEPTH_TOL,
    min_consistent: int = MIN_CONSISTENT,
    valid=None,
) -> FilterResult:
    """Keep pixels whose depth agrees with at least ``min_consistent`` other views.

    A source view agrees when the round trip reference -> source -> reference
    lands within ``reproj_px_tol`` pixels and within ``rel_depth_tol``
    relative depth.  With fewer than ``min_consistent + 1`` views nothing can
    pass, so every mask is empty and ``insufficient_views`` is set.
    """
    n = len(depths)
    if n != len(cams) or n == 0:
        raise UsageError("need one camera per depth map")
    shape = np.shape(depths[0])
    if any(np.shape(d) != shape for d in depths):
        raise UsageError("all depth maps must share one resolution")
    depths = [np.asarray(d, dtype=np.float64) for d in depths]
    if valid is not None:
        depths = [np.where(np.asarray(v, dtype=bool), d, 0.0) for d, v in zip(depths, valid)]
    checks = [[None] * n for _ in range(n)]
    counts, masks = [], []
    for r in range(n):
        count = np.zeros(shape, dtype=np.int64)
        for s in range(n):
            if s == r:
                continue
            chk = check_pair(depths[r], cams[r], depths[s], cams[s], reproj_px_tol, rel_depth_tol)
            checks[r][s] = chk
            count += chk.consistent
        counts.append(count)
        masks.append((depths[r] > 0) & (count >= min_consistent))
    short = n < min_consistent + 1
    if short and min_consistent > 0:
        warnings.warn(f"{n} views cannot reach {min_consistent} consistent sources; everything is filtered")
        masks = [np.zeros(shape, dtype=bool) for _ in range(n)]
    return FilterResult(masks, counts, checks, short and min_consistent > 0)


def photometric_filter(confidence: np.ndarray, threshold: float = CONFIDENCE_THRESHOLD, valid=None) -> np.ndarray:
    conf = np.asarray(confidence, dtype=np.float64)
    keep = conf >= threshold
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool)
    return keep


def fuse_point_cloud(depths, cams, masks, filt: FilterResult | None = None, images=None, **tols) -> PointCloud:
    """Back-project kept pixels at their multi-view averaged depth.

    Views are visited in index order and pixels in row-major order; a source
    pixel that supported an earlier fused point is claimed and never seeds a
    point of its own.
    """
    n = len(depths)
    if filt is None:
        filt = geometric_filter(depths, cams, **tols)
    H, W = np.shape(depths[0])
    pix = pixel_grid(W, H)
    claimed = [np.zeros((H, W), dtype=bool) for _ in range(n)]
    pts, cols, prov = [], [], []
    for r in range(n):
        seeds = np.asarray(masks[r], dtype=bool) & ~claimed[r] & (depths[r] > 0)
        total = np.where(seeds, depths[r], 0.0)
        num = seeds.astype(np.float64)
        for s in range(n):
            chk = filt.checks[r][s]
            if chk is None:
                continue
            use = seeds & chk.consistent
            total += np.where(use, chk.reprojected_depth, 0.0)
            num += use
            if s > r:
                sp = chk.source_pixel[use]
                claimed[s][np.clip(sp[:, 1], 0, H - 1), np.clip(sp[:, 0], 0, W - 1)] = True
        if not seeds.any():
            continue
        d = total[seeds] / num[seeds]
        pts.append(cams[r].backproject(pix[seeds], d))
        v, u = np.nonzero(seeds)
        prov.append(np.stack([np.full(len(u), r), u, v], axis=-1))
        if images is not None:
            cols.append(np.clip(np.rint(np.asarray(images[r])[seeds] * 255), 0, 255).astype(np.uint8))
    if not pts:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3), np.uint8) if images is not None else None, np.zeros((0, 3)))
    return PointCloud(
        np.concatenate(pts),
        np.concatenate(cols) if images is not None else None,
        np.concatenate(prov),
    )


# --- metrics -----------------------------------------------------------------


def depth_metrics(pred, gt, valid=None):
    """(EPE, e1, e3): mean absolute error and fractions above 1 and 3 depth units."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise UsageError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = np.ones(gt.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not mask.any():
        raise UsageError("no valid pixels to evaluate")
    err = np.abs(pred[mask] - gt[mask])
    return float(err.mean()), float(np.mean(err > 1.0)), float(np.mean(err > 3.0))


@numba.njit(cache=True)
def _grid_nn(query, ref, order, keys, starts, ends, origin, h, cap):
    out = np.empty(query.shape[0])
    for q in range(query.shape[0]):
        cx = int(np.floor((query[q, 0] - origin[0]) / h))
        cy = int(np.floor((query[q, 1] - origin[1]) / h))
        cz = int(np.floor((query[q, 2] - origin[2]) / h))
        best = cap * cap
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    x, y, z = cx + dx, cy + dy, cz + dz
                    if x < 0 or y < 0 or z < 0:
                        continue
                    key = (x * 2097152 + y) * 2097152 + z
                    i = np.searchsorted(keys, key)
                    if i >= keys.shape[0] or keys[i] != key:
                        continue
                    for k in range(starts[i], ends[i]):
                        p = order[k]
                        d = 0.0
                        for a in range(3):
                            t = query[q, a] - ref[p, a]
                            d += t * t
                        if d < best:
                            best = d
        out[q] = np.sqrt(best)
    return out


def nearest_distances(query: np.ndarray, ref: np.ndarray, cap: float) -> np.ndarray:
    """Exact nearest-neighbour distance from each query to ``ref``, capped at ``cap``.

    Uses a uniform grid of cell size ``cap``: any point outside the 27 cells
    around a query is farther than the cap.
    """
    query = np.ascontiguousarray(query, dtype=np.float64).reshape(-1, 3)
    ref = np.ascontiguousarray(ref, dtype=np.float64).reshape(-1, 3)
    if not cap > 0:
        raise UsageError("dist_cap must be positive")
    origin = np.minimum(query.min(axis=0), ref.min(axis=0)) - 2 * cap
    cells = np.floor((ref - origin) / cap).astype(np.int64)
    if cells.max() >= 2097152:
        raise UsageError("cloud extent too large for dist_cap")
    keys = (cells[:, 0] * 2097152 + cells[:, 1]) * 2097152 + cells[:, 2]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    uniq, starts = np.unique(sorted_keys, return_index=True)
    ends = np.append(starts[1:], len(sorted_keys))
    return _grid_nn(query, ref, order, uniq, starts, ends, origin, float(cap), float(cap))


def cloud_metrics(recon, gt, dist_cap: float = 20.0):
    """(accuracy, completeness, overall) with distances capped at ``dist_cap``."""
    r = recon.points if isinstance(recon, PointCloud) else np.asarray(recon, dtype=np.float64).reshape(-1, 3)
    g = gt.points if isinstance(gt, PointCloud) else np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(r) == 0 or len(g) == 0:
        raise UsageError("cloud metrics need non-empty clouds")
    acc = float(nearest_distances(r, g, dist_cap).mean())
    comp = float(nearest_distances(g, r, dist_cap).mean())
    return acc, comp, (acc + comp) / 2.0
