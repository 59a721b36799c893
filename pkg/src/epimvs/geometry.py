"""Pinhole camera algebra, plane-sweep warping and depth hypothesis generation.

Pixel convention: integer coordinates address pixel centers and continuous
coordinates live in the same frame, so pixel ``(u, v)`` back-projects along
``K^-1 @ (u, v, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

# Homogeneous depth below this is treated as "at or behind the image plane".
PROJECTION_EPS = 1e-9


@dataclass(frozen=True)
class CameraModel:
    """One pinhole view: world->camera extrinsics plus intrinsics.

    A world point ``X`` maps to camera coordinates ``R @ X + t`` and to
    pixels through ``K``.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("intrinsics must be upper-triangular")
        if not (K[0, 0] > 0 and K[1, 1] > 0) or K[2, 2] != 1.0:
            raise ValueError("intrinsics need positive focal lengths and K[2,2] == 1")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image size must be positive")
        for arr in (K, R, t):
            arr.setflags(write=False)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def K(self) -> np.ndarray:
        return self.intrinsics

    @property
    def R(self) -> np.ndarray:
        return self.rotation

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def extrinsic(self) -> np.ndarray:
        E = np.eye(4)
        E[:3, :3] = self.rotation
        E[:3, 3] = self.translation
        return E

    def scaled(self, factor: float) -> "CameraModel":
        """Camera for an image downscaled by ``factor`` (focal and principal point divided)."""
        K = self.intrinsics.copy()
        K[:2, :] /= factor
        K[2, 2] = 1.0
        return CameraModel(
            K,
            self.rotation,
            self.translation,
            int(round(self.width / factor)),
            int(round(self.height / factor)),
        )

    def project(self, points: np.ndarray):
        """Project world points ``(..., 3)`` to pixels.

        Returns:
            (pixels ``(..., 2)``, camera-frame depth ``(...)``). Pixels are
            NaN where the depth is not positive.
        """
        points = np.asarray(points, dtype=np.float64)
        cam = points @ self.rotation.T + self.translation
        return _dehomogenize(cam @ self.intrinsics.T)

    def backproject(self, pixels: np.ndarray, depth) -> np.ndarray:
        """World points for pixels ``(..., 2)`` at camera-frame depth ``(...)``."""
        cam = pixel_rays(self.intrinsics, pixels) * np.asarray(depth, dtype=np.float64)[..., None]
        return (cam - self.translation) @ self.rotation

    def in_bounds(self, pixels: np.ndarray) -> np.ndarray:
        """``[0, W) x [0, H)`` membership."""
        x, y = pixels[..., 0], pixels[..., 1]
        with np.errstate(invalid="ignore"):
            return (x >= 0) & (x < self.width) & (y >= 0) & (y < self.height)


def _dehomogenize(h: np.ndarray):
    z = h[..., 2]
    ok = z > PROJECTION_EPS
    safe = np.where(ok, z, 1.0)
    pix = h[..., :2] / safe[..., None]
    pix = np.where(ok[..., None], pix, np.nan)
    return pix, z


def pixel_rays(K: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """``K^-1 @ (u, v, 1)`` for pixels ``(..., 2)``; third component is exactly 1."""
    pixels = np.asarray(pixels, dtype=np.float64)
    fx, s, cx = K[0]
    fy, cy = K[1, 1], K[1, 2]
    y = (pixels[..., 1] - cy) / fy
    x = (pixels[..., 0] - cx - s * y) / fx
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """``(H, W, 2)`` array of integer pixel-center coordinates ``(u, v)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def relative_pose(ref_cam: CameraModel, src_cam: CameraModel):
    """``(R, t)`` mapping reference-camera coordinates into the source camera."""
    R = src_cam.rotation @ ref_cam.rotation.T
    t = src_cam.translation - R @ ref_cam.translation
    return R, t


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def fundamental_matrix(ref_cam: CameraModel, src_cam: CameraModel) -> np.ndarray:
    """F with ``p_s^T F p_r = 0`` for corresponding homogeneous pixels."""
    R, t = relative_pose(ref_cam, src_cam)
    return np.linalg.inv(src_cam.K).T @ skew(t) @ R @ np.linalg.inv(ref_cam.K)


def warp_points(ref_cam: CameraModel, src_cam: CameraModel, pixels, depth):
    """Vectorised plane-sweep warp of reference pixels at given depths.

    ``pixels`` has shape ``(..., 2)`` and ``depth`` broadcasts against
    ``pixels[..., 0]``.  The source pixel is
    ``K_s (R (K_r^-1 p_r d) + t)`` dehomogenised.

    Returns:
        coords: ``(..., 2)`` continuous source pixels (NaN behind the camera).
        valid: boolean mask, in front of the source camera and inside
            ``[0, W) x [0, H)``.
    """
    R, t = relative_pose(ref_cam, src_cam)
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    rays = pixel_rays(ref_cam.K, pixels)
    # P = K_s R K_r^-1 applied once per pixel, depth enters linearly
    rot = rays @ (src_cam.K @ R).T
    trans = src_cam.K @ t
    h = rot * depth[..., None] + trans
    coords, _ = _dehomogenize(h)
    valid = (h[..., 2] > PROJECTION_EPS) & src_cam.in_bounds(coords)
    return coords, valid


def warp_pixel(ref_cam: CameraModel, src_cam: CameraModel, p_r, d: float):
    """Warp a single reference pixel at depth ``d`` into the source image.

    Returns ``(coord, valid)``; an invalid sample is not an error.
    """
    if not d > 0:
        raise ValueError("depth must be positive")
    coord, valid = warp_points(ref_cam, src_cam, np.asarray(p_r, dtype=np.float64), d)
    return coord, bool(valid)


def epipolar_samples(ref_cam: CameraModel, src_cam: CameraModel, p_r, hyps):
    """Source-image coordinates of ``p_r`` at every hypothesised depth.

    ``hyps`` is a :class:`DepthHypothesisSet` or a 1-D array of depths.
    """
    depths = hyps.values if isinstance(hyps, DepthHypothesisSet) else np.asarray(hyps)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    p = np.broadcast_to(np.asarray(p_r, dtype=np.float64), depths.shape + (2,))
    return warp_points(ref_cam, src_cam, p, depths)


@dataclass(frozen=True)
class DepthHypothesisSet:
    """Per-pixel sampled depths for one cascade stage.

    ``values`` has shape ``(..., D)``, strictly increasing along the last axis.
    ``inverse_span`` is the inverse-depth range the samples were drawn from.
    """

    stage: int
    values: np.ndarray
    inverse_span: float
    d_min: float
    d_max: float
    fallback: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def count(self) -> int:
        return self.values.shape[-1]

    @property
    def range(self) -> float:
        return self.inverse_span


def _check_range(d_min, d_max):
    if not (0 < d_min < d_max) or not np.isfinite(d_max):
        raise ConfigurationError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")


def inverse_depth_samples(d_min: float, d_max: float, D: int) -> np.ndarray:
    """D depths equidistant in inverse depth from ``d_min`` to ``d_max`` (ascending)."""
    if D < 2:
        raise ConfigurationError(f"need at least 2 hypotheses, got {D}")
    _check_range(d_min, d_max)
    j = np.arange(D, dtype=np.float64)
    inv = 1.0 / d_min + (j / (D - 1)) * (1.0 / d_max - 1.0 / d_min)
    depth = 1.0 / inv
    depth[0], depth[-1] = d_min, d_max
    return depth


def init_inverse_depth_hypotheses(d_min: float, d_max: float, D: int, shape=()) -> DepthHypothesisSet:
    """Stage-0 hypotheses, identical at every pixel of ``shape``."""
    depth = inverse_depth_samples(d_min, d_max, D)
    values = np.broadcast_to(depth, tuple(shape) + (D,)).copy()
    return DepthHypothesisSet(0, values, 1.0 / d_min - 1.0 / d_max, d_min, d_max)


def next_inverse_range(inverse_span: float, D_prev: int) -> float:
    """Inverse-depth span of the next stage: the previous span over ``D_prev - 1``."""
    if D_prev < 2:
        raise ConfigurationError(f"D_prev must be >= 2, got {D_prev}")
    if not inverse_span > 0:
        raise ConfigurationError("inverse span must be positive")
    return inverse_span / (D_prev - 1)


def refine_hypotheses(
    prev_depth: np.ndarray,
    D: int,
    inverse_span: float,
    d_min: float,
    d_max: float,
    valid: np.ndarray | None = None,
    stage: int = 1,
    min_separation: float = 1e-12,
) -> DepthHypothesisSet:
    """Hypotheses centred (in inverse depth) on the previous stage's depth.

    Inverse-depth offsets are ``(j - (D-1)/2) * span / D``.  A window that
    pokes outside ``[1/d_max, 1/d_min]`` is shifted back inside as a whole so
    spacing and span survive the clamp.  The spacing never drops below
    ``min_separation``.  Pixels without a valid previous depth fall back to
    stage-0 sampling over the full range.
    """
    if D < 2:
        raise ConfigurationError(f"need at least 2 hypotheses, got {D}")
    _check_range(d_min, d_max)
    prev = np.asarray(prev_depth, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(prev) & (prev > 0)
    else:
        valid = np.asarray(valid, dtype=bool) & np.isfinite(prev) & (prev > 0)

    inv_lo, inv_hi = 1.0 / d_max, 1.0 / d_min
    step = max(inverse_span / D, min_separation)
    half = step * (D - 1) / 2.0
    center = np.where(valid, 1.0 / np.where(valid, prev, 1.0), 0.5 * (inv_lo + inv_hi))
    if 2 * half < inv_hi - inv_lo:
        center = np.clip(center, inv_lo + half, inv_hi - half)
    else:
        center = np.full_like(center, 0.5 * (inv_lo + inv_hi))
    # descending inverse depth == ascending depth
    offsets = ((D - 1) / 2.0 - np.arange(D)) * step
    inv = center[..., None] + offsets
    values = 1.0 / np.clip(inv, inv_lo, inv_hi)

    if not valid.all():
        values[~valid] = inverse_depth_samples(d_min, d_max, D)
    return DepthHypothesisSet(stage, values, inverse_span, d_min, d_max, fallback=~valid)
