"""Synthetic multi-view scenes with analytic ground-truth depth.

Scenes are textured rectangles and spheres seen by a ring of pinhole
cameras.  Depth comes from exact ray-primitive intersection, shading is
Lambertian with seeded multi-octave value-noise albedo evaluated at the 3-D
surface point (so every view sees the same texture), and per-view
photometric gain/offset jitter plus Gaussian noise is applied afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import SceneError
from .geometry import CameraModel, pixel_grid, pixel_rays

_HIT_TOL = 1e-9


@dataclass(frozen=True)
class Plane:
    """Rectangle through ``center`` with unit ``normal``; ``size`` along its (u, v) axes."""

    center: tuple
    normal: tuple
    size: tuple = (1000.0, 1000.0)
    seed: int = 0
    tint: tuple = (1.0, 1.0, 1.0)

    def axes(self):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        ref = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(ref, n)
        u /= np.linalg.norm(u)
        return n, u, np.cross(n, u)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    seed: int = 0
    tint: tuple = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render a scene deterministically."""

    planes: tuple = ()
    spheres: tuple = ()
    num_views: int = 5
    ring_radius: float = 80.0
    ring_center: tuple = (0.0, 0.0, 0.0)
    target: tuple = (0.0, 0.0, 680.0)
    reference_at_center: bool = True
    width: int = 320
    height: int = 256
    focal: float = 400.0
    d_min: float = 425.0
    d_max: float = 935.0
    light: tuple = (0.3, -0.5, -1.0)
    ambient: float = 0.35
    texture_period: float = 96.0
    texture_octaves: int = 5
    gain_jitter: float = 0.0
    offset_jitter: float = 0.0
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.width % 8 or self.height % 8:
            raise SceneError(f"resolution {self.width}x{self.height} must be divisible by 8")
        if self.num_views < 1:
            raise SceneError("need at least one view")
        if not 0 < self.d_min < self.d_max:
            raise SceneError("depth range must satisfy 0 < d_min < d_max")

    @property
    def depth_span(self) -> float:
        return self.d_max - self.d_min


def look_at(center, target, width, height, focal) -> CameraModel:
    """Camera at ``center`` looking at ``target`` with image y pointing roughly along world +y."""
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    down = np.array([0.0, 1.0, 0.0])
    x = np.cross(down, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
    return CameraModel(K, R, -R @ c, width, height)


def camera(spec: SceneSpec, view: int) -> CameraModel:
    """View 0 sits at the ring centre when ``reference_at_center``; others on the ring."""
    rc = np.asarray(spec.ring_center, dtype=np.float64)
    if spec.reference_at_center:
        if view == 0:
            pos = rc
        else:
            n = spec.num_views - 1
            a = 2 * np.pi * (view - 1) / n
            pos = rc + spec.ring_radius * np.array([np.cos(a), np.sin(a), 0.0])
    else:
        a = 2 * np.pi * view / spec.num_views
        pos = rc + spec.ring_radius * np.array([np.cos(a), np.sin(a), 0.0])
    return look_at(pos, spec.target, spec.width, spec.height, spec.focal)


def cameras(spec: SceneSpec):
    return [camera(spec, i) for i in range(spec.num_views)]


# --- ray casting -------------------------------------------------------------


def _check_camera(spec: SceneSpec, origin):
    for s in spec.spheres:
        if np.linalg.norm(origin - np.asarray(s.center)) <= s.radius:
            raise SceneError("camera centre lies inside a sphere")


def cast(spec: SceneSpec, origin, dirs):
    """First hit of rays ``origin + t * dirs``.

    Returns:
        (t ``(...)`` with inf on miss, primitive id ``(...)`` (-1 on miss),
        world points, unit normals)
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    shape = dirs.shape[:-1]
    best = np.full(shape, np.inf)
    pid = np.full(shape, -1, dtype=np.int64)
    normals = np.zeros(shape + (3,))
    for k, pl in enumerate(spec.planes):
        n, u, v = pl.axes()
        c = np.asarray(pl.center, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ n) / denom
        hit = origin + t[..., None] * dirs
        rel = hit - c
        inside = (np.abs(rel @ u) <= pl.size[0] / 2) & (np.abs(rel @ v) <= pl.size[1] / 2)
        ok = np.isfinite(t) & (t > 0) & inside & (t < best)
        best = np.where(ok, t, best)
        pid = np.where(ok, k, pid)
        normals = np.where(ok[..., None], n, normals)
    base = len(spec.planes)
    for k, sp in enumerate(spec.spheres):
        c = np.asarray(sp.center, dtype=np.float64)
        oc = origin - c
        a = np.sum(dirs * dirs, axis=-1)
        b = 2 * (dirs @ oc)
        cc = oc @ oc - sp.radius**2
        disc = b * b - 4 * a * cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        # numerically stable root
        qv = -0.5 * (b + np.copysign(sq, b))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = qv / a
            t2 = cc / qv
        t = np.where((t1 > 0) & (t2 > 0), np.minimum(t1, t2), np.where(t1 > 0, t1, t2))
        ok = (disc >= 0) & (t > 0) & (t < best)
        best = np.where(ok, t, best)
        pid = np.where(ok, base + k, pid)
        hit = origin + t[..., None] * dirs
        nrm = (hit - c) / sp.radius
        normals = np.where(ok[..., None], nrm, normals)
    points = origin + np.where(np.isfinite(best), best, 0.0)[..., None] * dirs
    return best, pid, points, normals


def depth_at(spec: SceneSpec, view: int, coords) -> np.ndarray:
    """Analytic depth (camera z) at continuous pixel coordinates; 0 where no surface."""
    cam = camera(spec, view)
    origin = cam.center
    _check_camera(spec, origin)
    dirs = pixel_rays(cam.K, coords) @ cam.R
    t, pid, _, _ = cast(spec, origin, dirs)
    return np.where(pid >= 0, t, 0.0)  # rays have unit camera-z, so t is depth


# --- texture -----------------------------------------------------------------


def _hash(ix, iy, iz, seed):
    h = (ix * 73856093) ^ (iy * 19349663) ^ (iz * 83492791) ^ (np.int64(seed) * 2654435761)
    h = h.astype(np.uint64)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points, seed: int, period: float, octaves: int, persistence: float = 0.6) -> np.ndarray:
    """Multi-octave 3-D value noise in ``[0, 1]``."""
    pts = np.asarray(points, dtype=np.float64)
    total = np.zeros(pts.shape[:-1])
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        p = pts / (period / 2**o)
        i = np.floor(p)
        fr = p - i
        w = fr * fr * (3 - 2 * fr)
        i = i.astype(np.int64)
        acc = np.zeros(pts.shape[:-1])
        for dx in (0, 1):
            wx = w[..., 0] if dx else 1 - w[..., 0]
            for dy in (0, 1):
                wy = w[..., 1] if dy else 1 - w[..., 1]
                for dz in (0, 1):
                    wz = w[..., 2] if dz else 1 - w[..., 2]
                    acc += wx * wy * wz * _hash(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed * 131 + o)
        total += amp * acc
        norm += amp
        amp *= persistence
    return total / norm


# --- rendering ---------------------------------------------------------------


def _primitives(spec):
    return list(spec.planes) + list(spec.spheres)


def render(spec: SceneSpec, view_index: int):
    """Render one view.

    Returns:
        (image ``H x W x 3`` in [0, 1], GT depth ``H x W`` (0 where empty),
        :class:`CameraModel`)
    """
    cam = camera(spec, view_index)
    origin = cam.center
    _check_camera(spec, origin)
    pix = pixel_grid(spec.width, spec.height)
    dirs = pixel_rays(cam.K, pix) @ cam.R
    t, pid, pts, normals = cast(spec, origin, dirs)
    hit = pid >= 0
    depth = np.where(hit, t, 0.0)

    light = np.asarray(spec.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = spec.ambient + (1 - spec.ambient) * np.abs(normals @ light)
    albedo = np.zeros(pid.shape + (3,))
    for k, prim in enumerate(_primitives(spec)):
        m = pid == k
        if not m.any():
            continue
        tex = value_noise(pts[m], prim.seed, spec.texture_period, spec.texture_octaves)
        # stretch contrast around mid-grey
        tex = np.clip(0.5 + 1.8 * (tex - 0.5), 0.0, 1.0)
        albedo[m] = (0.1 + 0.85 * tex)[:, None] * np.asarray(prim.tint)
    img = albedo * shade[..., None]

    rng = np.random.default_rng([spec.noise_seed, view_index])
    gain = 1.0 + rng.uniform(-spec.gain_jitter, spec.gain_jitter) if spec.gain_jitter else 1.0
    offset = rng.uniform(-spec.offset_jitter, spec.offset_jitter) if spec.offset_jitter else 0.0
    img = gain * img + offset
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), depth, cam


def render_all(spec: SceneSpec):
    images, depths, cams = [], [], []
    for v in range(spec.num_views):
        im, d, c = render(spec, v)
        images.append(im)
        depths.append(d)
        cams.append(c)
    return images, depths, cams


def gt_visibility(spec: SceneSpec, ref_view: int, src_view: int, ref_depth=None) -> np.ndarray:
    """Reference pixels whose surface point is seen unoccluded by the source camera.

    A pixel counts when its 3-D point projects inside ``[0, W-1] x [0, H-1]``
    of the source image and the source ray through it hits that same point
    first.
    """
    ref = camera(spec, ref_view)
    src = camera(spec, src_view)
    pix = pixel_grid(spec.width, spec.height)
    if ref_depth is None:
        ref_depth = depth_at(spec, ref_view, pix)
    valid = ref_depth > 0
    X = ref.backproject(pix, np.where(valid, ref_depth, 1.0))
    proj, z = src.project(X)
    tol = 1e-9  # round-trip noise must not push border pixels out
    with np.errstate(invalid="ignore"):
        inside = (
            (z > 0)
            & (proj[..., 0] >= -tol)
            & (proj[..., 0] <= spec.width - 1 + tol)
            & (proj[..., 1] >= -tol)
            & (proj[..., 1] <= spec.height - 1 + tol)
        )
    origin = src.center
    vec = X - origin
    dist = np.linalg.norm(vec, axis=-1)
    dirs = vec / np.where(dist > 0, dist, 1.0)[..., None]
    t, _, _, _ = cast(spec, origin, dirs)
    same = np.abs(t - dist) <= _HIT_TOL * np.maximum(1.0, dist)
    return valid & inside & same


# --- presets -----------------------------------------------------------------


def plane_scene(depth: float = 680.0, **kw) -> SceneSpec:
    """A single large fronto-parallel textured plane."""
    plane = Plane((0.0, 0.0, depth), (0.0, 0.0, -1.0), (4000.0, 4000.0), seed=kw.pop("texture_seed", 1))
    return SceneSpec(planes=(plane,), **kw)


def three_plane_scene(seed: int = 0, **kw) -> SceneSpec:
    """Two walls and a floor meeting in a room corner (continuous depth, creased).

    Each plane is ``z = c + a x + b y`` in the reference frame; the visible
    surface is their lower envelope, so depth is continuous across creases
    and no facet occludes another from any ring camera.
    """
    rng = np.random.default_rng(seed)
    j = rng.uniform(-1.0, 1.0, 7)
    c = 820.0 + 30.0 * j[0]
    slopes = (
        (0.7 + 0.1 * j[1], 0.1 + 0.05 * j[2]),  # left wall
        (-0.7 + 0.1 * j[3], 0.15 + 0.05 * j[4]),  # right wall
        (0.05 * j[5], -0.8 + 0.1 * j[6]),  # floor
    )
    tints = ((1.0, 0.95, 0.85), (0.85, 1.0, 0.9), (0.9, 0.9, 1.0))
    planes = tuple(
        Plane((0.0, 0.0, c), _unit([a, b, -1.0]), (6000.0, 6000.0), 3 * seed + i + 1, tints[i])
        for i, (a, b) in enumerate(slopes)
    )
    kw.setdefault("noise_seed", seed)
    return SceneSpec(planes=planes, **kw)


def occluding_planes_scene(seed: int = 0, **kw) -> SceneSpec:
    """Background plane plus two smaller tilted planes floating in front of it."""
    rng = np.random.default_rng(seed)
    j = rng.uniform(-1.0, 1.0, 6)
    planes = (
        Plane((0.0, 0.0, 860.0 + 20 * j[0]), _unit([0.15 + 0.05 * j[1], 0.1, -1.0]), (3000.0, 3000.0), 3 * seed + 1, (1.0, 0.95, 0.85)),
        Plane((-70.0 + 10 * j[2], -30.0, 690.0), _unit([-0.3, 0.2 + 0.05 * j[3], -1.0]), (220.0, 240.0), 3 * seed + 2, (0.85, 1.0, 0.9)),
        Plane((90.0, 50.0 + 10 * j[4], 540.0), _unit([0.25 + 0.05 * j[5], -0.25, -1.0]), (150.0, 140.0), 3 * seed + 3, (0.9, 0.9, 1.0)),
    )
    kw.setdefault("noise_seed", seed)
    return SceneSpec(planes=planes, d_max=kw.pop("d_max", 960.0), **kw)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return tuple(v / np.linalg.norm(v))


def with_noise(spec: SceneSpec, gain_jitter=0.1, noise_sigma=0.02, offset_jitter=0.0, seed=None) -> SceneSpec:
    return replace(
        spec,
        gain_jitter=gain_jitter,
        noise_sigma=noise_sigma,
        offset_jitter=offset_jitter,
        noise_seed=spec.noise_seed if seed is None else seed,
    )
