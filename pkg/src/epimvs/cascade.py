"""Four-stage coarse-to-fine depth estimation.

Stage 0 works on the 1/8-scale, 64-channel features with inverse-depth
hypotheses over the whole depth range; each later stage doubles the
resolution, halves the channel count and re-centres fewer, narrower
hypotheses on the upsampled previous estimate.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import attention as attn
from .errors import ConfigurationError, UsageError
from .features import PYRAMID_CHANNELS, WeightBundle, extract_pyramid, sample_bilinear
from .geometry import (
    CameraModel,
    DepthHypothesisSet,
    init_inverse_depth_hypotheses,
    next_inverse_range,
    pixel_grid,
    refine_hypotheses,
    warp_points,
)
from .regularizer import ProbabilityVolume, depth_readout, regularize

logger = logging.getLogger(__name__)

NUM_STAGES = 4


def stage_scale(k: int) -> int:
    """Downscale factor of stage ``k`` (8, 4, 2, 1)."""
    return 2 ** (NUM_STAGES - 1 - k)


def stage_channels(k: int) -> int:
    return PYRAMID_CHANNELS[NUM_STAGES - 1 - k]


@dataclass(frozen=True)
class PipelineConfig:
    depth_nums: tuple = (8, 8, 4, 4)
    group_nums: tuple = (8, 8, 4, 4)
    temperature: float = 2.0
    fusion: str = "epipolar"
    regularizer: str = "reference"
    d_min: float = 425.0
    d_max: float = 935.0
    double_first_stage: bool = False
    features: str = "patch"
    blur_sigma: float = 1.0
    score_scale: tuple = (8.0, 100.0, 300.0, 700.0)
    confidence_window: int = 4
    readout: str = "expectation"
    normalize_keys: bool = True
    stages: int = 4
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depth_nums", tuple(int(d) for d in self.depth_nums))
        object.__setattr__(self, "group_nums", tuple(int(g) for g in self.group_nums))
        scales = np.broadcast_to(np.asarray(self.score_scale, dtype=np.float64), (NUM_STAGES,))
        object.__setattr__(self, "score_scale", tuple(float(v) for v in scales))
        if not all(v > 0 for v in self.score_scale):
            raise ConfigurationError("score_scale must be positive")
        if len(self.depth_nums) != NUM_STAGES or len(self.group_nums) != NUM_STAGES:
            raise ConfigurationError("depth_nums and group_nums need one entry per stage")
        for k, (D, G) in enumerate(zip(self.depth_nums, self.group_nums)):
            if D < 2:
                raise ConfigurationError(f"stage {k}: need at least 2 hypotheses")
            if G <= 0 or stage_channels(k) % G:
                raise ConfigurationError(f"stage {k}: {G} groups do not divide {stage_channels(k)} channels")
        if not 0 < self.d_min < self.d_max:
            raise ConfigurationError("need 0 < d_min < d_max")
        if self.fusion not in ("epipolar", "variance"):
            raise ConfigurationError(f"unknown fusion {self.fusion!r}")
        if self.features not in ("patch", "oracle", "fpn"):
            raise ConfigurationError(f"unknown feature source {self.features!r}")
        if not 1 <= self.stages <= NUM_STAGES:
            raise ConfigurationError("stages must be between 1 and 4")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")

    def hypotheses(self, k: int) -> int:
        D = self.depth_nums[k]
        return 2 * D if (k == 0 and self.double_first_stage) else D

    def inverse_spans(self):
        spans = [1.0 / self.d_min - 1.0 / self.d_max]
        for k in range(1, NUM_STAGES):
            spans.append(next_inverse_range(spans[-1], self.hypotheses(k - 1)))
        return spans

    # flat key/value round trip
    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            default = getattr(cls(), key)
            kwargs[key] = _coerce(raw, default)
        return cls(**kwargs)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        kind = type(default[0])
        return tuple(kind(v) for v in raw.replace(",", " ").split())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


@dataclass(frozen=True)
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray
    confidence: np.ndarray
    stage: int = 0

    @property
    def shape(self):
        return self.depth.shape


@dataclass
class StageResult:
    depth: DepthMap
    prob: ProbabilityVolume
    hypotheses: DepthHypothesisSet


@dataclass
class PipelineResult:
    final: DepthMap
    stages: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    hypotheses: list = field(default_factory=list)


def upsample_depth(depth: np.ndarray, valid: np.ndarray, shape):
    """Upsample a coarse depth map by 2 (coarse pixel ``i`` sits at fine ``2 i``).

    Bilinear where all four coarse neighbours are valid, otherwise the
    nearest valid neighbour; invalid if none is.
    """
    H, W = shape
    h, w = depth.shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    cx = np.minimum(u / 2.0, w - 1)
    cy = np.minimum(v / 2.0, h - 1)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = cx - x0, cy - y0
    corners = [(y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)), (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)]
    acc = np.zeros(shape)
    all_ok = np.ones(shape, dtype=bool)
    for yy, xx, wgt in corners:
        acc += wgt * np.where(valid[yy, xx], depth[yy, xx], 0.0)
        all_ok &= valid[yy, xx]
    # nearest valid corner as fallback
    best = np.full(shape, np.inf)
    near = np.zeros(shape)
    for yy, xx, _ in corners:
        dist = (xx - cx) ** 2 + (yy - cy) ** 2
        take = valid[yy, xx] & (dist < best)
        best = np.where(take, dist, best)
        near = np.where(take, depth[yy, xx], near)
    out = np.where(all_ok, acc, near)
    ok = all_ok | np.isfinite(best)
    return np.where(ok, out, 0.0), ok


def _row_chunks(H: int, threads: int):
    n = max(1, min(threads, H))
    bounds = np.linspace(0, H, n + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _fuse_rows(rows, ref_feat, src_feats, ref_cam, src_cams, hyp_values, cfg, G):
    """Per-pixel aggregation for a block of rows -> (cost, empty, any_valid)."""
    r0, r1 = rows
    H, W, C = ref_feat.shape
    query = ref_feat[r0:r1]
    depths = hyp_values[r0:r1]
    pix = pixel_grid(W, H)[r0:r1]
    pix = np.broadcast_to(pix[:, :, None, :], depths.shape + (2,))
    keys_all, masks = [], []
    for fm, cam in zip(src_feats, src_cams):
        coords, in_front = warp_points(ref_cam, cam, pix, depths)
        keys, ok = sample_bilinear(fm, coords)
        ok &= in_front
        if cfg.normalize_keys:
            # rescaling to norm sqrt(C) undoes the norm dip of bilinear blends,
            # which otherwise pulls correlation peaks onto pixel-grid crossings
            norm = np.sqrt(np.sum(keys * keys, axis=-1, keepdims=True) / C)
            keys = keys / np.where(norm > 0, norm, 1.0)
        keys = np.where(ok[..., None], keys, 0.0)
        keys_all.append(np.swapaxes(keys, -1, -2))  # (h, W, C, D)
        masks.append(ok)
    if cfg.fusion == "epipolar":
        values, weights = [], []
        for keys, ok in zip(keys_all, masks):
            w, _ = attn.attention_weights(query, keys, cfg.temperature, ok)
            weights.append(w)
            values.append(attn.group_correlation(query, keys, G, ok))
        cost, empty = attn.fuse_views(values, weights, masks)
    else:
        var, empty = attn.variance_fusion(keys_all, query, masks)
        count = np.ones(empty.shape)
        for ok in masks:
            count = count + ok
        # features of norm sqrt(C): -sum_c var * N/(N-1) / C equals the mean
        # pairwise correlation minus one; empty bins read as zero correlation
        factor = count / np.maximum(count - 1, 1)
        cost = -var * factor[..., None, :]
        cost = np.where(empty[..., None, :], -1.0, cost)
    any_valid = np.zeros(depths.shape[:-1], dtype=bool)
    for ok in masks:
        any_valid |= ok.any(axis=-1)
    return cost, empty, any_valid


def run_stage(
    k: int,
    ref_feat: np.ndarray,
    src_feats,
    ref_cam: CameraModel,
    src_cams,
    cfg: PipelineConfig,
    prev: DepthMap | None = None,
    inverse_span: float | None = None,
    regularizer_weights: WeightBundle | None = None,
) -> StageResult:
    """Run one cascade stage on features already at this stage's resolution.

    ``ref_cam``/``src_cams`` must already be rescaled to the stage
    resolution.  Stage 0 must not get ``prev``; later stages must.
    """
    ref_feat = getattr(ref_feat, "data", ref_feat)
    src_feats = [getattr(f, "data", f) for f in src_feats]
    H, W, C = ref_feat.shape
    if len(src_feats) != len(src_cams) or not src_feats:
        raise UsageError("need one camera per source feature map and at least one source")
    for f in src_feats:
        if f.shape != ref_feat.shape:
            raise UsageError(f"source features {f.shape} differ from reference {ref_feat.shape}")
    if (ref_cam.height, ref_cam.width) != (H, W):
        raise UsageError(f"camera is {ref_cam.width}x{ref_cam.height} but features are {W}x{H}")
    D = cfg.hypotheses(k)
    G = cfg.group_nums[k]
    if C % G:
        raise ConfigurationError(f"{G} groups do not divide {C} channels")
    if inverse_span is None:
        inverse_span = cfg.inverse_spans()[k]

    if k == 0:
        if prev is not None:
            raise UsageError("stage 0 takes no previous depth")
        hyps = init_inverse_depth_hypotheses(cfg.d_min, cfg.d_max, D, (H, W))
    else:
        if prev is None:
            raise UsageError(f"stage {k} needs the previous stage's depth")
        if prev.depth.shape != (H // 2, W // 2):
            raise UsageError(f"previous depth {prev.depth.shape} is not half of {(H, W)}")
        up, up_ok = upsample_depth(prev.depth, prev.valid, (H, W))
        hyps = refine_hypotheses(up, D, inverse_span, cfg.d_min, cfg.d_max, valid=up_ok, stage=k)

    chunks = _row_chunks(H, cfg.threads)

    def work(rows):
        return _fuse_rows(rows, ref_feat, src_feats, ref_cam, src_cams, hyps.values, cfg, G)

    if len(chunks) == 1:
        parts = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(work, chunks))
    cost = np.concatenate([p[0] for p in parts], axis=0)
    any_valid = np.concatenate([p[2] for p in parts], axis=0)

    # both scores are put on a correlation scale: G * sum_g c_g / C is the
    # attention-weighted correlation with the reference
    scale = cfg.score_scale[k] * (G if cfg.fusion == "epipolar" else 1) / C
    prob = regularize(cost, cfg.regularizer, regularizer_weights, cfg.blur_sigma, scale, stage=k)
    depth, conf = depth_readout(prob, hyps, cfg.confidence_window, cfg.readout)
    dm = DepthMap(np.where(any_valid, depth, 0.0), any_valid, np.where(any_valid, conf, 0.0), k)
    return StageResult(dm, prob, hyps)


def _view_key(image, cam: CameraModel):
    h = hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).hexdigest()
    return (tuple(np.round(cam.extrinsic.ravel(), 12)), tuple(np.round(cam.K.ravel(), 12)), h)


def feature_bundle(cfg: PipelineConfig, weights: WeightBundle | None = None) -> WeightBundle:
    if cfg.features == "patch":
        return WeightBundle.patch_descriptor()
    if cfg.features == "oracle":
        return WeightBundle.oracle_bypass()
    return weights if weights is not None else WeightBundle.seeded(cfg.seed)


def run_pipeline(
    images,
    cams,
    cfg: PipelineConfig = PipelineConfig(),
    ref: int = 0,
    weights: WeightBundle | None = None,
    regularizer_weights=None,
    pyramids=None,
) -> PipelineResult:
    """Estimate the depth of view ``ref`` from all other views.

    Source views are processed in a canonical order derived from their
    cameras and pixels, so permuting the inputs does not change the result.
    ``regularizer_weights`` is a list with one UNet bundle per stage when
    ``cfg.regularizer == "learned"``.
    """
    if len(images) < 2 or len(images) != len(cams):
        raise UsageError("need at least two views, each with a camera")
    H, W = np.shape(images[ref])[:2]
    if H % 8 or W % 8:
        raise UsageError(f"image size {W}x{H} must be divisible by 8")
    if pyramids is None:
        bundle = feature_bundle(cfg, weights)
        pyramids = [extract_pyramid(im, bundle) for im in images]
    src = [i for i in range(len(images)) if i != ref]
    src.sort(key=lambda i: _view_key(images[i], cams[i]))

    result = PipelineResult(final=None)
    prev = None
    spans = cfg.inverse_spans()
    for k in range(cfg.stages):
        level = NUM_STAGES - 1 - k
        s = stage_scale(k)
        ref_cam = cams[ref].scaled(s)
        src_cams = [cams[i].scaled(s) for i in src]
        reg_w = regularizer_weights[k] if regularizer_weights is not None else None
        out = run_stage(
            k,
            pyramids[ref][level],
            [pyramids[i][level] for i in src],
            ref_cam,
            src_cams,
            cfg,
            prev=prev,
            inverse_span=spans[k],
            regularizer_weights=reg_w,
        )
        logger.debug("stage %d: %dx%d, D=%d", k, ref_cam.width, ref_cam.height, cfg.hypotheses(k))
        result.stages.append(out.depth)
        result.probs.append(out.prob)
        result.hypotheses.append(out.hypotheses)
        prev = out.depth
    result.final = prev
    return result


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return replace(cfg, **kw)
