"""Multi-scale 2-D features and bilinear feature sampling.

Three feature sources share the same pyramid shape (scales 1, 1/2, 1/4, 1/8
with 8/16/32/64 channels):

* ``WeightBundle`` with convolution weights: the FPN forward pass.
* ``WeightBundle.oracle_bypass()``: area-downsampled grey intensities
  replicated across channels.
* ``WeightBundle.patch_descriptor()``: zero-mean, unit-norm local intensity
  patches, so a dot product between two descriptors is a normalised
  cross-correlation.  Used by the synthetic end-to-end checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import WeightShapeError

PYRAMID_CHANNELS = (8, 16, 32, 64)
NUM_SCALES = 4

LOADED = "loaded-file"
SEEDED = "seeded-random"
ORACLE = "oracle-bypass"
PATCH = "patch-descriptor"
BORDER_TOL = 1e-9


@dataclass(frozen=True)
class FeatureMap:
    """``H x W x C`` feature array at one pyramid scale."""

    data: np.ndarray
    scale: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError("feature data must be H x W x C")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def sample_bilinear(data: np.ndarray, coords: np.ndarray):
    """Bilinearly sample ``data`` (``H x W`` or ``H x W x C``) at ``coords (..., 2)``.

    Coordinates outside ``[0, W-1] x [0, H-1]`` (or NaN) give zeros and
    ``valid=False``.  Coordinates on the last row/column reuse the border
    texel.

    Returns:
        (values ``(..., C)`` or ``(...)``, valid ``(...)``)
    """
    data = np.asarray(data)
    squeeze = data.ndim == 2
    if squeeze:
        data = data[..., None]
    H, W = data.shape[:2]
    coords = np.asarray(coords, dtype=np.float64)
    x, y = coords[..., 0], coords[..., 1]
    with np.errstate(invalid="ignore"):
        # a small slack keeps border pixels whose warp round-trips to W-1+1e-13
        valid = (x >= -BORDER_TOL) & (x <= W - 1 + BORDER_TOL) & (y >= -BORDER_TOL) & (y <= H - 1 + BORDER_TOL)
    x = np.where(valid, np.clip(x, 0, W - 1), 0.0)
    y = np.where(valid, np.clip(y, 0, H - 1), 0.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), W - 1)
    y0 = np.minimum(np.floor(y).astype(np.intp), H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    top = data[y0, x0] * (1 - fx) + data[y0, x1] * fx
    bottom = data[y1, x0] * (1 - fx) + data[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    out = np.where(valid[..., None], out, 0.0)
    if squeeze:
        out = out[..., 0]
    return out, valid


def bilinear_sample(fm: FeatureMap, coord):
    """Sample one continuous coordinate; returns ``(C-vector, valid)``."""
    value, valid = sample_bilinear(fm.data, np.asarray(coord, dtype=np.float64))
    return value, bool(valid)


# --- FPN ---------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: tuple
    stride: int
    bn_relu: bool
    transposed: bool = False


def _fpn_layers():
    layers = []
    in_ch = 3
    for s, ch in enumerate(PYRAMID_CHANNELS):
        if s == 0:
            layers.append(LayerSpec("conv0_0", in_ch, ch, (3, 3), 1, True))
            layers.append(LayerSpec("conv0_1", ch, ch, (3, 3), 1, True))
        else:
            layers.append(LayerSpec(f"conv{s}_0", in_ch, ch, (5, 5), 2, True))
            layers.append(LayerSpec(f"conv{s}_1", ch, ch, (3, 3), 1, True))
            layers.append(LayerSpec(f"conv{s}_2", ch, ch, (3, 3), 1, True))
        in_ch = ch
    for s, ch in enumerate(PYRAMID_CHANNELS):
        layers.append(LayerSpec(f"inner{s}", ch, 64, (1, 1), 1, False))
    for s, ch in enumerate(PYRAMID_CHANNELS):
        layers.append(LayerSpec(f"out{s}", 64, ch, (1, 1), 1, False))
    return tuple(layers)


FPN_LAYERS = _fpn_layers()


@dataclass(frozen=True)
class ConvLayer:
    """Convolution with batch norm already folded into ``weight``/``bias``."""

    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)
    stride: int = 1
    relu: bool = False
    transposed: bool = False


def fold_batch_norm(weight, bias, gamma, beta, mean, var, eps=1e-5):
    """Fold inference-mode batch norm into the preceding convolution."""
    scale = np.asarray(gamma, dtype=np.float64) / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    w = np.asarray(weight, dtype=np.float64) * scale.reshape((-1,) + (1,) * (np.ndim(weight) - 1))
    b = np.zeros(len(scale)) if bias is None else np.asarray(bias, dtype=np.float64)
    b = (b - mean) * scale + beta
    return w, b


@dataclass(frozen=True)
class WeightBundle:
    """Ordered FPN convolution layers plus a provenance tag.

    Build one with :meth:`seeded`, :meth:`from_raw` (e.g. via
    :func:`epimvs.io.read_weight_bundle`), :meth:`oracle_bypass` or
    :meth:`patch_descriptor`.
    """

    layers: dict = field(default_factory=dict)
    provenance: str = SEEDED
    options: dict = field(default_factory=dict)

    @classmethod
    def from_raw(cls, raw_layers, provenance=LOADED, specs=FPN_LAYERS):
        """Validate raw layer records against ``specs`` and fold batch norm.

        ``raw_layers`` maps layer name to a dict with ``weight`` and optional
        ``bias``, ``gamma``, ``beta``, ``mean``, ``var``, ``eps``.
        """
        layers = {}
        for spec in specs:
            if spec.name not in raw_layers:
                raise WeightShapeError(spec.name, "missing")
            rec = raw_layers[spec.name]
            w = np.asarray(rec["weight"], dtype=np.float64)
            expected = (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
            if w.shape != expected:
                raise WeightShapeError(spec.name, f"expected kernel {expected}, got {w.shape}")
            bias = rec.get("bias")
            if bias is not None and np.shape(bias) != (spec.out_channels,):
                raise WeightShapeError(spec.name, f"bias shape {np.shape(bias)}")
            if rec.get("gamma") is not None:
                for key in ("gamma", "beta", "mean", "var"):
                    if np.shape(rec[key]) != (spec.out_channels,):
                        raise WeightShapeError(spec.name, f"{key} shape {np.shape(rec[key])}")
                w, b = fold_batch_norm(w, bias, rec["gamma"], rec["beta"], rec["mean"], rec["var"], rec.get("eps", 1e-5))
            else:
                b = np.zeros(spec.out_channels) if bias is None else np.asarray(bias, dtype=np.float64)
            layers[spec.name] = ConvLayer(w, b, spec.stride, spec.bn_relu, spec.transposed)
        extra = set(raw_layers) - {s.name for s in specs}
        if extra:
            raise WeightShapeError(sorted(extra)[0], "not part of the architecture")
        return cls(layers, provenance)

    @classmethod
    def seeded(cls, seed: int = 0, specs=FPN_LAYERS):
        """He-initialised weights with identity batch-norm statistics."""
        rng = np.random.default_rng(seed)
        raw = {}
        for spec in specs:
            fan_in = spec.in_channels * int(np.prod(spec.kernel))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.out_channels, spec.in_channels) + tuple(spec.kernel))
            raw[spec.name] = {"weight": w, "bias": rng.normal(0.0, 0.01, spec.out_channels)}
        return cls.from_raw(raw, provenance=SEEDED, specs=specs)

    @classmethod
    def oracle_bypass(cls):
        return cls({}, ORACLE)

    @classmethod
    def patch_descriptor(cls, base_sigma: float = 0.5, step: float = 0.5, eps: float = 1e-3):
        return cls({}, PATCH, {"base_sigma": base_sigma, "step": step, "eps": eps})


def conv2d(x: np.ndarray, weight: np.ndarray, bias=None, stride: int = 1) -> np.ndarray:
    """Zero-padded 2-D cross-correlation of ``x (H, W, Cin)`` with ``weight (Cout, Cin, k, k)``.

    Output pixel ``i`` is centred on input pixel ``stride * i``.
    """
    k = weight.shape[-1]
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    out = np.tensordot(win, weight, axes=((2, 3, 4), (1, 2, 3)))
    if bias is not None:
        out = out + bias
    return out


def upsample2(x: np.ndarray, shape) -> np.ndarray:
    """Bilinear upsampling where coarse pixel ``i`` sits at fine coordinate ``2 i``."""
    H, W = shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    cy = np.minimum(v / 2.0, x.shape[0] - 1)
    cx = np.minimum(u / 2.0, x.shape[1] - 1)
    out, _ = sample_bilinear(x, np.stack([cx, cy], axis=-1))
    return out


def _apply(layer: ConvLayer, x):
    y = conv2d(x, layer.weight, layer.bias, layer.stride)
    return np.maximum(y, 0.0) if layer.relu else y


def _check_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be H x W x 3")
    H, W = image.shape[:2]
    if H % 8 or W % 8:
        raise ValueError(f"image size {W}x{H} must be divisible by 8")
    return image


def fpn_forward(image: np.ndarray, weights: WeightBundle):
    L = weights.layers
    x = image
    stage_out = []
    for s in range(NUM_SCALES):
        names = ["conv0_0", "conv0_1"] if s == 0 else [f"conv{s}_0", f"conv{s}_1", f"conv{s}_2"]
        for name in names:
            x = _apply(L[name], x)
        stage_out.append(x)
    outs = [None] * NUM_SCALES
    intra = _apply(L[f"inner{NUM_SCALES - 1}"], stage_out[-1])
    outs[-1] = _apply(L[f"out{NUM_SCALES - 1}"], intra)
    for s in range(NUM_SCALES - 2, -1, -1):
        lateral = _apply(L[f"inner{s}"], stage_out[s])
        intra = upsample2(intra, lateral.shape[:2]) + lateral
        outs[s] = _apply(L[f"out{s}"], intra)
    return outs


def grey(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64).mean(axis=-1)


def area_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Mean over non-overlapping ``factor x factor`` blocks."""
    H, W = img.shape[:2]
    blocks = img.reshape(H // factor, factor, W // factor, factor, *img.shape[2:])
    return blocks.mean(axis=(1, 3))


def descriptor_offsets(count: int):
    """The ``count`` integer offsets closest to the origin, ordered by radius then angle."""
    r = int(np.ceil(np.sqrt(count))) + 1
    cand = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    cand.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2, np.arctan2(o[1], o[0])))
    return np.array(cand[:count], dtype=np.intp)


def patch_descriptors(level_img: np.ndarray, channels: int, eps: float = 1e-3, spacing: int = 1) -> np.ndarray:
    """Zero-mean vectors of ``channels`` neighbourhood samples per pixel, norm ``sqrt(channels)``.

    Samples sit at ``spacing`` times the integer offsets of
    :func:`descriptor_offsets`.

    Offsets falling outside the image contribute zero rather than a mirrored
    value, so border descriptors stay comparable with interior ones seen from
    another view.
    """
    offs = descriptor_offsets(channels) * int(spacing)
    r = int(np.abs(offs).max())
    H, W = level_img.shape
    padded = np.pad(level_img, r)
    inside = np.pad(np.ones((H, W)), r)
    desc = np.stack([padded[r + dy : r + dy + H, r + dx : r + dx + W] for dx, dy in offs], axis=-1)
    mask = np.stack([inside[r + dy : r + dy + H, r + dx : r + dx + W] for dx, dy in offs], axis=-1)
    mean = desc.sum(axis=-1, keepdims=True) / mask.sum(axis=-1, keepdims=True)
    desc = (desc - mean) * mask
    norm = np.sqrt(np.sum(desc * desc, axis=-1, keepdims=True))
    # unit RMS per channel, the scale of batch-normalised CNN features
    return np.sqrt(channels) * desc / (norm + eps)


def masked_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur that renormalises by the in-image kernel mass at the borders."""
    num = ndimage.gaussian_filter(img, sigma, mode="constant")
    den = ndimage.gaussian_filter(np.ones_like(img), sigma, mode="constant")
    return num / den


def extract_pyramid(image: np.ndarray, weights: WeightBundle):
    """Four feature maps at scales 1, 1/2, 1/4, 1/8 (finest first)."""
    image = _check_image(image)
    if weights.provenance == ORACLE:
        g = grey(image)
        levels = []
        for s, ch in enumerate(PYRAMID_CHANNELS):
            lvl = area_downsample(g, 2**s)
            levels.append(np.repeat(lvl[..., None], ch, axis=-1))
    elif weights.provenance == PATCH:
        g = grey(image)
        base = weights.options.get("base_sigma", 0.5)
        eps = weights.options.get("eps", 1e-3)
        step = weights.options.get("step", 1.0)
        levels = []
        for s, ch in enumerate(PYRAMID_CHANNELS):
            f = 2**s
            # descriptors on the blurred full-resolution grid, then decimation:
            # coarse pixel i sits at fine pixel f*i
            spacing = max(1, int(round(step * f)))
            blurred = masked_blur(g, base * f)
            if spacing % f == 0:
                desc = patch_descriptors(blurred[::f, ::f], ch, eps, spacing // f)
            else:
                desc = patch_descriptors(blurred, ch, eps, spacing)[::f, ::f]
            levels.append(desc)
    else:
        levels = fpn_forward(image, weights)
    return [FeatureMap(lvl, s) for s, lvl in enumerate(levels)]
