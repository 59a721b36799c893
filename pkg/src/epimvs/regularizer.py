"""Cost-volume regularisation and depth readout.

Two modes turn a fused ``H x W x G x D`` cost volume into per-pixel
probabilities over depth bins:

``reference``
    Group-sum the cost, blur every depth slice with a separable 3x3 Gaussian
    (the depth axis is never mixed, matching 3x3x1 kernels) and softmax over
    depth.
``learned``
    Forward pass of the lightweight 3-D UNet with loaded weights, then
    softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, UsageError
from .features import LayerSpec, WeightBundle


@dataclass(frozen=True)
class ProbabilityVolume:
    """``H x W x D`` per-pixel distribution over depth bins."""

    data: np.ndarray
    stage: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError("probability volume must be H x W x D")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def depth_bins(self) -> int:
        return self.data.shape[-1]


def gaussian_taps(sigma: float) -> np.ndarray:
    """Normalised 3-tap Gaussian ``[a, b, a]``."""
    if not sigma > 0:
        raise ConfigurationError("blur sigma must be positive")
    taps = np.exp(-np.array([1.0, 0.0, 1.0]) / (2.0 * sigma * sigma))
    return taps / taps.sum()


def blur_slices(volume: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 3x3 Gaussian over the two spatial axes of ``(H, W, ...)``.

    Reflect ("half-sample symmetric") borders keep each slice's total mass.
    """
    taps = gaussian_taps(sigma)
    out = ndimage.correlate1d(volume, taps, axis=0, mode="reflect")
    return ndimage.correlate1d(out, taps, axis=1, mode="reflect")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# --- learned UNet ------------------------------------------------------------


def unet_layers(groups: int):
    """Layer table of the lightweight 3-D UNet for a ``groups``-channel input.

    Kernels are ``(kh, kw, kd)``; strides act on the spatial axes only.  The
    final 1x1x1 ``prob`` layer maps the 8 output channels to one score.
    """
    return (
        LayerSpec("conv0", groups, 8, (3, 3, 1), 1, True),
        LayerSpec("conv1", 8, 16, (3, 3, 1), 2, True),
        LayerSpec("conv2", 16, 16, (3, 3, 3), 1, True),
        LayerSpec("conv3", 16, 32, (3, 3, 1), 2, True),
        LayerSpec("conv4", 32, 32, (3, 3, 3), 1, True),
        LayerSpec("conv5", 32, 64, (3, 3, 1), 2, True),
        LayerSpec("conv6", 64, 64, (3, 3, 3), 1, True),
        LayerSpec("deconv7", 64, 32, (3, 3, 1), 2, True, transposed=True),
        LayerSpec("deconv9", 32, 16, (3, 3, 1), 2, True, transposed=True),
        LayerSpec("deconv11", 16, 8, (3, 3, 1), 2, True, transposed=True),
        LayerSpec("out", 8, 8, (3, 3, 3), 1, False, transposed=True),
        LayerSpec("prob", 8, 1, (1, 1, 1), 1, False),
    )


def conv3d(x: np.ndarray, weight: np.ndarray, bias, stride: int = 1) -> np.ndarray:
    """Zero-padded cross-correlation of ``x (H, W, D, Cin)``, ``weight (Cout, Cin, kh, kw, kd)``."""
    kh, kw, kd = weight.shape[2:]
    xp = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (kd // 2, kd // 2), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw, kd), axis=(0, 1, 2))[::stride, ::stride]
    return np.tensordot(win, weight, axes=((3, 4, 5, 6), (1, 2, 3, 4))) + bias


def conv_transpose3d(x: np.ndarray, weight: np.ndarray, bias, stride: int, out_hw) -> np.ndarray:
    """Transposed convolution (padding k//2), cropped to ``out_hw`` spatially.

    ``weight`` is stored ``(Cout, Cin, kh, kw, kd)`` like the forward layers.
    """
    if stride == 1:
        flipped = weight[:, :, ::-1, ::-1, ::-1]
        return conv3d(x, flipped, bias)
    H, W, D, C = x.shape
    up = np.zeros((stride * H, stride * W, D, C))
    up[::stride, ::stride] = x
    kh, kw, kd = weight.shape[2:]
    flipped = weight[:, :, ::-1, ::-1, ::-1]
    # output pixel 2i lines up with input pixel i
    up = np.pad(up, ((kh // 2, kh // 2), (kw // 2, kw // 2), (kd // 2, kd // 2), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(up, (kh, kw, kd), axis=(0, 1, 2))
    out = np.tensordot(win, flipped, axes=((3, 4, 5, 6), (1, 2, 3, 4))) + bias
    return out[: out_hw[0], : out_hw[1]]


def unet_forward(cost: np.ndarray, weights: WeightBundle) -> np.ndarray:
    """``(H, W, G, D)`` cost -> ``(H, W, D)`` scores."""
    L = weights.layers
    x = np.moveaxis(np.asarray(cost, dtype=np.float64), 2, 3)  # H, W, D, G

    def fwd(name, inp):
        layer = L[name]
        y = conv3d(inp, layer.weight, layer.bias, layer.stride)
        return np.maximum(y, 0.0) if layer.relu else y

    def up(name, inp, skip):
        layer = L[name]
        y = conv_transpose3d(inp, layer.weight, layer.bias, layer.stride, skip.shape[:2])
        y = np.maximum(y, 0.0) if layer.relu else y
        return y + skip

    c0 = fwd("conv0", x)
    c2 = fwd("conv2", fwd("conv1", c0))
    c4 = fwd("conv4", fwd("conv3", c2))
    c6 = fwd("conv6", fwd("conv5", c4))
    y = up("deconv7", c6, c4)
    y = up("deconv9", y, c2)
    y = up("deconv11", y, c0)
    out = L["out"]
    y = conv_transpose3d(y, out.weight, out.bias, 1, y.shape[:2])
    prob = L["prob"]
    return conv3d(y, prob.weight, prob.bias)[..., 0]


def seeded_unet(groups: int, seed: int = 0) -> WeightBundle:
    return WeightBundle.seeded(seed, specs=unet_layers(groups))


# --- public API --------------------------------------------------------------


def regularize(
    cost: np.ndarray,
    mode: str = "reference",
    weights: WeightBundle | None = None,
    sigma: float = 1.0,
    scale: float = 1.0,
    stage: int = 0,
) -> ProbabilityVolume:
    """Probability volume from a fused ``(H, W, G, D)`` cost volume.

    ``scale`` multiplies the scores before the softmax (an inverse
    temperature; a trained network learns this gain implicitly).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 4:
        raise UsageError("cost volume must be H x W x G x D")
    if not np.all(np.isfinite(cost)):
        raise UsageError("cost volume contains non-finite values")
    if mode == "reference":
        score = blur_slices(cost.sum(axis=2), sigma)
    elif mode == "learned":
        if weights is None or not weights.layers:
            raise ConfigurationError("learned regularisation needs UNet weights")
        score = unet_forward(cost, weights)
    else:
        raise ConfigurationError(f"unknown regulariser mode {mode!r}")
    return ProbabilityVolume(softmax(scale * score, axis=-1), stage)


def depth_readout(prob, hypotheses, window: int = 4, method: str = "expectation"):
    """Per-pixel depth and photometric confidence.

    Depth is the expectation of the hypotheses under ``prob`` (or the
    lowest-index argmax with ``method="argmax"``).  Confidence is the largest
    probability mass in any ``min(window, D)`` consecutive bins.

    Returns:
        (depth ``(H, W)``, confidence ``(H, W)``)
    """
    P = prob.data if isinstance(prob, ProbabilityVolume) else np.asarray(prob, dtype=np.float64)
    d = getattr(hypotheses, "values", hypotheses)
    d = np.asarray(d, dtype=np.float64)
    if P.shape != d.shape:
        raise UsageError(f"probability {P.shape} and hypotheses {d.shape} disagree")
    D = P.shape[-1]
    if method == "expectation":
        depth = np.sum(P * d, axis=-1)
        # keep the readout inside the hypothesis hull despite rounding
        depth = np.clip(depth, d.min(axis=-1), d.max(axis=-1))
    elif method == "argmax":
        depth = np.take_along_axis(d, np.argmax(P, axis=-1)[..., None], axis=-1)[..., 0]
    else:
        raise ConfigurationError(f"unknown readout {method!r}")
    w = min(window, D)
    csum = np.concatenate([np.zeros(P.shape[:-1] + (1,)), np.cumsum(P, axis=-1)], axis=-1)
    conf = np.max(csum[..., w:] - csum[..., :-w], axis=-1)
    return depth, np.clip(conf, 0.0, 1.0)
