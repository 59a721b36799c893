"""Epipolar cross-attention view aggregation and the variance-fusion baseline.

All functions broadcast over leading pixel axes: a query is ``(..., C)``,
keys are ``(..., C, D)`` (features sampled at the D hypothesised depths
along the epipolar line), validity masks are ``(..., D)``.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, UsageError

DEFAULT_TEMPERATURE = 2.0


def attention_weights(query, keys, t_e: float = DEFAULT_TEMPERATURE, valid=None):
    """Softmax over depth bins of ``keys^T query / (t_e sqrt(C))``.

    Invalid bins are excluded (weight exactly 0).  A pixel whose bins are all
    invalid gets uniform weights and ``all_invalid=True``.

    Returns:
        (weights ``(..., D)``, all_invalid ``(...)``)
    """
    if not t_e > 0:
        raise ConfigurationError("temperature must be positive")
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    C = query.shape[-1]
    if C == 0:
        raise UsageError("query has no channels")
    logits = np.einsum("...c,...cd->...d", query, keys) / (t_e * np.sqrt(C))
    if valid is None:
        valid = np.ones(logits.shape, dtype=bool)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), logits.shape)
    all_invalid = ~valid.any(axis=-1)
    masked = np.where(valid, logits, -np.inf)
    peak = np.max(masked, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(valid, np.exp(masked - peak), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    w = e / np.where(total > 0, total, 1.0)
    D = logits.shape[-1]
    w = np.where(all_invalid[..., None], 1.0 / D, w)
    return w, all_invalid


def group_correlation(query, keys, G: int, valid=None):
    """Group-wise correlation ``s[g, d] = <keys[g-th group, d], query[g-th group]> / G``.

    Groups are contiguous channel blocks of size ``C / G``.

    Returns:
        ``(..., G, D)`` values; invalid bins are zero.
    """
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    C = query.shape[-1]
    if G <= 0 or C % G:
        raise ConfigurationError(f"group count {G} does not divide {C} channels")
    D = keys.shape[-1]
    q = query.reshape(query.shape[:-1] + (G, C // G))
    k = keys.reshape(keys.shape[:-2] + (G, C // G, D))
    s = np.einsum("...gc,...gcd->...gd", q, k) / G
    if valid is not None:
        s = np.where(np.asarray(valid, dtype=bool)[..., None, :], s, 0.0)
    return s


def fuse_views(values, weights, masks=None):
    """Attention-weighted average of per-view group correlations.

    ``c[g, d] = sum_i w_i[d] s_i[g, d] / sum_i w_i[d]`` accumulated in list
    order.  When ``masks`` is given, a view's weight at an invalid bin is
    treated as zero.  Bins whose total weight is below 1e-12 are set to zero
    and flagged.

    Args:
        values: sequence of ``(..., G, D)`` arrays, one per source view.
        weights: sequence of ``(..., D)`` attention vectors.
        masks: optional sequence of ``(..., D)`` validity masks.

    Returns:
        (cost ``(..., G, D)``, empty ``(..., D)``)
    """
    if len(values) == 0:
        raise UsageError("fuse_views needs at least one view")
    if len(values) != len(weights) or (masks is not None and len(masks) != len(values)):
        raise UsageError("values, weights and masks must have one entry per view")
    num = None
    den = None
    for i, (s, w) in enumerate(zip(values, weights)):
        s = np.asarray(s, dtype=np.float64)
        w = np.asarray(w, dtype=np.float64)
        if s.shape[:-2] + s.shape[-1:] != w.shape:
            raise UsageError(f"view {i}: values {s.shape} and weights {w.shape} disagree")
        if masks is not None:
            w = np.where(masks[i], w, 0.0)
        contrib = w[..., None, :] * s
        num = contrib if num is None else num + contrib
        den = w if den is None else den + w
    empty = den < 1e-12
    cost = num / np.where(empty, 1.0, den)[..., None, :]
    cost = np.where(empty[..., None, :], 0.0, cost)
    return cost, empty


def variance_fusion(source_volumes, query, masks=None):
    """Population variance over the reference volume and the source volumes.

    The reference volume is ``query`` broadcast along depth.  With ``masks``,
    invalid source samples are left out of the statistics for that bin.

    Args:
        source_volumes: sequence of ``(..., C, D)`` warped source features.
        query: ``(..., C)`` reference feature.
        masks: optional sequence of ``(..., D)`` validity masks.

    Returns:
        (variance ``(..., C, D)``, empty ``(..., D)``) where ``empty`` marks
        bins with no valid source sample.
    """
    if len(source_volumes) + 1 < 2:
        raise UsageError("variance fusion needs the reference plus at least one source volume")
    query = np.asarray(query, dtype=np.float64)
    ref = np.broadcast_to(query[..., None], np.shape(source_volumes[0]))
    if masks is None:
        masks = [np.ones(np.shape(v)[:-2] + np.shape(v)[-1:], dtype=bool) for v in source_volumes]
    masks = [np.asarray(m, dtype=bool)[..., None, :] for m in masks]
    vols = [np.asarray(v, dtype=np.float64) for v in source_volumes]
    count = np.ones(ref.shape[:-2] + ref.shape[-1:])
    total = ref.copy()
    for v, m in zip(vols, masks):
        total = total + np.where(m, v, 0.0)
        count = count + m[..., 0, :]
    mean = total / count[..., None, :]
    sq = (ref - mean) ** 2
    for v, m in zip(vols, masks):
        sq = sq + np.where(m, (v - mean) ** 2, 0.0)
    return sq / count[..., None, :], count < 2
