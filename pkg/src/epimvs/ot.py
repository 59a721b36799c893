"""Depth-aware classification losses built on 1-D optimal transport.

The predicted and ground-truth depth distributions live on the same
hypothesis bins, so the ground cost is ``|x_i - x_j|``.  The exact
Wasserstein-1 distance is the integrated CDF difference; the entropic
version is solved with log-domain Sinkhorn iterations and is what a
training loop would differentiate.

Sinkhorn potentials follow the ``KL(gamma | P x Q)`` convention, so at
convergence ``gamma_ij = exp((f_i + g_j - C_ij) / eps) P_i Q_j`` and the
regularised cost is ``<f, P> + <g, Q>``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import _sinkhorn_kernel as _kernel
from .errors import ConfigurationError, UsageError

DEFAULT_LAMBDA = 3e-4


@dataclass(frozen=True)
class DepthDistribution:
    """Probability mass over strictly increasing depth bins."""

    bins: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        mass = np.asarray(self.mass, dtype=np.float64)
        if bins.shape != mass.shape or bins.ndim != 1:
            raise ValueError("bins and mass must be 1-D and the same length")
        if np.any(np.diff(bins) <= 0):
            raise ValueError("bins must be strictly increasing")
        if np.any(mass < 0) or abs(mass.sum() - 1.0) > 1e-9:
            raise ValueError("mass must lie on the simplex")
        object.__setattr__(self, "bins", bins)
        object.__setattr__(self, "mass", mass)


def _arrays(P, Q=None):
    """Unpack DepthDistribution arguments into (bins, P, Q) arrays."""
    if isinstance(P, DepthDistribution):
        bins = P.bins
        p = P.mass
    else:
        bins, p = None, np.asarray(P, dtype=np.float64)
    if Q is None:
        return bins, p, None
    if isinstance(Q, DepthDistribution):
        if bins is not None and not np.array_equal(bins, Q.bins):
            raise UsageError("distributions are defined on different bins")
        bins = Q.bins if bins is None else bins
        q = Q.mass
    else:
        q = np.asarray(Q, dtype=np.float64)
    return bins, p, q


def gt_distribution(gt_depth, bins):
    """Ground-truth distribution by linear interpolation between enclosing bins.

    Depths outside the bin range go one-hot to the nearest boundary bin.
    Works per pixel when ``bins`` has shape ``(..., D)`` and ``gt_depth``
    shape ``(...)``.

    Returns:
        (mass ``(..., D)``, valid ``(...)``); non-finite depths are invalid
        and get all-zero mass.
    """
    bins = np.asarray(bins, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    D = bins.shape[-1]
    gt_b = np.broadcast_to(gt, bins.shape[:-1])
    bins = np.broadcast_to(bins, gt_b.shape + (D,))
    valid = np.isfinite(gt_b)
    g = np.where(valid, gt_b, bins[..., 0])
    g = np.clip(g, bins[..., 0], bins[..., -1])
    # index of the left enclosing bin
    idx = np.sum(bins[..., 1:-1] <= g[..., None], axis=-1)
    left = np.take_along_axis(bins, idx[..., None], axis=-1)[..., 0]
    right = np.take_along_axis(bins, idx[..., None] + 1, axis=-1)[..., 0]
    t = (g - left) / (right - left)
    mass = np.zeros(gt_b.shape + (D,))
    np.put_along_axis(mass, idx[..., None], (1.0 - t)[..., None], axis=-1)
    np.put_along_axis(mass, idx[..., None] + 1, t[..., None], axis=-1)
    mass = np.where(valid[..., None], mass, 0.0)
    if mass.ndim == 1:
        return mass, bool(valid)
    return mass, valid


def w1_closed_form(P, Q, bins=None):
    """Exact 1-D Wasserstein-1 distance ``sum_j |CDF_P(j) - CDF_Q(j)| (x_{j+1} - x_j)``.

    Accepts two :class:`DepthDistribution` objects or mass arrays ``(..., D)``
    with ``bins``.
    """
    b, p, q = _arrays(P, Q)
    if bins is None:
        bins = b
    elif b is not None and not np.array_equal(np.asarray(bins), b):
        raise UsageError("explicit bins disagree with the distributions")
    if bins is None:
        raise UsageError("bins are required for raw mass arrays")
    bins = np.asarray(bins, dtype=np.float64)
    if p.shape[-1] != q.shape[-1] or bins.shape[-1] != p.shape[-1]:
        raise UsageError("mismatched bin counts")
    cdf = np.cumsum(p - q, axis=-1)[..., :-1]
    return np.sum(np.abs(cdf) * np.diff(bins, axis=-1), axis=-1)


@dataclass
class SinkhornResult:
    distance: np.ndarray  # transport cost of the entropic plan
    plan: np.ndarray  # (..., D, D), rows follow P, columns follow Q
    f: np.ndarray
    g: np.ndarray
    converged: np.ndarray
    iterations: int
    regularized: np.ndarray  # <f, P> + <g, Q>


def sinkhorn(
    P,
    Q,
    bins,
    epsilon,
    max_iters: int = 1000,
    tol: float = 1e-9,
    anneal: bool = True,
    sinkhorn_iters: int = 50,
):
    """Entropic OT between mass arrays ``(..., D)`` on shared ``bins``.

    Log-domain Sinkhorn sweeps run with a regularisation that starts at the
    cost diameter and halves (10 sweeps per level) down to ``epsilon``; after
    ``sinkhorn_iters`` sweeps at ``epsilon`` the potentials are polished with
    Newton steps on the semi-dual until the marginal L1 violation is at most
    ``tol`` or ``max_iters`` is reached.  ``epsilon`` may vary per item.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise UsageError(f"mass shapes differ: {P.shape} vs {Q.shape}")
    bins = np.broadcast_to(np.asarray(bins, dtype=np.float64), P.shape)
    batch = P.shape[:-1]
    D = P.shape[-1]
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), batch).reshape(-1)
    if np.any(~(eps > 0)):
        raise ConfigurationError("epsilon must be positive")
    p = np.ascontiguousarray(P.reshape(-1, D))
    q = np.ascontiguousarray(Q.reshape(-1, D))
    x = np.ascontiguousarray(bins.reshape(-1, D))
    with np.errstate(divide="ignore"):
        f, g, cond, iters, viol = _kernel.solve_batch(
            p, q, x, np.ascontiguousarray(eps), float(tol), int(sinkhorn_iters), int(max_iters), bool(anneal)
        )
    # identical marginals have symmetric potentials; when bins are far apart
    # relative to eps the cross-block coupling underflows and each block keeps
    # an arbitrary offset (+a in f, -a in g), which the average removes
    sym = np.all(p == q, axis=1)
    if sym.any():
        avg = 0.5 * (f[sym] + g[sym])
        f[sym] = avg
        g[sym] = avg
    plan = p[:, :, None] * cond
    C = np.abs(x[:, :, None] - x[:, None, :])
    dist = np.sum(plan * C, axis=(1, 2))
    reg = np.sum(np.where(p > 0, f, 0.0) * p, axis=1) + np.sum(np.where(q > 0, g, 0.0) * q, axis=1)
    return SinkhornResult(
        dist.reshape(batch),
        plan.reshape(batch + (D, D)),
        f.reshape(batch + (D,)),
        g.reshape(batch + (D,)),
        (viol <= tol).reshape(batch),
        int(iters.max()) if iters.size else 0,
        reg.reshape(batch),
    )


def sinkhorn_w1(P, Q, epsilon, max_iters: int = 1000, tol: float = 1e-9, bins=None):
    """Entropic W1 between two distributions on the same bins.

    Returns:
        (distance, plan, (f, g), converged).  ``distance`` is the transport
        cost of the entropic plan without the entropy term.
    """
    b, p, q = _arrays(P, Q)
    bins = b if bins is None else np.asarray(bins, dtype=np.float64)
    if bins is None:
        raise UsageError("bins are required for raw mass arrays")
    res = sinkhorn(p, q, bins, epsilon, max_iters=max_iters, tol=tol)
    return res.distance, res.plan, (res.f, res.g), res.converged


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _divergence_parts(P, Q, bins, epsilon, max_iters, tol):
    pq = sinkhorn(P, Q, bins, epsilon, max_iters=max_iters, tol=tol)
    pp = sinkhorn(P, P, bins, epsilon, max_iters=max_iters, tol=tol)
    qq = sinkhorn(Q, Q, bins, epsilon, max_iters=max_iters, tol=tol)
    return pq, pp, qq


def ot_loss(P_logits, Q, bins, epsilon, max_iters: int = 1000, tol: float = 1e-13):
    """Debiased entropic OT loss ``OT(P,Q) - OT(P,P)/2 - OT(Q,Q)/2`` with ``P = softmax(logits)``.

    Zero when ``P == Q``; this is the quantity :func:`ot_loss_gradient`
    differentiates.
    """
    P = _softmax(P_logits)
    Q = np.asarray(Q, dtype=np.float64)
    pq, pp, qq = _divergence_parts(P, Q, bins, epsilon, max_iters, tol)
    return pq.regularized - 0.5 * pp.regularized - 0.5 * qq.regularized


def ot_loss_gradient(P_logits, Q, bins, epsilon, max_iters: int = 1000, tol: float = 1e-13):
    """Gradient of :func:`ot_loss` with respect to the logits.

    The gradient with respect to ``P`` is the dual potential difference
    ``f_PQ - (f_PP + g_PP)/2``; it is centred and chained through the
    softmax Jacobian, ``P * (h - <h, P>)``.

    Returns:
        (gradient ``(..., D)``, converged)
    """
    P = _softmax(P_logits)
    Q = np.asarray(Q, dtype=np.float64)
    pq = sinkhorn(P, Q, bins, epsilon, max_iters=max_iters, tol=tol)
    pp = sinkhorn(P, P, bins, epsilon, max_iters=max_iters, tol=tol)
    h = pq.f - 0.5 * (pp.f + pp.g)
    h = h - h.mean(axis=-1, keepdims=True)
    grad = P * (h - np.sum(h * P, axis=-1, keepdims=True))
    return grad, pq.converged & pp.converged


def cross_entropy_loss(P, Q) -> float:
    """``-sum_j Q_j log(max(P_j, 1e-12))``."""
    _, p, q = _arrays(P, Q)
    return -np.sum(q * np.log(np.maximum(p, 1e-12)), axis=-1)


def l1_depth_loss(pred_depth, gt_depth):
    return np.abs(np.asarray(pred_depth, dtype=np.float64) - np.asarray(gt_depth, dtype=np.float64))


@dataclass
class LossTerms:
    total: float
    ot: float
    mono: float
    valid_pixels: int
    empty: bool
    converged: bool


def total_loss(per_stage, lam: float = DEFAULT_LAMBDA, method: str = "sinkhorn", rel_epsilon: float = 0.01):
    """Sum over stages and valid pixels of the OT term plus ``lam * |mono - gt|``.

    Args:
        per_stage: sequence of ``(prob, hypotheses, gt_depth, valid, mono)``
            tuples; ``prob`` and ``hypotheses`` are ``(H, W, D)``, the rest
            ``(H, W)``; ``mono`` may be None.
        lam: weight of the monocular L1 term.
        method: ``"sinkhorn"`` (entropic plan cost at
            ``epsilon = rel_epsilon * bin span``) or ``"exact"`` (closed form).

    Returns:
        :class:`LossTerms`; ``empty`` is set (and the loss is 0) when no
        pixel is valid.
    """
    ot_sum = 0.0
    mono_sum = 0.0
    count = 0
    converged = True
    for prob, hyps, gt, valid, mono in per_stage:
        P = getattr(prob, "data", prob)
        bins = getattr(hyps, "values", hyps)
        P = np.asarray(P, dtype=np.float64)
        bins = np.asarray(bins, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if P.shape != bins.shape or P.shape[:-1] != gt.shape:
            raise UsageError("stage arrays are not aligned")
        gt_mass, gt_ok = gt_distribution(gt, bins)
        mask = np.asarray(valid, dtype=bool) & gt_ok
        if not mask.any():
            continue
        p, q, b = P[mask], gt_mass[mask], bins[mask]
        if method == "exact":
            d = w1_closed_form(p, q, b)
        elif method == "sinkhorn":
            eps = rel_epsilon * (b[:, -1] - b[:, 0])
            res = sinkhorn(p, q, b, eps)
            d = res.distance
            converged &= bool(res.converged.all())
        else:
            raise ConfigurationError(f"unknown OT method {method!r}")
        ot_sum += float(np.sum(d))
        count += int(mask.sum())
        if mono is not None:
            mono_sum += float(np.sum(l1_depth_loss(np.asarray(mono)[mask], gt[mask])))
    if count == 0:
        warnings.warn("total_loss: no valid ground-truth pixels", RuntimeWarning, stacklevel=2)
        return LossTerms(0.0, 0.0, 0.0, 0, True, converged)
    return LossTerms(ot_sum + lam * mono_sum, ot_sum, mono_sum, count, False, converged)


def gradcheck(instances: int = 200, D: int = 8, seed: int = 0, h: float = 1e-5, rel_epsilon: float = 0.01):
    """Compare :func:`ot_loss_gradient` with central finite differences.

    Each instance draws DTU-like bins, Gaussian logits and a Dirichlet
    target.  The error of one instance is ``max|g - g_fd| / max|g_fd|``.

    Returns:
        (worst relative error, all solves converged)
    """
    rng = np.random.default_rng(seed)
    worst, converged = 0.0, True
    for _ in range(instances):
        lo = rng.uniform(400.0, 700.0)
        bins = np.sort(lo + rng.uniform(0.0, rng.uniform(50.0, 500.0), D))
        bins[0], bins[-1] = lo, lo + np.ptp(bins) + 1.0
        logits = rng.normal(0.0, 1.0, D)
        Q = rng.dirichlet(np.ones(D))
        eps = rel_epsilon * (bins[-1] - bins[0])
        g, ok = ot_loss_gradient(logits, Q, bins, eps)
        converged &= bool(np.all(ok))
        steps = logits + h * np.eye(D)
        back = logits - h * np.eye(D)
        fd = (ot_loss(steps, np.broadcast_to(Q, (D, D)), bins, eps) - ot_loss(back, np.broadcast_to(Q, (D, D)), bins, eps)) / (2 * h)
        scale = max(np.max(np.abs(fd)), 1e-300)
        worst = max(worst, float(np.max(np.abs(g - fd)) / scale))
    return worst, converged
