"""Training objectives.

The pose-only objective penalises the distance of a predicted match to the
epipolar line of its query, plus a forward-backward (cycle) distance, with
per-query weights from the spread of the fine match distribution.  Two
supervised baselines (L2 to the true match, triplet with hard negatives)
share the same per-pair interface.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry
from . import matcher
from .autodiff import Tensor
from .network import FeatureMapPair

SIGMA_MIN = 0.5


def _points(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    return x.reshape(1, 2) if x.ndim == 1 else x


def epipolar_distance(x1, pred, F) -> Tensor:
    """Per-point distance ``[N]`` of predictions to the epipolar lines ``F x1``.

    Raises DegenerateLineError if any line is degenerate; filter those first.
    """
    x1 = np.asarray(x1.data if isinstance(x1, Tensor) else x1, dtype=float).reshape(-1, 2)
    lines, valid = geometry.epipolar_lines(F, x1)
    if not np.all(valid):
        raise geometry.DegenerateLineError("degenerate epipolar line for a query point")
    norm = np.hypot(lines[:, 0], lines[:, 1])
    coeff = Tensor(lines[:, :2] / norm[:, None])
    signed = (_points(pred) * coeff).sum(axis=1) + lines[:, 2] / norm
    return ad.absolute(signed)


def epipolar_loss(x1, pred, F) -> Tensor:
    """Mean point-to-epipolar-line distance in pixels (a scalar)."""
    return ad.mean(epipolar_distance(x1, pred, F))


def cycle_distance(x1, roundtrip) -> Tensor:
    x1 = np.asarray(x1.data if isinstance(x1, Tensor) else x1, dtype=float).reshape(-1, 2)
    return ad.vector_norm(_points(roundtrip) - x1, axis=1)


def cycle_loss(x1, roundtrip) -> Tensor:
    """Mean forward-backward distance ``||h21(h12(x1)) - x1||``."""
    return ad.mean(cycle_distance(x1, roundtrip))


def uncertainty_weights(sigma, sigma_min: float = SIGMA_MIN) -> np.ndarray:
    """Normalised inverse-sigma weights. Plain arrays, so no gradient flows through them."""
    sigma = np.maximum(np.asarray(sigma, dtype=float).reshape(-1), sigma_min)
    if sigma.size == 0:
        raise ValueError("need at least one query point")
    inv = 1.0 / sigma
    return inv / inv.sum()


def weighted_sum(per_point: Tensor, weights) -> Tensor:
    return (per_point * np.asarray(weights, dtype=float)).sum()


def supervised_l2_distance(pred, gt) -> Tensor:
    gt = np.asarray(gt, dtype=float).reshape(-1, 2)
    return ad.vector_norm(_points(pred) - gt, axis=1)


def supervised_l2_loss(pred, gt) -> Tensor:
    """Mean Euclidean distance between predicted and true match locations."""
    return ad.mean(supervised_l2_distance(pred, gt))


def hardest_negative(anchor, candidates, candidate_xy=None, positive_xy=None, radius: float = 0.0) -> np.ndarray:
    """Index of the closest candidate for each anchor, ignoring candidates within ``radius`` of the positive.

    ``anchor`` is ``[N, C]``, ``candidates`` ``[M, C]``; ``candidate_xy`` ``[M, 2]``
    and ``positive_xy`` ``[N, 2]`` are pixel positions used for the exclusion.
    Returns ``-1`` where every candidate is excluded.
    """
    a = np.asarray(anchor, dtype=float).reshape(-1, np.shape(candidates)[-1])
    d = matcher.pairwise_distances(a, candidates)
    if candidate_xy is not None and positive_xy is not None and radius > 0:
        gap = np.linalg.norm(np.asarray(candidate_xy)[None, :, :] - np.asarray(positive_xy)[:, None, :], axis=2)
        d = np.where(gap <= radius, np.inf, d)
    idx = d.argmin(axis=1)
    idx[~np.isfinite(d[np.arange(len(d)), idx])] = -1
    return idx


def triplet_loss_hard_negative(anchor_desc, positive_desc, candidate_negatives, margin: float = 0.5,
                               candidate_xy=None, positive_xy=None, radius: float = 0.0) -> Tensor:
    """Mean ``max(0, margin + d(a, p) - d(a, n*))`` with ``n*`` the hardest admissible negative."""
    a = _rows(anchor_desc)
    p = _rows(positive_desc)
    cands = candidate_negatives if isinstance(candidate_negatives, Tensor) else Tensor(candidate_negatives)
    if cands.ndim != 2 or cands.shape[0] < 1:
        raise ValueError("need at least one candidate negative")
    idx = hardest_negative(a.data, cands.data, candidate_xy, positive_xy, radius)
    keep = np.flatnonzero(idx >= 0)
    if keep.size == 0:
        return Tensor(0.0)
    a, p = a[keep], p[keep]
    neg = cands[idx[keep]]
    d_pos = ad.vector_norm(a - p, axis=1)
    d_neg = ad.vector_norm(a - neg, axis=1)
    return ad.mean(ad.relu(d_pos - d_neg + margin))


def _rows(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    return x.reshape(1, -1) if x.ndim == 1 else x


# --- per-pair objective ---------------------------------------------------------------
@dataclass
class LossOptions:
    mode: str = "pose_only"         # pose_only | supervised_l2 | triplet
    lam: float = 0.1
    cycle: bool = True
    reweight: bool = True
    c2f: bool = True
    sigma_min: float = SIGMA_MIN
    window_fraction: float = 1.0 / 8.0
    temperature: float = 1.0
    normalize: bool = False
    triplet_margin: float = 0.5
    triplet_radius: float = 4.0


@dataclass
class QueryBatch:
    """Query points of one pair with the geometry needed to score their matches."""

    x1: np.ndarray                   # [n, 2]
    F: np.ndarray                    # image 1 -> image 2
    gt: np.ndarray | None = None     # [n, 2] true matches (supervised baselines only)
    skipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def F_backward(self) -> np.ndarray:
        return self.F.T

    @classmethod
    def build(cls, x1, F, gt=None, gt_valid=None) -> "QueryBatch":
        """Drop queries with a degenerate epipolar line (or without a valid true match)."""
        x1 = np.asarray(x1, dtype=float).reshape(-1, 2)
        _, keep = geometry.epipolar_lines(F, x1)
        if gt is not None and gt_valid is not None:
            keep = keep & np.asarray(gt_valid, dtype=bool)
        skipped = np.flatnonzero(~keep)
        if not keep.any():
            raise ValueError("no usable query points in this pair")
        gt = None if gt is None else np.asarray(gt, dtype=float).reshape(-1, 2)[keep]
        return cls(x1[keep], np.asarray(F, dtype=float), gt, skipped)

    @property
    def n(self) -> int:
        return len(self.x1)


@dataclass
class PairLoss:
    total: Tensor
    loss_ep: float
    loss_cy: float
    mean_sigma: float
    sigma: np.ndarray
    weights: np.ndarray
    n_queries: int
    n_skipped: int


def weighted_pair_loss(ep: Tensor, cy: Tensor | None, sigma, lam: float = 0.1, reweight: bool = True,
                       sigma_min: float = SIGMA_MIN, weights=None) -> tuple[Tensor, np.ndarray]:
    """``sum_i w_i (ep_i + lam cy_i)`` with gradient-stopped weights; uniform when ``reweight`` is off.

    Explicit ``weights`` override both (used to freeze them in finite-difference checks).
    """
    n = ep.shape[0]
    if weights is None:
        weights = uncertainty_weights(sigma, sigma_min) if reweight else np.full(n, 1.0 / n)
    per_point = ep if cy is None or lam == 0 else ep + ad.scalar_mul(cy, lam)
    return weighted_sum(per_point, weights), weights


def pair_objective(maps1: FeatureMapPair, maps2: FeatureMapPair, batch: QueryBatch,
                   opts: LossOptions | None = None, weights=None) -> PairLoss:
    """Loss for one image pair, imposed with equal weight on the coarse and fine levels.

    ``weights`` replaces the per-query uncertainty weights when given.
    """
    opts = opts or LossOptions()
    if opts.mode == "triplet":
        return _triplet_objective(maps1, maps2, batch, opts)
    fwd = matcher.match(maps1, maps2, batch.x1, opts.c2f, opts.window_fraction, opts.temperature, opts.normalize)
    sigma = fwd.sigma_fine
    levels = [(fwd.fine_pred, "fine")]
    if fwd.coarse_pred is not None:
        levels.append((fwd.coarse_pred, "coarse"))

    total = None
    ep_sum = cy_sum = 0.0
    fixed = weights
    for pred, level in levels:
        if opts.mode == "supervised_l2":
            if batch.gt is None:
                raise ValueError("supervised_l2 needs true matches")
            ep = supervised_l2_distance(pred, batch.gt)
            cy = None
        elif opts.mode == "pose_only":
            ep = epipolar_distance(batch.x1, pred, batch.F)
            cy = _roundtrip_distance(maps1, maps2, batch.x1, pred, level, opts) if opts.cycle else None
        else:
            raise ValueError(f"unknown loss mode {opts.mode!r}")
        term, weights = weighted_pair_loss(ep, cy, sigma, opts.lam, opts.reweight, opts.sigma_min, fixed)
        total = term if total is None else total + term
        if level == "fine":
            ep_sum = float(ep.data.mean())
            cy_sum = float(cy.data.mean()) if cy is not None else 0.0
    return PairLoss(total, ep_sum, cy_sum, float(np.maximum(sigma, opts.sigma_min).mean()), sigma, weights,
                    batch.n, len(batch.skipped))


def _roundtrip_distance(maps1, maps2, x1, pred: Tensor, level: str, opts: LossOptions) -> Tensor:
    """Map predictions back into image 1 and measure the distance to the queries."""
    # expectations lie inside the cell grid, so predictions are always valid query points
    if level == "coarse":
        _, back, _ = matcher.match_coarse(maps2, maps1, pred, opts.temperature, opts.normalize)
    else:
        back = matcher.match(maps2, maps1, pred, opts.c2f, opts.window_fraction, opts.temperature,
                             opts.normalize).fine_pred
    return cycle_distance(x1, back)


def _triplet_objective(maps1, maps2, batch: QueryBatch, opts: LossOptions) -> PairLoss:
    if batch.gt is None:
        raise ValueError("triplet loss needs true matches")
    total = None
    for name in ("coarse", "fine") if opts.c2f else ("fine",):
        fm1 = getattr(maps1, name)
        fm2 = getattr(maps2, name)
        stride = maps1.coarse_stride if name == "coarse" else maps1.fine_stride
        c, h, w = fm2.shape
        anchor = ad.l2_normalize(ad.sample_bilinear(fm1, batch.x1 / stride), axis=-1)
        positive = ad.l2_normalize(ad.sample_bilinear(fm2, batch.gt / stride), axis=-1)
        cands = ad.l2_normalize(ad.transpose(fm2.reshape(c, h * w)), axis=-1)
        ys, xs = np.mgrid[0:h, 0:w]
        cell_xy = stride * np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        radius = max(opts.triplet_radius, float(stride))
        term = triplet_loss_hard_negative(anchor, positive, cands, opts.triplet_margin, cell_xy, batch.gt, radius)
        total = term if total is None else total + term
    return PairLoss(total, float("nan"), float("nan"), float("nan"), np.zeros(batch.n),
                    np.full(batch.n, 1.0 / batch.n), batch.n, len(batch.skipped))
