"""Differentiable matching layer and test-time matching.

A query descriptor is correlated with a (window of a) descriptor map, turned
into a 2-D distribution by softmax, and reduced to a match location by taking
the expectation over cell pixel coordinates.  Queries are batched: all
functions take ``N`` query points at once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import FeatureMapPair


class MatchError(ValueError):
    pass


@dataclass
class MatchDistribution:
    """Per-query probabilities over a grid of cells.

    Cell ``(r, c)`` of query ``n`` sits at pixel ``origin[n] + stride * (c, r)``.
    """

    probs: Tensor           # [N, h, w]
    origin: np.ndarray      # [N, 2] pixel coordinates of cell (0, 0)
    stride: float

    @property
    def grid_shape(self) -> tuple:
        return self.probs.shape[1:]

    def offsets(self) -> np.ndarray:
        """[h * w, 2] pixel offsets of every cell relative to the origin."""
        h, w = self.grid_shape
        ys, xs = np.mgrid[0:h, 0:w]
        return self.stride * np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)

    def argmax_cells(self) -> np.ndarray:
        """Row-major argmax (lowest index wins ties) as [N, 2] (col, row)."""
        h, w = self.grid_shape
        flat = self.probs.data.reshape(len(self.origin), -1).argmax(axis=1)
        return np.stack([flat % w, flat // w], axis=1)

    def argmax_pixels(self) -> np.ndarray:
        return self.origin + self.stride * self.argmax_cells()


@dataclass
class MatchResult:
    coarse_pred: Tensor | None      # [N, 2] pixels
    fine_pred: Tensor               # [N, 2] pixels
    coarse_var: Tensor | None       # [N] pixels^2
    fine_var: Tensor                # [N]
    window: np.ndarray | None       # [N, 4] (col0, row0, width, height) in fine cells
    coarse_dist: MatchDistribution | None
    fine_dist: MatchDistribution

    @property
    def sigma_fine(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.fine_var.data, 0.0))

    @property
    def sigma_coarse(self) -> np.ndarray | None:
        if self.coarse_var is None:
            return None
        return np.sqrt(np.maximum(self.coarse_var.data, 0.0))


def _as_queries(desc) -> Tensor:
    desc = desc if isinstance(desc, Tensor) else Tensor(desc)
    return desc.reshape(1, -1) if desc.ndim == 1 else desc


def correlate_softmax(query_desc, fmap, temperature: float = 1.0, region=None,
                      stride: float = 1.0) -> MatchDistribution:
    """Softmax over ``q . M(x) / T`` for every cell ``x`` of the map or of a region.

    ``region`` is ``None`` (full map) or ``[N, 4]`` integer windows
    ``(col0, row0, width, height)`` in map cells, one per query, all of equal size.
    """
    q = _as_queries(query_desc)
    fmap = fmap if isinstance(fmap, Tensor) else Tensor(fmap)
    c, h, w = fmap.shape
    if q.shape[1] != c:
        raise MatchError(f"query length {q.shape[1]} does not match map channels {c}")
    n = q.shape[0]
    if region is None:
        scores = ad.matmul(q, fmap.reshape(c, h * w))
        shape = (h, w)
        origin = np.zeros((n, 2))
    else:
        region = np.asarray(region, dtype=int).reshape(-1, 4)
        if len(region) != n:
            raise MatchError("need one region per query")
        ww, wh = int(region[0, 2]), int(region[0, 3])
        if ww <= 0 or wh <= 0:
            raise MatchError("empty matching region")
        if np.any(region[:, 2:] != (ww, wh)):
            raise MatchError("all regions must share one size")
        if (region[:, 0].min() < 0 or region[:, 1].min() < 0
                or (region[:, 0] + ww).max() > w or (region[:, 1] + wh).max() > h):
            raise MatchError("region extends outside the map")
        ys, xs = np.mgrid[0:wh, 0:ww]
        idx = (region[:, 1, None] + ys.ravel()) * w + region[:, 0, None] + xs.ravel()
        cells = ad.transpose(fmap.reshape(c, h * w))[idx]                 # [N, K, C]
        scores = ad.matmul(cells, q.reshape(n, c, 1)).reshape(n, wh * ww)
        shape = (wh, ww)
        origin = stride * region[:, :2].astype(float)
    if temperature != 1.0:
        scores = ad.scalar_mul(scores, 1.0 / temperature)
    probs = ad.softmax(scores, axis=1).reshape(n, *shape)
    return MatchDistribution(probs, origin, float(stride))


def expectation(dist: MatchDistribution) -> Tensor:
    """Probability-weighted mean cell location in pixels, ``[N, 2]``."""
    n = len(dist.origin)
    p = dist.probs.reshape(n, -1)
    return ad.matmul(p, Tensor(dist.offsets())) + dist.origin


def total_variance(dist: MatchDistribution) -> Tensor:
    """Trace of the 2-D covariance, ``Var(x) + Var(y)`` in pixels^2, ``[N]``."""
    n = len(dist.origin)
    p = dist.probs.reshape(n, -1)
    off = dist.offsets()
    centre = off.mean(axis=0)          # shift for conditioning; variance is shift invariant
    rel = off - centre
    second = ad.matmul(p, Tensor((rel ** 2).sum(axis=1, keepdims=True))).reshape(n)
    mean = ad.matmul(p, Tensor(rel))
    return second - (mean * mean).sum(axis=1)


def _window(centre_cells: np.ndarray, size: tuple, map_shape: tuple) -> np.ndarray:
    """Fixed-size windows centred on cells and clamped inside the map."""
    ww, wh = size
    h, w = map_shape
    col0 = np.clip(centre_cells[:, 0] - ww // 2, 0, w - ww)
    row0 = np.clip(centre_cells[:, 1] - wh // 2, 0, h - wh)
    n = len(centre_cells)
    return np.stack([col0, row0, np.full(n, ww), np.full(n, wh)], axis=1).astype(int)


def window_size(window_fraction: float, fine_shape: tuple) -> tuple:
    h, w = fine_shape
    return (max(2, min(w, int(round(window_fraction * w)))), max(2, min(h, int(round(window_fraction * h)))))


def _query(fmap: Tensor, pts, stride: int, normalize: bool) -> Tensor:
    grid_pts = ad.scalar_mul(pts, 1.0 / stride) if isinstance(pts, Tensor) else np.asarray(pts) / stride
    q = ad.sample_bilinear(fmap, grid_pts)
    return ad.l2_normalize(q, axis=-1) if normalize else q


def _maybe_normalize(fmap: Tensor, normalize: bool) -> Tensor:
    return ad.l2_normalize(fmap, axis=0) if normalize else fmap


def match_coarse(maps1: FeatureMapPair, maps2: FeatureMapPair, x1, temperature: float = 1.0,
                 normalize: bool = False) -> tuple[MatchDistribution, Tensor, Tensor]:
    """Full-map coarse distribution; returns ``(dist, expectation, variance)``."""
    pts = x1 if isinstance(x1, Tensor) else np.asarray(x1, dtype=float).reshape(-1, 2)
    q = _query(maps1.coarse, pts, maps1.coarse_stride, normalize)
    dist = correlate_softmax(q, _maybe_normalize(maps2.coarse, normalize), temperature, None, maps2.coarse_stride)
    return dist, expectation(dist), total_variance(dist)


def match_flat(maps1: FeatureMapPair, maps2: FeatureMapPair, x1, temperature: float = 1.0,
               normalize: bool = False) -> MatchResult:
    """Single-scale matching over the whole fine map (no coarse level)."""
    pts = x1 if isinstance(x1, Tensor) else np.asarray(x1, dtype=float).reshape(-1, 2)
    q = _query(maps1.fine, pts, maps1.fine_stride, normalize)
    dist = correlate_softmax(q, _maybe_normalize(maps2.fine, normalize), temperature, None, maps2.fine_stride)
    return MatchResult(None, expectation(dist), None, total_variance(dist), None, None, dist)


def match_c2f(maps1: FeatureMapPair, maps2: FeatureMapPair, x1, window_fraction: float = 1.0 / 8.0,
              temperature: float = 1.0, normalize: bool = False) -> MatchResult:
    """Coarse distribution over the full map, fine distribution in a window at the coarse peak.

    ``x1`` may be a Tensor (e.g. a predicted location) so gradients flow
    through the query sampling.  Window placement is not differentiable.
    """
    pts = x1 if isinstance(x1, Tensor) else np.asarray(x1, dtype=float).reshape(-1, 2)
    coarse_dist, coarse_pred, coarse_var = match_coarse(maps1, maps2, pts, temperature, normalize)
    ratio = maps2.coarse_stride // maps2.fine_stride
    centre = coarse_dist.argmax_cells() * ratio
    fine_shape = maps2.fine.shape[1:]
    window = _window(centre, window_size(window_fraction, fine_shape), fine_shape)
    q = _query(maps1.fine, pts, maps1.fine_stride, normalize)
    fine_dist = correlate_softmax(q, _maybe_normalize(maps2.fine, normalize), temperature, window,
                                  maps2.fine_stride)
    return MatchResult(coarse_pred, expectation(fine_dist), coarse_var, total_variance(fine_dist),
                       window, coarse_dist, fine_dist)


def match(maps1, maps2, x1, c2f: bool = True, window_fraction: float = 1.0 / 8.0,
          temperature: float = 1.0, normalize: bool = False) -> MatchResult:
    if c2f:
        return match_c2f(maps1, maps2, x1, window_fraction, temperature, normalize)
    return match_flat(maps1, maps2, x1, temperature, normalize)


def dense_match(maps1: FeatureMapPair, maps2: FeatureMapPair, pts, c2f: bool = True,
                window_fraction: float = 1.0 / 8.0, chunk: int = 512, normalize: bool = False) -> np.ndarray:
    """Test-time nearest-neighbour correspondence: the fine-level correlation peak."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    d1 = FeatureMapPair(maps1.coarse.detach(), maps1.fine.detach(), maps1.coarse_stride,
                        maps1.fine_stride, maps1.image_size)
    d2 = FeatureMapPair(maps2.coarse.detach(), maps2.fine.detach(), maps2.coarse_stride,
                        maps2.fine_stride, maps2.image_size)
    out = np.zeros_like(pts)
    for s in range(0, len(pts), chunk):
        res = match(d1, d2, pts[s:s + chunk], c2f, window_fraction, normalize=normalize)
        out[s:s + chunk] = res.fine_dist.argmax_pixels()
    return out


# --- sparse test-time matching --------------------------------------------------------
def pairwise_distances(d1, d2) -> np.ndarray:
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    sq = (d1 ** 2).sum(1)[:, None] + (d2 ** 2).sum(1)[None, :] - 2.0 * d1 @ d2.T
    return np.sqrt(np.maximum(sq, 0.0))


def mutual_nn_match(descs1, descs2) -> np.ndarray:
    """Mutual nearest neighbours under Euclidean distance.

    Returns an ``[M, 3]`` array of ``(i, j, distance)`` rows, sorted by ``i``.
    """
    d1 = np.asarray(descs1, dtype=float)
    d2 = np.asarray(descs2, dtype=float)
    if len(d1) == 0 or len(d2) == 0:
        raise MatchError("mutual_nn_match needs non-empty descriptor sets")
    dist = pairwise_distances(d1, d2)
    nn12 = dist.argmin(axis=1)
    nn21 = dist.argmin(axis=0)
    i = np.flatnonzero(nn21[nn12] == np.arange(len(d1)))
    j = nn12[i]
    return np.stack([i, j, dist[i, j]], axis=1) if len(i) else np.zeros((0, 3))


def nearest_two(descs1, descs2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First-NN index with first and second NN distances for every row of ``descs1``."""
    dist = pairwise_distances(descs1, descs2)
    order = np.argsort(dist, axis=1, kind="stable")
    rows = np.arange(len(dist))
    d_first = dist[rows, order[:, 0]]
    d_second = dist[rows, order[:, 1]] if dist.shape[1] > 1 else np.full(len(dist), np.inf)
    return order[:, 0], d_first, d_second


def ratio_test_filter(d_first, d_second, ratio: float = 0.8) -> np.ndarray:
    """Keep a match when ``d1 <= ratio * d2`` (so ``d2 == 0`` keeps only ``d1 == 0``)."""
    d_first = np.asarray(d_first, dtype=float)
    d_second = np.asarray(d_second, dtype=float)
    return d_first <= ratio * d_second
