"""scikit-learn style wrapper around training, descriptor extraction and matching.

``fit`` takes training pairs (or a dataset directory), ``transform`` turns
images into dense descriptor maps, ``predict`` returns dense correspondences
and ``score`` reports PCK at 5 px on pairs with a correspondence oracle.
"""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import evaluation, matcher, synth, trainer
from .network import DescriptorNet, NetConfig, extract_descriptors


# --- input validation ----------------------------------------------------------------
def check_image(image, multiple_of: int = 1) -> np.ndarray:
    """Return ``image`` as a finite float64 ``[H, W]`` array with sides divisible by ``multiple_of``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains NaN or inf")
    if img.shape[0] % multiple_of or img.shape[1] % multiple_of:
        raise ValueError(f"image sides {img.shape} must be multiples of {multiple_of}")
    return img


def check_points(points, size: tuple | None = None) -> np.ndarray:
    """Return ``points`` as a finite ``[N, 2]`` (x, y) array, optionally bounds-checked."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.shape == (2,):
        pts = pts.reshape(1, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected (N, 2) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain NaN or inf")
    if size is not None:
        h, w = size
        if np.any(pts < 0) or np.any(pts[:, 0] > w - 1) or np.any(pts[:, 1] > h - 1):
            raise ValueError(f"points outside the {w}x{h} image")
    return pts


def check_pairs(pairs, need_oracle: bool = False) -> list:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one image pair")
    for p in pairs:
        if not isinstance(p, synth.TrainingPair):
            raise TypeError(f"expected TrainingPair, got {type(p).__name__}")
        if need_oracle and p.oracle is None:
            raise ValueError(f"pair {p.name} has no correspondence oracle")
    return pairs


class DescriptorLearner(BaseEstimator, TransformerMixin):
    """Learns dense descriptors from relative camera poses (or a supervised baseline)."""

    def __init__(self, epochs: int = 10, lr: float = 1e-4, lam: float = 0.1, queries: int = 128,
                 corner_fraction: float = 0.9, mode: str = "pose_only", reweight: bool = True,
                 cycle: bool = True, c2f: bool = True, seed: int = 0, coarse_dim: int = 64,
                 fine_dim: int = 64, window_fraction: float = 1.0 / 8.0, out: str | None = None):
        self.epochs = epochs
        self.lr = lr
        self.lam = lam
        self.queries = queries
        self.corner_fraction = corner_fraction
        self.mode = mode
        self.reweight = reweight
        self.cycle = cycle
        self.c2f = c2f
        self.seed = seed
        self.coarse_dim = coarse_dim
        self.fine_dim = fine_dim
        self.window_fraction = window_fraction
        self.out = out

    def _config(self, out: str) -> trainer.TrainConfig:
        net = NetConfig(coarse_dim=self.coarse_dim, fine_dim=self.fine_dim, window_fraction=self.window_fraction)
        return trainer.TrainConfig(out=out, epochs=self.epochs, queries=self.queries,
                                   corner_fraction=self.corner_fraction, lam=self.lam, lr=self.lr, mode=self.mode,
                                   reweight=self.reweight, cycle=self.cycle, c2f=self.c2f, seed=self.seed,
                                   checkpoint_every=0, net=net.to_dict())

    def fit(self, X, y=None, val_pairs=None):
        """Train on ``X``: a dataset directory or a sequence of ``TrainingPair``."""
        if isinstance(X, (str, Path)):
            data = synth.PairDataset(X)
        else:
            data = trainer.PairList(check_pairs(X, need_oracle=self.mode != "pose_only"))
        with tempfile.TemporaryDirectory() as tmp:
            cfg = self._config(self.out or tmp)
            cfg.validate()
            result = trainer.train(cfg, dataset=data, val_pairs=val_pairs or [])
        self.net_ = result.net
        self.history_ = result.history
        self.n_features_out_ = self.net_.config.coarse_dim + self.net_.config.fine_dim
        return self

    def transform(self, X):
        """Dense ``(coarse, fine)`` descriptor maps for each image in ``X``."""
        check_is_fitted(self, "net_")
        stride = self.net_.config.coarse_stride
        out = []
        for image in X:
            maps = self.net_(check_image(image, stride))
            out.append((maps.coarse.data, maps.fine.data))
        return out

    def describe(self, image, keypoints) -> np.ndarray:
        """Concatenated normalised descriptors at keypoints of one image."""
        check_is_fitted(self, "net_")
        img = check_image(image, self.net_.config.coarse_stride)
        return extract_descriptors(self.net_(img), check_points(keypoints, img.shape))

    def predict(self, X):
        """Dense matches: ``X`` is a sequence of ``(image1, image2, points1)``."""
        check_is_fitted(self, "net_")
        stride = self.net_.config.coarse_stride
        preds = []
        for image1, image2, pts in X:
            img1, img2 = check_image(image1, stride), check_image(image2, stride)
            preds.append(matcher.dense_match(self.net_(img1), self.net_(img2), check_points(pts, img1.shape),
                                             self.c2f, self.net_.config.window_fraction,
                                             normalize=self.net_.config.normalize_for_correlation))
        return preds

    def score(self, X, y=None, grid_step: int = 8) -> float:
        """PCK at 5 px on pairs that carry a correspondence oracle."""
        check_is_fitted(self, "net_")
        pairs = check_pairs(X, need_oracle=True)
        curve = evaluation.pck(pairs, evaluation.NetMatcher(self.net_, self.c2f), grid_step, (5.0,))
        return float(curve[0])

    @classmethod
    def from_checkpoint(cls, path, **params) -> "DescriptorLearner":
        est = cls(**params)
        est.net_: DescriptorNet = trainer.load_network(path)
        est.n_features_out_ = est.net_.config.coarse_dim + est.net_.config.fine_dim
        est.history_ = []
        return est
