"""Evaluation protocols: MMA, PCK, homography and relative-pose accuracy, ablations.

Every protocol takes a *matcher*, an object with two methods:

``describe(image) -> (keypoints [N, 2], descriptors [N, D])``
    sparse keypoints and descriptors of one image (keypoints from Harris);
``dense(pair, pts) -> pred [N, 2]``
    the test-time correspondence in image 2 of each image-1 point.

Matchers may additionally define ``describe_pair(pair)`` to see both images
at once (the oracle matcher needs this).
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, matcher, synth
from .network import DescriptorNet, extract_descriptors

log = logging.getLogger(__name__)

MMA_THRESHOLDS = tuple(float(t) for t in range(1, 11))
PCK_THRESHOLDS = (1.0, 2.0, 3.0, 5.0, 8.0, 10.0)
HOMOGRAPHY_EPS = (1.0, 3.0, 5.0)
POSE_THRESHOLDS_DEG = (5.0, 10.0)
MAX_KEYPOINTS = 1000


# --- matchers -----------------------------------------------------------------------
class NetMatcher:
    """Descriptors and dense matches from a trained network."""

    def __init__(self, net: DescriptorNet, c2f: bool = True, max_keypoints: int = MAX_KEYPOINTS):
        self.net = net
        self.c2f = c2f
        self.max_keypoints = max_keypoints
        self._cache: dict[int, object] = {}

    def _maps(self, image):
        key = id(image)
        if key not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = (image, self.net(image))
        return self._cache[key][1]

    def describe(self, image):
        kps = synth.detect_corners(image, self.max_keypoints)
        if len(kps) == 0:
            return kps, np.zeros((0, self.net.config.coarse_dim + self.net.config.fine_dim))
        return kps, extract_descriptors(self._maps(image), kps)

    def dense(self, pair, pts):
        cfg = self.net.config
        return matcher.dense_match(self._maps(pair.image1), self._maps(pair.image2), pts, self.c2f,
                                   cfg.window_fraction, normalize=cfg.normalize_for_correlation)


class OracleMatcher:
    """Upper bound: uses the true correspondence field as its matcher."""

    def __init__(self, max_keypoints: int = MAX_KEYPOINTS):
        self.max_keypoints = max_keypoints

    def describe_pair(self, pair):
        kps1 = synth.detect_corners(pair.image1, self.max_keypoints)
        target, visible = pair.oracle.lookup(kps1)
        kps1 = kps1[visible]
        kps2 = target[visible]
        codes = np.eye(len(kps1))
        return kps1, codes, kps2, codes

    def dense(self, pair, pts):
        return pair.oracle.lookup(pts)[0]


class RandomMatcher:
    """Chance baseline: random descriptors and uniformly random dense predictions."""

    def __init__(self, seed: int = 0, dim: int = 32, max_keypoints: int = MAX_KEYPOINTS):
        self.rng = np.random.default_rng(seed)
        self.dim = dim
        self.max_keypoints = max_keypoints

    def describe(self, image):
        kps = synth.detect_corners(image, self.max_keypoints)
        return kps, self.rng.normal(size=(len(kps), self.dim))

    def dense(self, pair, pts):
        h, w = pair.size
        return self.rng.uniform([0, 0], [w - 1, h - 1], size=(len(pts), 2))


def _describe_pair(m, pair):
    if hasattr(m, "describe_pair"):
        return m.describe_pair(pair)
    kps1, d1 = m.describe(pair.image1)
    kps2, d2 = m.describe(pair.image2)
    return kps1, d1, kps2, d2


def sparse_matches(m, pair, ratio: float | None = None):
    """Mutual nearest-neighbour matches ``(x1, x2)``, optionally ratio-test filtered."""
    kps1, d1, kps2, d2 = _describe_pair(m, pair)
    if len(kps1) == 0 or len(kps2) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    mnn = matcher.mutual_nn_match(d1, d2)
    i = mnn[:, 0].astype(int)
    j = mnn[:, 1].astype(int)
    if ratio is not None and len(kps2) > 1 and len(i):
        _, first, second = matcher.nearest_two(d1[i], d2)
        keep = matcher.ratio_test_filter(first, second, ratio)
        i, j = i[keep], j[keep]
    return kps1[i], kps2[j]


# --- chance levels ------------------------------------------------------------------
def chance_level(threshold: float, size: tuple) -> float:
    """Probability that a uniformly random image location falls within ``threshold`` px of a target."""
    h, w = size
    return float(min(1.0, np.pi * threshold ** 2 / (h * w)))


def keypoint_chance_level(pairs, thresholds=MMA_THRESHOLDS, max_keypoints: int = MAX_KEYPOINTS) -> np.ndarray:
    """Expected MMA of matches drawn uniformly among the detected image-2 keypoints.

    Keypoints are sparse and repeatable, so a random keypoint lands near the
    true match far more often than a random pixel does; this is the chance
    level that applies to keypoint matching.
    """
    t = _check_thresholds(thresholds)
    _require_oracle(pairs)
    per_pair = []
    for pair in pairs:
        kps1 = synth.detect_corners(pair.image1, max_keypoints)
        kps2 = synth.detect_corners(pair.image2, max_keypoints)
        if len(kps1) == 0 or len(kps2) == 0:
            continue
        gt, visible = pair.oracle.lookup(kps1)
        if not visible.any():
            continue
        d = np.linalg.norm(gt[visible][:, None, :] - kps2[None, :, :], axis=2)
        per_pair.append((d[:, :, None] <= t).mean(axis=(0, 1)))
    return np.mean(per_pair, axis=0) if per_pair else np.zeros(len(t))


# --- protocols ----------------------------------------------------------------------
def _check_thresholds(thresholds) -> np.ndarray:
    t = np.asarray(thresholds, dtype=float)
    if t.ndim != 1 or len(t) == 0 or np.any(np.diff(t) <= 0):
        raise ValueError("thresholds must be a non-empty strictly increasing sequence")
    return t


def _require_oracle(pairs):
    for p in pairs:
        if p.oracle is None:
            raise ValueError(f"pair {p.name} has no correspondence oracle")


def mma(pairs, m, thresholds=MMA_THRESHOLDS, dump_dir=None) -> tuple[np.ndarray, dict]:
    """Mean matching accuracy curve over pairs; also returns match/feature counts."""
    t = _check_thresholds(thresholds)
    _require_oracle(pairs)
    per_pair = []
    n_feat = n_match = 0
    for pair in pairs:
        kps1, d1, kps2, d2 = _describe_pair(m, pair)
        n_feat += len(kps1) + len(kps2)
        if len(kps1) == 0 or len(kps2) == 0:
            log.info("pair %s: no keypoints", pair.name)
            per_pair.append(np.zeros(len(t)))
            continue
        mnn = matcher.mutual_nn_match(d1, d2)
        i, j = mnn[:, 0].astype(int), mnn[:, 1].astype(int)
        gt, visible = pair.oracle.lookup(kps1[i])
        i, j, gt = i[visible], j[visible], gt[visible]
        n_match += len(i)
        if len(i) == 0:
            log.info("pair %s: zero matches with a visible keypoint", pair.name)
            per_pair.append(np.zeros(len(t)))
            continue
        err = np.linalg.norm(kps2[j] - gt, axis=1)
        per_pair.append((err[:, None] <= t[None, :]).mean(axis=0))
        if dump_dir is not None:
            geometry.write_matches(Path(dump_dir) / f"{pair.name}_mma.txt", kps1[i], kps2[j], err <= 3.0,
                                   header="x1 y1 x2 y2 correct_at_3px")
    counts = {"features": n_feat / max(len(pairs), 1), "matches": n_match / max(len(pairs), 1)}
    return np.mean(per_pair, axis=0), counts


def pck(pairs, m, grid_step: int = 8, thresholds=PCK_THRESHOLDS, dump_dir=None) -> np.ndarray:
    """Fraction of visible grid points whose dense match lands within each threshold of the truth."""
    t = _check_thresholds(thresholds)
    _require_oracle(pairs)
    per_pair = []
    for pair in pairs:
        h, w = pair.size
        off = grid_step // 2
        ys, xs = np.mgrid[off:h:grid_step, off:w:grid_step]
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        gt, visible = pair.oracle.lookup(pts)
        if not visible.any():
            continue
        pred = m.dense(pair, pts[visible])
        err = np.linalg.norm(pred - gt[visible], axis=1)
        per_pair.append((err[:, None] <= t[None, :]).mean(axis=0))
        if dump_dir is not None:
            geometry.write_matches(Path(dump_dir) / f"{pair.name}_pck.txt", pts[visible], pred, err <= 5.0,
                                   header="x1 y1 x2 y2 correct_at_5px")
    return np.mean(per_pair, axis=0) if per_pair else np.zeros(len(t))


def true_homography(pair, step: int = 4) -> np.ndarray:
    """Homography fitted to the dense truth of a single-plane pair."""
    h, w = pair.size
    ys, xs = np.mgrid[0:h:step, 0:w:step]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    target, visible = pair.oracle.lookup(pts)
    if visible.sum() < 4:
        raise geometry.DegenerateConfigurationError(f"pair {pair.name}: too few visible pixels")
    return geometry.homography_dlt(pts[visible], target[visible])


def corner_error(H_est, H_gt, size: tuple) -> float:
    h, w = size
    corners = np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.linalg.norm(geometry.apply_homography(H_est, corners) - geometry.apply_homography(H_gt, corners),
                             axis=1).mean()
    return float(err) if np.isfinite(err) else float("inf")


def homography_task(pairs, m, eps=HOMOGRAPHY_EPS, inlier_threshold: float = 3.0, seed: int = 0,
                    matches_fn=None) -> dict:
    """Corner-correctness accuracy at each ``eps`` over single-plane pairs."""
    e = _check_thresholds(eps)
    errors = []
    for k, pair in enumerate(pairs):
        if pair.geometry != "plane":
            raise ValueError(f"pair {pair.name} is not a single-plane scene")
        x1, x2 = matches_fn(pair) if matches_fn else sparse_matches(m, pair)
        try:
            H, _ = geometry.ransac("homography", x1, x2, inlier_threshold, seed=seed + k)
            errors.append(corner_error(H, true_homography(pair), pair.size))
        except geometry.GeometryError as exc:
            log.info("pair %s: homography failed (%s)", pair.name, exc)
            errors.append(float("inf"))
    errors = np.asarray(errors)
    return {"eps": e.tolist(), "accuracy": [float(np.mean(errors < x)) if len(errors) else 0.0 for x in e],
            "corner_errors": errors.tolist()}


def pose_errors(pair, x1, x2, inlier_threshold: float = 1.0, seed: int = 0) -> tuple[float, float]:
    """Rotation and translation angular errors (deg) of the pose estimated from matches; inf on failure."""
    try:
        E, mask = geometry.ransac("essential", x1, x2, inlier_threshold, seed=seed, K1=pair.K1, K2=pair.K2)
        if mask.sum() < 8:
            raise geometry.RansacError("fewer than 8 inliers")
        est = geometry.decompose_essential(E, x1[mask], x2[mask], pair.K1, pair.K2)
    except geometry.GeometryError as exc:
        log.info("pair %s: pose estimation failed (%s)", pair.name, exc)
        return float("inf"), float("inf")
    return (geometry.rotation_angular_error(est.R, pair.pose.R),
            geometry.translation_angular_error(est.t, pair.pose.t))


def relative_pose_task(pairs, m, thresholds_deg=POSE_THRESHOLDS_DEG, inlier_threshold: float = 1.0,
                       seed: int = 0, matches_fn=None) -> dict:
    """Rotation/translation accuracy at each angular threshold, overall and per difficulty bucket.

    Single-plane pairs are rejected: every point pair satisfies a homography
    there and the essential matrix is not determined by the matches.
    """
    th = _check_thresholds(thresholds_deg)
    rows = []
    for k, pair in enumerate(pairs):
        if pair.geometry == "plane":
            raise ValueError(f"pair {pair.name} is a single-plane scene; relative pose is degenerate")
        x1, x2 = matches_fn(pair) if matches_fn else sparse_matches(m, pair)
        r_err, t_err = pose_errors(pair, x1, x2, inlier_threshold, seed + k)
        rows.append((pair.difficulty, r_err, t_err))

    def summarize(sel):
        r = np.array([x[1] for x in sel])
        t = np.array([x[2] for x in sel])
        return {"n": len(sel),
                "rotation": [float(np.mean(r < x)) if len(r) else 0.0 for x in th],
                "translation": [float(np.mean(t < x)) if len(t) else 0.0 for x in th]}

    out = {"thresholds_deg": th.tolist(), "all": summarize(rows)}
    for bucket in synth.DIFFICULTY_BUCKETS:
        out[bucket] = summarize([r for r in rows if r[0] == bucket])
    return out


def mean_epipolar_distance(pairs, m, grid_step: int = 8) -> float:
    """Mean distance of dense predictions to their epipolar lines over grid points (no oracle needed)."""
    vals = []
    for pair in pairs:
        h, w = pair.size
        off = grid_step // 2
        ys, xs = np.mgrid[off:h:grid_step, off:w:grid_step]
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        F = geometry.fundamental_from_pose(pair.K1, pair.K2, pair.pose)
        lines, valid = geometry.epipolar_lines(F, pts)
        pred = m.dense(pair, pts[valid])
        vals.append(geometry.point_line_distances(pred, lines[valid]).mean())
    return float(np.mean(vals))


# --- report -------------------------------------------------------------------------
@dataclass
class MetricReport:
    mma_thresholds: list = field(default_factory=lambda: list(MMA_THRESHOLDS))
    mma: list = field(default_factory=list)
    pck_thresholds: list = field(default_factory=lambda: list(PCK_THRESHOLDS))
    pck: list = field(default_factory=list)
    homography: dict = field(default_factory=dict)
    pose: dict = field(default_factory=dict)
    features: float = 0.0
    matches: float = 0.0
    mean_epipolar_distance: float = float("nan")
    chance: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    n_pairs: int = 0

    def validate(self) -> None:
        for name in ("mma", "pck"):
            vals = np.asarray(getattr(self, name))
            if np.any((vals < 0) | (vals > 1)):
                raise ValueError(f"{name} values outside [0, 1]")
            if np.any(np.diff(vals) < -1e-12):
                raise ValueError(f"{name} curve is not monotone in the threshold")
        for name in ("mma_thresholds", "pck_thresholds"):
            if np.any(np.diff(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be strictly increasing")

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "threshold", "value"])
            for t, v in zip(self.mma_thresholds, self.mma):
                w.writerow(["mma", t, f"{v:.6f}"])
            for t, v in zip(self.pck_thresholds, self.pck):
                w.writerow(["pck", t, f"{v:.6f}"])
            for t, v in zip(self.homography.get("eps", []), self.homography.get("accuracy", [])):
                w.writerow(["homography", t, f"{v:.6f}"])
            for part in ("rotation", "translation"):
                for t, v in zip(self.pose.get("thresholds_deg", []), self.pose.get("all", {}).get(part, [])):
                    w.writerow([f"pose_{part}", t, f"{v:.6f}"])
            w.writerow(["mean_epipolar_distance", "", f"{self.mean_epipolar_distance:.6f}"])


def _finite(obj):
    """Replace inf/nan with strings so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def evaluate(pairs, m, grid_step: int = 8, seed: int = 0, dump_dir=None) -> MetricReport:
    """Run every protocol on ``pairs`` (homography only on single-plane pairs)."""
    t0 = time.perf_counter()
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    report = MetricReport(n_pairs=len(pairs))
    curve, counts = mma(pairs, m, report.mma_thresholds, dump_dir)
    report.mma = curve.tolist()
    report.features, report.matches = counts["features"], counts["matches"]
    report.pck = pck(pairs, m, grid_step, report.pck_thresholds, dump_dir).tolist()
    planar = [p for p in pairs if p.geometry == "plane"]
    if planar:
        report.homography = homography_task(planar, m, seed=seed)
    general = [p for p in pairs if p.geometry != "plane"]
    if general:
        report.pose = relative_pose_task(general, m, seed=seed)
    report.mean_epipolar_distance = mean_epipolar_distance(pairs, m, grid_step)
    size = pairs[0].size if pairs else (1, 1)
    report.chance = {"pck": [chance_level(t, size) for t in report.pck_thresholds],
                     "mma": keypoint_chance_level(pairs, report.mma_thresholds).tolist()}
    report.runtime_s = time.perf_counter() - t0
    report.validate()
    return report


# --- ablation ------------------------------------------------------------------------
ABLATION_VARIANTS = {
    "full": {},
    "supervised_l2": {"mode": "supervised_l2"},
    "triplet": {"mode": "triplet", "c2f": False},   # plain single-scale metric-learning baseline
    "no_c2f": {"c2f": False},
    "no_cycle": {"cycle": False},
    "no_reweight": {"reweight": False},
    "triplet_c2f": {"mode": "triplet"},
}


def run_ablation(base_config, eval_pairs, variants=None, out=None, grid_step: int = 8) -> dict:
    """Train each variant from the same initialisation and data, then compare PCK/MMA.

    ``base_config`` is a ``TrainConfig``; each variant overrides some of its keys.
    Returns ``{variant: {"pck": [...], "mma": [...], "train_seconds": s}}``.
    """
    from . import trainer

    variants = variants or list(ABLATION_VARIANTS)
    out = Path(out or base_config.out)
    table = {}
    for name in variants:
        overrides = ABLATION_VARIANTS[name]
        cfg = trainer.TrainConfig.from_dict({**base_config.to_dict(), **overrides, "out": str(out / name)})
        t0 = time.perf_counter()
        result = trainer.train(cfg)
        elapsed = time.perf_counter() - t0
        m = NetMatcher(result.net, c2f=cfg.c2f)
        pck_curve = pck(eval_pairs, m, grid_step)
        mma_curve, _ = mma(eval_pairs, m)
        table[name] = {"pck_thresholds": list(PCK_THRESHOLDS), "pck": pck_curve.tolist(),
                       "mma": mma_curve.tolist(), "train_seconds": elapsed}
        log.info("ablation %s: PCK@5 %.3f", name, pck_curve[PCK_THRESHOLDS.index(5.0)])
    return table


def write_ablation_table(table: dict, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant"] + [f"pck@{t:g}" for t in PCK_THRESHOLDS] + ["mma@3"])
        for name, row in table.items():
            w.writerow([name] + [f"{v:.6f}" for v in row["pck"]] + [f"{row['mma'][2]:.6f}"])
