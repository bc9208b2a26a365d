"""Two-view projective geometry.

Pixel convention: origin at the top-left pixel center, x to the right, y down,
pixel centers at integer coordinates.  Homogeneous lifting appends a 1.

Point sets are ``(N, 2)`` float arrays; a match set is a pair of such arrays
``(x1, x2)`` with rows in correspondence.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


class DegenerateLineError(GeometryError):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


class AmbiguousPoseError(GeometryError):
    pass


class RansacError(GeometryError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=float)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))


@dataclass(frozen=True)
class RelativePose:
    """Maps camera-1 coordinates to camera-2 coordinates: X2 = R @ X1 + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("R is not a proper rotation")
        if np.linalg.norm(t) == 0:
            raise GeometryError("translation must be nonzero")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def inverse(self) -> "RelativePose":
        return RelativePose(self.R.T, -self.R.T @ self.t)


@dataclass(frozen=True)
class EpipolarLine:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if self.a * self.a + self.b * self.b == 0.0:
            raise DegenerateLineError("degenerate epipolar line (a = b = 0)")

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])


def _K(K) -> np.ndarray:
    return K.K if isinstance(K, CameraIntrinsics) else np.asarray(K, dtype=float)


def homogeneous(pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    return np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)


def skew(t) -> np.ndarray:
    x, y, z = np.asarray(t, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(pose: RelativePose) -> np.ndarray:
    return skew(pose.t) @ pose.R


def fundamental_from_pose(K1, K2, pose: RelativePose) -> np.ndarray:
    """F = K2^-T [t]x R K1^-1, so that x2^T F x1 = 0 for true matches."""
    K1, K2 = _K(K1), _K(K2)
    try:
        K1inv = np.linalg.inv(K1)
        K2inv = np.linalg.inv(K2)
    except np.linalg.LinAlgError:
        raise GeometryError("singular intrinsics matrix") from None
    return K2inv.T @ essential_from_pose(pose) @ K1inv


def fundamental_from_essential(E, K1, K2) -> np.ndarray:
    return np.linalg.inv(_K(K2)).T @ E @ np.linalg.inv(_K(K1))


def epipolar_line(F, x1) -> EpipolarLine:
    a, b, c = np.asarray(F, dtype=float) @ homogeneous(np.asarray(x1, dtype=float).reshape(2))
    return EpipolarLine(float(a), float(b), float(c))


def epipolar_lines(F, pts) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised lines for ``(N, 2)`` points.  Returns ``(lines (N, 3), valid mask)``."""
    lines = homogeneous(pts) @ np.asarray(F, dtype=float).T
    valid = (lines[:, 0] ** 2 + lines[:, 1] ** 2) > 0.0
    return lines, valid


def point_line_distance(x, line) -> float:
    if isinstance(line, EpipolarLine):
        a, b, c = line.a, line.b, line.c
    else:
        a, b, c = np.asarray(line, dtype=float)
        if a * a + b * b == 0.0:
            raise DegenerateLineError("degenerate line (a = b = 0)")
    x = np.asarray(x, dtype=float)
    return float(abs(a * x[0] + b * x[1] + c) / np.hypot(a, b))


def point_line_distances(pts, lines) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    lines = np.asarray(lines, dtype=float)
    num = np.abs(lines[:, 0] * pts[:, 0] + lines[:, 1] * pts[:, 1] + lines[:, 2])
    return num / np.hypot(lines[:, 0], lines[:, 1])


def epipolar_distances(F, x1, x2) -> np.ndarray:
    """Distance of each x2 to the epipolar line of its x1 in image 2."""
    lines, _ = epipolar_lines(F, x1)
    return point_line_distances(x2, lines)


def hartley_normalize(pts) -> tuple[np.ndarray, np.ndarray]:
    """Translate to the centroid and scale so the mean distance is sqrt(2)."""
    pts = np.asarray(pts, dtype=float)
    centroid = pts.mean(axis=0)
    mean_dist = np.linalg.norm(pts - centroid, axis=1).mean()
    if not mean_dist > 0:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2.0) / mean_dist
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return (homogeneous(pts) @ T.T)[:, :2], T


def _as_matches(x1, x2=None):
    if x2 is None:
        arr = np.asarray(x1, dtype=float).reshape(-1, 4)
        return arr[:, :2], arr[:, 2:]
    return np.asarray(x1, dtype=float).reshape(-1, 2), np.asarray(x2, dtype=float).reshape(-1, 2)


def normalize_points(pts, K) -> np.ndarray:
    return (homogeneous(pts) @ np.linalg.inv(_K(K)).T)[:, :2]


def eight_point(x1, x2, K1, K2) -> np.ndarray:
    """Essential matrix from >= 8 matches; singular values forced to (1, 1, 0)."""
    x1, x2 = _as_matches(x1, x2)
    if len(x1) < 8:
        raise GeometryError(f"eight_point needs at least 8 matches, got {len(x1)}")
    n1, T1 = hartley_normalize(normalize_points(x1, K1))
    n2, T2 = hartley_normalize(normalize_points(x2, K2))
    u1, v1 = n1[:, 0], n1[:, 1]
    u2, v2 = n2[:, 0], n2[:, 1]
    A = np.stack([u2 * u1, u2 * v1, u2, v2 * u1, v2 * v1, v2, u1, v1, np.ones(len(u1))], axis=1)
    _, s, Vt = np.linalg.svd(A)
    if s[7] < 1e-10 * s[0]:
        raise DegenerateConfigurationError("rank-deficient design matrix in eight_point")
    E = T2.T @ Vt[-1].reshape(3, 3) @ T1
    U, _, Vt = np.linalg.svd(E)
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt
    return E / np.linalg.norm(E)


def triangulate(P1, P2, x1, x2) -> np.ndarray:
    """Linear-eigen triangulation; returns ``(N, 3)`` points."""
    x1, x2 = _as_matches(x1, x2)
    A = np.stack([
        x1[:, 0:1] * P1[2] - P1[0],
        x1[:, 1:2] * P1[2] - P1[1],
        x2[:, 0:1] * P2[2] - P2[0],
        x2[:, 1:2] * P2[2] - P2[1],
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1]
    return X[:, :3] / X[:, 3:4]


def pose_candidates(E) -> list[tuple[np.ndarray, np.ndarray]]:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    Ra = U @ W @ Vt
    Rb = U @ W.T @ Vt
    t = U[:, 2]
    return [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]


def decompose_essential(E, x1, x2, K1, K2) -> RelativePose:
    """Pick the (R, t) candidate with most points in front of both cameras."""
    n1 = normalize_points(_as_matches(x1, x2)[0], K1)
    n2 = normalize_points(_as_matches(x1, x2)[1], K2)
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    votes = []
    for R, t in pose_candidates(E):
        if len(n1) == 0:
            votes.append(0)
            continue
        X = triangulate(P1, np.hstack([R, t[:, None]]), n1, n2)
        depth1 = X[:, 2]
        depth2 = (X @ R.T + t)[:, 2]
        votes.append(int(np.sum((depth1 > 0) & (depth2 > 0))))
    order = np.argsort(votes)[::-1]
    if votes[order[0]] == 0 or votes[order[0]] == votes[order[1]]:
        raise AmbiguousPoseError(f"cheirality vote is ambiguous: {votes}")
    R, t = pose_candidates(E)[order[0]]
    return RelativePose(R, t / np.linalg.norm(t))


def _collinear(pts, tol: float = 1e-9) -> bool:
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[0] == 0 or s[1] <= tol * s[0]


def homography_dlt(x1, x2) -> np.ndarray:
    """Normalised DLT homography mapping x1 to x2, scaled so H[2, 2] = 1 when nonzero."""
    x1, x2 = _as_matches(x1, x2)
    if len(x1) < 4:
        raise GeometryError(f"homography needs at least 4 matches, got {len(x1)}")
    for pts in (x1, x2):
        if _collinear(pts):
            raise DegenerateConfigurationError("collinear point configuration")
        if len(pts) == 4:
            for drop in range(4):
                if _collinear(np.delete(pts, drop, axis=0)):
                    raise DegenerateConfigurationError("three of four points are collinear")
    n1, T1 = hartley_normalize(x1)
    n2, T2 = hartley_normalize(x2)
    zeros = np.zeros(len(n1))
    ones = np.ones(len(n1))
    u, v = n1[:, 0], n1[:, 1]
    up, vp = n2[:, 0], n2[:, 1]
    rows_a = np.stack([-u, -v, -ones, zeros, zeros, zeros, up * u, up * v, up], axis=1)
    rows_b = np.stack([zeros, zeros, zeros, -u, -v, -ones, vp * u, vp * v, vp], axis=1)
    A = np.concatenate([rows_a, rows_b])
    _, s, Vt = np.linalg.svd(A)
    if s[7] < 1e-12 * s[0]:
        raise DegenerateConfigurationError("rank-deficient homography design matrix")
    H = np.linalg.inv(T2) @ Vt[-1].reshape(3, 3) @ T1
    if abs(H[2, 2]) > 1e-15:
        H = H / H[2, 2]
    return H


def apply_homography(H, pts) -> np.ndarray:
    q = homogeneous(pts) @ np.asarray(H, dtype=float).T
    return q[:, :2] / q[:, 2:3]


def symmetric_transfer_error(H, x1, x2) -> np.ndarray:
    """RMS of forward and backward transfer distances, per match."""
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.linalg.norm(apply_homography(H, x1) - x2, axis=1)
        bwd = np.linalg.norm(apply_homography(np.linalg.inv(H), x2) - x1, axis=1)
        err = np.sqrt(0.5 * (fwd ** 2 + bwd ** 2))
    return np.where(np.isfinite(err), err, np.inf)


def ransac(kind: str, x1, x2, inlier_threshold: float = 3.0, max_iters: int = 2000, seed: int = 0,
           K1=None, K2=None):
    """Fixed-budget RANSAC for ``kind`` in {"homography", "essential"}.

    Returns ``(model, inlier_mask)``; the model is refit on the best consensus set.
    """
    x1, x2 = _as_matches(x1, x2)
    if kind == "homography":
        sample_size = 4

        def fit(i):
            return homography_dlt(x1[i], x2[i])

        def residual(model):
            return symmetric_transfer_error(model, x1, x2)
    elif kind == "essential":
        if K1 is None or K2 is None:
            raise GeometryError("essential RANSAC needs both intrinsics")
        sample_size = 8

        def fit(i):
            return eight_point(x1[i], x2[i], K1, K2)

        def residual(model):
            return epipolar_distances(fundamental_from_essential(model, K1, K2), x1, x2)
    else:
        raise GeometryError(f"unknown RANSAC model kind {kind!r}")
    n = len(x1)
    if n < sample_size:
        raise RansacError(f"{kind} RANSAC needs at least {sample_size} matches, got {n}")
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, 0
    for _ in range(max_iters):
        idx = rng.choice(n, size=sample_size, replace=False)
        try:
            model = fit(idx)
        except (GeometryError, np.linalg.LinAlgError):
            continue
        mask = residual(model) < inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            if count == n:
                break
    if best_mask is None or best_count < sample_size:
        raise RansacError(f"no {kind} model reached {sample_size} inliers")
    try:
        model = fit(np.flatnonzero(best_mask))
    except (GeometryError, np.linalg.LinAlgError) as exc:
        raise RansacError(f"refit on consensus set failed: {exc}") from exc
    return model, best_mask


def rotation_angular_error(R_est, R_gt) -> float:
    cos = (np.trace(np.asarray(R_est).T @ np.asarray(R_gt)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def translation_angular_error(t_est, t_gt) -> float:
    """Angle between translation directions, folded so t and -t agree."""
    a = np.asarray(t_est, dtype=float).reshape(3)
    b = np.asarray(t_gt, dtype=float).reshape(3)
    cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    theta = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return min(theta, 180.0 - theta)


def rotation_about(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``degrees``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    theta = np.radians(degrees)
    Kx = skew(axis)
    return np.eye(3) + np.sin(theta) * Kx + (1 - np.cos(theta)) * Kx @ Kx


def write_matches(path, x1, x2, extra=None, header: str | None = None) -> None:
    """Write one ``x1 y1 x2 y2 [extra]`` row per match; ``#`` lines are comments."""
    x1, x2 = _as_matches(x1, x2)
    lines = []
    if header:
        lines += [f"# {h}" for h in header.splitlines()]
    for i in range(len(x1)):
        row = f"{x1[i, 0]:.6f} {x1[i, 1]:.6f} {x2[i, 0]:.6f} {x2[i, 1]:.6f}"
        if extra is not None:
            row += f" {int(extra[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_matches(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 4:
            raise GeometryError(f"malformed match row: {line!r}")
        rows.append([float(v) for v in parts[:4]])
    arr = np.asarray(rows, dtype=float).reshape(-1, 4)
    return arr[:, :2], arr[:, 2:]
