"""Deterministic synthetic two-view data.

Scenes are sets of textured planes seen by two pinhole cameras.  Camera 1 sits
at the world origin looking down +z, so world coordinates are camera-1
coordinates and the stored relative pose maps camera 1 to camera 2.  Images are
rendered by casting each pixel ray against the planes and evaluating a
procedural texture at the hit point; the same ray cast yields an exact dense
correspondence map with occlusion and truncation labels.

On-disk layout::

    root/manifest.json
    root/pairs/NNNN/img1.pgm, img2.pgm, meta.json
    root/oracle/NNNN/flow.bin       float32 little-endian [H, W, 2]: image-2 (x, y)
                                    of every image-1 pixel (NaN when undefined)
    root/oracle/NNNN/mask.pbm       set bit = pixel has a visible counterpart
    root/oracle/NNNN/occluded.pbm   set bit = counterpart hidden behind another plane

Training code reads only ``pairs/``; ``oracle/`` may be deleted.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .geometry import CameraIntrinsics, RelativePose, rotation_about, rotation_angular_error

DIFFICULTY_BUCKETS = {"easy": (0.0, 15.0), "moderate": (15.0, 30.0), "hard": (30.0, 60.0)}


class SynthError(RuntimeError):
    pass


# --- procedural texture ---------------------------------------------------------
@dataclass
class Texture:
    """Multi-octave value noise plus soft-edged blobs over plane coordinates."""

    extent: float
    cells: list
    grids: list
    amps: list
    blob_centers: np.ndarray
    blob_radii: np.ndarray
    blob_amps: np.ndarray
    blob_square: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, extent: float = 16.0, n_blobs: int = 1200,
               finest_cell: float = 0.08) -> "Texture":
        cells, grids, amps = [], [], []
        cell, amp = finest_cell * 16, 1.0
        while cell >= finest_cell - 1e-12:
            m = int(math.ceil(2 * extent / cell)) + 2
            cells.append(cell)
            grids.append(rng.random((m, m)))
            amps.append(amp)
            cell /= 2.0
            amp *= 0.75
        span = extent * 0.8
        centers = rng.uniform(-span, span, size=(n_blobs, 2))
        radii = rng.uniform(0.04, 0.35, size=n_blobs)
        blob_amps = rng.choice([-1.0, 1.0], size=n_blobs) * rng.uniform(0.2, 0.45, size=n_blobs)
        square = rng.random(n_blobs) < 0.5
        return cls(extent, cells, grids, amps, centers, radii, blob_amps, square)

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.clip(a, -self.extent, self.extent)
        b = np.clip(b, -self.extent, self.extent)
        total = np.zeros_like(a)
        norm = 0.0
        for cell, grid, amp in zip(self.cells, self.grids, self.amps):
            u = (a + self.extent) / cell
            v = (b + self.extent) / cell
            i = np.minimum(np.floor(u).astype(int), grid.shape[1] - 2)
            j = np.minimum(np.floor(v).astype(int), grid.shape[0] - 2)
            fu = u - i
            fv = v - j
            fu = fu * fu * (3 - 2 * fu)
            fv = fv * fv * (3 - 2 * fv)
            top = grid[j, i] * (1 - fu) + grid[j, i + 1] * fu
            bot = grid[j + 1, i] * (1 - fu) + grid[j + 1, i + 1] * fu
            total += amp * (top * (1 - fv) + bot * fv - 0.5)
            norm += amp
        value = 0.5 + 0.8 * total / norm
        # blobs: only those near the queried region contribute
        lo = np.array([a.min(), b.min()]) - 0.5
        hi = np.array([a.max(), b.max()]) + 0.5
        near = np.all((self.blob_centers > lo) & (self.blob_centers < hi), axis=1)
        for c, r, amp, sq in zip(self.blob_centers[near], self.blob_radii[near],
                                 self.blob_amps[near], self.blob_square[near]):
            da, db = a - c[0], b - c[1]
            dist = np.maximum(np.abs(da), np.abs(db)) if sq else np.hypot(da, db)
            value += amp * expit((r - dist) / (0.08 * r))
        return np.clip(value, 0.0, 1.0)


@dataclass
class Plane:
    center: np.ndarray
    normal: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half_extent: tuple
    texture: Texture

    @classmethod
    def facing(cls, center, normal, half_extent, texture, rng=None) -> "Plane":
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        ref = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(ref, n)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        if rng is not None:
            phi = rng.uniform(0, 2 * np.pi)
            u, v = np.cos(phi) * u + np.sin(phi) * v, -np.sin(phi) * u + np.cos(phi) * v
        return cls(np.asarray(center, dtype=float), n, u, v, tuple(half_extent), texture)

    @property
    def offset(self) -> float:
        return float(self.normal @ self.center)


@dataclass
class Scene:
    seed: int
    geometry: str
    planes: list


def _camera_rays(K: np.ndarray, R_wc: np.ndarray, pts: np.ndarray):
    """World-space origin and per-point directions scaled so camera depth = lambda."""
    d_cam = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.linalg.inv(K).T
    return d_cam @ R_wc.T


def ray_cast(planes: list, origin: np.ndarray, dirs: np.ndarray):
    """Nearest plane hit along each ray.  Returns (depth, plane index or -1, hit points)."""
    n = len(dirs)
    best = np.full(n, np.inf)
    index = np.full(n, -1)
    for k, plane in enumerate(planes):
        denom = dirs @ plane.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (plane.offset - origin @ plane.normal) / denom
        hit = origin + lam[:, None] * dirs
        rel = hit - plane.center
        inside = (np.abs(rel @ plane.u) <= plane.half_extent[0]) & (np.abs(rel @ plane.v) <= plane.half_extent[1])
        ok = np.isfinite(lam) & (lam > 1e-9) & inside & (lam < best)
        best[ok] = lam[ok]
        index[ok] = k
    hits = origin + np.where(np.isfinite(best), best, 0.0)[:, None] * dirs
    return best, index, hits


def _shade(planes: list, index: np.ndarray, hits: np.ndarray) -> np.ndarray:
    out = np.zeros(len(index))
    for k, plane in enumerate(planes):
        sel = index == k
        if sel.any():
            rel = hits[sel] - plane.center
            out[sel] = plane.texture(rel @ plane.u, rel @ plane.v)
    return out


def pixel_grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


def render_view(scene: Scene, K: np.ndarray, R: np.ndarray, t: np.ndarray, size: tuple):
    """Render camera (X_cam = R X_world + t).  Returns (image, plane index, hits)."""
    h, w = size
    origin = -R.T @ t
    dirs = _camera_rays(K, R.T, pixel_grid(h, w))
    _, index, hits = ray_cast(scene.planes, origin, dirs)
    return _shade(scene.planes, index, hits).reshape(h, w), index.reshape(h, w), hits


@dataclass
class GtOracle:
    """Dense image-1 -> image-2 correspondence map.  Evaluation only."""

    flow: np.ndarray        # [H, W, 2] image-2 (x, y)
    visible: np.ndarray     # [H, W] bool
    occluded: np.ndarray    # [H, W] bool, subset of ~visible

    def lookup(self, pts):
        """Correspondences of ``(N, 2)`` image-1 points and their visibility."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        h, w = self.visible.shape
        xi = np.clip(np.rint(pts[:, 0]).astype(int), 0, w - 1)
        yi = np.clip(np.rint(pts[:, 1]).astype(int), 0, h - 1)
        inside = (pts[:, 0] >= -0.5) & (pts[:, 0] <= w - 0.5) & (pts[:, 1] >= -0.5) & (pts[:, 1] <= h - 0.5)
        visible = self.visible[yi, xi] & inside
        x0 = np.clip(np.floor(pts[:, 0]).astype(int), 0, w - 2)
        y0 = np.clip(np.floor(pts[:, 1]).astype(int), 0, h - 2)
        fx = np.clip(pts[:, 0] - x0, 0, 1)[:, None]
        fy = np.clip(pts[:, 1] - y0, 0, 1)[:, None]
        corners = [self.flow[y0, x0], self.flow[y0, x0 + 1], self.flow[y0 + 1, x0], self.flow[y0 + 1, x0 + 1]]
        interp = (corners[0] * (1 - fx) * (1 - fy) + corners[1] * fx * (1 - fy)
                  + corners[2] * (1 - fx) * fy + corners[3] * fx * fy)
        exact = np.abs(pts - np.rint(pts)).max(axis=1) < 1e-9
        target = np.where(exact[:, None] | ~np.isfinite(interp), self.flow[yi, xi], interp)
        return target, visible

    def occluded_at(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        h, w = self.visible.shape
        xi = np.clip(np.rint(pts[:, 0]).astype(int), 0, w - 1)
        yi = np.clip(np.rint(pts[:, 1]).astype(int), 0, h - 1)
        return self.occluded[yi, xi]


def compute_oracle(scene: Scene, K1: np.ndarray, K2: np.ndarray, pose: RelativePose, size: tuple,
                   index1=None, hits1=None) -> GtOracle:
    h, w = size
    if index1 is None:
        _, index1, hits1 = render_view(scene, K1, np.eye(3), np.zeros(3), size)
    index1 = index1.reshape(-1)
    X2 = hits1 @ pose.R.T + pose.t
    z = X2[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = X2 @ K2.T
        x2 = proj[:, :2] / proj[:, 2:3]
    defined = (index1 >= 0) & (z > 1e-9)
    x2[~defined] = np.nan
    in_bounds = defined & (x2[:, 0] >= 0) & (x2[:, 0] <= w - 1) & (x2[:, 1] >= 0) & (x2[:, 1] <= h - 1)
    # nearest surface along camera 2's ray through x2 must be the same point
    origin2 = -pose.R.T @ pose.t
    visible = np.zeros(len(index1), dtype=bool)
    occluded = np.zeros(len(index1), dtype=bool)
    cand = np.flatnonzero(in_bounds)
    if len(cand):
        dirs = _camera_rays(K2, pose.R.T, x2[cand])
        depth2, index2, _ = ray_cast(scene.planes, origin2, dirs)
        same = (index2 == index1[cand]) & (np.abs(depth2 - z[cand]) <= 1e-7 * np.maximum(1.0, z[cand]))
        visible[cand[same]] = True
        occluded[cand[~same]] = True
    return GtOracle(x2.reshape(h, w, 2), visible.reshape(h, w), occluded.reshape(h, w))


def forward_backward_error(scene: Scene, K1, K2, pose: RelativePose, oracle: GtOracle) -> np.ndarray:
    """Re-cast visible image-2 targets back to image 1; returns pixel errors."""
    h, w = oracle.visible.shape
    src = pixel_grid(h, w)[oracle.visible.ravel()]
    tgt = oracle.flow.reshape(-1, 2)[oracle.visible.ravel()]
    if len(src) == 0:
        return np.zeros(0)
    origin2 = -pose.R.T @ pose.t
    _, _, hits = ray_cast(scene.planes, origin2, _camera_rays(np.asarray(K2), pose.R.T, tgt))
    proj = hits @ np.asarray(K1).T
    back = proj[:, :2] / proj[:, 2:3]
    return np.linalg.norm(back - src, axis=1)


def plane_homography(plane: Plane, K1, K2, pose: RelativePose) -> np.ndarray:
    """Homography induced by ``plane`` (camera-1 frame) from image 1 to image 2."""
    H = np.asarray(K2) @ (pose.R + np.outer(pose.t, plane.normal) / plane.offset) @ np.linalg.inv(K1)
    return H / H[2, 2]


# --- pairs ------------------------------------------------------------------------
@dataclass
class TrainingPair:
    image1: np.ndarray      # [H, W] float in [0, 1]
    image2: np.ndarray
    K1: CameraIntrinsics
    K2: CameraIntrinsics
    pose: RelativePose
    difficulty: str
    rotation_deg: float
    geometry: str = "plane"
    oracle: GtOracle | None = None
    name: str = ""

    @property
    def size(self) -> tuple:
        return self.image1.shape


@dataclass
class SynthConfig:
    count: int = 100
    image_size: int = 128
    seed: int = 0
    difficulty_mix: dict = field(default_factory=lambda: {"easy": 0.4, "moderate": 0.4, "hard": 0.2})
    geometry: str = "mixed"           # plane | facade | mixed
    noise_sigma: float = 0.01
    gain_range: tuple = (0.8, 1.2)
    bias_range: tuple = (-0.08, 0.08)
    min_overlap: float = 0.3
    focal_scale: float = 1.0
    coarse_stride: int = 8

    def validate(self) -> None:
        if self.image_size % self.coarse_stride:
            raise SynthError(f"image_size {self.image_size} must be a multiple of {self.coarse_stride}")
        if self.count < 0:
            raise SynthError("count must be >= 0")
        if self.geometry not in ("plane", "facade", "mixed"):
            raise SynthError(f"unknown geometry {self.geometry!r}")
        unknown = set(self.difficulty_mix) - set(DIFFICULTY_BUCKETS)
        if unknown or not self.difficulty_mix:
            raise SynthError(f"bad difficulty mix {self.difficulty_mix}")


def default_intrinsics(size: int, focal_scale: float = 1.0) -> CameraIntrinsics:
    f = focal_scale * size
    c = (size - 1) / 2.0
    return CameraIntrinsics(f, f, c, c)


def difficulty_of(angle_deg: float) -> str:
    for name, (lo, hi) in DIFFICULTY_BUCKETS.items():
        if lo <= angle_deg <= hi:
            return name
    return "out_of_range"


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def sample_scene(rng: np.random.Generator, geometry: str, depth: float, seed: int = 0) -> Scene:
    tilt = rotation_about(_random_unit(rng), rng.uniform(0.0, 25.0))
    background = Plane.facing([0.0, 0.0, depth], tilt @ np.array([0.0, 0.0, -1.0]),
                              (np.inf, np.inf), Texture.random(rng), rng)
    planes = [background]
    if geometry == "facade":
        for _ in range(int(rng.integers(1, 4))):
            d = depth * rng.uniform(0.5, 0.8)
            half_view = 0.5 * d
            center = np.array([rng.uniform(-0.8, 0.8) * half_view, rng.uniform(-0.8, 0.8) * half_view, d])
            normal = rotation_about(_random_unit(rng), rng.uniform(0.0, 20.0)) @ np.array([0.0, 0.0, -1.0])
            ext = rng.uniform(0.2, 0.45, size=2) * half_view
            planes.append(Plane.facing(center, normal, ext, Texture.random(rng, extent=4.0, n_blobs=120), rng))
    return Scene(seed, geometry, planes)


def sample_pose(rng: np.random.Generator, look_at: np.ndarray, difficulty: str):
    """Orbit camera 2 about the look-at point so its relative rotation falls in the bucket."""
    lo, hi = DIFFICULTY_BUCKETS[difficulty]
    for _ in range(100):
        theta = rng.uniform(lo, hi)
        phi = rng.uniform(0, 2 * np.pi)
        axis = np.array([np.cos(phi), np.sin(phi), 0.25 * rng.normal()])
        orbit = rotation_about(axis, theta)
        jitter = rotation_about(_random_unit(rng), rng.uniform(0.0, 3.0))
        scale = rng.uniform(0.85, 1.15)
        C2 = look_at - scale * orbit @ look_at + rng.normal(scale=0.05, size=3)
        R_cw = orbit @ jitter
        R = R_cw.T
        t = -R @ C2
        angle = rotation_angular_error(R, np.eye(3))
        if lo <= angle <= hi and np.linalg.norm(t) > 0.05:
            return RelativePose(R, t), angle
    raise SynthError(f"could not sample a {difficulty} pose")


def _photometric(img: np.ndarray, rng, cfg: SynthConfig) -> np.ndarray:
    gain = rng.uniform(*cfg.gain_range)
    bias = rng.uniform(*cfg.bias_range)
    out = gain * img + bias + rng.normal(scale=cfg.noise_sigma, size=img.shape)
    return np.round(np.clip(out, 0.0, 1.0) * 255.0) / 255.0


def _textured_enough(img: np.ndarray) -> bool:
    gy, gx = np.gradient(img)
    return np.mean(np.hypot(gx, gy) > 1e-3) > 0.5


def make_pair(seed: int, cfg: SynthConfig, difficulty: str, geometry: str, max_tries: int = 50) -> tuple:
    """Render one pair; returns ``(TrainingPair, Scene)``."""
    rng = np.random.default_rng(seed)
    size = (cfg.image_size, cfg.image_size)
    K = default_intrinsics(cfg.image_size, cfg.focal_scale)
    for _ in range(max_tries):
        depth = rng.uniform(4.0, 6.0)
        scene = sample_scene(rng, geometry, depth, seed)
        pose, angle = sample_pose(rng, np.array([0.0, 0.0, depth]), difficulty)
        clean1, index1, hits1 = render_view(scene, K.K, np.eye(3), np.zeros(3), size)
        if not _textured_enough(clean1):
            continue
        oracle = compute_oracle(scene, K.K, K.K, pose, size, index1, hits1)
        if oracle.visible.mean() < cfg.min_overlap:
            continue
        clean2, _, _ = render_view(scene, K.K, pose.R, pose.t, size)
        img1 = _photometric(clean1, rng, cfg)
        img2 = _photometric(clean2, rng, cfg)
        pair = TrainingPair(img1, img2, K, K, pose, difficulty, angle, geometry, oracle)
        return pair, scene
    raise SynthError(f"no acceptable pair after {max_tries} draws (seed {seed})")


def _pick_difficulties(cfg: SynthConfig, rng) -> list[str]:
    names = sorted(cfg.difficulty_mix)
    weights = np.array([cfg.difficulty_mix[n] for n in names], dtype=float)
    weights /= weights.sum()
    return [names[i] for i in rng.choice(len(names), size=cfg.count, p=weights)]


def generate_pairs(cfg: SynthConfig):
    """Yield ``(TrainingPair, Scene)`` for every pair of ``cfg`` (deterministic)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    difficulties = _pick_difficulties(cfg, rng)
    seeds = rng.integers(0, 2**31 - 1, size=cfg.count)
    for i in range(cfg.count):
        geometry = cfg.geometry
        if geometry == "mixed":
            geometry = "facade" if rng.random() < 0.5 else "plane"
        pair, scene = make_pair(int(seeds[i]), cfg, difficulties[i], geometry)
        pair.name = f"{i:04d}"
        yield pair, scene


# --- file formats ------------------------------------------------------------------
def write_pgm(path, img: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _pnm_header(raw: bytes, magic: bytes, n_fields: int):
    if not raw.startswith(magic):
        raise SynthError(f"expected {magic!r} file")
    fields, pos = [], len(magic)
    while len(fields) < n_fields:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    return fields, pos + 1


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (w, h, maxval), pos = _pnm_header(raw, b"P5", 3)
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.float64) / maxval


def write_pbm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    Path(path).write_bytes(f"P4\n{w} {h}\n".encode("ascii") + np.packbits(mask, axis=1).tobytes())


def read_pbm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (w, h), pos = _pnm_header(raw, b"P4", 2)
    row_bytes = (w + 7) // 8
    packed = np.frombuffer(raw, dtype=np.uint8, count=row_bytes * h, offset=pos).reshape(h, row_bytes)
    return np.unpackbits(packed, axis=1)[:, :w].astype(bool)


def _meta(pair: TrainingPair) -> dict:
    return {
        "K1": pair.K1.K.ravel().tolist(),
        "K2": pair.K2.K.ravel().tolist(),
        "R": pair.pose.R.ravel().tolist(),
        "t": pair.pose.t.tolist(),
        "difficulty": pair.difficulty,
        "rotation_deg": pair.rotation_deg,
        "geometry": pair.geometry,
        "size": list(pair.size),
    }


def write_pair(root, pair: TrainingPair) -> None:
    root = Path(root)
    pdir = root / "pairs" / pair.name
    pdir.mkdir(parents=True, exist_ok=True)
    write_pgm(pdir / "img1.pgm", pair.image1)
    write_pgm(pdir / "img2.pgm", pair.image2)
    (pdir / "meta.json").write_text(json.dumps(_meta(pair), sort_keys=True, indent=1) + "\n")
    if pair.oracle is not None:
        odir = root / "oracle" / pair.name
        odir.mkdir(parents=True, exist_ok=True)
        (odir / "flow.bin").write_bytes(pair.oracle.flow.astype("<f4").tobytes())
        write_pbm(odir / "mask.pbm", pair.oracle.visible)
        write_pbm(odir / "occluded.pbm", pair.oracle.occluded)


def generate_dataset(cfg: SynthConfig, out) -> Path:
    """Write ``cfg.count`` pairs under ``out``; byte-identical for identical configs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for pair, _ in generate_pairs(cfg):
        write_pair(out, pair)
        names.append(pair.name)
    manifest = {"config": asdict(cfg), "pairs": names}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return out


class PairDataset:
    """Lazy reader for a dataset directory.  The oracle is loaded only if present."""

    def __init__(self, root):
        self.root = Path(root)
        pairs_dir = self.root / "pairs"
        if not pairs_dir.is_dir():
            raise SynthError(f"{self.root} is not a dataset (no pairs/ directory)")
        self.names = sorted(p.name for p in pairs_dir.iterdir() if p.is_dir())

    def __len__(self) -> int:
        return len(self.names)

    @property
    def has_oracle(self) -> bool:
        return (self.root / "oracle").is_dir()

    def __getitem__(self, i: int) -> TrainingPair:
        return self.load(i, with_oracle=False)

    def load(self, i: int, with_oracle: bool = False) -> TrainingPair:
        name = self.names[i]
        pdir = self.root / "pairs" / name
        meta = json.loads((pdir / "meta.json").read_text())
        pair = TrainingPair(
            read_pgm(pdir / "img1.pgm"), read_pgm(pdir / "img2.pgm"),
            CameraIntrinsics.from_matrix(np.reshape(meta["K1"], (3, 3))),
            CameraIntrinsics.from_matrix(np.reshape(meta["K2"], (3, 3))),
            RelativePose(np.reshape(meta["R"], (3, 3)), np.asarray(meta["t"])),
            meta["difficulty"], float(meta["rotation_deg"]), meta.get("geometry", "plane"), None, name)
        if with_oracle:
            pair.oracle = self.load_oracle(i, pair.size)
        return pair

    def load_oracle(self, i: int, size: tuple) -> GtOracle:
        odir = self.root / "oracle" / self.names[i]
        h, w = size
        flow = np.frombuffer((odir / "flow.bin").read_bytes(), dtype="<f4").astype(np.float64)
        return GtOracle(flow.reshape(h, w, 2), read_pbm(odir / "mask.pbm"), read_pbm(odir / "occluded.pbm"))

    def with_oracle(self) -> list[TrainingPair]:
        return [self.load(i, with_oracle=True) for i in range(len(self))]


# --- query points ---------------------------------------------------------------------
def harris_response(image: np.ndarray, sigma: float = 1.5, k: float = 0.04) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(gx * gx, sigma)
    syy = ndimage.gaussian_filter(gy * gy, sigma)
    sxy = ndimage.gaussian_filter(gx * gy, sigma)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def detect_corners(image: np.ndarray, max_count: int, nms_radius: int = 4, border: int = 2,
                   rel_threshold: float = 0.01) -> np.ndarray:
    """Harris maxima after non-max suppression, strongest first, as ``(N, 2)`` (x, y)."""
    resp = harris_response(image)
    peak = resp.max()
    if not peak > 1e-10:
        return np.zeros((0, 2))
    local_max = ndimage.maximum_filter(resp, size=2 * nms_radius + 1, mode="nearest") == resp
    keep = local_max & (resp > rel_threshold * peak)
    if border:
        keep[:border] = keep[-border:] = False
        keep[:, :border] = keep[:, -border:] = False
    ys, xs = np.nonzero(keep)
    order = np.lexsort((xs, ys, -resp[ys, xs]))[:max_count]
    return np.stack([xs[order], ys[order]], axis=1).astype(float)


def sample_query_points(image: np.ndarray, n: int = 500, corner_fraction: float = 0.9, seed: int = 0,
                        nms_radius: int = 4) -> np.ndarray:
    """ceil(corner_fraction * n) Harris corners, the rest uniform random (topped up if short)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    h, w = np.asarray(image).shape[:2]
    n_corners = int(math.ceil(corner_fraction * n - 1e-9))
    corners = detect_corners(image, n_corners, nms_radius)
    rng = np.random.default_rng(seed)
    rest = n - len(corners)
    random_pts = np.stack([rng.uniform(0, w - 1, rest), rng.uniform(0, h - 1, rest)], axis=1)
    return np.concatenate([corners, random_pts])


# --- occlusion pairs ---------------------------------------------------------------------
def make_occlusion_pairs(cfg: SynthConfig) -> list[TrainingPair]:
    """Multi-plane pairs whose oracle labels occluded and truncated image-1 pixels."""
    occ_cfg = SynthConfig(**{**asdict(cfg), "geometry": "facade"})
    return [pair for pair, _ in generate_pairs(occ_cfg)]
