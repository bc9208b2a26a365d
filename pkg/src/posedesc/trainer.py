"""Training loop: one image pair per optimizer step, checkpoints, and a CSV run log.

In ``pose_only`` mode the loop only reads images, intrinsics and relative
poses; the correspondence oracle of the training set is never opened, so the
run works with that directory deleted.  Validation reads a separate held-out
dataset, which does need its oracle.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint, geometry, losses, matcher, synth
from .network import DescriptorNet, NetConfig
from .optim import Adam, AdamState

log = logging.getLogger(__name__)

MODES = ("pose_only", "supervised_l2", "triplet")
LOG_COLUMNS = ["epoch", "loss_ep", "loss_cy", "mean_sigma", "val_pck5"]
# Keys that may change between a run and its resumption.
RESUMABLE_KEYS = {"epochs", "out", "dataset", "val_dataset", "checkpoint_every", "val_pairs"}


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    pass


@dataclass
class TrainConfig:
    dataset: str = ""
    val_dataset: str = ""
    out: str = "runs/default"
    epochs: int = 10
    pairs_per_epoch: int = 0          # 0 = every pair once per epoch
    queries: int = 128
    corner_fraction: float = 0.9
    lam: float = 0.1
    lr: float = 1e-4
    mode: str = "pose_only"
    reweight: bool = True
    cycle: bool = True
    c2f: bool = True
    seed: int = 0
    checkpoint_every: int = 1
    sigma_min: float = losses.SIGMA_MIN
    triplet_margin: float = 0.5
    triplet_radius: float = 4.0
    val_pairs: int = 20
    val_grid_step: int = 8
    net: dict = field(default_factory=lambda: NetConfig().to_dict())

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.queries < 1:
            raise ValueError("queries must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0 <= self.corner_fraction <= 1:
            raise ValueError("corner_fraction must be in [0, 1]")
        self.net_config().validate()

    def net_config(self) -> NetConfig:
        return NetConfig.from_dict(self.net)

    def loss_options(self) -> losses.LossOptions:
        net = self.net_config()
        return losses.LossOptions(mode=self.mode, lam=self.lam, cycle=self.cycle, reweight=self.reweight,
                                  c2f=self.c2f, sigma_min=self.sigma_min, window_fraction=net.window_fraction,
                                  temperature=net.temperature, normalize=net.normalize_for_correlation,
                                  triplet_margin=self.triplet_margin, triplet_radius=self.triplet_radius)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if "net" in d:
            cfg.net = {**NetConfig().to_dict(), **d["net"]}
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def fingerprint(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in RESUMABLE_KEYS}
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]


# Desk-scale preset: 500 synthetic 128x128 pairs, 10 epochs.  Unit-normalised
# descriptors with a sharp softmax and a larger step than the full-scale default,
# which a from-scratch network of this size needs to learn within 5000 steps.
# Two extra context convolutions widen the coarse receptive field to ~65 px.
DESK_PAIRS = 500
DESK_OVERRIDES = {"lr": 3e-4, "net": {"normalize_for_correlation": True, "temperature": 0.1,
                                      "context_layers": 3}}


def desk_config(**kw) -> TrainConfig:
    """The desk preset; keyword arguments override its fields (``net`` keys are merged)."""
    d = {**TrainConfig().to_dict(), **DESK_OVERRIDES, **kw}
    d["net"] = {**NetConfig().to_dict(), **DESK_OVERRIDES["net"], **kw.get("net", {})}
    return TrainConfig.from_dict(d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class EpochRow:
    epoch: int
    loss_ep: float
    loss_cy: float
    mean_sigma: float
    val_pck5: float

    def as_list(self) -> list:
        return [self.epoch, f"{self.loss_ep:.6f}", f"{self.loss_cy:.6f}", f"{self.mean_sigma:.6f}",
                f"{self.val_pck5:.6f}"]


@dataclass
class TrainResult:
    net: DescriptorNet
    history: list[EpochRow]
    final_checkpoint: Path | None


# --- checkpoints -------------------------------------------------------------------
def _optimizer_blocks(opt: Adam, names: list[str]) -> dict[str, np.ndarray]:
    out = {"step": np.array([float(opt.state.step)])}
    for name, m, v in zip(names, opt.state.m, opt.state.v):
        out[f"m.{name}"] = m
        out[f"v.{name}"] = v
    return out


def make_checkpoint(net: DescriptorNet, opt: Adam | None, cfg: TrainConfig, epoch: int) -> checkpoint.Checkpoint:
    names = list(net.params)
    return checkpoint.Checkpoint(
        params=net.state_dict(),
        optimizer=_optimizer_blocks(opt, names) if opt is not None and opt.state.m else {},
        fingerprint=cfg.fingerprint(),
        metadata={"epoch": epoch, "net": cfg.net, "seed": cfg.seed, "config": cfg.to_dict()})


def load_network(path) -> DescriptorNet:
    """Network described and initialised by a checkpoint file."""
    ckpt = checkpoint.load(path)
    net_cfg = NetConfig.from_dict(ckpt.metadata.get("net", NetConfig().to_dict()))
    net = DescriptorNet(net_cfg, seed=int(ckpt.metadata.get("seed", 0)))
    net.load_state_dict(ckpt.params)
    return net


def _restore_optimizer(opt: Adam, blocks: dict, names: list[str]) -> None:
    if not blocks:
        opt.state = AdamState()
        return
    opt.state = AdamState(step=int(blocks["step"][0]),
                          m=[np.array(blocks[f"m.{n}"]) for n in names],
                          v=[np.array(blocks[f"v.{n}"]) for n in names])


# --- data --------------------------------------------------------------------------
def epoch_order(n_pairs: int, seed: int, epoch: int, pairs_per_epoch: int = 0) -> np.ndarray:
    """Deterministic pair order of one epoch (depends only on seed and epoch number)."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n_pairs)
    if pairs_per_epoch and pairs_per_epoch != n_pairs:
        reps = math.ceil(pairs_per_epoch / n_pairs)
        order = np.concatenate([order] + [rng.permutation(n_pairs) for _ in range(reps - 1)])[:pairs_per_epoch]
    return order


def query_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.default_rng([seed, epoch, index, 1]).integers(1 << 31))


def build_batch(pair: synth.TrainingPair, cfg: TrainConfig, epoch: int, index: int) -> losses.QueryBatch:
    F = geometry.fundamental_from_pose(pair.K1, pair.K2, pair.pose)
    x1 = synth.sample_query_points(pair.image1, cfg.queries, cfg.corner_fraction, query_seed(cfg.seed, epoch, index))
    if cfg.mode == "pose_only":
        return losses.QueryBatch.build(x1, F)
    if pair.oracle is None:
        raise TrainingError(f"mode {cfg.mode} needs the correspondence oracle (pair {pair.name})")
    gt, visible = pair.oracle.lookup(x1)
    return losses.QueryBatch.build(x1, F, gt, visible)


# --- validation ----------------------------------------------------------------------
def grid_points(size: tuple, step: int) -> np.ndarray:
    h, w = size
    off = step // 2
    ys, xs = np.mgrid[off:h:step, off:w:step]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)


def predict_matches(net: DescriptorNet, pair: synth.TrainingPair, pts, c2f: bool = True) -> np.ndarray:
    m1, m2 = net(pair.image1), net(pair.image2)
    return matcher.dense_match(m1, m2, pts, c2f, net.config.window_fraction,
                               normalize=net.config.normalize_for_correlation)


def validation_pck(net: DescriptorNet, pairs: list, grid_step: int = 8, threshold: float = 5.0,
                   c2f: bool = True) -> float:
    scores = []
    for pair in pairs:
        pts = grid_points(pair.size, grid_step)
        gt, visible = pair.oracle.lookup(pts)
        if not visible.any():
            continue
        pred = predict_matches(net, pair, pts[visible], c2f)
        scores.append(float((np.linalg.norm(pred - gt[visible], axis=1) <= threshold).mean()))
    return float(np.mean(scores)) if scores else float("nan")


def _load_validation(cfg: TrainConfig) -> list:
    if not cfg.val_dataset:
        return []
    ds = synth.PairDataset(cfg.val_dataset)
    if not ds.has_oracle:
        raise TrainingError(f"validation set {cfg.val_dataset} has no oracle directory")
    return [ds.load(i, with_oracle=True) for i in range(min(cfg.val_pairs, len(ds)))]


# --- loop ----------------------------------------------------------------------------
def _write_log_header(path: Path) -> None:
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)


def _append_log(path: Path, row: EpochRow) -> None:
    with path.open("a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(row.as_list())


def read_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def train_step(net: DescriptorNet, opt: Adam, pair: synth.TrainingPair, batch: losses.QueryBatch,
               opts: losses.LossOptions) -> losses.PairLoss:
    opt.zero_grad()
    result = losses.pair_objective(net(pair.image1), net(pair.image2), batch, opts)
    value = result.total.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} on pair {pair.name}")
    result.total.backward()
    for name, p in net.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteLossError(f"non-finite gradient in {name} on pair {pair.name}")
    opt.step()
    return result


class PairList:
    """In-memory pairs behind the same ``load`` interface as ``synth.PairDataset``."""

    def __init__(self, pairs):
        self.pairs = list(pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def load(self, i: int, with_oracle: bool = False):
        pair = self.pairs[i]
        if with_oracle and pair.oracle is None:
            raise TrainingError(f"pair {pair.name} has no correspondence oracle")
        return pair


def _run(cfg: TrainConfig, net: DescriptorNet, opt: Adam, start_epoch: int, out: Path, dataset=None,
         val_pairs=None) -> TrainResult:
    dataset = synth.PairDataset(cfg.dataset) if dataset is None else dataset
    if len(dataset) == 0:
        raise TrainingError(f"dataset {cfg.dataset} is empty")
    needs_oracle = cfg.mode != "pose_only"
    val_pairs = _load_validation(cfg) if val_pairs is None else list(val_pairs)
    opts = cfg.loss_options()
    log_path = out / "log.csv"
    history = []
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        sums = np.zeros(3)
        count = 0
        for index in epoch_order(len(dataset), cfg.seed, epoch, cfg.pairs_per_epoch):
            pair = dataset.load(int(index), with_oracle=needs_oracle)
            batch = build_batch(pair, cfg, epoch, int(index))
            try:
                res = train_step(net, opt, pair, batch, opts)
            except NonFiniteLossError as exc:
                dump = out / "nonfinite_pair.json"
                dump.write_text(canonical_json({"epoch": epoch, "pair_index": int(index), "pair": pair.name,
                                                "queries": batch.x1.tolist(), "error": str(exc)}))
                raise TrainingError(f"{exc} (epoch {epoch}, pair index {index}; details in {dump})") from exc
            if batch.skipped.size:
                log.info("pair %s: skipped %d query points", pair.name, batch.skipped.size)
            sums += (res.loss_ep, res.loss_cy, res.mean_sigma)
            count += 1
        val = validation_pck(net, val_pairs, cfg.val_grid_step, c2f=cfg.c2f) if val_pairs else float("nan")
        row = EpochRow(epoch, *(sums / max(count, 1)), val)
        _append_log(log_path, row)
        history.append(row)
        log.info("epoch %d: loss_ep %.3f loss_cy %.3f sigma %.3f val_pck5 %.3f", epoch, row.loss_ep, row.loss_cy,
                 row.mean_sigma, row.val_pck5)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            checkpoint.save(out / f"epoch_{epoch:03d}.ckpt", make_checkpoint(net, opt, cfg, epoch))
    final = out / "final.ckpt"
    checkpoint.save(final, make_checkpoint(net, opt, cfg, max(cfg.epochs, start_epoch)))
    return TrainResult(net, history, final)


def train(cfg: TrainConfig, dataset=None, val_pairs=None) -> TrainResult:
    """Train from a fresh initialisation; writes config.json, log.csv and checkpoints under ``cfg.out``.

    ``dataset`` (anything with ``len`` and ``load(i, with_oracle)``) and
    ``val_pairs`` override the paths in the config.
    """
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(canonical_json(cfg.to_dict()) + "\n")
    _write_log_header(out / "log.csv")
    net = DescriptorNet(cfg.net_config(), seed=cfg.seed)
    opt = Adam(net.parameters(), lr=cfg.lr)
    return _run(cfg, net, opt, 0, out, dataset, val_pairs)


def resume(checkpoint_path, cfg: TrainConfig, dataset=None, val_pairs=None) -> TrainResult:
    """Continue a run from a checkpoint up to ``cfg.epochs`` total epochs."""
    cfg.validate()
    ckpt = checkpoint.load(checkpoint_path)
    if ckpt.fingerprint != cfg.fingerprint():
        raise TrainingError("config fingerprint does not match the checkpoint "
                            f"({cfg.fingerprint()} vs {ckpt.fingerprint})")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.csv"
    start = int(ckpt.metadata["epoch"])
    if log_path.exists():
        rows = [r for r in log_path.read_text().splitlines()[1:] if r and int(r.split(",")[0]) <= start]
        log_path.write_text("\n".join([",".join(LOG_COLUMNS)] + rows) + "\n")
    else:
        _write_log_header(log_path)
    (out / "config.json").write_text(canonical_json(cfg.to_dict()) + "\n")
    net = DescriptorNet(cfg.net_config(), seed=cfg.seed)
    net.load_state_dict(ckpt.params)
    opt = Adam(net.parameters(), lr=cfg.lr)
    _restore_optimizer(opt, ckpt.optimizer, list(net.params))
    return _run(cfg, net, opt, start, out, dataset, val_pairs)
