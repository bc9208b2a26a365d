"""Compact fully-convolutional descriptor network with coarse and fine outputs.

Map cell ``j`` of a map with stride ``s`` sits at image pixel ``s * j``; this
holds for strided 3x3 convolutions with padding 1 and for the bilinear
upsampling used on the fine path.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class NetConfig:
    in_channels: int = 1
    coarse_stride: int = 8
    fine_stride: int = 2
    coarse_dim: int = 64
    fine_dim: int = 64
    widths: tuple = (16, 32, 64, 64)
    fine_hidden: int = 32
    temperature: float = 1.0
    window_fraction: float = 1.0 / 8.0
    normalize_for_correlation: bool = False
    context_layers: int = 1     # extra 3x3 convs at the coarse stride (receptive field)

    def validate(self) -> None:
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")
        if not (_is_pow2(self.coarse_stride) and _is_pow2(self.fine_stride)):
            raise ConfigError("strides must be powers of two")
        if self.coarse_stride % self.fine_stride or self.coarse_stride <= self.fine_stride:
            raise ConfigError("coarse_stride must be a larger multiple of fine_stride")
        if self.coarse_dim < 8 or self.fine_dim < 8:
            raise ConfigError("descriptor dims must be >= 8")
        n_down = int(np.log2(self.coarse_stride))
        if len(self.widths) != n_down + 1:
            raise ConfigError(f"need {n_down + 1} block widths for coarse stride {self.coarse_stride}")
        if not 0 < self.window_fraction <= 1:
            raise ConfigError("window_fraction must be in (0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.context_layers < 1:
            raise ConfigError("context_layers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass
class FeatureMapPair:
    coarse: Tensor      # [coarse_dim, H / coarse_stride, W / coarse_stride]
    fine: Tensor        # [fine_dim, H / fine_stride, W / fine_stride]
    coarse_stride: int = 8
    fine_stride: int = 2
    image_size: tuple = field(default=(0, 0))


class DescriptorNet:
    def __init__(self, config: NetConfig | None = None, seed: int = 0):
        self.config = config or NetConfig()
        self.config.validate()
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cfg = self.config

        def conv(name, c_in, c_out, k):
            std = np.sqrt(2.0 / (c_in * k * k))
            self.params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)

        c_in = cfg.in_channels
        for i, width in enumerate(cfg.widths):
            conv(f"block{i}", c_in, width, 3)
            c_in = width
        conv("context", c_in, c_in, 3)
        for i in range(1, cfg.context_layers):
            conv(f"context{i}", c_in, c_in, 3)
        conv("coarse_head", c_in, cfg.coarse_dim, 1)
        skip_width = cfg.widths[int(np.log2(cfg.fine_stride))]
        lateral = max(skip_width, 8)
        conv("lateral", c_in, lateral, 1)
        conv("fine_mix", lateral + skip_width, cfg.fine_hidden, 3)
        conv("fine_head", cfg.fine_hidden, cfg.fine_dim, 1)

    # --- parameters -----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise ConfigError(f"shape mismatch for {k}: {value.shape} vs {p.shape}")
            p.data = value.copy()
            p.zero_grad()

    def fingerprint(self) -> str:
        payload = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    # --- forward --------------------------------------------------------------
    def _conv(self, name, x, stride=1, padding=None):
        w = self.params[f"{name}.weight"]
        pad = w.shape[-1] // 2 if padding is None else padding
        return ad.conv2d(x, w, self.params[f"{name}.bias"], stride=stride, padding=pad)

    def forward(self, image) -> FeatureMapPair:
        cfg = self.config
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[0] != cfg.in_channels:
            raise ad.ShapeError(f"expected [{cfg.in_channels}, H, W] image, got {x.shape}")
        h, w = x.shape[1:]
        if h % cfg.coarse_stride or w % cfg.coarse_stride:
            raise ad.ShapeError(f"image size {h}x{w} is not a multiple of coarse stride {cfg.coarse_stride}")
        skip_level = int(np.log2(cfg.fine_stride))
        skip = None
        for i in range(len(cfg.widths)):
            x = ad.relu(self._conv(f"block{i}", x, stride=1 if i == 0 else 2))
            if i == skip_level:
                skip = x
        ctx = ad.relu(self._conv("context", x))
        for i in range(1, cfg.context_layers):
            ctx = ad.relu(self._conv(f"context{i}", ctx))
        coarse = self._conv("coarse_head", ctx)
        lateral = ad.upsample_bilinear(self._conv("lateral", ctx), cfg.coarse_stride // cfg.fine_stride)
        merged = ad.concat([lateral, skip], axis=0)
        fine = self._conv("fine_head", ad.relu(self._conv("fine_mix", merged)))
        return FeatureMapPair(coarse, fine, cfg.coarse_stride, cfg.fine_stride, (h, w))

    __call__ = forward


def build(config: NetConfig | None = None, seed: int = 0) -> DescriptorNet:
    return DescriptorNet(config, seed)


def extract_descriptors(maps: FeatureMapPair, keypoints, use_coarse: bool = True) -> np.ndarray:
    """Concatenated, per-level L2-normalised descriptors at ``(N, 2)`` pixel keypoints.

    Each level is sampled bilinearly at the keypoint rescaled into its grid;
    the result has norm sqrt(2) (or 1 when ``use_coarse`` is False).
    """
    kp = np.asarray(keypoints, dtype=float)
    single = kp.ndim == 1
    kp = kp.reshape(-1, 2)
    h, w = maps.image_size
    if np.any(kp < 0) or np.any(kp[:, 0] > w - 1) or np.any(kp[:, 1] > h - 1):
        raise ValueError(f"keypoints outside the {w}x{h} image")
    fine = ad.l2_normalize(ad.sample_bilinear(maps.fine.detach(), kp / maps.fine_stride), axis=-1).data
    if use_coarse:
        coarse = ad.l2_normalize(ad.sample_bilinear(maps.coarse.detach(), kp / maps.coarse_stride), axis=-1).data
        out = np.concatenate([coarse, fine], axis=1)
    else:
        out = fine
    return out[0] if single else out


def extract_descriptor(maps: FeatureMapPair, kp) -> np.ndarray:
    return extract_descriptors(maps, np.asarray(kp, dtype=float).reshape(2))


def dump_maps(path, maps: FeatureMapPair) -> None:
    """Write raw descriptor maps in the checkpoint container (debugging aid)."""
    ckpt = checkpoint.Checkpoint(
        params={"coarse": maps.coarse.data, "fine": maps.fine.data},
        metadata={"coarse_stride": maps.coarse_stride, "fine_stride": maps.fine_stride,
                  "image_size": list(maps.image_size)},
        fingerprint="descriptor-maps")
    checkpoint.save(path, ckpt)
