"""Central finite-difference checks for every differentiable op and the full loss.

The relative error of one check is ``max|analytic - numeric|`` divided by the
largest gradient magnitude seen in either estimate, so entries that are
legitimately near zero do not dominate.
"""
from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses, matcher
from .autodiff import Tensor
from .network import DescriptorNet, NetConfig

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_function(fn: Callable, inputs: list[np.ndarray], rng: np.random.Generator, h: float = STEP,
                   max_coords: int | None = None) -> float:
    """Compare analytic and numeric gradients of ``sum(fn(*inputs) * R)`` for a fixed random ``R``.

    ``max_coords`` limits how many coordinates per input are perturbed.
    """
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    proj = rng.normal(size=out.shape)
    (out * proj).sum().backward()

    def value(arrays):
        return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    worst = 0.0
    for k, x in enumerate(inputs):
        flat_idx = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            flat_idx = rng.choice(x.size, size=max_coords, replace=False)
        analytic = tensors[k].grad.reshape(-1)[flat_idx]
        numeric = np.zeros(len(flat_idx))
        for j, fi in enumerate(flat_idx):
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[k].reshape(-1)[fi] += h
            minus[k].reshape(-1)[fi] -= h
            numeric[j] = (value(plus) - value(minus)) / (2 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _away_from(x: np.ndarray, points=(0.0,), gap: float = 0.05) -> np.ndarray:
    """Push entries away from kinks so a finite-difference step never crosses one."""
    for p in points:
        near = np.abs(x - p) < gap
        x = np.where(near, p + np.sign(x - p + 1e-300) * gap, x)
    return x


def _fractional(x: np.ndarray, gap: float = 0.05) -> np.ndarray:
    """Keep coordinates off integer cell boundaries (bilinear sampling kinks)."""
    frac = x - np.floor(x)
    return np.floor(x) + np.clip(frac, gap, 1 - gap)


def op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list]]]:
    """Name -> factory returning ``(fn, inputs)`` for one random instance on 5x5 data."""
    n = lambda r, *s: r.normal(size=s)
    pos = lambda r, *s: r.uniform(0.5, 2.0, size=s)
    cases = {
        "add": lambda r: (ad.add, [n(r, 5, 5), n(r, 5, 5)]),
        "add_broadcast": lambda r: (ad.add, [n(r, 5, 5), n(r, 1, 5)]),
        "sub": lambda r: (ad.sub, [n(r, 5, 5), n(r, 5, 5)]),
        "mul": lambda r: (ad.mul, [n(r, 5, 5), n(r, 5, 5)]),
        "scalar_mul": lambda r: ((lambda a: ad.scalar_mul(a, 2.5)), [n(r, 5, 5)]),
        "div": lambda r: (ad.div, [n(r, 5, 5), pos(r, 5, 5)]),
        "power": lambda r: ((lambda a: ad.power(a, 1.7)), [pos(r, 5, 5)]),
        "relu": lambda r: (ad.relu, [_away_from(n(r, 5, 5))]),
        "exp": lambda r: (ad.exp, [n(r, 5, 5)]),
        "log": lambda r: (ad.log, [pos(r, 5, 5)]),
        "sqrt": lambda r: (ad.sqrt, [pos(r, 5, 5)]),
        "absolute": lambda r: (ad.absolute, [_away_from(n(r, 5, 5))]),
        "sum_over": lambda r: ((lambda a: ad.sum_over(a, axis=1)), [n(r, 5, 5)]),
        "mean": lambda r: ((lambda a: ad.mean(a, axis=0)), [n(r, 5, 5)]),
        "reshape": lambda r: ((lambda a: ad.reshape(a, (25,)) * np.arange(25.0)), [n(r, 5, 5)]),
        "transpose": lambda r: ((lambda a: ad.transpose(a) * np.arange(25.0).reshape(5, 5)), [n(r, 5, 5)]),
        "index_select": lambda r: ((lambda a: a[np.array([0, 2, 2, 4])]), [n(r, 5, 5)]),
        "concat": lambda r: ((lambda a, b: ad.concat([a, b], axis=1)), [n(r, 5, 5), n(r, 5, 3)]),
        "stack": lambda r: ((lambda a, b: ad.stack([a, b], axis=0)), [n(r, 5, 5), n(r, 5, 5)]),
        "matmul": lambda r: (ad.matmul, [n(r, 5, 5), n(r, 5, 5)]),
        "matmul_batched": lambda r: (ad.matmul, [n(r, 3, 5, 4), n(r, 3, 4, 1)]),
        "conv2d": lambda r: ((lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1)),
                             [n(r, 2, 5, 5), n(r, 3, 2, 3, 3), n(r, 3)]),
        "conv2d_stride2": lambda r: ((lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1)),
                                     [n(r, 2, 5, 5), n(r, 3, 2, 3, 3), n(r, 3)]),
        "conv2d_1x1": lambda r: ((lambda x, w, b: ad.conv2d(x, w, b)), [n(r, 3, 5, 5), n(r, 2, 3, 1, 1), n(r, 2)]),
        "upsample_bilinear": lambda r: ((lambda x: ad.upsample_bilinear(x, 2)), [n(r, 2, 5, 5)]),
        "sample_bilinear": lambda r: (ad.sample_bilinear,
                                      [n(r, 3, 5, 5), _fractional(r.uniform(0.2, 3.8, size=(4, 2)))]),
        "l2_normalize": lambda r: ((lambda a: ad.l2_normalize(a, axis=1)), [n(r, 5, 5)]),
        "softmax": lambda r: ((lambda a: ad.softmax(a, axis=1)), [n(r, 5, 5)]),
        "vector_norm": lambda r: ((lambda a: ad.vector_norm(a, axis=1)), [n(r, 5, 5)]),
        "maximum": lambda r: _maximum_case(r),
        "correlate_expectation": lambda r: ((lambda q, m: matcher.expectation(
            matcher.correlate_softmax(q, m, 1.0, None, 2.0))), [n(r, 3, 4), n(r, 4, 5, 5)]),
        "correlate_window_variance": lambda r: ((lambda q, m: matcher.total_variance(
            matcher.correlate_softmax(q, m, 1.0, [[1, 0, 3, 3], [2, 2, 3, 3]], 2.0))), [n(r, 2, 4), n(r, 4, 5, 5)]),
    }
    return cases


def _maximum_case(r):
    a = r.normal(size=(5, 5))
    b = a + _away_from(r.normal(size=(5, 5)))
    return ad.maximum, [a, b]


@contextmanager
def _relu_margin_probe():
    """Record the smallest ``|input|`` seen by relu while active."""
    seen = [np.inf]
    original = ad.relu

    def probe(a):
        data = a.data if isinstance(a, Tensor) else np.asarray(a)
        seen[0] = min(seen[0], float(np.abs(data).min(initial=np.inf)))
        return original(a)

    ad.relu = probe
    try:
        yield seen
    finally:
        ad.relu = original


def _toy_pipeline(rng: np.random.Generator, relu_margin: float = 1e-3, max_draws: int = 50):
    """Tiny network + pose-only loss on a 16x16 pair; returns ``(fn(params...), params)``.

    Draws whose relu pre-activations come within ``relu_margin`` of zero are
    redrawn: a step of ``h`` could cross the kink and the two-sided difference
    would then measure the kink rather than the gradient.
    """
    cfg = NetConfig(coarse_stride=4, fine_stride=2, coarse_dim=8, fine_dim=8, widths=(4, 6, 8), fine_hidden=6,
                    window_fraction=0.5)
    for _ in range(max_draws):
        net = DescriptorNet(cfg, seed=int(rng.integers(1 << 30)))
        img1 = rng.uniform(size=(16, 16))
        img2 = rng.uniform(size=(16, 16))
        with _relu_margin_probe() as margin:
            net(img1)
            net(img2)
        if margin[0] > relu_margin:
            break
    x1 = _fractional(rng.uniform(2.0, 13.0, size=(2, 2)))
    # translation mostly along x: epipolar lines are well defined
    t = np.array([1.0, 0.2 * rng.normal(), 0.1 * rng.normal()])
    K = np.array([[16.0, 0, 7.5], [0, 16.0, 7.5], [0, 0, 1]])
    F = np.linalg.inv(K).T @ np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]]) @ np.linalg.inv(K)
    batch = losses.QueryBatch.build(x1, F)
    names = list(net.params)
    # the uncertainty weights are constants of the backward pass, so freeze them for the numeric side too
    weights = losses.pair_objective(net(img1), net(img2), batch).weights

    def fn(*params):
        for name, p in zip(names, params):
            net.params[name] = p
        return losses.pair_objective(net(img1), net(img2), batch, weights=weights).total

    return fn, [net.params[k].data.copy() for k in names]


def _toy_maps_pipeline(rng: np.random.Generator):
    """Pose-only loss as a function of the four descriptor maps directly."""
    from .network import FeatureMapPair

    x1 = _fractional(rng.uniform(2.0, 13.0, size=(2, 2)))
    F = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]) + 0.01 * rng.normal(size=(3, 3))
    batch = losses.QueryBatch.build(x1, F)
    opts = losses.LossOptions(window_fraction=0.5)
    maps = [rng.normal(size=(6, 4, 4)), rng.normal(size=(6, 8, 8)),
            rng.normal(size=(6, 4, 4)), rng.normal(size=(6, 8, 8))]

    def objective(c1, f1, c2, f2, weights=None):
        m1 = FeatureMapPair(c1, f1, 4, 2, (16, 16))
        m2 = FeatureMapPair(c2, f2, 4, 2, (16, 16))
        return losses.pair_objective(m1, m2, batch, opts, weights)

    weights = objective(*[Tensor(m) for m in maps]).weights
    return (lambda *m: objective(*m, weights=weights).total), maps


def run_all(instances: int = 20, seed: int = 0, include_pipeline: bool = True,
            log: Callable[[str], None] | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    items = list(op_cases().items())
    if include_pipeline:
        items.append(("loss_wrt_maps", _toy_maps_pipeline))
        items.append(("loss_wrt_network", _toy_pipeline))
    for name, factory in items:
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(instances):
            fn, inputs = factory(rng)
            coords = 12 if name == "loss_wrt_network" else 40 if name == "loss_wrt_maps" else None
            worst = max(worst, check_function(fn, inputs, rng, max_coords=coords))
        res = CheckResult(name, instances, worst, time.perf_counter() - t0)
        results.append(res)
        if log is not None:
            log(f"{'PASS' if res.passed else 'FAIL'} {name}: max rel err {worst:.2e} ({instances} instances)")
    return results
