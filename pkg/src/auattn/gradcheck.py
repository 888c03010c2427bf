"""Finite-difference verification of every differentiable primitive.

Each primitive is reduced to a scalar through a fixed random projection and
checked at random double-precision points that stay clear of relu kinks and
maxpool ties.  The composed network plus weighted loss is checked on a
2-sample batch of a scaled-down configuration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckResult, grad_check
from .model import ModelConfig, ModelParams, forward, init_params, parameter_shapes
from .objective import weighted_bce

TOLERANCE = 1e-4
STEP = 1e-3
# keep every relu input / maxpool gap this far from a kink
MARGIN = 10 * STEP
SCALE = 10.0


def _projected(op, out_shape, rng):
    proj = rng.normal(size=out_shape)

    def f(*tensors):
        return ad.sum(ad.mul(op(*tensors), proj))

    return f


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < MARGIN, np.sign(x + 1e-300) * MARGIN * 2 + x, x)


def _distinct_windows(rng, shape):
    # values spaced by at least MARGIN, so no 2x2 window holds a near tie
    n = int(np.prod(shape))
    vals = rng.permutation(n) * (4 * MARGIN) + rng.uniform(0, MARGIN, size=n)
    return (vals - vals.mean()).reshape(shape) / max(1.0, n * MARGIN)


def _cases(rng):
    """name -> (scalar function, point) for one random draw."""
    c = {}
    c["conv2d"] = (_projected(ad.conv2d, (2, 4, 4, 3), rng),
                   [rng.normal(size=(2, 4, 4, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)])
    c["maxpool2d"] = (_projected(ad.maxpool2d, (1, 2, 2, 2), rng),
                      [_distinct_windows(rng, (1, 5, 4, 2))])
    c["batchnorm_train"] = (_projected(lambda x, g, b: ad.batchnorm(x, g, b, training=True),
                                       (3, 2, 3), rng),
                            [rng.normal(size=(3, 2, 3)), rng.normal(size=3), rng.normal(size=3)])
    stats = ad.RunningStats(3)
    stats.mean[...] = rng.normal(size=3)
    stats.var[...] = rng.uniform(0.5, 2.0, size=3)
    c["batchnorm_infer"] = (_projected(lambda x, g, b: ad.batchnorm(x, g, b, stats, training=False),
                                       (4, 3), rng),
                            [rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=3)])
    c["dense"] = (_projected(ad.dense, (3, 2), rng),
                  [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)])
    c["relu"] = (_projected(ad.relu, (3, 4), rng), [_away_from_zero(rng, (3, 4))])
    c["sigmoid"] = (_projected(ad.sigmoid, (3, 4), rng), [2 * rng.normal(size=(3, 4))])
    c["softmax"] = (_projected(lambda x: ad.softmax(x, axis=1), (2, 5), rng), [rng.normal(size=(2, 5))])
    c["log"] = (_projected(ad.log, (3, 4), rng), [rng.uniform(0.5, 2.0, size=(3, 4))])
    c["sum"] = (_projected(lambda x: ad.sum(x, axis=1), (3,), rng), [rng.normal(size=(3, 4))])
    c["mean"] = (_projected(lambda x: ad.mean(x, axis=0), (4,), rng), [rng.normal(size=(3, 4))])
    c["weighted_sum"] = (_projected(lambda v, w: ad.weighted_sum(v, w, axis=1), (2, 3), rng),
                         [rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4))])
    c["elementwise"] = (_projected(lambda a, b: ad.sub(ad.mul(a, b), ad.add(a, b)), (3, 4), rng),
                        [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))])
    return c


SMALL_MODEL = ModelConfig(input_size=8, block_filters=(2, 3, 3, 3, 4, 4),
                          pool_schedule=(True, True, False, False, False, False),
                          attention_hidden=3, num_aus=12)


def model_loss_case(rng, config=SMALL_MODEL):
    """Scalar network-plus-loss function of every learnable tensor, and a point."""
    base = init_params(config, int(rng.integers(2**31)))
    names = list(parameter_shapes(config))
    # The network is invariant to positive rescaling of conv kernels, the
    # first attention FC weight (each feeds a BN) and the BN gamma/beta of
    # every block but the last (relu and maxpool are positively homogeneous
    # and the next conv feeds another BN).  Drawing those at a large scale keeps the
    # O(h^2) truncation error of the probe small relative to the gradient.
    last = f"block{len(config.block_filters)}."
    point = []
    for n in names:
        shape = base[n].shape
        if n.endswith(".kernel") or n == "attention.fc1.weight":
            arr = rng.normal(0.0, SCALE, size=shape)
        elif n.startswith("block") and not n.startswith(last) and n.endswith(".gamma"):
            arr = SCALE * rng.uniform(0.5, 1.5, size=shape)
        elif n.startswith("block") and not n.startswith(last) and n.endswith(".beta"):
            arr = SCALE * 0.3 * rng.normal(size=shape)
        else:
            arr = base[n].data + 0.1 * rng.normal(size=shape)
        point.append(arr)
    images = rng.uniform(0, 1, size=(2, config.input_size, config.input_size, 3))
    labels = rng.integers(0, 2, size=(2, config.num_aus))
    labels[0, 0] = -1
    weights = rng.uniform(0.5, 3.0, size=config.num_aus)

    def f(*tensors):
        params = ModelParams(dict(zip(names, tensors)),
                             {k: s.copy() for k, s in base.stats.items()})
        return weighted_bce(labels, forward(images, params, config, "train"), weights)

    return f, point


@dataclass
class SuiteResult:
    results: dict
    seconds: float

    @property
    def passed(self):
        return all(r.passed(TOLERANCE) for r in self.results.values())


def run_suite(points=100, model_points=20, seed=0, h=STEP) -> SuiteResult:
    """Worst relative error per primitive over ``points`` random draws."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst: dict = {}

    def merge(name, res: GradCheckResult):
        prev = worst.get(name)
        if prev is None or not res.ok or (prev.ok and res.max_rel_error > prev.max_rel_error):
            if prev is not None:
                res.skipped += prev.skipped
            worst[name] = res
        else:
            prev.skipped += res.skipped

    for _ in range(points):
        for name, (f, point) in _cases(rng).items():
            merge(name, grad_check(f, point, h))
    for _ in range(model_points):
        f, point = model_loss_case(rng)
        merge("model+weighted_bce", grad_check(f, point, h, skip_kinks=True))
    return SuiteResult(worst, time.perf_counter() - start)
