"""Adam training loop, evaluation and binary checkpoints."""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .dataio import batch_iter
from .exceptions import ContractError, CorruptCheckpointError, DatasetError, TrainingDivergedError
from .model import TRAIN, ModelConfig, ModelParams, forward, init_params, predict_proba
from .objective import ClassWeights, MetricReport, binarize, compute_class_weights, macro_f1, weighted_bce

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    post_warm_lr: float = 1e-4
    lr_switch_epoch: int = 5
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    deterministic: bool = False
    checkpoint_dir: Optional[str] = None
    eval_every: int = 1
    threshold: float = 0.5
    precision: str = "float32"
    prefetch: int = 2

    def validate(self):
        if self.initial_lr <= 0 or self.post_warm_lr <= 0:
            raise ContractError("learning rates must be positive")
        if self.lr_switch_epoch < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError("lr_switch_epoch, epochs must be >= 0 and batch_size >= 1")
        if self.precision not in PRECISIONS:
            raise ContractError(f"precision must be one of {sorted(PRECISIONS)}")
        return self

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_schedule(epoch, config: TrainConfig):
    """Step schedule on the 0-based epoch index."""
    return config.initial_lr if epoch < config.lr_switch_epoch else config.post_warm_lr


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, **hyper):
        return cls({k: np.zeros_like(p.data) for k, p in params},
                   {k: np.zeros_like(p.data) for k, p in params}, **hyper)


def adam_step(params: ModelParams, state: OptimizerState, lr, grads=None):
    """One bias-corrected Adam update in place; ``grads`` defaults to ``param.grad``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params:
        g = p.grad if grads is None else grads[name]
        if g is None or g.shape != p.shape or state.m[name].shape != p.shape:
            raise ContractError(f"gradient/moment shape mismatch for {name}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return params, state


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    macro_f1: float = float("nan")
    seconds: float = 0.0

    def row(self):
        return [self.epoch, repr(self.lr), repr(self.loss), repr(self.macro_f1)]


LOG_HEADER = ["epoch", "lr", "loss", "macro_f1"]


def format_log(log):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for entry in log:
        w.writerow(entry.row())
    return buf.getvalue()


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    opt_state: OptimizerState
    epoch: int  # number of completed epochs
    log: list = field(default_factory=list)
    class_weights: Optional[ClassWeights] = None
    rng_state: dict = field(default_factory=dict)


@contextlib.contextmanager
def _thread_limit(deterministic):
    env = os.environ.get("AUATTN_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    if limit is None:
        yield
    else:
        with ad.set_num_threads(limit):
            yield


def train_epoch(params, model_config, train_config, dataset, class_weights, state, epoch):
    lr = lr_schedule(epoch, train_config)
    total, count = 0.0, 0
    for b, (images, labels, _) in enumerate(batch_iter(
            dataset, train_config.batch_size, train_config.seed, epoch, prefetch=train_config.prefetch)):
        params.zero_grad()
        with ad.Tape() as tape:
            probs = forward(images.astype(params.dtype, copy=False), params, model_config, TRAIN)
            loss = weighted_bce(labels, probs, class_weights)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(epoch, b, lr)
        tape.backward(loss)
        adam_step(params, state, lr)
        total += value * len(labels)
        count += len(labels)
    return lr, total / max(count, 1)


def train(model_config: ModelConfig, train_config: TrainConfig, train_data, val_data=None,
          resume: Optional[Checkpoint] = None, callback: Optional[Callable] = None) -> Checkpoint:
    """Run epochs ``resume.epoch .. train_config.epochs - 1`` and return the final checkpoint.

    ``train_data``/``val_data`` are any objects with ``len()``, ``labels`` and
    ``load_batch(indices)`` (see :mod:`auattn.dataio`).  When
    ``checkpoint_dir`` is set a checkpoint and the CSV log are written after
    every epoch.  ``callback(checkpoint)`` may return True to stop early.
    """
    model_config.validate()
    train_config.validate()
    if len(train_data) == 0:
        raise DatasetError("training set is empty")
    names = getattr(train_data, "names", None)
    class_weights = compute_class_weights(train_data.labels, names)
    if resume is None:
        params = init_params(model_config, train_config.seed, dtype=train_config.dtype)
        state = OptimizerState.fresh(params)
        ckpt = Checkpoint(model_config, train_config, params, state, 0, [], class_weights)
    else:
        ckpt = resume
        ckpt.train_config = train_config
        ckpt.class_weights = class_weights
        params, state = ckpt.params, ckpt.opt_state
    out_dir = Path(train_config.checkpoint_dir) if train_config.checkpoint_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    with _thread_limit(train_config.deterministic):
        for epoch in range(ckpt.epoch, train_config.epochs):
            start = time.perf_counter()
            lr, loss = train_epoch(params, model_config, train_config, train_data,
                                   class_weights, state, epoch)
            f1 = float("nan")
            every = max(train_config.eval_every, 1)
            if val_data is not None and len(val_data) and (epoch + 1) % every == 0:
                f1 = evaluate(params, model_config, val_data, train_config.threshold).macro_f1
            entry = EpochLog(epoch, lr, loss, f1, time.perf_counter() - start)
            ckpt.log.append(entry)
            ckpt.epoch = epoch + 1
            ckpt.rng_state = {"scheme": "default_rng([seed, epoch])",
                              "seed": train_config.seed, "next_epoch": epoch + 1}
            logger.info("epoch %d lr %g loss %.6f macro_f1 %.4f (%.1fs)",
                        epoch, lr, loss, f1, entry.seconds)
            if out_dir is not None:
                save_checkpoint(out_dir / f"epoch_{epoch + 1:03d}.ckpt", ckpt)
                save_checkpoint(out_dir / "last.ckpt", ckpt)
                (out_dir / "log.csv").write_text(format_log(ckpt.log))
            if callback is not None and callback(ckpt):
                break
    return ckpt


def evaluate(params, model_config: ModelConfig, dataset, threshold=0.5, batch_size=64) -> MetricReport:
    """Inference-mode macro F1 over a dataset."""
    if isinstance(params, Checkpoint):
        params, model_config = params.params, params.model_config
    n = len(dataset)
    if n == 0:
        raise DatasetError("cannot evaluate on an empty dataset")
    report = None
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        images = dataset.load_batch(idx)
        probs = predict_proba(images.astype(params.dtype, copy=False), params, model_config, batch_size)
        names = getattr(dataset, "names", None)
        part = macro_f1(binarize(probs, threshold), np.asarray(dataset.labels)[idx], names)
        report = part if report is None else report + part
    return report


# ---------------------------------------------------------------- checkpoint

MAGIC = b"AUATTN"
VERSION = 1
_U32 = struct.Struct("<I")


def _tensor_items(ckpt: Checkpoint):
    items = list(ckpt.params.state_arrays().items())
    for name in ckpt.params.tensors:
        items.append((f"adam.m.{name}", ckpt.opt_state.m[name]))
        items.append((f"adam.v.{name}", ckpt.opt_state.v[name]))
    return items


def save_checkpoint(path, ckpt: Checkpoint):
    """Write ``AUATTN`` + version, length-prefixed JSON metadata, then named f32 tensors."""
    items = _tensor_items(ckpt)
    meta = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "log": [asdict(e) for e in ckpt.log],
        "class_weights": ckpt.class_weights.to_dict() if ckpt.class_weights else None,
        "rng_state": ckpt.rng_state,
        "optimizer": {"t": ckpt.opt_state.t, "beta1": ckpt.opt_state.beta1,
                      "beta2": ckpt.opt_state.beta2, "eps": ckpt.opt_state.eps},
        "param_names": list(ckpt.params.tensors),
        "stat_names": list(ckpt.params.stats),
        "dtype": str(ckpt.params.dtype),
        "num_tensors": len(items),
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(bytes([VERSION]))
    text = json.dumps(meta).encode("utf-8")
    buf.write(_U32.pack(len(text)))
    buf.write(text)
    for name, arr in items:
        raw = name.encode("utf-8")
        buf.write(_U32.pack(len(raw)))
        buf.write(raw)
        buf.write(_U32.pack(arr.ndim))
        for d in arr.shape:
            buf.write(_U32.pack(d))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return _U32.unpack(self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError("bad magic; not a checkpoint file")
    version = r.take(1)[0]
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable metadata: {exc}") from None
    arrays = {}
    for _ in range(meta["num_tensors"]):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
    if r.pos != len(data):
        raise CorruptCheckpointError("trailing bytes after last tensor")

    dtype = np.dtype(meta["dtype"])
    try:
        params = ModelParams()
        for name in meta["param_names"]:
            params.tensors[name] = ad.Tensor(arrays[name].astype(dtype), requires_grad=True)
        for name in meta["stat_names"]:
            stats = ad.RunningStats(arrays[f"{name}.running_mean"].shape[0], dtype)
            stats.mean[...] = arrays[f"{name}.running_mean"]
            stats.var[...] = arrays[f"{name}.running_var"]
            params.stats[name] = stats
        opt = meta["optimizer"]
        state = OptimizerState(
            {n: arrays[f"adam.m.{n}"].astype(dtype) for n in meta["param_names"]},
            {n: arrays[f"adam.v.{n}"].astype(dtype) for n in meta["param_names"]},
            opt["t"], opt["beta1"], opt["beta2"], opt["eps"])
    except KeyError as exc:
        raise CorruptCheckpointError(f"missing tensor {exc}") from None
    cw = meta.get("class_weights")
    return Checkpoint(
        ModelConfig.from_dict(meta["model_config"]),
        TrainConfig.from_dict(meta["train_config"]),
        params, state, meta["epoch"],
        [EpochLog(**e) for e in meta["log"]],
        ClassWeights.from_dict(cw) if cw else None,
        meta.get("rng_state", {}),
    )
