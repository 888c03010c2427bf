"""Convolutional feature extractor, spatial attention pooling and AU head.

The network maps an ``N x S x S x 3`` batch of face crops to ``N x C``
action-unit probabilities:

    6 x [conv3x3 -> batchnorm -> relu -> (maxpool)]   feature map N x H x W x F
    shared scorer FC -> BN -> ReLU -> FC(1) per cell  scores N x H*W
    softmax over cells, weighted sum of cell vectors  attention vector N x F
    dense -> sigmoid                                  probabilities N x C
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .exceptions import ConfigError, DimensionError

DEFAULT_FILTERS = (32, 64, 128, 128, 256, 256)
DEFAULT_POOLS = (True, True, True, True, False, False)
ALL_POOLS = (True,) * 6

TRAIN, INFER = "train", "infer"


def parse_pool_schedule(text):
    """``"111100"`` -> ``(True, True, True, True, False, False)``; spaces ignored."""
    bits = "".join(str(text).split())
    if not bits or set(bits) - {"0", "1"}:
        raise ConfigError(f"pool schedule must be a string of 0/1, got {text!r}")
    return tuple(b == "1" for b in bits)


def format_pool_schedule(pools):
    return "".join("1" if p else "0" for p in pools)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 112
    input_channels: int = 3
    block_filters: tuple = DEFAULT_FILTERS
    pool_schedule: tuple = DEFAULT_POOLS
    attention_hidden: int = 128
    num_aus: int = 12

    def __post_init__(self):
        object.__setattr__(self, "block_filters", tuple(int(f) for f in self.block_filters))
        pools = self.pool_schedule
        if isinstance(pools, str):
            pools = parse_pool_schedule(pools)
        object.__setattr__(self, "pool_schedule", tuple(bool(p) for p in pools))

    def validate(self):
        if not self.block_filters or any(f <= 0 for f in self.block_filters):
            raise ConfigError("block_filters must be a non-empty list of positive ints")
        if len(self.pool_schedule) != len(self.block_filters):
            raise ConfigError("pool_schedule needs one entry per block")
        if self.num_aus < 1:
            raise ConfigError("num_aus must be >= 1")
        if self.attention_hidden < 1 or self.input_channels < 1:
            raise ConfigError("attention_hidden and input_channels must be >= 1")
        size = self.input_size
        for pooled in self.pool_schedule:
            if pooled:
                if size < 2:
                    raise ConfigError(f"input size {self.input_size} collapses below 1 pixel")
                size //= 2
        if size < 1:
            raise ConfigError(f"input size {self.input_size} collapses below 1 pixel")
        return self

    @property
    def feature_size(self):
        size = self.input_size
        for pooled in self.pool_schedule:
            if pooled:
                size //= 2
        return size

    @property
    def feature_channels(self):
        return self.block_filters[-1]

    def to_dict(self):
        d = asdict(self)
        d["block_filters"] = list(self.block_filters)
        d["pool_schedule"] = format_pool_schedule(self.pool_schedule)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelParams:
    """Named learnable tensors plus batch-norm running statistics.

    Names are stable identifiers used by checkpoints, e.g.
    ``block1.conv.kernel`` or ``attention.fc2.bias``.
    """

    tensors: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def num_parameters(self):
        return int(np.sum([t.size for t in self.tensors.values()]))

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self):
        return ModelParams(
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
            {k: s.copy() for k, s in self.stats.items()},
        )

    def astype(self, dtype):
        out = ModelParams(
            {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
            {},
        )
        for k, s in self.stats.items():
            rs = RunningStats(s.mean.shape[0], dtype)
            rs.mean[...] = s.mean
            rs.var[...] = s.var
            out.stats[k] = rs
        return out

    def state_arrays(self):
        """Every stored array by name, running statistics included."""
        arrays = {k: t.data for k, t in self.tensors.items()}
        for k, s in self.stats.items():
            arrays[f"{k}.running_mean"] = s.mean
            arrays[f"{k}.running_var"] = s.var
        return arrays


def parameter_shapes(config: ModelConfig):
    """Name -> shape for every learnable tensor, in a fixed order."""
    shapes = {}
    cin = config.input_channels
    for b, cout in enumerate(config.block_filters, start=1):
        shapes[f"block{b}.conv.kernel"] = (3, 3, cin, cout)
        shapes[f"block{b}.conv.bias"] = (cout,)
        shapes[f"block{b}.bn.gamma"] = (cout,)
        shapes[f"block{b}.bn.beta"] = (cout,)
        cin = cout
    feat, hid = config.feature_channels, config.attention_hidden
    shapes["attention.fc1.weight"] = (feat, hid)
    shapes["attention.fc1.bias"] = (hid,)
    shapes["attention.bn.gamma"] = (hid,)
    shapes["attention.bn.beta"] = (hid,)
    shapes["attention.fc2.weight"] = (hid, 1)
    shapes["attention.fc2.bias"] = (1,)
    shapes["head.weight"] = (feat, config.num_aus)
    shapes["head.bias"] = (config.num_aus,)
    return shapes


def init_params(config: ModelConfig, seed=0, dtype=np.float64) -> ModelParams:
    """He-normal conv/FC weights, 1/fan_in head, zero biases, identity BN."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            scale = 1.0 if name.startswith("head.") else 2.0
            arr = rng.normal(0.0, np.sqrt(scale / fan_in), size=shape)
        params.tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
    for b, cout in enumerate(config.block_filters, start=1):
        params.stats[f"block{b}.bn"] = RunningStats(cout, dtype)
    params.stats["attention.bn"] = RunningStats(config.attention_hidden, dtype)
    return params


def _check_mode(mode):
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return mode == TRAIN


def extract_features(images, params: ModelParams, config: ModelConfig, mode=INFER):
    training = _check_mode(mode)
    x = ad.as_tensor(images)
    expect = (config.input_size, config.input_size, config.input_channels)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise DimensionError(f"expected images of shape (N, {', '.join(map(str, expect))}), got {x.shape}")
    if x.dtype != params.dtype:
        x = Tensor(x.data.astype(params.dtype))
    for b, pooled in enumerate(config.pool_schedule, start=1):
        p = f"block{b}"
        x = ad.conv2d(x, params[f"{p}.conv.kernel"], params[f"{p}.conv.bias"])
        x = ad.batchnorm(x, params[f"{p}.bn.gamma"], params[f"{p}.bn.beta"],
                         params.stats[f"{p}.bn"], training=training)
        x = ad.relu(x)
        if pooled:
            x = ad.maxpool2d(x)
    return x


@dataclass
class AttentionOutput:
    vector: Tensor   # N x F
    scores: Tensor   # N x P, P = H * W
    weights: Tensor  # N x P, rows sum to one


def attention_forward(fmap, params: ModelParams, mode=INFER) -> AttentionOutput:
    """Score every spatial cell with a shared MLP and pool by softmax weights."""
    training = _check_mode(mode)
    fmap = ad.as_tensor(fmap)
    if fmap.ndim != 4:
        raise DimensionError(f"feature map must be N x H x W x F, got {fmap.shape}")
    n, h, w, f = fmap.shape
    if params["attention.fc1.weight"].shape[0] != f:
        raise DimensionError(f"attention expects {params['attention.fc1.weight'].shape[0]} channels, got {f}")
    cells = ad.reshape(fmap, (n, h * w, f))
    flat = ad.reshape(cells, (n * h * w, f))
    hidden = ad.dense(flat, params["attention.fc1.weight"], params["attention.fc1.bias"])
    hidden = ad.batchnorm(hidden, params["attention.bn.gamma"], params["attention.bn.beta"],
                          params.stats["attention.bn"], training=training)
    hidden = ad.relu(hidden)
    scores = ad.dense(hidden, params["attention.fc2.weight"], params["attention.fc2.bias"])
    scores = ad.reshape(scores, (n, h * w))
    weights = ad.softmax(scores, axis=1)
    vector = ad.weighted_sum(cells, weights, axis=1)
    return AttentionOutput(vector, scores, weights)


def predict(vector, params: ModelParams):
    return ad.sigmoid(ad.dense(vector, params["head.weight"], params["head.bias"]))


def forward(images, params: ModelParams, config: ModelConfig, mode=INFER):
    fmap = extract_features(images, params, config, mode)
    att = attention_forward(fmap, params, mode)
    return predict(att.vector, params)


def predict_proba(images, params: ModelParams, config: ModelConfig, batch_size=64):
    """Inference-mode probabilities as a plain array, evaluated in chunks."""
    images = np.asarray(images)
    out = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            out.append(forward(chunk, params, config, INFER).data)
    if not out:
        return np.zeros((0, config.num_aus), dtype=params.dtype)
    return np.concatenate(out, axis=0)
