"""The convolutional context-aware transformer network.

Per time step the (F, C) context plane goes through three bias-free
conv -> ReLU -> 2x2 average-pool blocks, is flattened and projected to
``d_model``.  Transformer encoders then mix information across time, an FC
head maps every frame to a score in [0, 5], and the utterance score is the
mean over valid frames.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from . import nncore as nn
from .errors import ConfigError, CorruptCheckpoint, EmptyInput, FormatError, ShapeError
from .frontend import ContextTensor

HEAD_BIAS_INIT = 3.0


@dataclass
class ModelConfig:
    feature_kind: str = "STFT"
    context_size: int = 11
    conv_filters: int = 16
    conv_kernel: int = 5
    num_encoders: int = 4
    ff_units: int = 256
    att_heads: int = 4
    d_model: int = 64
    fc_units: int = 512
    fc_layers: int = 2
    dropout: float = 0.15
    positional_encoding: str = "none"

    def __post_init__(self):
        self.feature_kind = self.feature_kind.upper()
        if self.feature_kind not in ("STFT", "MEL"):
            raise ConfigError(f"feature_kind must be STFT or MEL, got {self.feature_kind!r}")
        if self.context_size < 1 or self.context_size % 2 == 0:
            raise ConfigError("context_size must be a positive odd integer")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be a positive odd integer")
        for name in ("conv_filters", "num_encoders", "ff_units", "att_heads",
                     "d_model", "fc_units", "fc_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.att_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by att_heads {self.att_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.positional_encoding not in ("none", "sinusoidal"):
            raise ConfigError("positional_encoding must be 'none' or 'sinusoidal'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# The three ensemble members; d_model is not listed in the table, 64 is our default.
TABLE1_MODELS = {
    "model1": ModelConfig("STFT", 11, 16, 5, 4, 256, 4, 64, 512, 2, 0.15),
    "model2": ModelConfig("MEL", 11, 8, 5, 2, 256, 2, 64, 256, 2, 0.19),
    "model3": ModelConfig("MEL", 11, 16, 5, 4, 256, 4, 64, 512, 2, 0.15),
}


@dataclass
class Prediction:
    frame_scores: np.ndarray
    utterance_score: float
    valid_frames: int


@dataclass
class CCATNetwork:
    config: ModelConfig
    F_in: int
    params: dict[str, nn.Parameter]
    feature: dict | None = field(default=None)

    @property
    def pooled_F(self) -> int:
        return _pool_chain(self.F_in)

    @property
    def pooled_C(self) -> int:
        return _pool_chain(self.config.context_size)

    @property
    def flatten_dim(self) -> int:
        return self.pooled_F * self.pooled_C * self.config.conv_filters

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list[nn.Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.value = np.array(state[k], dtype=p.dtype)
            p.zero_grad()

    def astype(self, dtype) -> "CCATNetwork":
        params = {k: nn.Parameter(k, p.value.astype(dtype), p.decay) for k, p in self.params.items()}
        return CCATNetwork(self.config, self.F_in, params, self.feature)

    def copy(self) -> "CCATNetwork":
        return self.astype(self.dtype)


def _pool_chain(n: int, stages: int = 3) -> int:
    for _ in range(stages):
        n = nn.pooled_size(n)
    return n


def expected_shapes(config: ModelConfig, F_in: int) -> dict[str, tuple[tuple, bool]]:
    """Parameter name -> (shape, receives L2) in creation order."""
    k, nf = config.conv_kernel, config.conv_filters
    flat = _pool_chain(F_in) * _pool_chain(config.context_size) * nf
    D, ff = config.d_model, config.ff_units
    shapes: dict[str, tuple[tuple, bool]] = {
        "conv1.kernel": ((k, k, 1, nf), True),
        "conv2.kernel": ((k, k, nf, nf), True),
        "conv3.kernel": ((k, k, nf, nf), True),
        "proj.w": ((flat, D), True),
        "proj.b": ((D,), False),
    }
    for e in range(config.num_encoders):
        pre = f"enc{e}."
        for m in ("q", "k", "v", "o"):
            shapes[pre + "w" + m] = ((D, D), True)
            shapes[pre + "b" + m] = ((D,), False)
        shapes[pre + "ln1_g"] = ((D,), False)
        shapes[pre + "ln1_b"] = ((D,), False)
        shapes[pre + "ff1_w"] = ((D, ff), True)
        shapes[pre + "ff1_b"] = ((ff,), False)
        shapes[pre + "ff2_w"] = ((ff, D), True)
        shapes[pre + "ff2_b"] = ((D,), False)
        shapes[pre + "ln2_g"] = ((D,), False)
        shapes[pre + "ln2_b"] = ((D,), False)
    width = D
    for i in range(config.fc_layers):
        shapes[f"fc{i}.w"] = ((width, config.fc_units), True)
        shapes[f"fc{i}.b"] = ((config.fc_units,), False)
        width = config.fc_units
    shapes["head.w"] = ((width, 1), True)
    shapes["head.b"] = ((1,), False)
    return shapes


def _glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    if len(shape) == 4:
        rf = shape[0] * shape[1]
        fan_in, fan_out = rf * shape[2], rf * shape[3]
    else:
        fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build(config: ModelConfig, F_in: int, seed: int = 0, dtype=np.float32,
          feature: dict | None = None) -> CCATNetwork:
    if F_in < 1:
        raise ConfigError("F_in must be >= 1")
    try:
        if _pool_chain(F_in) < 1 or _pool_chain(config.context_size) < 1:
            raise ConfigError("pooling leaves an empty dimension")
        if F_in < 2 and config.context_size < 2:
            raise ConfigError("a 1x1 feature plane cannot be pooled")
    except ShapeError as exc:
        raise ConfigError(str(exc)) from exc
    rng = np.random.default_rng(seed)
    params: dict[str, nn.Parameter] = {}
    for name, (shape, decay) in expected_shapes(config, F_in).items():
        if decay:
            value = _glorot(rng, shape)
        elif name.endswith(("ln1_g", "ln2_g")):
            value = np.ones(shape)
        elif name == "head.b":
            value = np.full(shape, HEAD_BIAS_INIT)
        else:
            value = np.zeros(shape)
        params[name] = nn.Parameter(name, value.astype(dtype), decay)
    return CCATNetwork(config, F_in, params, feature)


def count_params(net: CCATNetwork) -> int:
    return int(np.sum([p.value.size for p in net.params.values()]))


def sinusoidal_positions(T: int, D: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def forward_batch(net: CCATNetwork, data: np.ndarray, mask: np.ndarray,
                  training: bool = False, rng: np.random.Generator | None = None):
    """Run a padded batch. data: [B,T,F,C]; mask: [B,T].

    Returns (frame scores Tensor [B,T], utterance scores Tensor [B]).
    """
    cfg, p = net.config, net.params
    data = np.asarray(data)
    mask = np.asarray(mask, dtype=bool)
    if data.ndim != 4:
        raise ShapeError(f"expected [B,T,F,C] features, got shape {data.shape}")
    B, T, F, C = data.shape
    if F != net.F_in or C != cfg.context_size:
        raise ShapeError(f"features are {F}x{C}, network expects {net.F_in}x{cfg.context_size}")
    if mask.shape != (B, T):
        raise ShapeError(f"mask shape {mask.shape} != {(B, T)}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise EmptyInput("an utterance has no valid frames")

    x = nn.Tensor(data.reshape(B * T, F, C, 1).astype(net.dtype, copy=False))
    for i in (1, 2, 3):
        x = nn.avgpool2d(nn.relu(nn.conv2d_nobias(x, p[f"conv{i}.kernel"])))
    x = nn.reshape(x, (B, T, net.flatten_dim))
    x = nn.dense(x, p["proj.w"], p["proj.b"])
    if cfg.positional_encoding == "sinusoidal":
        x = x + sinusoidal_positions(T, cfg.d_model).astype(net.dtype)
    x = nn.dropout(x, cfg.dropout, training, rng)
    for e in range(cfg.num_encoders):
        pre = f"enc{e}."
        block = {k[len(pre):]: v for k, v in p.items() if k.startswith(pre)}
        x = nn.encoder_block(x, block, cfg.att_heads, mask, cfg.dropout, training, rng)
    for i in range(cfg.fc_layers):
        x = nn.relu(nn.dense(x, p[f"fc{i}.w"], p[f"fc{i}.b"]))
        x = nn.dropout(x, cfg.dropout, training, rng)
    frames = nn.reshape(nn.clipped_relu5(nn.dense(x, p["head.w"], p["head.b"])), (B, T))
    weights = (mask / counts[:, None]).astype(net.dtype)
    utt = nn.reduce_sum(frames * weights, axis=1)
    return frames, utt


def forward(net: CCATNetwork, ct: ContextTensor, training: bool = False,
            rng: np.random.Generator | None = None) -> Prediction:
    frames, utt = forward_batch(net, ct.data[None], ct.valid_mask[None], training, rng)
    return Prediction(frames.value[0].astype(np.float64), float(utt.value[0]),
                      int(ct.valid_mask.sum()))


# ----------------------------------------------------------------- checkpoints

def checkpoint_bytes(net: CCATNetwork) -> bytes:
    meta = {"format": "ccat-model", "model": net.config.to_dict(), "F_in": net.F_in,
            "feature": net.feature}
    return container.encode(meta, [(k, p.value) for k, p in net.params.items()])


def save_checkpoint(net: CCATNetwork, path: str | Path) -> None:
    """Write parameters as float32; float64 networks are narrowed on save."""
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path: str | Path) -> CCATNetwork:
    meta, tensors = container.read(path)
    if meta.get("format") != "ccat-model":
        raise FormatError("container does not hold a ccat model")
    try:
        config = ModelConfig.from_dict(meta["model"])
        F_in = int(meta["F_in"])
        shapes = expected_shapes(config, F_in)
    except (KeyError, TypeError, ValueError, ConfigError, ShapeError) as exc:
        raise CorruptCheckpoint(f"invalid model metadata: {exc}") from exc
    if set(tensors) != set(shapes):
        raise CorruptCheckpoint("tensor names do not match the configured architecture")
    params = {}
    for name, (shape, decay) in shapes.items():
        arr = tensors[name]
        if arr.shape != shape or arr.dtype != np.float32:
            raise CorruptCheckpoint(f"tensor {name}: shape {arr.shape} inconsistent with config {shape}")
        params[name] = nn.Parameter(name, arr, decay)
    return CCATNetwork(config, F_in, params, meta.get("feature"))
