"""Convolutional-transformer stress classifier.

conv1 -> ReLU -> pool -> conv2 -> ReLU -> pool -> reshape to tokens
-> + sinusoidal positions -> post-norm encoder layers -> flatten
-> FC -> ReLU -> dropout -> FC -> ReLU -> dropout -> FC -> sigmoid
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Rng, Tensor
from .errors import ConfigError, FormatError, ShapeError

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    filters: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class ModelConfig:
    conv1: ConvSpec = ConvSpec(64, 64, 8)
    conv2: ConvSpec = ConvSpec(128, 32, 4)
    pool_size: int = 2
    pool_stride: int = 2
    d_model: int = 1024
    d_qkv: int = 1024
    d_ff: int = 512
    heads: int = 4
    encoder_layers: int = 4
    fc_dims: tuple[int, ...] = (512, 256, 1)
    fc_dropout: float = 0.5
    encoder_dropout: float = 0.1
    window_len: int = 7680
    ln_eps: float = 1e-5

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def reduced(cls) -> "ModelConfig":
        """Small named configuration for gradient checks and synthetic runs.

        256-sample windows still reduce to 7 tokens (32 channels x 7 steps
        regrouped as 7 x 32), mirroring the 7 x 1024 layout of the full model.
        """
        return cls(
            conv1=ConvSpec(8, 8, 4),
            conv2=ConvSpec(32, 4, 2),
            d_model=32,
            d_qkv=32,
            d_ff=16,
            heads=2,
            encoder_layers=1,
            fc_dims=(32, 16, 1),
            window_len=256,
        )

    # -- shape arithmetic ----------------------------------------------------
    def stage_lengths(self, window_len: int | None = None) -> dict[str, int]:
        """Sequence length after each front-end stage (0 or less means empty)."""
        n = self.window_len if window_len is None else window_len
        out = {"input": n}
        for name, conv in (("conv1", self.conv1), ("conv2", self.conv2)):
            n = (n - conv.kernel) // conv.stride + 1 if n >= conv.kernel else 0
            out[name] = n
            n = (n - self.pool_size) // self.pool_stride + 1 if n >= self.pool_size else 0
            out[f"pool_{name}"] = n
        return out

    def _front_end_ok(self, window_len: int) -> bool:
        flat = self.conv2.filters * self.stage_lengths(window_len)["pool_conv2"]
        return flat > 0 and flat % self.d_model == 0

    @property
    def n_tokens(self) -> int:
        return self.conv2.filters * self.stage_lengths()["pool_conv2"] // self.d_model

    def valid_window_lengths(self, near: int, count: int = 4) -> list[int]:
        candidates = [w for w in range(max(1, near - 4096), near + 4096) if self._front_end_ok(w)]
        return sorted(candidates, key=lambda w: (abs(w - near), w))[:count]

    def validate(self) -> "ModelConfig":
        for name in ("pool_size", "pool_stride", "d_model", "d_qkv", "d_ff", "heads", "window_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for conv in (self.conv1, self.conv2):
            if min(conv.filters, conv.kernel, conv.stride) <= 0:
                raise ConfigError(f"convolution parameters must be positive: {conv}")
        if self.encoder_layers < 0:
            raise ConfigError("encoder_layers must be non-negative")
        if self.d_qkv % self.heads:
            raise ConfigError(f"d_qkv={self.d_qkv} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ConfigError(f"positional encoding needs an even d_model, got {self.d_model}")
        if not self.fc_dims or self.fc_dims[-1] != 1:
            raise ConfigError(f"the last FC layer must have one output, got {self.fc_dims}")
        for rate in (self.fc_dropout, self.encoder_dropout):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rate {rate} outside [0, 1)")
        if not self._front_end_ok(self.window_len):
            stages = self.stage_lengths()
            raise ConfigError(
                f"window length {self.window_len} gives stage lengths {stages}; "
                f"{self.conv2.filters}x{stages['pool_conv2']} cannot be regrouped into "
                f"tokens of size {self.d_model}. Valid nearby window lengths: "
                f"{self.valid_window_lengths(self.window_len)}"
            )
        return self

    # -- serialisation ---------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("conv1", "conv2"):
            if isinstance(d.get(key), dict):
                d[key] = ConvSpec(**d[key])
        if "fc_dims" in d:
            d["fc_dims"] = tuple(d["fc_dims"])
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()


class AttentionParams(NamedTuple):
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


@dataclass
class ModelParams:
    """Every learnable tensor of the network, keyed by layer name."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def attention(self, layer: int) -> AttentionParams:
        pre = f"encoder.{layer}.attn."
        return AttentionParams(*(self.tensors[pre + n] for n in ("w_q", "w_k", "w_v", "w_o")))

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()},
        )

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    # -- checkpoint --------------------------------------------------------------
    def to_bytes(self) -> bytes:
        cfg = self.config.canonical_json().encode()
        parts = [
            CKPT_MAGIC,
            struct.pack("<H", CKPT_VERSION),
            self.config.config_hash(),
            struct.pack("<I", len(cfg)),
            cfg,
            struct.pack("<I", len(self.tensors)),
        ]
        for name, t in self.tensors.items():
            raw = name.encode()
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape))
            parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return b"".join(parts)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes, expect: ModelConfig | None = None) -> "ModelParams":
        reader = _Reader(buf)
        if reader.take(4) != CKPT_MAGIC:
            raise FormatError("not a checkpoint: bad magic", 0)
        (version,) = reader.unpack("<H")
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        digest = reader.take(32)
        (cfg_len,) = reader.unpack("<I")
        cfg_at = reader.pos
        try:
            config = ModelConfig.from_dict(json.loads(reader.take(cfg_len).decode()))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"unreadable config block: {exc}", cfg_at) from exc
        if config.config_hash() != digest:
            raise FormatError("config hash does not match embedded config", 6)
        if expect is not None and expect.config_hash() != digest:
            raise FormatError("checkpoint was written for a different model config", 6)
        (count,) = reader.unpack("<I")
        tensors = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode()
            (ndim,) = reader.unpack("<B")
            shape = reader.unpack(f"<{ndim}Q")
            n = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(reader.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        if reader.pos != len(buf):
            raise FormatError("trailing bytes after last tensor", reader.pos)
        return cls(config, tensors)

    @classmethod
    def load(cls, path: str | Path, expect: ModelConfig | None = None) -> "ModelParams":
        return cls.from_bytes(Path(path).read_bytes(), expect)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated: wanted {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered mapping of parameter name to shape; also fixes init order."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {
        "conv1.weight": (c.conv1.filters, 1, c.conv1.kernel),
        "conv1.bias": (c.conv1.filters,),
        "conv2.weight": (c.conv2.filters, c.conv1.filters, c.conv2.kernel),
        "conv2.bias": (c.conv2.filters,),
    }
    for i in range(c.encoder_layers):
        p = f"encoder.{i}."
        shapes.update(
            {
                p + "attn.w_q": (c.d_model, c.d_qkv),
                p + "attn.w_k": (c.d_model, c.d_qkv),
                p + "attn.w_v": (c.d_model, c.d_qkv),
                p + "attn.w_o": (c.d_qkv, c.d_model),
                p + "ln1.gamma": (c.d_model,),
                p + "ln1.beta": (c.d_model,),
                p + "ff1.weight": (c.d_model, c.d_ff),
                p + "ff1.bias": (c.d_ff,),
                p + "ff2.weight": (c.d_ff, c.d_model),
                p + "ff2.bias": (c.d_model,),
                p + "ln2.gamma": (c.d_model,),
                p + "ln2.beta": (c.d_model,),
            }
        )
    width = c.n_tokens * c.d_model
    for j, out in enumerate(c.fc_dims, start=1):
        shapes[f"fc{j}.weight"] = (width, out)
        shapes[f"fc{j}.bias"] = (out,)
        width = out
    return shapes


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """Fan-in uniform weights, zero biases, unit layer-norm gains."""
    config.validate()
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("gamma"):
            data = np.ones(shape)
        elif name.endswith(("bias", "beta")):
            data = np.zeros(shape)
        else:
            # conv weights are (out, in, kernel); dense weights are (in, out)
            fan_in = shape[1] * shape[2] if len(shape) == 3 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def _pe_table(n: int, d_model: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((n, d_model))
    table[:, 0::2] = np.sin(pos / rate)
    table[:, 1::2] = np.cos(pos / rate)
    table.setflags(write=False)
    return table


def positional_encoding(n: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table of shape ``(n, d_model)``."""
    if d_model <= 0 or d_model % 2:
        raise ValueError(f"d_model must be a positive even number, got {d_model}")
    return _pe_table(int(n), int(d_model))


def attention(q: Tensor, k: Tensor, v: Tensor, weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: Q {q.shape}, K {k.shape}")
    if not (q.shape[-2] == k.shape[-2] == v.shape[-2]) or q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ShapeError(f"sequence lengths differ: Q {q.shape}, K {k.shape}, V {v.shape}")
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = ag.matmul(q, k.transpose(axes)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = ag.softmax_lastdim(scores)
    if weights_out is not None:
        weights_out.append(weights.data)
    return ag.matmul(weights, v)


def multi_head_attention(
    x: Tensor, p: AttentionParams, heads: int, weights_out: list | None = None
) -> Tensor:
    """Self-attention with ``heads`` slices of the projected width, then W_o."""
    batch, n, _ = x.shape
    d_qkv = p.w_q.shape[1]
    if d_qkv % heads:
        raise ConfigError(f"d_qkv={d_qkv} is not divisible by heads={heads}")
    dh = d_qkv // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, n, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = (split(ag.matmul(x, w)) for w in (p.w_q, p.w_k, p.w_v))
    heads_out = attention(q, k, v, weights_out)
    merged = heads_out.transpose(0, 2, 1, 3).reshape(batch, n, d_qkv)
    return ag.matmul(merged, p.w_o)


def reshape_to_tokens(x: Tensor, d_model: int) -> Tensor:
    """Row-major flatten of (channels, length), regrouped into d_model-wide tokens."""
    batch, channels, length = x.shape
    if (channels * length) % d_model:
        raise ConfigError(
            f"{channels}x{length} conv output cannot be split into tokens of size {d_model}"
        )
    return x.reshape(batch, channels * length // d_model, d_model)


def encoder_layer(
    x: Tensor,
    params: ModelParams,
    layer: int,
    rng: Rng | None,
    training: bool,
    weights_out: list | None = None,
) -> Tensor:
    cfg = params.config
    p = params.tensors
    pre = f"encoder.{layer}."
    a = multi_head_attention(x, params.attention(layer), cfg.heads, weights_out)
    a = ag.dropout(a, cfg.encoder_dropout, rng, training)
    h = ag.layer_norm(x + a, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], cfg.ln_eps)
    f = ag.relu(ag.dense(h, p[pre + "ff1.weight"], p[pre + "ff1.bias"]))
    f = ag.dense(f, p[pre + "ff2.weight"], p[pre + "ff2.bias"])
    f = ag.dropout(f, cfg.encoder_dropout, rng, training)
    return ag.layer_norm(h + f, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], cfg.ln_eps)


def encode(
    params: ModelParams,
    tokens: Tensor,
    rng: Rng | None = None,
    training: bool = False,
    weights_out: list | None = None,
) -> Tensor:
    """Run the encoder stack on ``(batch, n, d_model)`` tokens (no positions added)."""
    for i in range(params.config.encoder_layers):
        tokens = encoder_layer(tokens, params, i, rng, training, weights_out)
    return tokens


def front_end(params: ModelParams, x: Tensor) -> Tensor:
    """Both conv/ReLU/pool blocks; returns ``(batch, conv2.filters, L)``."""
    cfg = params.config
    p = params.tensors
    h = ag.conv1d(x, p["conv1.weight"], p["conv1.bias"], cfg.conv1.stride)
    h = ag.maxpool1d(ag.relu(h), cfg.pool_size, cfg.pool_stride)
    h = ag.conv1d(h, p["conv2.weight"], p["conv2.bias"], cfg.conv2.stride)
    return ag.maxpool1d(ag.relu(h), cfg.pool_size, cfg.pool_stride)


def forward(
    params: ModelParams,
    x,
    rng: Rng | None = None,
    training: bool = False,
    positional: bool = True,
    weights_out: list | None = None,
) -> Tensor:
    """Stress probability for each window in ``x`` (``(batch, 1, window_len)``)."""
    cfg = params.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        x = x.reshape(x.shape[0], 1, x.shape[1])
    if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != cfg.window_len:
        raise ShapeError(f"expected input (batch, 1, {cfg.window_len}), got {x.shape}")
    batch = x.shape[0]

    tokens = reshape_to_tokens(front_end(params, x), cfg.d_model)
    if positional:
        tokens = tokens + Tensor(positional_encoding(tokens.shape[1], cfg.d_model))
    tokens = encode(params, tokens, rng, training, weights_out)

    h = tokens.reshape(batch, -1)
    p = params.tensors
    n_fc = len(cfg.fc_dims)
    for j in range(1, n_fc + 1):
        h = ag.dense(h, p[f"fc{j}.weight"], p[f"fc{j}.bias"])
        if j < n_fc:
            h = ag.dropout(ag.relu(h), cfg.fc_dropout, rng, training)
    return ag.sigmoid(h).reshape(batch)


def predict_proba(params: ModelParams, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode probabilities for an ``(n, window_len)`` array, batched."""
    out = np.empty(len(windows))
    with ag.no_grad():
        for start in range(0, len(windows), batch_size):
            chunk = windows[start : start + batch_size]
            out[start : start + len(chunk)] = forward(params, chunk[:, None, :]).data
    return out
