"""TC-ResNet10, TC-ResNet14 and LECAPAT built on :mod:`lightslr.autograd`."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .errors import (ArchitectureMismatchError, ConfigurationError, CorruptionError, InvalidInputError,
                     FormatError, ShapeError)
from .features import N_MELS

ARCHITECTURES = ("tc_resnet10", "tc_resnet14", "lecapat")
HEADS = ("multiclass", "multiclass_plus_other", "multilabel")


@dataclass(frozen=True)
class LecapatConfig:
    channels: int = 180
    res2net_scale: int = 4
    dilation: int = 2
    se_bottleneck: int = 64
    attention_dim: int = 64
    stem_kernel: int = 5
    post_channels_factor: int = 3
    embedding_dim: int = 256


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    num_languages: int
    head: str = "multilabel"
    width_multiplier: float = 1.0
    n_mels: int = N_MELS
    lecapat: LecapatConfig = field(default_factory=LecapatConfig)
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.num_languages < 1:
            raise ConfigurationError("num_languages must be positive")
        if self.width_multiplier <= 0:
            raise ConfigurationError("width_multiplier must be positive")

    @property
    def output_units(self) -> int:
        return self.num_languages + (self.head == "multiclass_plus_other")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        raw["lecapat"] = LecapatConfig(**raw.get("lecapat", {}))
        return cls(**raw)


def scaled(width: int, multiplier: float, what: str) -> int:
    w = int(round(width * multiplier))
    if w < 1:
        raise ConfigurationError(f"width_multiplier {multiplier} leaves {what} with zero channels")
    return w


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    """Container that discovers parameters, buffers and submodules from its attributes."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self.children():
            yield from child.modules(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        for _, m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Dense(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(he_uniform(rng, (d_out, d_in), d_in))
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None

    def forward(self, x):
        return ag.dense(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, dilation=1, padding=None, bias=True):
        self.weight = Parameter(he_uniform(rng, (c_out, c_in, kernel), c_in * kernel))
        self.bias = Parameter(np.zeros(c_out, np.float32)) if bias else None
        self.stride, self.dilation = stride, dilation
        # "same"-style padding for odd kernels by default
        self.padding = (kernel - 1) * dilation // 2 if padding is None else padding

    def forward(self, x):
        return ag.conv1d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=(1, 1), padding=(0, 0), bias=True):
        kh, kw = kernel
        self.weight = Parameter(he_uniform(rng, (c_out, c_in, kh, kw), c_in * kh * kw))
        self.bias = Parameter(np.zeros(c_out, np.float32)) if bias else None
        self.stride, self.padding = tuple(stride), tuple(padding)

    def forward(self, x):
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, np.float32))
        self.beta = Parameter(np.zeros(channels, np.float32))
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return ag.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


# ---------------------------------------------------------------------------
# TC-ResNet


class ResBlock(Module):
    """Two k=9 temporal convolutions with BN; 1x1 projection on the skip path when the shape changes."""

    def __init__(self, c_in, c_out, stride, rng, kernel=9):
        self.conv1 = Conv1d(c_in, c_out, kernel, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv1d(c_out, c_out, kernel, rng, bias=False)
        self.bn2 = BatchNorm(c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv1d(c_in, c_out, 1, rng, stride=stride, bias=False)
            self.proj_bn = BatchNorm(c_out)
        else:
            self.proj = None

    def forward(self, x):
        y = ag.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return ag.relu(y + skip)


# (stem width, [(block width, stride), ...])
TC_RESNET10_WIDTHS = (24, ((40, 2), (40, 1), (64, 2), (64, 1)))
TC_RESNET14_WIDTHS = (14, ((21, 2), (21, 1), (28, 2), (28, 1), (42, 2), (42, 1)))


class TCResNet(Module):
    """Frequency-collapsing 2D stem followed by 1D residual blocks over time."""

    def __init__(self, stem_width, blocks, n_mels, output_units, rng, multiplier=1.0):
        c = scaled(stem_width, multiplier, "stem")
        self.n_mels = n_mels
        self.stem = Conv2d(1, c, (n_mels, 3), rng, padding=(0, 1), bias=False)
        self.stem_bn = BatchNorm(c)
        layers = []
        for i, (width, stride) in enumerate(blocks):
            w = scaled(width, multiplier, f"block {i}")
            layers.append(ResBlock(c, w, stride, rng))
            c = w
        self.blocks = layers
        self.classifier = Dense(c, output_units, rng)

    def stem_output(self, x: Tensor) -> Tensor:
        """``[N, c, 1, T]`` after the frequency-collapsing convolution."""
        return self.stem(_as_image(x, self.n_mels))

    def forward(self, x):
        y = self.stem_output(x)
        n, c, _, t = y.shape
        y = ag.relu(self.stem_bn(y.reshape(n, c, t)))
        for block in self.blocks:
            y = block(y)
        return self.classifier(ag.mean(y, axis=2))


def _as_image(x: Tensor, n_mels: int) -> Tensor:
    if x.ndim == 3:
        x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != n_mels:
        raise ShapeError(f"expected log-mel batch [N, 1, {n_mels}, T], got {x.shape}")
    return x


def _as_sequence(x: Tensor, n_mels: int) -> Tensor:
    if x.ndim == 4 and x.shape[1] == 1:
        x = x.reshape(x.shape[0], x.shape[2], x.shape[3])
    if x.ndim != 3 or x.shape[1] != n_mels:
        raise ShapeError(f"expected log-mel batch [N, {n_mels}, T], got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# LECAPAT


class TDNNLayer(Module):
    """Conv1d -> ReLU -> BN."""

    def __init__(self, c_in, c_out, kernel, rng, dilation=1):
        self.conv = Conv1d(c_in, c_out, kernel, rng, dilation=dilation)
        self.bn = BatchNorm(c_out)

    def forward(self, x):
        return self.bn(ag.relu(self.conv(x)))


class SqueezeExcitation(Module):
    def __init__(self, channels, bottleneck, rng):
        self.squeeze = Dense(channels, bottleneck, rng)
        self.excite = Dense(bottleneck, channels, rng)

    def gate(self, x: Tensor) -> Tensor:
        """Per-channel gate in (0, 1), shape ``[N, C]``."""
        s = ag.mean(x, axis=2)
        return ag.sigmoid(self.excite(ag.relu(self.squeeze(s))))

    def forward(self, x):
        return ag.scale_channels(x, self.gate(x))


class Res2NetConv(Module):
    """Hierarchical residual dilated convolutions over ``scale`` channel groups."""

    def __init__(self, channels, scale, dilation, rng, kernel=3):
        if channels % scale:
            raise ConfigurationError(f"channels {channels} not divisible by res2net scale {scale}")
        width = channels // scale
        self.scale = scale
        self.convs = [TDNNLayer(width, width, kernel, rng, dilation=dilation) for _ in range(scale - 1)]

    def forward(self, x):
        groups = ag.split(x, self.scale, axis=1)
        outs = [groups[0]]
        y = None
        for i, conv in enumerate(self.convs, start=1):
            y = conv(groups[i] if y is None else groups[i] + y)
            outs.append(y)
        return ag.concat(outs, axis=1)


class SERes2NetBlock(Module):
    def __init__(self, channels, scale, dilation, se_bottleneck, rng):
        self.pre = TDNNLayer(channels, channels, 1, rng)
        self.res2net = Res2NetConv(channels, scale, dilation, rng)
        self.post = TDNNLayer(channels, channels, 1, rng)
        self.se = SqueezeExcitation(channels, se_bottleneck, rng)

    def body(self, x):
        return self.post(self.res2net(self.pre(x)))

    def forward(self, x):
        return self.se(self.body(x)) + x


class AttentiveStatsPooling(Module):
    """Per-channel attention over time (tanh bottleneck, softmax over T), then weighted mean/std."""

    def __init__(self, channels, attention_dim, rng):
        self.hidden = Conv1d(channels, attention_dim, 1, rng)
        self.score = Conv1d(attention_dim, channels, 1, rng)

    def attention(self, x: Tensor) -> Tensor:
        return ag.softmax(self.score(ag.tanh(self.hidden(x))), axis=2)

    def forward(self, x):
        if x.shape[2] == 0:
            raise InvalidInputError("attentive pooling needs at least one frame")
        return ag.stats_pool(x, self.attention(x))


class Lecapat(Module):
    def __init__(self, cfg: LecapatConfig, n_mels, output_units, rng, multiplier=1.0):
        c = cfg.channels
        if multiplier != 1.0:
            c = cfg.res2net_scale * max(1, int(round(c * multiplier / cfg.res2net_scale)))
        elif c % cfg.res2net_scale:
            raise ConfigurationError(
                f"channels {c} not divisible by res2net_scale {cfg.res2net_scale}")
        post = c * cfg.post_channels_factor
        att = scaled(cfg.attention_dim, multiplier, "attention")
        se = scaled(cfg.se_bottleneck, multiplier, "se bottleneck")
        emb = scaled(cfg.embedding_dim, multiplier, "embedding")
        self.n_mels = n_mels
        self.stem = TDNNLayer(n_mels, c, cfg.stem_kernel, rng)
        self.block = SERes2NetBlock(c, cfg.res2net_scale, cfg.dilation, se, rng)
        self.post = TDNNLayer(c, post, 1, rng)
        self.pool = AttentiveStatsPooling(post, att, rng)
        self.pool_bn = BatchNorm(2 * post)
        self.embedding = Dense(2 * post, emb, rng)
        self.classifier = Dense(emb, output_units, rng)

    def forward(self, x):
        y = self.stem(_as_sequence(x, self.n_mels))
        y = self.post(self.block(y))
        y = self.pool_bn(self.pool(y))
        return self.classifier(ag.relu(self.embedding(y)))


# ---------------------------------------------------------------------------
# public model wrapper


class Model:
    """An architecture plus its configuration; ``forward`` maps log-mel batches to logits."""

    def __init__(self, config: ModelConfig, net: Module):
        self.config = config
        self.net = net
        for name, p in net.named_parameters():
            p.name = name

    @property
    def head(self) -> str:
        return self.config.head

    @property
    def output_units(self) -> int:
        return self.config.output_units

    @property
    def training(self) -> bool:
        return self.net.training

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        return self.net(x)

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    @property
    def dtype(self):
        return self.net.parameters()[0].dtype

    def train(self, mode: bool = True):
        self.net.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def parameters(self) -> list[Parameter]:
        return self.net.parameters()

    def named_parameters(self):
        return list(self.net.named_parameters())

    def named_buffers(self):
        return list(self.net.named_buffers())

    def zero_grad(self):
        self.net.zero_grad()

    def astype(self, dtype) -> "Model":
        """Cast parameters, optimizer state and buffers in place (64-bit for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
            p.reset_optimizer_state()
        for _, m in self.net.modules():
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.net.named_parameters()}
        out.update({name: b.copy() for name, b in self.net.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        params = dict(self.net.named_parameters())
        for name, p in params.items():
            p.data = state[name].astype(p.dtype).reshape(p.shape)
        for path, m in self.net.modules():
            for name in getattr(m, "_buffers", ()):
                full = f"{path}.{name}" if path else name
                buf = getattr(m, name)
                buf[...] = state[full]

    def layer_table(self) -> list[tuple[str, str, int]]:
        rows = []
        for path, m in self.net.modules():
            own = sum(v.data.size for v in vars(m).values() if isinstance(v, Parameter))
            rows.append((path or "<root>", type(m).__name__, own))
        return rows


def count_params(model) -> int:
    """Trainable element count (batch-norm running statistics excluded)."""
    params = model.parameters()
    return int(sum(p.data.size for p in params))


def build_tc_resnet10(cfg: ModelConfig) -> Model:
    if cfg.architecture != "tc_resnet10":
        raise ConfigurationError(f"build_tc_resnet10 got architecture {cfg.architecture!r}")
    rng = np.random.default_rng(cfg.seed)
    stem, blocks = TC_RESNET10_WIDTHS
    return Model(cfg, TCResNet(stem, blocks, cfg.n_mels, cfg.output_units, rng, cfg.width_multiplier))


def build_tc_resnet14(cfg: ModelConfig) -> Model:
    if cfg.architecture != "tc_resnet14":
        raise ConfigurationError(f"build_tc_resnet14 got architecture {cfg.architecture!r}")
    rng = np.random.default_rng(cfg.seed)
    stem, blocks = TC_RESNET14_WIDTHS
    return Model(cfg, TCResNet(stem, blocks, cfg.n_mels, cfg.output_units, rng, cfg.width_multiplier))


def build_lecapat(cfg: ModelConfig) -> Model:
    if cfg.architecture != "lecapat":
        raise ConfigurationError(f"build_lecapat got architecture {cfg.architecture!r}")
    rng = np.random.default_rng(cfg.seed)
    return Model(cfg, Lecapat(cfg.lecapat, cfg.n_mels, cfg.output_units, rng, cfg.width_multiplier))


_BUILDERS = {
    "tc_resnet10": build_tc_resnet10,
    "tc_resnet14": build_tc_resnet14,
    "lecapat": build_lecapat,
}


def build_model(cfg: ModelConfig) -> Model:
    return _BUILDERS[cfg.architecture](cfg)


# ---------------------------------------------------------------------------
# weight files

_MAGIC = b"SLRW"
_VERSION = 1


def save_weights(model: Model, path) -> None:
    """Write config and every parameter/buffer as little-endian f32 records."""
    buf = io.BytesIO()
    cfg = model.config.to_json().encode("utf-8")
    buf.write(_MAGIC + struct.pack("<HI", _VERSION, len(cfg)) + cfg)
    state = model.state()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path
        self.context = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptionError(f"{self.path}: file truncated while reading {self.context}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path, expected_architecture: str | None = None) -> Model:
    """Rebuild a model from a weight file written by :func:`save_weights`."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a weight file")
    r = _Reader(raw, path)
    r.take(4)
    version, cfg_len = r.unpack("<HI")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported weight file version {version}")
    r.context = "config"
    try:
        cfg = ModelConfig.from_json(r.take(cfg_len).decode("utf-8"))
    except (ValueError, TypeError) as exc:
        raise CorruptionError(f"{path}: unreadable config block ({exc})") from exc
    if expected_architecture is not None and cfg.architecture != expected_architecture:
        raise ArchitectureMismatchError(
            f"{path} holds a {cfg.architecture} model, expected {expected_architecture}")
    model = build_model(cfg)
    expected = {name: arr.shape for name, arr in model.state().items()}
    r.context = "record count"
    (count,) = r.unpack("<I")
    state = {}
    for i in range(count):
        r.context = f"record {i}"
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="replace")
        r.context = f"parameter {name}"
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        if name not in expected:
            raise CorruptionError(f"{path}: unexpected parameter {name}")
        if tuple(shape) != expected[name]:
            raise CorruptionError(
                f"{path}: parameter {name} has shape {tuple(shape)}, architecture needs {expected[name]}")
        size = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).copy()
    missing = [n for n in expected if n not in state]
    if missing:
        raise CorruptionError(f"{path}: missing parameter {missing[0]}")
    if r.pos != len(raw):
        raise CorruptionError(f"{path}: {len(raw) - r.pos} trailing bytes")
    model.load_state(state)
    return model
