"""Network assembly, parameter bookkeeping, head replacement and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import (
    CheckpointConfigError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    ContractError,
    DimensionError,
    TruncatedCheckpointError,
)
from .layers import LRELU_SLOPE, BatchNormLayer, ConvLayer, FCLayer, FRWLayer, leaky_relu, max_pool2d
from .losses import CenterTable, SoftmaxHead
from .tensor import Tensor, reshape

CHECKPOINT_MAGIC = b"FRWREID\x00"
CHECKPOINT_VERSION = 1

PRESETS = {
    "paper": dict(input_size=(128, 48), conv_channels=(32, 32, 64, 64, 128, 128, 256, 256, 256),
                  pool_after=(1, 3, 5, 8), embedding_dim=512),
    "desk": dict(input_size=(32, 16), conv_channels=(8, 16, 32, 32), pool_after=(1, 3), embedding_dim=32),
}


@dataclass
class ModelConfig:
    preset: str = "desk"
    input_size: tuple[int, int] = (32, 16)
    in_channels: int = 3
    conv_channels: tuple[int, ...] = (8, 16, 32, 32)
    pool_after: tuple[int, ...] = (1, 3)
    embedding_dim: int = 32
    num_classes: int = 50
    frw_enabled: bool = True
    lrelu_slope: float = LRELU_SLOPE
    frw_norm_target: float = 200.0
    input_mean: tuple[float, ...] | None = None  # per-channel training mean, kept for test-time preprocessing

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "ModelConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        return cls(preset=preset, **{**PRESETS[preset], **overrides})

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        self.pool_after = tuple(int(v) for v in self.pool_after)
        if self.input_mean is not None:
            self.input_mean = tuple(float(v) for v in self.input_mean)

    def validate(self) -> None:
        problems = []
        if self.preset not in PRESETS:
            problems.append(f"unknown preset {self.preset!r}")
        if self.preset == "paper":
            if len(self.conv_channels) != 9:
                problems.append("paper preset needs nine convolutional layers")
            if len(self.pool_after) != 4:
                problems.append("paper preset needs four max-pooling layers")
            if self.embedding_dim != 512:
                problems.append("paper preset uses a 512-D embedding")
        if not self.conv_channels:
            problems.append("at least one convolutional layer is required")
        if sorted(set(self.pool_after)) != list(self.pool_after):
            problems.append("pool positions must be strictly increasing")
        if any(p < 0 or p >= len(self.conv_channels) for p in self.pool_after):
            problems.append(f"pool positions {self.pool_after} exceed {len(self.conv_channels)} conv layers")
        if self.embedding_dim < 1 or self.num_classes < 1 or self.in_channels < 1:
            problems.append("embedding_dim, num_classes and in_channels must be positive")
        if not 0 < self.lrelu_slope < 1:
            problems.append("lrelu_slope must lie in (0, 1)")
        h, w = self.input_size
        for _ in self.pool_after:
            if h < 2 or w < 2:
                problems.append(f"input {self.input_size} too small for {len(self.pool_after)} pools")
                break
            h, w = -(-h // 2), -(-w // 2)
        if problems:
            raise ConfigError("; ".join(problems))

    def feature_shape(self) -> tuple[int, int, int]:
        h, w = self.input_size
        for _ in self.pool_after:
            h, w = -(-h // 2), -(-w // 2)
        return self.conv_channels[-1], h, w

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


class EmbeddingModel:
    """Conv/BN/LReLU stack with interleaved pooling, then FC/BN/LReLU, an
    optional FRW layer, a softmax head and a center table."""

    def __init__(self, cfg: ModelConfig, convs, bns, fc, fc_bn, frw, head, centers):
        self.cfg = cfg
        self.convs: list[ConvLayer] = convs
        self.bns: list[BatchNormLayer] = bns
        self.fc: FCLayer = fc
        self.fc_bn: BatchNormLayer = fc_bn
        self.frw: FRWLayer | None = frw
        self.head: SoftmaxHead = head
        self.centers: CenterTable = centers
        self.training = True

    # -- mode ---------------------------------------------------------------
    def train(self, mode: bool = True) -> "EmbeddingModel":
        self.training = mode
        for bn in [*self.bns, self.fc_bn]:
            bn.training = mode
        return self

    def eval(self) -> "EmbeddingModel":
        return self.train(False)

    @property
    def dtype(self):
        return self.fc.weight.dtype

    # -- forward ------------------------------------------------------------
    def features(self, x: Tensor) -> Tensor:
        """Embedding before the FRW layer."""
        expected = (self.cfg.in_channels, *self.cfg.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"model expects B x {expected[0]} x {expected[1]} x {expected[2]}, got {x.shape}")
        pools = set(self.cfg.pool_after)
        slope = self.cfg.lrelu_slope
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            x = leaky_relu(bn(conv(x)), slope)
            if i in pools:
                x = max_pool2d(x)
        x = reshape(x, (x.shape[0], -1))
        return leaky_relu(self.fc_bn(self.fc(x)), slope)

    def forward(self, x: Tensor) -> Tensor:
        feats = self.features(x)
        return self.frw(feats) if self.frw is not None else feats

    __call__ = forward

    # -- parameter bookkeeping ---------------------------------------------
    def backbone_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for conv, bn in zip(self.convs, self.bns):
            for p in [*conv.parameters(), *bn.parameters()]:
                out[p.name] = p
        for p in [*self.fc.parameters(), *self.fc_bn.parameters()]:
            out[p.name] = p
        if self.frw is not None:
            out[self.frw.weight.name] = self.frw.weight
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.backbone_parameters()
        for p in self.head.parameters():
            out[p.name] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for bn in [*self.bns, self.fc_bn]:
            out.update(bn.buffers())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint stores: parameters, running stats, centers."""
        state = {name: p.data for name, p in self.named_parameters().items()}
        state.update(self.buffers())
        state["centers"] = self.centers.centers.data
        return state

    def decayed_names(self) -> set[str]:
        """Parameters subject to weight decay: conv/FC/head weight matrices."""
        return {name for name in self.named_parameters() if name.endswith(".weight") and not name.startswith("frw")
                } | {"head.W"}

    def astype(self, dtype) -> "EmbeddingModel":
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        for bn in [*self.bns, self.fc_bn]:
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        self.centers.centers.data = self.centers.centers.data.astype(dtype)
        return self


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> EmbeddingModel:
    """Deterministically construct a model: same (cfg, seed) gives identical weights."""
    cfg.validate()
    rng = np.random.default_rng([seed, 0])
    convs, bns = [], []
    in_ch = cfg.in_channels
    for i, out_ch in enumerate(cfg.conv_channels):
        convs.append(ConvLayer(in_ch, out_ch, rng, dtype, name=f"conv{i}"))
        bns.append(BatchNormLayer(out_ch, dtype, name=f"bn{i}"))
        in_ch = out_ch
    fan_in = int(np.prod(cfg.feature_shape()))
    fc = FCLayer(fan_in, cfg.embedding_dim, rng, dtype, name="fc")
    fc_bn = BatchNormLayer(cfg.embedding_dim, dtype, name="fc_bn")
    frw = FRWLayer(cfg.embedding_dim, cfg.frw_norm_target, dtype) if cfg.frw_enabled else None
    head = SoftmaxHead(cfg.embedding_dim, cfg.num_classes, np.random.default_rng([seed, 1]), dtype)
    centers = CenterTable(cfg.num_classes, cfg.embedding_dim, dtype=dtype)
    return EmbeddingModel(cfg, convs, bns, fc, fc_bn, frw, head, centers)


def embed(model: EmbeddingModel, images, batch_size: int = 256) -> np.ndarray:
    """Embeddings (post-FRW when enabled) in evaluation mode, unnormalized."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    was_training = model.training
    model.eval()
    try:
        chunks = [model(Tensor(data[i:i + batch_size], dtype=model.dtype)).data
                  for i in range(0, data.shape[0], batch_size)]
    finally:
        model.train(was_training)
    if not chunks:
        return np.zeros((0, model.cfg.embedding_dim), dtype=model.dtype)
    return np.concatenate(chunks, axis=0)


def replace_head(model: EmbeddingModel, new_num_classes: int, seed: int = 0) -> EmbeddingModel:
    """Swap in a freshly initialized head and zeroed centers for a new class
    count; every other parameter is left untouched."""
    if new_num_classes < 2:
        raise ContractError(f"a replacement head needs at least 2 classes, got {new_num_classes}")
    dtype = model.dtype
    alpha = model.centers.alpha
    model.head = SoftmaxHead(model.cfg.embedding_dim, new_num_classes, np.random.default_rng([seed, 2]), dtype)
    model.centers = CenterTable(new_num_classes, model.cfg.embedding_dim, alpha=alpha, dtype=dtype)
    model.cfg = replace(model.cfg, num_classes=new_num_classes)
    return model


def checksum(arrays: dict[str, np.ndarray], exclude: tuple[str, ...] = ()) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        if any(name.startswith(e) for e in exclude):
            continue
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def parameter_checksum(model: EmbeddingModel, exclude: tuple[str, ...] = ()) -> str:
    return checksum(model.state_arrays(), exclude)


def backbone_checksum(model: EmbeddingModel) -> str:
    """Checksum of everything except the head and the centers."""
    return parameter_checksum(model, exclude=("head.", "centers"))


# ----------------------------------------------------------------------------
# checkpoints


def atomic_write_bytes(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def serialize(model: EmbeddingModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = model.cfg.to_json().encode()
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    state = model.state_arrays()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save(model: EmbeddingModel, path) -> None:
    atomic_write_bytes(path, serialize(model))


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise TruncatedCheckpointError(f"checkpoint ends at byte {len(self.payload)}, needed {self.pos + n}")
        chunk = self.payload[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(payload: bytes, cfg: ModelConfig | None = None) -> EmbeddingModel:
    r = _Reader(payload)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointVersionError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    (cfg_len,) = r.unpack("<I")
    stored_cfg = ModelConfig.from_json(r.take(cfg_len).decode())
    if cfg is None:
        cfg = stored_cfg
    elif cfg.preset != stored_cfg.preset:
        raise CheckpointConfigError(f"checkpoint was written for preset {stored_cfg.preset!r}, "
                                    f"not {cfg.preset!r}")
    elif cfg.input_mean is None:
        cfg = replace(cfg, input_mean=stored_cfg.input_mean)
    model = build(cfg, seed=0, dtype=np.float32)
    state = model.state_arrays()
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        if name not in state:
            raise CheckpointShapeError(f"checkpoint tensor {name!r} has no counterpart in the model")
        if state[name].shape != tuple(shape):
            raise CheckpointShapeError(f"tensor {name!r}: checkpoint shape {tuple(shape)} "
                                       f"vs model shape {state[name].shape}")
        state[name][...] = arr
        seen.add(name)
    missing = set(state) - seen
    if missing:
        raise TruncatedCheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    return model


def load(path, cfg: ModelConfig | None = None) -> EmbeddingModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read(), cfg)
