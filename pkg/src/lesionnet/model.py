"""Hybrid conv/attention classifier: stem, MBConv stages, transformer stages, head."""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ConfigError, FormatError, IntegrityError, ShapeError
from .layers import EXPANSION, MBConvParams, RunningStats, TransformerParams
from .tensor import Tensor

STAGE_KINDS = ("conv-stem", "mbconv", "transformer")
MAGIC = b"CATN"
# Pooled residual-stream features carry a large shared offset; a fan-in scaled
# head would start far from uniform predictions.
HEAD_INIT_STD = 0.01
FORMAT_VERSION = 1


@dataclass(frozen=True)
class StageSpec:
    kind: str
    blocks: int
    channels: int
    stride: int = 1


DESK_STAGES = (
    StageSpec("conv-stem", 1, 8, 2),
    StageSpec("mbconv", 2, 16, 2),
    StageSpec("transformer", 2, 16, 2),
)


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (3, 32, 32)
    stages: tuple = DESK_STAGES
    num_classes: int = 7
    seed: int = 0
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)

    def validate(self) -> "ModelConfig":
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ConfigError(f"input size must be (channels, height, width), got {self.input_size}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.stages or self.stages[0].kind != "conv-stem":
            raise ConfigError("first stage must be conv-stem")
        seen_mbconv = False
        for i, s in enumerate(self.stages):
            if s.kind not in STAGE_KINDS:
                raise ConfigError(f"stage {i}: unknown kind {s.kind!r}")
            if s.kind == "conv-stem" and i != 0:
                raise ConfigError("conv-stem may only appear first")
            if s.kind == "mbconv":
                seen_mbconv = True
            if s.kind == "transformer" and not seen_mbconv:
                raise ConfigError("an mbconv stage must precede the first transformer stage")
            if s.blocks < 1 or s.channels < 1 or s.stride not in (1, 2):
                raise ConfigError(f"stage {i}: invalid spec {s}")
        self.spatial_sizes()
        return self

    def spatial_sizes(self) -> list:
        """(height, width) after each stage."""
        _, h, w = self.input_size
        sizes = []
        for i, s in enumerate(self.stages):
            if s.stride == 2:
                if s.kind == "transformer":
                    if h % 2 or w % 2 or h < 2 or w < 2:
                        raise ConfigError(f"stage {i}: transformer downsampling needs even size, got {h}x{w}")
                    h, w = h // 2, w // 2
                else:
                    h, w = math.ceil(h / 2), math.ceil(w / 2)
            sizes.append((h, w))
        return sizes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d.get("stages", ()))
        return cls(**d)


def format_stages(stages) -> str:
    return ",".join(f"{s.kind}:{s.blocks}:{s.channels}:{s.stride}" for s in stages)


def parse_stages(text: str) -> tuple:
    out = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 4:
            raise ConfigError(f"stage spec {item!r} is not kind:blocks:channels:stride")
        try:
            out.append(StageSpec(parts[0], int(parts[1]), int(parts[2]), int(parts[3])))
        except ValueError:
            raise ConfigError(f"stage spec {item!r} has non-integer fields") from None
    return tuple(out)


@dataclass
class StemParams:
    conv: Tensor
    bn_scale: Tensor
    bn_shift: Tensor
    stride: int = 1
    bn_stats: RunningStats = None

    def __post_init__(self):
        if self.bn_stats is None:
            self.bn_stats = RunningStats.fresh(self.conv.shape[0])


class Model:
    """A built classifier.  Parameters live in :attr:`params` under canonical names."""

    def __init__(self, config: ModelConfig, blocks: list, head_weight: Tensor, head_bias: Tensor):
        self.config = config
        self.blocks = blocks  # [(name, kind, params)]
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.features: Optional[Tensor] = None
        mb = [name for name, kind, _ in blocks if kind == "mbconv"]
        self.hook_name: Optional[str] = mb[-1] if mb else None

    @property
    def params(self) -> dict:
        out = {}
        for name, _, p in self.blocks:
            for f in dataclasses.fields(p):
                v = getattr(p, f.name)
                if isinstance(v, Tensor):
                    out[f"{name}.{f.name}"] = v
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def state(self) -> dict:
        """Parameters plus running statistics, as named float64 arrays."""
        out = {}
        for name, _, p in self.blocks:
            for f in dataclasses.fields(p):
                v = getattr(p, f.name)
                if isinstance(v, Tensor):
                    out[f"{name}.{f.name}"] = v.data
                elif isinstance(v, RunningStats):
                    base = f.name[: -len("_stats")]
                    out[f"{name}.{base}_mean"] = v.mean
                    out[f"{name}.{base}_var"] = v.var
        out["head.weight"] = self.head_weight.data
        out["head.bias"] = self.head_bias.data
        return out

    def load_state(self, state: dict):
        for name, _, p in self.blocks:
            for f in dataclasses.fields(p):
                v = getattr(p, f.name)
                if isinstance(v, Tensor):
                    v.data = np.array(state[f"{name}.{f.name}"], dtype=np.float64)
                elif isinstance(v, RunningStats):
                    base = f.name[: -len("_stats")]
                    v.mean = np.array(state[f"{name}.{base}_mean"], dtype=np.float64)
                    v.var = np.array(state[f"{name}.{base}_var"], dtype=np.float64)
        self.head_weight.data = np.array(state["head.weight"], dtype=np.float64)
        self.head_bias.data = np.array(state["head.bias"], dtype=np.float64)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def forward(self, batch, training: bool = False, record: Optional[bool] = None) -> Tensor:
        """Logits ``[B, num_classes]``.

        ``record`` defaults to ``training``; Grad-CAM runs with statistics
        frozen (``training=False``) but the graph recorded.
        """
        record = training if record is None else record
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != self.config.input_size:
            raise ShapeError(f"batch {list(x.shape)} does not match input size {list(self.config.input_size)}")
        if record:
            return self._forward(x, training)
        with T.no_grad():
            return self._forward(x, training)

    __call__ = forward

    def _forward(self, x: Tensor, training: bool) -> Tensor:
        act = self.config.activation
        self.features = None
        for name, kind, p in self.blocks:
            if kind == "conv-stem":
                x = L.conv2d(x, p.conv, stride=p.stride)
                x = L.normalize(x, "channel-stat", p.bn_scale, p.bn_shift, training=training, running=p.bn_stats)
                x = T.activation(x, act)
            elif kind == "mbconv":
                x = L.mbconv_block(x, p, training=training, act=act)
            else:
                x = L.transformer_block(x, p, act=act)
            if name == self.hook_name:
                self.features = x
        pooled = L.pool2d(x, "global-avg")
        pooled = T.reshape(pooled, pooled.shape[:2])
        return L.linear(pooled, self.head_weight, self.head_bias)


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _ones(n):
    return Tensor(np.ones(n), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n), requires_grad=True)


def build_model(config: ModelConfig) -> Model:
    """Initialize every parameter from a generator seeded by ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    c = config.input_size[0]
    blocks = []
    for i, stage in enumerate(config.stages):
        for j in range(stage.blocks):
            stride = stage.stride if j == 0 else 1
            name = f"stage{i}.block{j}"
            co = stage.channels
            if stage.kind == "conv-stem":
                p = StemParams(_he(rng, (co, c, 3, 3), c * 9), _ones(co), _zeros(co), stride)
            elif stage.kind == "mbconv":
                hid = EXPANSION * c
                shortcut = _he(rng, (co, c), c) if (stride != 1 or co != c) else None
                p = MBConvParams(
                    expand=_he(rng, (hid, c), c),
                    bn1_scale=_ones(hid),
                    bn1_shift=_zeros(hid),
                    depthwise=_he(rng, (hid, 3, 3), 9),
                    bn2_scale=_ones(hid),
                    bn2_shift=_zeros(hid),
                    project=_he(rng, (co, hid), hid),
                    shortcut=shortcut,
                    stride=stride,
                )
            else:
                proj = _he(rng, (co, c), c) if co != c else None
                hid = EXPANSION * co
                p = TransformerParams(
                    ln1_scale=_ones(co),
                    ln1_shift=_zeros(co),
                    ln2_scale=_ones(co),
                    ln2_shift=_zeros(co),
                    ff1=_he(rng, (hid, co), co),
                    ff1_bias=_zeros(hid),
                    ff2=_he(rng, (co, hid), hid),
                    ff2_bias=_zeros(co),
                    proj=proj,
                    stride=stride,
                )
            blocks.append((name, stage.kind, p))
            c = co
    head_w = Tensor(rng.normal(0.0, HEAD_INIT_STD, size=(config.num_classes, c)), requires_grad=True)
    return Model(config, blocks, head_w, _zeros(config.num_classes))


def forward(model: Model, batch, training: bool = False) -> Tensor:
    return model.forward(batch, training=training)


def predict_proba(model: Model, image) -> np.ndarray:
    """Class probabilities for a single ``[C, H, W]`` image."""
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"predict_proba takes one [C,H,W] image, got {list(x.shape)}")
    logits = model.forward(x[None]).data[0]
    return T.softmax_array(logits, 0)


# -- checkpoint -------------------------------------------------------------


def checkpoint_bytes(model: Model, meta: Optional[dict] = None) -> bytes:
    blob = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    state = model.state()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, with_meta: bool = False):
    """Rebuild a model from a checkpoint file; optionally also return its metadata."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError("bad checkpoint magic")
    version, blob_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        blob = json.loads(r.take(blob_len).decode())
        config = ModelConfig.from_dict(blob["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable config blob: {exc}") from None
    try:
        model = build_model(config)
    except ConfigError as exc:
        raise IntegrityError(f"checkpoint config is invalid: {exc}") from None
    expected = {k: v.shape for k, v in model.state().items()}
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise IntegrityError(f"checkpoint holds {count} tensors, config implies {len(expected)}")
    state = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode(errors="replace")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        if name not in expected or name in state:
            raise IntegrityError(f"unexpected tensor {name!r}")
        if tuple(dims) != expected[name]:
            raise IntegrityError(f"{name}: shape {list(dims)} but config implies {list(expected[name])}")
        n = math.prod(dims)
        state[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float64)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after checkpoint tensors")
    model.load_state(state)
    return (model, blob.get("meta", {})) if with_meta else model
