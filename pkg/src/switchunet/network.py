"""Switch-configured U-Net assembly, parameter accounting and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import ops
from .blocks import (
    AttentionGateParams,
    Bundle,
    CbrParams,
    ConvParams,
    RclParams,
    ResidualParams,
    attention_gate,
    cbr_block,
    doubled_filters,
    rcl_block,
    residual_filter_count,
    residual_wrap,
)
from .errors import CheckpointError, ConfigurationError, ShapeError
from .tensor import Parameter, Tensor

SET_KINDS = ("cbr", "recurrent")
PAPER_BASE = (64, 128, 256, 512, 1024)
REDUCED_BASE = (32, 64, 128, 256, 512)


@dataclass(frozen=True)
class SwitchConfig:
    """Switch settings that fully determine a network.

    ``set_kinds`` gives the block used for feature sets A=1 and A=2 of every
    level: ``"cbr"`` (SW_C) or ``"recurrent"`` (SW_R).
    """

    sw_rs: bool = True
    sw_a: bool = False
    sw_fd: bool = False
    set_kinds: tuple[str, str] = ("cbr", "recurrent")
    recurrence_steps: int = 2
    base_filters: tuple[int, ...] = PAPER_BASE
    num_classes: int = 2
    input_channels: int = 1

    @property
    def depth(self) -> int:
        return len(self.base_filters)

    def validate(self) -> "SwitchConfig":
        if len(self.set_kinds) != 2 or any(k not in SET_KINDS for k in self.set_kinds):
            raise ConfigurationError(f"each set must be one of {SET_KINDS}, got {self.set_kinds}")
        if self.recurrence_steps < 0:
            raise ConfigurationError("recurrence_steps must be >= 0")
        if not self.base_filters or any(f < 1 for f in self.base_filters):
            raise ConfigurationError(f"base filters must be positive, got {self.base_filters}")
        for a, b in zip(self.base_filters, self.base_filters[1:]):
            ratio = b // a
            if b <= a or b % a or ratio & (ratio - 1):
                raise ConfigurationError(
                    f"base filters must increase by powers of two, got {self.base_filters}"
                )
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.input_channels < 1:
            raise ConfigurationError("input_channels must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["set_kinds"] = list(self.set_kinds)
        d["base_filters"] = list(self.base_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SwitchConfig":
        d = dict(d)
        if "set_kinds" in d:
            d["set_kinds"] = tuple(d["set_kinds"])
        if "base_filters" in d:
            d["base_filters"] = tuple(d["base_filters"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown switch fields: {sorted(unknown)}")
        return cls(**d).validate()


_NAMED = {
    "attention-unet": dict(sw_rs=False, sw_a=True, sw_fd=False, set_kinds=("cbr", "cbr"), base_filters=PAPER_BASE),
    "r2u-net": dict(sw_rs=True, sw_a=False, sw_fd=False, set_kinds=("recurrent", "recurrent"), base_filters=PAPER_BASE),
    "s-r2u-net": dict(sw_rs=True, sw_a=False, sw_fd=False, set_kinds=("cbr", "recurrent"), base_filters=PAPER_BASE),
    "s-r2f2u-net": dict(sw_rs=True, sw_a=False, sw_fd=True, set_kinds=("cbr", "recurrent"), base_filters=REDUCED_BASE),
    "s-r2f2-attn-u-net": dict(sw_rs=True, sw_a=True, sw_fd=True, set_kinds=("cbr", "recurrent"), base_filters=REDUCED_BASE),
}
MODEL_NAMES = tuple(_NAMED)


def named_config(name: str, **overrides) -> SwitchConfig:
    """Preset switch configuration; keyword overrides replace preset fields."""
    key = name.lower()
    if key not in _NAMED:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    params = {**_NAMED[key], **overrides}
    return SwitchConfig.from_dict(params)


@dataclass
class LevelParams(Bundle):
    """Feature sets A=1, A=2 of one level plus the optional residual projection."""

    set1: Union[CbrParams, RclParams]
    set2: Union[CbrParams, RclParams]
    residual: Optional[ResidualParams]
    in_channels: int
    f_l1: int
    f_l2: int


@dataclass
class DecoderLevelParams(Bundle):
    up: ConvParams
    gate: Optional[AttentionGateParams]
    level: LevelParams


def _make_set(kind, name, in_ch, out_ch, cfg, rng, dtype):
    if kind == "cbr":
        return CbrParams.create(name, in_ch, out_ch, rng, dtype)
    return RclParams.create(name, in_ch, out_ch, rng, cfg.recurrence_steps, dtype)


def _make_level(name, in_ch, base, cfg, rng, dtype) -> LevelParams:
    f_l1 = base
    f_l2 = doubled_filters(f_l1, cfg.sw_fd)
    set1 = _make_set(cfg.set_kinds[0], f"{name}.set1", in_ch, f_l1, cfg, rng, dtype)
    set2 = _make_set(cfg.set_kinds[1], f"{name}.set2", f_l1, f_l2, cfg, rng, dtype)
    residual = None
    if cfg.sw_rs:
        out = residual_filter_count(base, 2) if cfg.sw_fd else f_l2
        if out != f_l2:
            raise ConfigurationError(f"{name}: residual projection {out} != last set width {f_l2}")
        residual = ResidualParams.create(f"{name}.res", in_ch, out, rng, dtype)
    return LevelParams(set1, set2, residual, in_ch, f_l1, f_l2)


def _apply_set(x, p, mode):
    return cbr_block(x, p, mode) if isinstance(p, CbrParams) else rcl_block(x, p, mode)


def _apply_level(x, p: LevelParams, mode):
    s1 = _apply_set(x, p.set1, mode)
    s2 = _apply_set(s1, p.set2, mode)
    return residual_wrap(x, s2, p.residual) if p.residual is not None else s2


class Network:
    """Encoder-decoder network assembled from a :class:`SwitchConfig`."""

    def __init__(self, cfg: SwitchConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.encoder: list[LevelParams] = []
        ch = cfg.input_channels
        for L, base in enumerate(cfg.base_filters):
            lvl = _make_level(f"enc{L}", ch, base, cfg, rng, self.dtype)
            self.encoder.append(lvl)
            ch = lvl.f_l2
        self.decoder: list[DecoderLevelParams] = []
        for L in range(cfg.depth - 2, -1, -1):
            skip = self.encoder[L].f_l2
            up = ConvParams.create(f"dec{L}.up", ch, ch, 3, rng, self.dtype)
            gate = AttentionGateParams.create(f"dec{L}.att", skip, ch, rng, self.dtype) if cfg.sw_a else None
            lvl = _make_level(f"dec{L}", skip + ch, cfg.base_filters[L], cfg, rng, self.dtype)
            self.decoder.append(DecoderLevelParams(up, gate, lvl))
            ch = lvl.f_l2
        self.head = ConvParams.create("head", ch, cfg.num_classes, 1, rng, self.dtype)
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate parameter names in assembled network")

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for lvl in self.encoder:
            out += lvl.parameters()
        for dec in self.decoder:
            out += dec.parameters()
        out += self.head.parameters()
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for lvl in self.encoder:
            out += lvl.buffers()
        for dec in self.decoder:
            out += dec.buffers()
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def check_input(self, batch: Tensor) -> None:
        if batch.ndim != 4:
            raise ShapeError(f"batch must be (n, c, h, w), got {batch.shape}")
        if batch.shape[1] != self.cfg.input_channels:
            raise ShapeError(f"expected {self.cfg.input_channels} input channels, got {batch.shape[1]}")
        k = 2 ** (self.cfg.depth - 1)
        if batch.shape[2] % k or batch.shape[3] % k:
            raise ShapeError(f"spatial size {batch.shape[2:]} must be divisible by {k}")

    def forward(self, batch: Tensor, mode: str = "infer", features: Optional[dict] = None) -> Tensor:
        """Per-pixel class probabilities for ``batch``.

        If ``features`` is a dict, each decoder level's output is stored in it
        under ``"decoder-<k>"`` (k = 1 for the deepest decoder level).
        """
        self.check_input(batch)
        if batch.dtype != self.dtype:
            batch = Tensor(batch.data.astype(self.dtype))
        skips = []
        x = batch
        for L, lvl in enumerate(self.encoder):
            if L > 0:
                x = ops.maxpool2(x)
            x = _apply_level(x, lvl, mode)
            skips.append(x)
        for k, dec in enumerate(self.decoder, start=1):
            L = self.cfg.depth - 1 - k
            g = ops.relu(dec.up(ops.upsample2(x)))
            skip = skips[L]
            if dec.gate is not None:
                skip = attention_gate(skip, g, dec.gate)
            x = _apply_level(ops.concat_channels(skip, g), dec.level, mode)
            if features is not None:
                features[f"decoder-{k}"] = x
        return ops.softmax_channels(self.head(x))

    __call__ = forward


def build_network(cfg: SwitchConfig, seed: int = 0, dtype=np.float32) -> Network:
    return Network(cfg, seed=seed, dtype=dtype)


def forward(net: Network, batch: Tensor, mode: str = "infer") -> Tensor:
    return net.forward(batch, mode)


def count_parameters(net_or_bundle) -> int:
    """Trainable element count (running statistics excluded)."""
    return int(sum(p.data.size for p in net_or_bundle.parameters()))


def _bundle_count(b) -> int:
    return 0 if b is None else count_parameters(b)


@dataclass
class LayerRow:
    name: str
    output_shape: tuple
    params: int


def summary(net: Network, height: int = 512, width: int = 512, batch: int = 1) -> list[LayerRow]:
    """Per-layer output shapes and parameter counts, derived without a forward pass."""
    cfg = net.cfg
    k = 2 ** (cfg.depth - 1)
    if height % k or width % k:
        raise ShapeError(f"spatial size {height}x{width} must be divisible by {k}")
    rows: list[LayerRow] = []
    h, w = height, width
    for L, lvl in enumerate(net.encoder):
        if L > 0:
            h, w = h // 2, w // 2
            rows.append(LayerRow(f"enc{L}.pool", (batch, net.encoder[L - 1].f_l2, h, w), 0))
        rows.append(LayerRow(f"enc{L}.set1", (batch, lvl.f_l1, h, w), _bundle_count(lvl.set1)))
        rows.append(LayerRow(f"enc{L}.set2", (batch, lvl.f_l2, h, w), _bundle_count(lvl.set2)))
        if lvl.residual is not None:
            rows.append(LayerRow(f"enc{L}.res", (batch, lvl.f_l2, h, w), _bundle_count(lvl.residual)))
    for k_, dec in enumerate(net.decoder, start=1):
        L = cfg.depth - 1 - k_
        h, w = h * 2, w * 2
        rows.append(LayerRow(f"dec{L}.up", (batch, dec.up.out_channels, h, w), _bundle_count(dec.up)))
        if dec.gate is not None:
            rows.append(LayerRow(f"dec{L}.att", (batch, net.encoder[L].f_l2, h, w), _bundle_count(dec.gate)))
        lvl = dec.level
        rows.append(LayerRow(f"dec{L}.concat", (batch, lvl.in_channels, h, w), 0))
        rows.append(LayerRow(f"dec{L}.set1", (batch, lvl.f_l1, h, w), _bundle_count(lvl.set1)))
        rows.append(LayerRow(f"dec{L}.set2", (batch, lvl.f_l2, h, w), _bundle_count(lvl.set2)))
        if lvl.residual is not None:
            rows.append(LayerRow(f"dec{L}.res", (batch, lvl.f_l2, h, w), _bundle_count(lvl.residual)))
    rows.append(LayerRow("head", (batch, cfg.num_classes, h, w), _bundle_count(net.head)))
    return rows


def format_summary(rows: list[LayerRow]) -> str:
    lines = [f"{'layer':<16}{'output shape':<26}{'params':>12}"]
    for r in rows:
        lines.append(f"{r.name:<16}{str(r.output_shape):<26}{r.params:>12,}")
    total = sum(r.params for r in rows)
    lines.append(f"{'total':<16}{'':<26}{total:>12,}")
    lines.append(f"total parameters: {total} ({total / 1e6:.2f}M)")
    return "\n".join(lines)


# Checkpoint layout (little endian):
#   b"SRUN" | u32 version | u32 entry count | u64 trainable element count
#   per entry: u32 name length | name (utf-8) | u32 rank | u32 dims[rank] | f32 payload
MAGIC = b"SRUN"
VERSION = 1


def _entries(net: Network) -> list[tuple[str, np.ndarray]]:
    return [(p.name, p.data) for p in net.parameters()] + net.buffers()


def save_weights(net: Network, path) -> None:
    entries = _entries(net)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", VERSION, len(entries), count_parameters(net)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


@dataclass
class CheckpointHeader:
    version: int
    entries: int
    trainable: int


def read_checkpoint(path) -> tuple[CheckpointHeader, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count, trainable = struct.unpack_from("<IIQ", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IIQ")
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return CheckpointHeader(version, count, trainable), arrays


def load_weights(net: Network, path) -> None:
    """Load values and running statistics; the file must match the registry exactly."""
    _, arrays = read_checkpoint(path)
    targets = _entries(net)
    for name, arr in targets:
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing '{name}'")
        if arrays[name].shape != arr.shape:
            raise CheckpointError(f"'{name}': checkpoint shape {arrays[name].shape} != network shape {arr.shape}")
    known = {name for name, _ in targets}
    for name in arrays:
        if name not in known:
            raise CheckpointError(f"checkpoint has unexpected entry '{name}'")
    for name, arr in targets:
        arr[...] = arrays[name]
