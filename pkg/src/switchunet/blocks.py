"""Building blocks of the switchable U-Net: CBR, recurrent convolution,
residual projection and additive attention gate.

Each block is a parameter bundle (a dataclass of :class:`Parameter` objects)
plus a pure function evaluating it. Bundles are created with ``create``
classmethods taking a name prefix, so every parameter carries a unique path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Parameter, Tensor


class Bundle:
    """Mixin collecting parameters and normalization buffers recursively."""

    def parameters(self) -> list[Parameter]:
        return list(_walk_params(self))

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return list(_walk_buffers(self))


def _children(obj) -> Iterator:
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, (list, tuple)):
            yield from v
        else:
            yield v


def _walk_params(obj) -> Iterator[Parameter]:
    for v in _children(obj):
        if isinstance(v, Parameter):
            yield v
        elif isinstance(v, Bundle):
            yield from _walk_params(v)


def _walk_buffers(obj) -> Iterator[tuple[str, np.ndarray]]:
    for v in _children(obj):
        if isinstance(v, BatchNormParams):
            yield f"{v.name}.running_mean", v.state.running_mean
            yield f"{v.name}.running_var", v.state.running_var
        elif isinstance(v, Bundle):
            yield from _walk_buffers(v)


@dataclass
class ConvParams(Bundle):
    weight: Parameter
    bias: Optional[Parameter]

    @classmethod
    def create(cls, name, in_ch, out_ch, kernel, rng, dtype=np.float32, bias=True):
        # unit-variance-preserving uniform scaled by fan-in; biases start at zero
        fan_in = in_ch * kernel * kernel
        limit = math.sqrt(3.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(out_ch, in_ch, kernel, kernel)).astype(dtype)
        b = Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.bias") if bias else None
        return cls(Parameter(w, f"{name}.weight"), b)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding="same")


@dataclass
class BatchNormParams(Bundle):
    name: str
    gamma: Parameter
    beta: Parameter
    state: ops.BatchNormState

    @classmethod
    def create(cls, name, channels, dtype=np.float32):
        return cls(
            name,
            Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma"),
            Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta"),
            ops.BatchNormState.create(channels, dtype=dtype),
        )

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.state, mode)


@dataclass
class CbrParams(Bundle):
    conv: ConvParams
    bn: BatchNormParams
    filters: int

    @classmethod
    def create(cls, name, in_ch, filters, rng, dtype=np.float32):
        return cls(
            ConvParams.create(f"{name}.conv", in_ch, filters, 3, rng, dtype),
            BatchNormParams.create(f"{name}.bn", filters, dtype),
            filters,
        )


def cbr_block(x: Tensor, p: CbrParams, mode: str = "train") -> Tensor:
    """Convolution -> batch normalization -> ReLU."""
    if x.shape[1] != p.conv.in_channels:
        raise ShapeError(f"CBR block expects {p.conv.in_channels} channels, got {x.shape[1]}")
    return ops.relu(p.bn(p.conv(x), mode))


@dataclass
class RclParams(Bundle):
    """Recurrent convolutional layer unfolded over ``steps`` time steps.

    ``feedforward`` maps the static input to ``filters`` channels; step ``s``
    (1-based) adds ``recurrent[s - 1]`` applied to the previous state. Each
    unfolded step owns its convolution and normalization, ``norms[0]`` being
    the step-0 normalization.
    """

    feedforward: ConvParams
    recurrent: list[ConvParams]
    norms: list[BatchNormParams]
    filters: int

    @property
    def steps(self) -> int:
        return len(self.recurrent)

    @classmethod
    def create(cls, name, in_ch, filters, rng, steps=2, dtype=np.float32):
        if steps < 0:
            raise ValueError(f"recurrence steps must be >= 0, got {steps}")
        ff = ConvParams.create(f"{name}.ff", in_ch, filters, 3, rng, dtype)
        rec = [ConvParams.create(f"{name}.rec{s}", filters, filters, 3, rng, dtype) for s in range(1, steps + 1)]
        norms = [BatchNormParams.create(f"{name}.bn{s}", filters, dtype) for s in range(steps + 1)]
        return cls(ff, rec, norms, filters)

    def truncated(self, steps: int) -> "RclParams":
        """View of the first ``steps`` unfolded steps (shares parameters)."""
        if not 0 <= steps <= self.steps:
            raise ValueError(f"cannot truncate {self.steps} steps to {steps}")
        return RclParams(self.feedforward, self.recurrent[:steps], self.norms[: steps + 1], self.filters)


def rcl_step(feed: Tensor, prev: Tensor, p: RclParams, step: int, mode: str = "train") -> Tensor:
    """One recurrence update ``relu(bn(feed + w_r * prev))`` for ``step >= 1``.

    ``feed`` is the (bias-included) feedforward response of the static input.
    """
    if not 1 <= step <= p.steps:
        raise ValueError(f"step must lie in [1, {p.steps}], got {step}")
    z = ops.add(feed, p.recurrent[step - 1](prev))
    return ops.relu(p.norms[step](z, mode))


def rcl_block(u: Tensor, p: RclParams, mode: str = "train") -> Tensor:
    if u.shape[1] != p.feedforward.in_channels:
        raise ShapeError(f"RCL expects {p.feedforward.in_channels} channels, got {u.shape[1]}")
    # the input is static, so its feedforward response is shared by all steps
    feed = p.feedforward(u)
    x = ops.relu(p.norms[0](feed, mode))
    for s in range(1, p.steps + 1):
        x = rcl_step(feed, x, p, s, mode)
    return x


def residual_filter_count(base_filter: int, max_a: int) -> int:
    """Output channels of the residual projection for a level whose last set is ``max_a``."""
    if base_filter < 1:
        raise ValueError(f"base filter must be positive, got {base_filter}")
    if max_a < 0:
        raise ValueError(f"max set index must be >= 0, got {max_a}")
    if max_a == 0:
        return base_filter
    return base_filter * 2 ** (max_a - 1)


def doubled_filters(f_l1: int, fd_enabled: bool) -> int:
    if f_l1 < 1:
        raise ValueError(f"filter count must be positive, got {f_l1}")
    return 2 * f_l1 if fd_enabled else f_l1


@dataclass
class ResidualParams(Bundle):
    projection: ConvParams

    @classmethod
    def create(cls, name, in_ch, out_ch, rng, dtype=np.float32):
        return cls(ConvParams.create(f"{name}.proj", in_ch, out_ch, 1, rng, dtype))


def residual_wrap(s_l0: Tensor, s_l2: Tensor, p: ResidualParams) -> Tensor:
    """1x1 projection of the level input added to the level's last feature set."""
    if s_l0.shape[2:] != s_l2.shape[2:] or s_l0.shape[0] != s_l2.shape[0]:
        raise ShapeError(f"residual inputs differ spatially: {s_l0.shape} vs {s_l2.shape}")
    if p.projection.in_channels != s_l0.shape[1] or p.projection.out_channels != s_l2.shape[1]:
        raise ShapeError(
            f"projection {p.projection.in_channels}->{p.projection.out_channels} "
            f"cannot map {s_l0.shape[1]} onto {s_l2.shape[1]} channels"
        )
    return ops.add(p.projection(s_l0), s_l2)


@dataclass
class AttentionGateParams(Bundle):
    theta_x: Parameter
    phi_g: Parameter
    b_g: Parameter
    psi: Parameter
    b_psi: Parameter

    @property
    def intermediate(self) -> int:
        return self.theta_x.shape[0]

    @classmethod
    def create(cls, name, f_l, f_g, rng, dtype=np.float32):
        f_int = -(-f_l // 2)
        theta = ConvParams.create(f"{name}.theta_x", f_l, f_int, 1, rng, dtype, bias=False)
        phi = ConvParams.create(f"{name}.phi_g", f_g, f_int, 1, rng, dtype)
        psi = ConvParams.create(f"{name}.psi", f_int, 1, 1, rng, dtype)
        phi.bias.name = f"{name}.b_g"
        psi.bias.name = f"{name}.b_psi"
        return cls(theta.weight, phi.weight, phi.bias, psi.weight, psi.bias)


def attention_gate(x: Tensor, g: Tensor, p: AttentionGateParams, return_alpha: bool = False):
    """Additive attention: scale skip features ``x`` by a one-channel map
    computed from ``x`` and the gating signal ``g`` (same resolution)."""
    if x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
        raise ShapeError(f"skip {x.shape} and gating signal {g.shape} differ spatially")
    if x.shape[1] != p.theta_x.shape[1] or g.shape[1] != p.phi_g.shape[1]:
        raise ShapeError(
            f"gate expects {p.theta_x.shape[1]}/{p.phi_g.shape[1]} channels, "
            f"got {x.shape[1]}/{g.shape[1]}"
        )
    inter = ops.add(
        ops.conv2d(x, p.theta_x, None, padding="same"),
        ops.conv2d(g, p.phi_g, p.b_g, padding="same"),
    )
    q = ops.conv2d(ops.relu(inter), p.psi, p.b_psi, padding="same")
    alpha = ops.sigmoid(q)
    out = ops.mul(x, alpha)
    return (out, alpha) if return_alpha else out
