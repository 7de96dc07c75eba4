"""Encoder / stacked-hourglass / decoder network with a parallel reconstruction branch.

The network maps a three-channel T1 slice (intensity and two gradients) to a
one-channel T2 estimate.  It is split into parameter groups so the staged
trainer can load, freeze and copy them independently:

    encoder -> sbm1 -> sbm2 -> decoder      (domain adaptation path)
    rm                                      (optional, on the zero-filled T2)

and the two paths are summed elementwise.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, maxpool2d, prelu, upsample_nearest

GROUP_ORDER = ("encoder", "sbm1", "sbm2", "decoder", "rm")
MAX_SBM = 2


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 32
    encoder_blocks: int = 3
    sbm_count: int = 2
    sbm_depth: int = 3
    rm_enabled: bool = True
    rm_layers: int = 4
    rm_channels: int = 16
    input_channels: int = 3
    output_channels: int = 1
    prelu_init: float = 0.25

    def __post_init__(self):
        if not 0 <= self.sbm_count <= MAX_SBM:
            raise ValueError(f"sbm_count must be 0, 1 or 2, got {self.sbm_count}")
        for name in ("base_channels", "encoder_blocks", "sbm_depth", "input_channels", "output_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.rm_enabled and (self.rm_layers < 1 or self.rm_channels < 1):
            raise ValueError("rm_layers and rm_channels must be positive when the RM is enabled")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.encoder_blocks)]

    @property
    def size_multiple(self) -> int:
        """Slice extents must be divisible by this for the pooling pyramid."""
        depth = self.encoder_blocks + (self.sbm_depth if self.sbm_count else 0)
        return 2**depth

    @property
    def groups(self) -> tuple[str, ...]:
        present = ["encoder"]
        present += [f"sbm{i + 1}" for i in range(self.sbm_count)]
        present.append("decoder")
        if self.rm_enabled:
            present.append("rm")
        return tuple(present)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**values)

    def check_slice(self, height: int, width: int) -> None:
        m = self.size_multiple
        if height % m or width % m:
            raise ValueError(
                f"slice size {height}x{width} is not divisible by {m} "
                f"(encoder_blocks={self.encoder_blocks}, sbm_depth={self.sbm_depth}, sbm_count={self.sbm_count})"
            )


class Parameter(Tensor):
    """Trainable tensor with a dotted name and a freeze flag."""

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = frozen


class Layer:
    """Container whose public attributes may be parameters, layers or lists of layers."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            if isinstance(value, Parameter):
                yield prefix + attr, value
            elif isinstance(value, Layer):
                yield from value.named_parameters(f"{prefix}{attr}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


class Conv(Layer):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dtype, zero: bool = False):
        fan_in = cin * k * k
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        if zero:
            weight[...] = 0.0
        self.weight = Parameter(weight.astype(dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))
        self._pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, pad=self._pad)


class PReLU(Layer):
    def __init__(self, channels: int, init: float, dtype):
        self.slope = Parameter(np.full(channels, init, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)


class ConvPair(Layer):
    """conv3x3 -> PReLU -> conv3x3 -> PReLU.  All-zero weights give an all-zero output.

    ``branch=True`` zero-initializes the second conv, for pairs whose output is
    added onto another path (residual bodies, hourglass up path).
    """

    def __init__(self, cin, cout, rng, dtype, slope, branch: bool = False):
        self.conv1 = Conv(cin, cout, 3, rng, dtype)
        self.act1 = PReLU(cout, slope, dtype)
        self.conv2 = Conv(cout, cout, 3, rng, dtype, zero=branch)
        self.act2 = PReLU(cout, slope, dtype)

    def __call__(self, x):
        return self.act2(self.conv2(self.act1(self.conv1(x))))


class ResidualBlock(Layer):
    """:class:`ConvPair` plus a bypass (identity, or 1x1 projection when channels change)."""

    def __init__(self, cin, cout, rng, dtype, slope):
        self.body = ConvPair(cin, cout, rng, dtype, slope, branch=True)
        self.proj = Conv(cin, cout, 1, rng, dtype) if cin != cout else None

    def __call__(self, x):
        bypass = x if self.proj is None else self.proj(x)
        return self.body(x) + bypass


class Encoder(Layer):
    def __init__(self, config: NetworkConfig, rng, dtype):
        chans = config.channels
        cins = [config.input_channels] + chans[:-1]
        self.blocks = [ResidualBlock(ci, co, rng, dtype, config.prelu_init) for ci, co in zip(cins, chans)]

    def __call__(self, x):
        for block in self.blocks:
            x = maxpool2d(block(x))
        return x


class Decoder(Layer):
    def __init__(self, config: NetworkConfig, rng, dtype):
        chans = config.channels
        pairs = [(chans[i], chans[max(i - 1, 0)]) for i in reversed(range(len(chans)))]
        self.blocks = [ResidualBlock(ci, co, rng, dtype, config.prelu_init) for ci, co in pairs]
        self.head = Conv(chans[0], config.output_channels, 3, rng, dtype)

    def __call__(self, x):
        for block in self.blocks:
            x = block(upsample_nearest(x))
        return self.head(x)


class SharpBottleneck(Layer):
    """Hourglass over ``depth`` scales with additive same-scale skips.

    Each scale keeps a residual-block skip of its input, descends through a
    conv pair and a max-pool, and on the way up adds the upsampled, refined
    coarse features onto that skip.  With every weight and bias at zero the
    module is exactly the identity, which is also its state at initialization.
    """

    def __init__(self, channels: int, depth: int, rng, dtype, slope):
        self.skips = [ResidualBlock(channels, channels, rng, dtype, slope) for _ in range(depth)]
        self.down = [ConvPair(channels, channels, rng, dtype, slope) for _ in range(depth)]
        self.bottom = ConvPair(channels, channels, rng, dtype, slope)
        self.up = [ConvPair(channels, channels, rng, dtype, slope, branch=True) for _ in range(depth)]

    def __call__(self, x):
        skips = []
        for skip, down in zip(self.skips, self.down):
            skips.append(skip(x))
            x = maxpool2d(down(x))
        x = self.bottom(x)
        for up, skip in zip(reversed(self.up), reversed(skips)):
            x = up(upsample_nearest(x)) + skip
        return x


class ReconstructionModule(Layer):
    """Full-resolution conv stack on the zero-filled T2 (no pooling, linear last layer)."""

    def __init__(self, config: NetworkConfig, rng, dtype):
        widths = [1] + [config.rm_channels] * (config.rm_layers - 1) + [config.output_channels]
        self.convs = [Conv(ci, co, 3, rng, dtype) for ci, co in zip(widths[:-1], widths[1:])]
        self.acts = [PReLU(co, config.prelu_init, dtype) for co in widths[1:-1]]

    def __call__(self, x):
        for conv, act in zip(self.convs[:-1], self.acts):
            x = act(conv(x))
        return self.convs[-1](x)


class Model:
    """Grouped network; call with ``(t1_channels, undersampled_t2)``."""

    def __init__(self, config: NetworkConfig, groups: dict[str, Layer], dtype):
        self.config = config
        self.groups = groups
        self.dtype = np.dtype(dtype)
        for group, layer in groups.items():
            for name, p in layer.named_parameters(f"{group}."):
                p.name = name

    def __call__(self, t1_channels, undersampled_t2=None) -> Tensor:
        return forward(self, t1_channels, undersampled_t2)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for group, layer in self.groups.items():
            yield from layer.named_parameters(f"{group}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def group_parameters(self, group: str) -> dict[str, Parameter]:
        return dict(self.groups[group].named_parameters(f"{group}."))

    def parameter_count(self, group: str | None = None) -> int:
        params = self.parameters() if group is None else self.group_parameters(group).values()
        return int(sum(p.size for p in params))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, groups) -> None:
        """Freeze every group not listed in ``groups``."""
        groups = set(groups)
        unknown = groups - set(self.groups)
        if unknown:
            raise KeyError(f"model has no groups {sorted(unknown)}")
        for group, layer in self.groups.items():
            for p in layer.parameters():
                p.frozen = group not in groups

    def state(self) -> dict[str, dict[str, np.ndarray]]:
        return {
            group: {name: p.data.copy() for name, p in layer.named_parameters(f"{group}.")}
            for group, layer in self.groups.items()
        }

    def load_group(self, group: str, arrays: dict[str, np.ndarray], source_group: str | None = None) -> None:
        """Copy ``arrays`` (named under ``source_group``) into ``group``; shapes must match."""
        source_group = source_group or group
        params = self.group_parameters(group)
        expected = {name[len(group) + 1 :] for name in params}
        given = {name[len(source_group) + 1 :]: arr for name, arr in arrays.items()}
        if set(given) != expected:
            missing = sorted(expected - set(given))
            extra = sorted(set(given) - expected)
            raise ValueError(f"group {group!r} parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            src = given[name[len(group) + 1 :]]
            if src.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {src.shape} vs model {p.shape}")
            p.data[...] = src


def _group_rng(seed: int, group: str) -> np.random.Generator:
    return np.random.default_rng([seed, GROUP_ORDER.index(group)])


def build_model(config: NetworkConfig = NetworkConfig(), seed: int = 0, dtype=np.float32, slice_shape=None) -> Model:
    """Construct and initialize a model.

    Conv weights are He-normal (fan-in), biases zero, PReLU slopes
    ``config.prelu_init``; the last conv of each additive branch starts at
    zero so residual blocks and hourglasses begin as (projected) identities.  Every group draws from its own generator seeded by
    ``(seed, group)``, so e.g. the encoder is identical with or without SBMs.
    """
    if slice_shape is not None:
        config.check_slice(*slice_shape[-2:])
    groups: dict[str, Layer] = {}
    groups["encoder"] = Encoder(config, _group_rng(seed, "encoder"), dtype)
    width = config.channels[-1]
    for i in range(config.sbm_count):
        name = f"sbm{i + 1}"
        groups[name] = SharpBottleneck(width, config.sbm_depth, _group_rng(seed, name), dtype, config.prelu_init)
    groups["decoder"] = Decoder(config, _group_rng(seed, "decoder"), dtype)
    if config.rm_enabled:
        groups["rm"] = ReconstructionModule(config, _group_rng(seed, "rm"), dtype)
    return Model(config, groups, dtype)


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else Tensor(x.data, dtype=dtype)
    return Tensor(np.asarray(x), dtype=dtype)


def forward(model: Model, t1_channels, undersampled_t2=None) -> Tensor:
    """Predict the T2 intensity channel, ``(1, H, W)`` or ``(N, 1, H, W)``."""
    cfg = model.config
    if cfg.rm_enabled and undersampled_t2 is None:
        raise ValueError("model has a reconstruction module but no undersampled T2 was given")
    if not cfg.rm_enabled and undersampled_t2 is not None:
        raise ValueError("undersampled T2 given to a model without a reconstruction module")
    x = _as_input(t1_channels, model.dtype)
    if x.shape[-3] != cfg.input_channels:
        raise ValueError(f"expected {cfg.input_channels} input channels, got shape {x.shape}")
    cfg.check_slice(*x.shape[-2:])

    h = model.groups["encoder"](x)
    for i in range(cfg.sbm_count):
        h = model.groups[f"sbm{i + 1}"](h)
    out = model.groups["decoder"](h)
    if cfg.rm_enabled:
        us = _as_input(undersampled_t2, model.dtype)
        if us.shape[-2:] != x.shape[-2:] or us.shape[-3] != 1:
            raise ValueError(f"undersampled T2 shape {us.shape} does not match input {x.shape}")
        out = out + model.groups["rm"](us)
    return out
