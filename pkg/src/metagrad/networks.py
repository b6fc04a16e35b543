"""Architecture descriptions and the forward pass they induce.

An `ArchitectureSpec` is a frozen value object describing a small
convolutional classifier: a stack of conv blocks (each optionally
followed by a non-overlapping maxpool), a flatten or global-average-pool
head, and an optional hidden dense layer.  The spec induces both the
parameter layout (a fixed declaration order used by serialization) and
the differentiable forward pass.

Inputs are pixels in [0,255]; the first forward op rescales them to
[-1,1] so training behaves, while attack gradients still arrive in
pixel units through the chain rule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

PIXEL_SCALE = 1.0 / 127.5
PIXEL_SHIFT = -1.0


@dataclass(frozen=True)
class ConvBlock:
    """One conv3x3-style block: conv(channels, kernel) + relu [+ maxpool]."""

    channels: int
    kernel: int = 3
    pool: int = 1  # maxpool window after the block; 1 means no pooling

    def validate(self):
        if self.channels < 1:
            raise ConfigError(f"block channels must be positive, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(
                f"block kernel must be odd for same padding, got {self.kernel}"
            )
        if self.pool < 1:
            raise ConfigError(f"block pool must be >= 1, got {self.pool}")


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    blocks: tuple
    head: str = "flatten"  # "flatten" or "gap"
    hidden: int = 0  # dense head width; 0 feeds the logits directly
    in_channels: int = 3
    image_size: int = 16
    classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.head not in ("flatten", "gap"):
            raise ConfigError(f"unknown head kind: {self.head!r}")
        if self.hidden < 0:
            raise ConfigError(f"hidden width must be >= 0, got {self.hidden}")
        if not self.blocks:
            raise ConfigError("architecture needs at least one conv block")
        size = self.image_size
        for blk in self.blocks:
            blk.validate()
            if blk.pool > 1:
                if size % blk.pool != 0:
                    raise ConfigError(
                        f"pool {blk.pool} does not divide spatial extent {size} "
                        f"in architecture {self.name!r}"
                    )
                size //= blk.pool

    # -- derived geometry ---------------------------------------------------

    def feature_shape(self) -> tuple:
        """(channels, side) after the last block."""
        size = self.image_size
        channels = self.in_channels
        for blk in self.blocks:
            channels = blk.channels
            if blk.pool > 1:
                size //= blk.pool
        return channels, size

    def head_width(self) -> int:
        channels, size = self.feature_shape()
        return channels if self.head == "gap" else channels * size * size

    def parameter_layout(self) -> list:
        """[(name, shape)] in declaration order; serialization follows it."""
        layout = []
        channels = self.in_channels
        for i, blk in enumerate(self.blocks):
            layout.append(
                (f"conv{i}.kernel", (blk.channels, channels, blk.kernel, blk.kernel))
            )
            layout.append((f"conv{i}.bias", (blk.channels,)))
            channels = blk.channels
        width = self.head_width()
        if self.hidden:
            layout.append(("hidden.weights", (width, self.hidden)))
            layout.append(("hidden.bias", (self.hidden,)))
            width = self.hidden
        layout.append(("output.weights", (width, self.classes)))
        layout.append(("output.bias", (self.classes,)))
        return layout

    def parameter_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.parameter_layout())

    # -- canonical text form --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "blocks": [
                {"channels": b.channels, "kernel": b.kernel, "pool": b.pool}
                for b in self.blocks
            ],
            "head": self.head,
            "hidden": self.hidden,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "classes": self.classes,
        }

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(
            name=d["name"],
            blocks=tuple(
                ConvBlock(b["channels"], b["kernel"], b["pool"]) for b in d["blocks"]
            ),
            head=d["head"],
            hidden=d["hidden"],
            in_channels=d["in_channels"],
            image_size=d["image_size"],
            classes=d["classes"],
        )


def init_parameters(spec: ArchitectureSpec, rng: np.random.Generator) -> dict:
    """Seeded uniform fan-in init: weights ~ U(+-sqrt(3/fan_in)), so the
    empirical variance lands on 1/fan_in; biases start at zero."""
    params = {}
    for name, shape in spec.parameter_layout():
        if name.endswith(".bias"):
            params[name] = ad.tensor(np.zeros(shape, dtype=np.float32))
        else:
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            bound = float(np.sqrt(3.0 / fan_in))
            values = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            params[name] = ad.tensor(values)
    return params


def forward(spec: ArchitectureSpec, params: dict, x: ad.Tensor) -> ad.Tensor:
    """Differentiable logits for a [B,C,H,W] pixel-domain input."""
    h = ad.affine(x, PIXEL_SCALE, PIXEL_SHIFT)
    for i, blk in enumerate(spec.blocks):
        h = ad.conv2d(h, params[f"conv{i}.kernel"], stride=1, padding=blk.kernel // 2)
        h = ad.bias_add_channel(h, params[f"conv{i}.bias"])
        h = ad.relu(h)
        if blk.pool > 1:
            h = ad.maxpool2d(h, blk.pool)
    if spec.head == "gap":
        h = ad.avgpool_global(h)
    else:
        h = ad.reshape(h, (h.data.shape[0], -1))
    if spec.hidden:
        h = ad.relu(ad.dense(h, params["hidden.weights"], params["hidden.bias"]))
    return ad.dense(h, params["output.weights"], params["output.bias"])


# Registry of the tiny architectures used by the stock zoo.  All stay far
# under 100k parameters and differ pairwise in depth, width, kernel size,
# pooling scheme, or head so transfer between them is non-trivial.
ARCHITECTURES = {
    spec.name: spec
    for spec in [
        ArchitectureSpec("slim8", (ConvBlock(8, 3, 2), ConvBlock(24, 3, 2))),
        ArchitectureSpec("wide32", (ConvBlock(32, 3, 2), ConvBlock(32, 3, 2))),
        ArchitectureSpec(
            "deep3", (ConvBlock(8, 3, 2), ConvBlock(16, 3, 1), ConvBlock(16, 3, 2))
        ),
        ArchitectureSpec(
            "deep4",
            (
                ConvBlock(8, 3, 1),
                ConvBlock(8, 3, 2),
                ConvBlock(16, 3, 1),
                ConvBlock(16, 3, 2),
            ),
        ),
        ArchitectureSpec("kern5", (ConvBlock(12, 5, 2), ConvBlock(24, 3, 2))),
        ArchitectureSpec(
            "gap32",
            (ConvBlock(32, 3, 2), ConvBlock(32, 3, 2), ConvBlock(32, 3, 1)),
            head="gap",
        ),
        ArchitectureSpec("densehead", (ConvBlock(16, 3, 2),), hidden=48),
        ArchitectureSpec(
            "wide24h", (ConvBlock(24, 3, 2), ConvBlock(24, 3, 2)), hidden=32
        ),
        ArchitectureSpec("slim12", (ConvBlock(12, 3, 2), ConvBlock(20, 3, 2))),
        ArchitectureSpec("wide28", (ConvBlock(28, 3, 2), ConvBlock(28, 3, 2))),
        ArchitectureSpec(
            "gap20",
            (ConvBlock(20, 3, 2), ConvBlock(20, 3, 2), ConvBlock(20, 3, 1)),
            head="gap",
        ),
        ArchitectureSpec(
            "kern5h", (ConvBlock(10, 5, 2), ConvBlock(20, 3, 2)), hidden=40
        ),
        ArchitectureSpec("gap16", (ConvBlock(16, 3, 2), ConvBlock(16, 3, 2)), head="gap"),
        ArchitectureSpec("wide36", (ConvBlock(36, 3, 2), ConvBlock(36, 3, 2))),
        ArchitectureSpec(
            "gap24",
            (ConvBlock(24, 3, 2), ConvBlock(24, 3, 2), ConvBlock(24, 3, 1)),
            head="gap",
        ),
    ]
}


def get_architecture(name_or_spec) -> ArchitectureSpec:
    if isinstance(name_or_spec, ArchitectureSpec):
        return name_or_spec
    try:
        return ARCHITECTURES[name_or_spec]
    except KeyError:
        raise ConfigError(
            f"unknown architecture {name_or_spec!r}; known: "
            f"{sorted(ARCHITECTURES)}"
        ) from None
