"""The six segmentation architectures built on one shared trunk design.

All variants use the same encoder-decoder backbone: per level a
DoubleConvBlock, 2x maxpool on the way down, nearest-upsample + 3x3 conv
on the way up, skip concatenation at equal depth, final 1x1 conv +
sigmoid. They differ in what runs beside the image branch:

- unet: nothing; the baseline.
- inter: the identical network runs a second pass on the mask input;
  1x1 intermediate heads at the bottleneck and each decoder level
  produce per-level outputs from both passes.
- ae: the mask runs through its own plain autoencoder (fresh weights,
  no skips) with its own heads.
- sae: the mask runs through its own encoder, but the decoder blocks
  (and, by default, the heads) are the image branch's own handles.
- twi / twae: inter / sae plus a reconstruction branch from the image
  bottleneck built from tied transposed convs, emitting x_tilde.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import (
    Tensor,
    ShapeError,
    concat_channels,
    conv2d,
    maxpool2d,
    no_grad,
    upsample_nearest,
)

VARIANTS = ("unet", "inter", "ae", "sae", "twi", "twae")
DUAL_INPUT_VARIANTS = ("inter", "ae", "sae", "twi", "twae")
TIED_VARIANTS = ("twi", "twae")


@dataclass
class ModelConfig:
    variant: str = "unet"
    depth: int = 5
    base_channels: int = 16
    in_channels: int = 1
    detach_mask_branch: bool = False
    share_heads: bool = True  # sae/twae: mask branch reuses the image heads

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        return self

    def channels(self) -> list:
        """Per-level widths: doubling from base, capped at 8x base."""
        return [min(self.base_channels * 2**i, 8 * self.base_channels)
                for i in range(self.depth)]


@dataclass
class ForwardOutputs:
    """Every head one forward pass produced; absent heads stay None.

    ``y_j``/``y_prime_j`` are deepest-first: index 0 at the bottleneck,
    the last index at full resolution. ``x_tilde_j`` are the tied
    branch's per-level feature maps, inspectable but never used by a
    loss.
    """

    y: Tensor = None
    y_prime: Tensor = None
    y_j: list = None
    y_prime_j: list = None
    x_tilde: Tensor = None
    x_tilde_j: list = field(default=None, repr=False)


class _Trunk:
    """Encoder + decoder + final head; the topology every branch reuses.

    ``share_decoder_of`` wires this trunk's expansion path to another
    trunk's layer objects, so both paths read and train one storage.
    """

    def __init__(self, reg, prefix, cfg: ModelConfig, in_channels,
                 with_skips=True, share_decoder_of=None):
        chans = cfg.channels()
        self.with_skips = with_skips
        self.enc = []
        cin = in_channels
        for i, c in enumerate(chans):
            self.enc.append(nn.DoubleConvBlock(reg, f"{prefix}enc.{i}", cin, c))
            cin = c
        if share_decoder_of is not None:
            self.dec = share_decoder_of.dec
            self.head = share_decoder_of.head
            return
        self.dec = []
        for i in range(cfg.depth - 2, -1, -1):
            up = nn.Conv(reg, f"{prefix}dec.{i}.up", chans[i + 1], chans[i], relu=True)
            block_cin = 2 * chans[i] if with_skips else chans[i]
            block = nn.DoubleConvBlock(reg, f"{prefix}dec.{i}", block_cin, chans[i])
            self.dec.append((i, up, block))
        self.head = nn.Conv(reg, f"{prefix}head", chans[0], 1, k=1)

    def run(self, x, iheads=None):
        """Forward pass; returns (y, per-level head outputs, bottleneck).

        ``iheads`` is a deepest-first list of 1x1 head convs; when given,
        head j is applied at the bottleneck (j=0) and after each decoder
        block (j>=1).
        """
        skips = []
        h = x
        for i, block in enumerate(self.enc):
            h = block(h)
            if i < len(self.enc) - 1:
                skips.append(h)
                h = maxpool2d(h, 2)
        bottleneck = h
        level_outputs = []
        if iheads is not None:
            level_outputs.append(iheads[0](bottleneck).sigmoid())
        for j, (i, up, block) in enumerate(self.dec, start=1):
            h = up(upsample_nearest(h, 2))
            if self.with_skips:
                h = concat_channels(skips[i], h)
            h = block(h)
            if iheads is not None:
                level_outputs.append(iheads[j](h).sigmoid())
        y = self.head(h).sigmoid()
        return y, (level_outputs if iheads is not None else None), bottleneck


class Model:
    """One built variant: config, parameter registry, and branch wiring."""

    def __init__(self, config: ModelConfig, registry: nn.ParamRegistry):
        self.config = config
        self.registry = registry
        cfg = config
        self.trunk = _Trunk(registry, "", cfg, cfg.in_channels, with_skips=True)

        chans = cfg.channels()
        # deepest-first widths where the per-level heads attach
        level_chans = [chans[-1]] + [chans[i] for i, _, _ in self.trunk.dec]

        self.iheads = None
        if cfg.variant != "unet":
            self.iheads = [
                nn.Conv(registry, f"ihead.{j}", c, 1, k=1)
                for j, c in enumerate(level_chans)
            ]

        self.mask_trunk = None
        self.mask_iheads = None
        if cfg.variant == "ae":
            self.mask_trunk = _Trunk(registry, "mask_", cfg, 1, with_skips=False)
            self.mask_iheads = [
                nn.Conv(registry, f"mask_ihead.{j}", c, 1, k=1)
                for j, c in enumerate(level_chans)
            ]
        elif cfg.variant in ("sae", "twae"):
            # fresh mask encoder with its own skips; expansion path and
            # final head are the image branch's handles
            self.mask_trunk = _Trunk(registry, "mask_", cfg, 1,
                                     with_skips=True, share_decoder_of=self.trunk)
            if cfg.share_heads:
                self.mask_iheads = self.iheads
            else:
                self.mask_iheads = [
                    nn.Conv(registry, f"mask_ihead.{j}", c, 1, k=1)
                    for j, c in enumerate(level_chans)
                ]
                self.mask_trunk.head = nn.Conv(registry, "mask_head", chans[0], 1, k=1)

        self.tied = None
        if cfg.variant in TIED_VARIANTS:
            # mirror of the encoder: one tied transposed conv per level,
            # tying each block's channel-transition kernel (conv1)
            self.tied = []
            for i in range(cfg.depth - 1, -1, -1):
                view = nn.tie_transposed(self.trunk.enc[i].conv1.weight)
                self.tied.append((i, nn.TiedTransposedConv(registry, f"tied.{i}", view)))

    # -- passes --------------------------------------------------------

    def _check_input(self, x):
        if x.ndim != 4:
            raise ShapeError("model input must be NCHW")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"input has {x.shape[1]} channels, model expects {self.config.in_channels}"
            )
        div = 2 ** (self.config.depth - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(
                f"spatial extents {x.shape[2]}x{x.shape[3]} must be divisible by {div} "
                f"for depth {self.config.depth}"
            )

    def _mask_as_input(self, m):
        if m.shape[1] == self.config.in_channels:
            return m
        if m.shape[1] == 1:
            return Tensor(np.repeat(m.data, self.config.in_channels, axis=1))
        raise ShapeError(
            f"mask has {m.shape[1]} channels; expected 1 or {self.config.in_channels}"
        )

    def _tied_pass(self, bottleneck):
        levels = []
        h = bottleneck
        for idx, (i, layer) in enumerate(self.tied):
            if idx > 0:
                h = upsample_nearest(h, 2)
            h = layer(h)
            h = h.sigmoid() if idx == len(self.tied) - 1 else h.relu()
            levels.append(h)
        return levels[-1], levels

    def forward(self, x: Tensor, m: Tensor = None) -> ForwardOutputs:
        cfg = self.config
        self._check_input(x)
        if cfg.variant in DUAL_INPUT_VARIANTS and m is None:
            raise ValueError(
                f"variant {cfg.variant!r} needs the mask input m during training; "
                "use predict() for image-only inference"
            )
        out = ForwardOutputs()
        y, y_j, bottleneck = self.trunk.run(x, self.iheads)
        out.y = y
        out.y_j = y_j
        if cfg.variant == "inter" or cfg.variant == "twi":
            mx = self._mask_as_input(m)
            out.y_prime, out.y_prime_j, _ = self.trunk.run(mx, self.iheads)
        elif cfg.variant in ("ae", "sae", "twae"):
            out.y_prime, out.y_prime_j, _ = self.mask_trunk.run(m, self.mask_iheads)
        if cfg.variant in TIED_VARIANTS:
            out.x_tilde, out.x_tilde_j = self._tied_pass(bottleneck)
        return out

    def predict(self, x: Tensor) -> Tensor:
        """Image-branch-only inference; no graph is recorded."""
        with no_grad():
            self._check_input(x)
            y, _, _ = self.trunk.run(x, None)
        return y

    # -- bookkeeping ---------------------------------------------------

    def parameter_count(self) -> int:
        return self.registry.parameter_count()

    def named_params(self):
        return self.registry.named()


def build(config: ModelConfig, registry: nn.ParamRegistry) -> Model:
    config.validate()
    return Model(config, registry)


def parameter_count(model: Model) -> int:
    return model.parameter_count()


def forward(model: Model, x: Tensor, m: Tensor = None) -> ForwardOutputs:
    return model.forward(x, m)
