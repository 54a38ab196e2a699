"""Dual-branch convolutional enhancement network.

The global branch is a U-shaped encoder/decoder built from large-kernel
depthwise blocks (:class:`ModernConvBlock`); the local branch stacks gated
3x3 blocks (:class:`GatedConvBlock`) at full resolution. Branch outputs are
summed and squashed with a sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List

import torch
from torch import Tensor, nn

from physuie.errors import ConfigError


@dataclass
class UieConvConfig:
    base_channels: int = 32
    levels: int = 3
    gcb_count: int = 4
    mcb_kernel: int = 7
    mcb_per_level: int = 2
    mcb_expansion: int = 4
    enable_global: bool = True
    enable_local: bool = True

    def __post_init__(self):
        if not (self.enable_global or self.enable_local):
            raise ConfigError("at least one UIEConv branch must be enabled")
        if self.mcb_kernel < 1 or self.mcb_kernel % 2 == 0:
            raise ConfigError(f"mcb_kernel must be odd and positive, got {self.mcb_kernel}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        for name in ("base_channels", "gcb_count", "mcb_per_level", "mcb_expansion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="replicate")


class ModernConvBlock(nn.Module):
    """Depthwise large-kernel conv -> InstanceNorm -> inverted bottleneck -> residual.

    The output projection starts at zero, so a fresh block is the identity.
    """

    def __init__(self, dim: int, kernel: int = 7, expansion: int = 4):
        super().__init__()
        self.dwconv = nn.Conv2d(
            dim, dim, kernel, padding=kernel // 2, groups=dim, padding_mode="replicate"
        )
        self.norm = nn.InstanceNorm2d(dim, affine=True)
        self.pwconv1 = nn.Conv2d(dim, expansion * dim, 1)
        self.act = nn.GELU()
        self.pwconv2 = nn.Conv2d(expansion * dim, dim, 1)
        nn.init.zeros_(self.pwconv2.weight)
        nn.init.zeros_(self.pwconv2.bias)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.dwconv(x))
        y = self.pwconv2(self.act(self.pwconv1(y)))
        return x + y


class GatedConvBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.feature = nn.Sequential(_conv3(dim, dim), nn.GELU(), _conv3(dim, dim))
        self.gate_conv = _conv3(dim, dim)

    def gate(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.gate_conv(x))

    def forward(self, x: Tensor) -> Tensor:
        return x + self.feature(x) * self.gate(x)


class LocalBranch(nn.Module):
    def __init__(self, channels: int, count: int):
        super().__init__()
        self.stem = _conv3(3, channels)
        self.blocks = nn.Sequential(*[GatedConvBlock(channels) for _ in range(count)])
        self.head = _conv3(channels, 3)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.blocks(self.stem(x)))


class GlobalBranch(nn.Module):
    """U-Net of MCB stages; stride-2 kernel-2 downsampling, bilinear upsampling."""

    def __init__(self, cfg: UieConvConfig):
        super().__init__()
        c = cfg.base_channels
        widths = [c * 2**i for i in range(cfg.levels + 1)]

        def stage(dim):
            return nn.Sequential(
                *[ModernConvBlock(dim, cfg.mcb_kernel, cfg.mcb_expansion)
                  for _ in range(cfg.mcb_per_level)]
            )

        self.stem = _conv3(3, c)
        self.enc = nn.ModuleList([stage(widths[i]) for i in range(cfg.levels)])
        self.down = nn.ModuleList(
            [nn.Conv2d(widths[i], widths[i + 1], kernel_size=2, stride=2)
             for i in range(cfg.levels)]
        )
        self.bottleneck = stage(widths[-1])
        self.up = nn.ModuleList(
            [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
             for _ in range(cfg.levels)]
        )
        self.reduce = nn.ModuleList(
            [nn.Conv2d(widths[i + 1], widths[i], 1) for i in range(cfg.levels)]
        )
        self.fuse = nn.ModuleList(
            [nn.Conv2d(2 * widths[i], widths[i], 1) for i in range(cfg.levels)]
        )
        self.dec = nn.ModuleList([stage(widths[i]) for i in range(cfg.levels)])
        self.head = _conv3(c, 3)

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        skips = []
        for enc, down in zip(self.enc, self.down):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        for i in reversed(range(len(skips))):
            skip = skips[i]
            x = self.reduce[i](self.up[i](x))
            x = self.fuse[i](torch.cat([x, skip], dim=1))
            x = self.dec[i](x)
        return self.head(x)


class UIEConv(nn.Module):
    def __init__(self, config: UieConvConfig | None = None):
        super().__init__()
        self.config = cfg = config or UieConvConfig()
        self.global_branch = GlobalBranch(cfg) if cfg.enable_global else None
        self.local_branch = LocalBranch(cfg.base_channels, cfg.gcb_count) if cfg.enable_local else None

    @property
    def required_divisor(self) -> int:
        return 2**self.config.levels if self.global_branch is not None else 1

    def logits(self, image: Tensor) -> Tensor:
        d = self.required_divisor
        h, w = image.shape[-2:]
        if h % d or w % d:
            raise ConfigError(f"UIEConv needs H and W divisible by {d}, got {h}x{w}")
        out = 0
        if self.global_branch is not None:
            out = out + self.global_branch(image)
        if self.local_branch is not None:
            out = out + self.local_branch(image)
        return out

    def forward(self, image: Tensor) -> Tensor:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        out = torch.sigmoid(self.logits(image))
        return out.squeeze(0) if squeeze else out

    def layer_manifest(self) -> List[dict]:
        """Structural description of resampling layers, for inspection."""
        rows = []
        for name, mod in self.named_modules():
            if isinstance(mod, nn.Conv2d) and mod.stride != (1, 1):
                rows.append({"name": name, "op": "conv",
                             "kernel": list(mod.kernel_size), "stride": list(mod.stride)})
            elif isinstance(mod, nn.Upsample):
                rows.append({"name": name, "op": "upsample", "mode": mod.mode,
                             "scale_factor": mod.scale_factor})
        return rows


def enhance(image: Tensor, model: UIEConv) -> Tensor:
    return model(image)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
