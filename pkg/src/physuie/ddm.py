"""Deep degradation model: veiling light, inverse depth, and imaging factors.

Three sub-networks estimate every parameter of the formation model in
:mod:`physuie.physics` from a single underwater image:

* :class:`VeilingLightNet` - low-pass Fourier estimate refined by a small
  residual CNN, giving a spatially varying background light.
* :class:`DepthNet` - pluggable encoder/decoder backbone whose output is
  min-max normalized into relative inverse depth.
* :class:`FactorNet` - convolutional backbone with four independent heads for
  ``exp(-beta_D)``, ``exp(-beta_B)``, depth scale and depth shift.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from physuie import physics
from physuie.errors import ConfigError, ContractError
from physuie.physics import ChannelCoefficients

FREEZE_POLICIES = ("freeze-encoder", "finetune-all", "freeze-all")
# Depth range used when FEN does not predict scale/shift: z=0 -> 10 m, z=1 -> 0.1 m.
FIXED_DEPTH_SHIFT = 0.1
FIXED_DEPTH_SCALE = 9.9
DEGENERATE_RANGE = 1e-6
_LOGIT_EPS = 1e-4
# float32 sigmoid saturates to exactly 0 or 1; keep head outputs in the open interval
_HEAD_EPS = 1e-6


def default_lowpass_radius(height: int, width: int) -> int:
    return max(1, min(height, width) // 32)


def lowpass_veiling(image: Tensor, radius: Optional[int] = None) -> Tensor:
    """Initial veiling light: keep only the low-frequency amplitude around DC.

    The spectrum is split into amplitude and phase; amplitudes with integer
    frequency radius above ``radius`` are zeroed and the original phase is
    reused for the inverse transform. Zeroing the amplitude while keeping the
    phase is the same as zeroing the complex coefficient, which keeps the
    operation linear and differentiable everywhere.
    """
    h, w = image.shape[-2:]
    if radius is None:
        radius = default_lowpass_radius(h, w)
    fy = torch.fft.fftfreq(h, d=1.0 / h, device=image.device)
    fx = torch.fft.fftfreq(w, d=1.0 / w, device=image.device)
    keep = (fy[:, None] ** 2 + fx[None, :] ** 2) <= radius**2
    spectrum = torch.fft.fft2(image.to(torch.promote_types(image.dtype, torch.float32)))
    filtered = spectrum * keep.to(spectrum.dtype)
    return torch.fft.ifft2(filtered).real.to(image.dtype)


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="replicate"),
        nn.InstanceNorm2d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class VeilingLightNet(nn.Module):
    def __init__(
        self,
        width: int = 16,
        lowpass_radius: Optional[int] = None,
        use_lowpass: bool = True,
        use_transform: bool = True,
    ):
        super().__init__()
        self.lowpass_radius = lowpass_radius
        self.use_lowpass = use_lowpass
        self.use_transform = use_transform
        if use_transform:
            self.refine = nn.Sequential(
                _conv_block(3, width), _conv_block(width, width), nn.Conv2d(width, 3, 1)
            )
        else:
            self.refine = None

    def initial_estimate(self, image: Tensor) -> Tensor:
        if not self.use_lowpass:
            return image
        return lowpass_veiling(image, self.lowpass_radius)

    def forward(self, image: Tensor) -> Tensor:
        b0 = self.initial_estimate(image).clamp(_LOGIT_EPS, 1.0 - _LOGIT_EPS)
        if self.refine is None:
            return b0
        # residual in logit space: a zero update returns the initial estimate
        return torch.sigmoid(torch.logit(b0) + self.refine(b0))


class DepthBackbone(nn.Module):
    """Interface for relative-depth backbones.

    Subclasses map ``N x 3 x H x W`` images to ``N x 1 x H x W`` raw maps where
    larger values mean nearer surfaces, and expose ``encoder`` and ``decoder``
    submodules so freeze policies can address them.
    """

    downsampling: int = 1
    encoder: nn.Module
    decoder: nn.Module


BACKBONES: Dict[str, Callable[..., DepthBackbone]] = {}


def register_backbone(name: str):
    def wrap(cls):
        BACKBONES[name] = cls
        return cls

    return wrap


@register_backbone("unet")
class ConvDepthNet(DepthBackbone):
    """Four-level convolutional encoder/decoder with concatenated skips."""

    downsampling = 16

    def __init__(self, width: int = 16):
        super().__init__()
        chans = [width, width * 2, width * 4, width * 8, width * 8]
        self.encoder = nn.ModuleDict(
            {
                "stem": _conv_block(3, chans[0]),
                "down": nn.ModuleList(
                    [_conv_block(chans[i], chans[i + 1], stride=2) for i in range(4)]
                ),
            }
        )
        self.decoder = nn.ModuleDict(
            {
                "up": nn.ModuleList(
                    [_conv_block(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(4))]
                ),
                "head": nn.Conv2d(chans[0], 1, 3, padding=1, padding_mode="replicate"),
            }
        )

    def forward(self, x: Tensor) -> Tensor:
        x = self.encoder["stem"](x)
        skips = []
        for down in self.encoder["down"]:
            skips.append(x)
            x = down(x)
        for up in self.decoder["up"]:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = up(torch.cat([x, skip], dim=1))
        return self.decoder["head"](x)


def normalize_inverse_depth(raw: Tensor, eps: float = DEGENERATE_RANGE) -> Tensor:
    """Per-image min-max normalization; near-constant maps become all zeros."""
    flat = raw.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    span = hi - lo
    degenerate = span < eps
    z = (raw - lo) / torch.where(degenerate, torch.ones_like(span), span)
    return torch.where(degenerate, torch.zeros_like(z), z)


class DepthNet(nn.Module):
    def __init__(self, backbone: str | DepthBackbone = "unet", width: int = 16,
                 freeze_policy: str = "freeze-encoder"):
        super().__init__()
        if isinstance(backbone, str):
            if backbone not in BACKBONES:
                raise ConfigError(f"unknown depth backbone {backbone!r}; known: {sorted(BACKBONES)}")
            backbone = BACKBONES[backbone](width=width)
        self.backbone = backbone
        self.freeze_policy = freeze_policy
        self.apply_freeze_policy(freeze_policy)

    def apply_freeze_policy(self, policy: str) -> None:
        if policy not in FREEZE_POLICIES:
            raise ConfigError(f"freeze policy must be one of {FREEZE_POLICIES}, got {policy!r}")
        self.freeze_policy = policy
        for p in self.backbone.parameters():
            p.requires_grad_(policy == "finetune-all")
        if policy == "freeze-encoder":
            for p in self.backbone.decoder.parameters():
                p.requires_grad_(True)

    def forward(self, image: Tensor) -> Tensor:
        factor = self.backbone.downsampling
        h, w = image.shape[-2:]
        if h % factor or w % factor or min(h, w) < 2 * factor:
            # the coarsest level must keep at least 2x2 pixels for instance norm
            raise ConfigError(
                f"depth backbone needs H and W to be multiples of {factor} and at least "
                f"{2 * factor}, got {h}x{w}"
            )
        return normalize_inverse_depth(self.backbone(image))


@dataclass
class ImagingFactors:
    exp_neg_beta_D: Tensor  # (N, 3)
    exp_neg_beta_B: Tensor  # (N, 3)
    z_scale: Tensor  # (N,)
    z_shift: Tensor  # (N,)

    @property
    def coefficients(self) -> ChannelCoefficients:
        return ChannelCoefficients(self.exp_neg_beta_D, self.exp_neg_beta_B)


class _Head(nn.Module):
    def __init__(self, width: int, out: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, out, 1),
        )

    def forward(self, x: Tensor) -> Tensor:
        """Global-average-pooled sigmoid, strictly inside (0, 1)."""
        logits = self.body(x).mean(dim=(-2, -1))
        return torch.sigmoid(logits).clamp(_HEAD_EPS, 1.0 - _HEAD_EPS)


class FactorNet(nn.Module):
    def __init__(
        self,
        width: int = 32,
        additional_inputs: bool = True,
        shared_beta: bool = False,
        depth_factors: bool = True,
    ):
        super().__init__()
        self.additional_inputs = additional_inputs
        self.shared_beta = shared_beta
        self.depth_factors = depth_factors
        cin = 7 if additional_inputs else 3
        self.backbone = nn.Sequential(
            _conv_block(cin, width, stride=2),
            _conv_block(width, width, stride=2),
            _conv_block(width, width),
            _conv_block(width, width),
        )
        self.beta_d_head = _Head(width, 3)
        self.beta_b_head = None if shared_beta else _Head(width, 3)
        self.scale_head = _Head(width, 1) if depth_factors else None
        self.shift_head = _Head(width, 1) if depth_factors else None

    def forward(self, image: Tensor, veiling: Tensor, inv_depth: Tensor) -> ImagingFactors:
        if self.additional_inputs:
            if veiling.shape != image.shape or inv_depth.shape[-2:] != image.shape[-2:]:
                raise ContractError("FEN inputs must share spatial shape")
            x = torch.cat([image, veiling, inv_depth], dim=1)
        else:
            x = image
        feats = self.backbone(x)
        exp_d = self.beta_d_head(feats)
        exp_b = exp_d if self.beta_b_head is None else self.beta_b_head(feats)
        n = image.shape[0]
        if self.depth_factors:
            scale = 2.0 * self.scale_head(feats).view(n)
            shift = self.shift_head(feats).view(n) + 0.1
        else:
            scale = image.new_full((n,), FIXED_DEPTH_SCALE)
            shift = image.new_full((n,), FIXED_DEPTH_SHIFT)
        return ImagingFactors(exp_d, exp_b, scale, shift)


@dataclass
class DdmConfig:
    vlen_width: int = 16
    lowpass_radius: Optional[int] = None
    vlen_lowpass: bool = True
    vlen_transform: bool = True
    den_backbone: str = "unet"
    den_width: int = 16
    den_freeze_policy: str = "freeze-encoder"
    fen_width: int = 32
    fen_additional_inputs: bool = True
    fen_shared_beta: bool = False
    fen_depth_factors: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DdmOutput:
    veiling: Tensor
    inv_depth: Tensor
    factors: ImagingFactors
    abs_depth: Tensor = field(repr=False)


class DeepDegradationModel(nn.Module):
    def __init__(self, config: DdmConfig | None = None):
        super().__init__()
        self.config = config = config or DdmConfig()
        self.vlen = VeilingLightNet(
            config.vlen_width, config.lowpass_radius, config.vlen_lowpass, config.vlen_transform
        )
        self.den = DepthNet(config.den_backbone, config.den_width, config.den_freeze_policy)
        self.fen = FactorNet(
            config.fen_width,
            config.fen_additional_inputs,
            config.fen_shared_beta,
            config.fen_depth_factors,
        )

    def forward(self, image: Tensor) -> DdmOutput:
        veiling = self.vlen(image)
        inv_depth = self.den(image)
        factors = self.fen(image, veiling, inv_depth)
        abs_depth = physics.depth_from_relative(inv_depth, factors.z_scale, factors.z_shift)
        return DdmOutput(veiling, inv_depth, factors, abs_depth)

    def redegrade(self, enhanced: Tensor, out: DdmOutput) -> Tensor:
        """Push an enhanced image back through the estimated formation model."""
        return physics.degrade(enhanced, out.abs_depth, out.veiling, out.factors.coefficients)
