"""Underwater image formation: direct transmission plus backscatter.

All operations are differentiable torch functions that accept either a single
image (``3 x H x W``) or a batch (``N x 3 x H x W``). Depth maps carry a single
channel, channel coefficients are stored as ``exp(-beta)`` with shape ``(3,)``
or ``(N, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch
from torch import Tensor

from physuie.errors import ContractError, SingularityError, ValidationError

TRANSMISSION_FLOOR = 1e-6
DEPTH_DENOM_FLOOR = 1e-6


@dataclass
class ChannelCoefficients:
    """Per-channel ``exp(-beta)`` terms for attenuation (D) and scattering (B)."""

    exp_neg_beta_D: Tensor
    exp_neg_beta_B: Tensor

    def __post_init__(self):
        self.exp_neg_beta_D = torch.as_tensor(self.exp_neg_beta_D)
        self.exp_neg_beta_B = torch.as_tensor(self.exp_neg_beta_B)
        for name in ("exp_neg_beta_D", "exp_neg_beta_B"):
            value = getattr(self, name)
            if value.shape[-1] != 3:
                raise ContractError(f"{name} must end in 3 channels, got shape {tuple(value.shape)}")

    @classmethod
    def from_beta(cls, beta_D, beta_B) -> "ChannelCoefficients":
        return cls(torch.exp(-torch.as_tensor(beta_D)), torch.exp(-torch.as_tensor(beta_B)))

    @property
    def beta_D(self) -> Tensor:
        return -torch.log(self.exp_neg_beta_D)

    @property
    def beta_B(self) -> Tensor:
        return -torch.log(self.exp_neg_beta_B)

    def check_open_unit(self) -> None:
        for name in ("exp_neg_beta_D", "exp_neg_beta_B"):
            value = getattr(self, name)
            if not bool(((value > 0) & (value < 1)).all()):
                raise ContractError(f"{name} must lie strictly inside (0, 1)")


def _check_finite(**tensors: Tensor) -> None:
    for name, t in tensors.items():
        if not bool(torch.isfinite(t).all()):
            raise ValidationError(f"{name} contains non-finite values")


def _check_pair(image: Tensor, depth: Tensor, veiling: Tensor) -> None:
    if image.dim() not in (3, 4) or image.shape[-3] != 3:
        raise ContractError(f"image must be 3xHxW or Nx3xHxW, got {tuple(image.shape)}")
    if veiling.shape != image.shape:
        raise ContractError(
            f"veiling light shape {tuple(veiling.shape)} != image shape {tuple(image.shape)}"
        )
    expected = image.shape[:-3] + (1,) + image.shape[-2:]
    if depth.shape != expected:
        raise ContractError(f"depth shape {tuple(depth.shape)} != expected {tuple(expected)}")


def _channel_view(coeff: Tensor, like: Tensor) -> Tensor:
    """Reshape ``(3,)`` or ``(N, 3)`` coefficients to broadcast over ``like``."""
    coeff = coeff.to(dtype=like.dtype, device=like.device)
    if coeff.dim() == 1:
        return coeff.view(3, 1, 1)
    if coeff.dim() == 2 and like.dim() == 4 and coeff.shape[0] == like.shape[0]:
        return coeff.view(coeff.shape[0], 3, 1, 1)
    raise ContractError(
        f"coefficient shape {tuple(coeff.shape)} incompatible with tensor {tuple(like.shape)}"
    )


def transmission(
    depth: Tensor,
    coeffs: ChannelCoefficients,
    kind: Literal["direct", "backscatter"] = "direct",
) -> Tensor:
    """Return ``exp(-beta * d)`` per channel for the selected coefficient.

    ``exp(-beta)`` is stored directly, so the map is computed as
    ``exp(d * log(exp(-beta)))`` without an intermediate ``beta``.
    """
    if depth.dim() not in (3, 4) or depth.shape[-3] != 1:
        raise ContractError(f"depth must be 1xHxW or Nx1xHxW, got {tuple(depth.shape)}")
    if kind == "direct":
        coeff = coeffs.exp_neg_beta_D
    elif kind == "backscatter":
        coeff = coeffs.exp_neg_beta_B
    else:
        raise ContractError(f"unknown transmission kind {kind!r}")
    log_c = torch.log(_channel_view(coeff, depth))
    return torch.exp(depth * log_c)


def degrade(
    clean: Tensor,
    depth: Tensor,
    veiling: Tensor,
    coeffs: ChannelCoefficients,
    clamp: bool = True,
) -> Tensor:
    """Render an underwater observation from scene radiance.

    ``I = J * exp(-beta_D d) + B_inf * (1 - exp(-beta_B d))``, clamped to
    ``[0, 1]`` unless ``clamp`` is False.
    """
    _check_pair(clean, depth, veiling)
    _check_finite(clean=clean, depth=depth, veiling=veiling,
                  exp_neg_beta_D=coeffs.exp_neg_beta_D, exp_neg_beta_B=coeffs.exp_neg_beta_B)
    if bool((depth < 0).any()):
        raise ContractError("depth must be non-negative")
    t_direct = transmission(depth, coeffs, "direct")
    t_back = transmission(depth, coeffs, "backscatter")
    out = clean * t_direct + veiling * (1.0 - t_back)
    return out.clamp(0.0, 1.0) if clamp else out


def invert(
    observed: Tensor,
    depth: Tensor,
    veiling: Tensor,
    coeffs: ChannelCoefficients,
    clamp: bool = False,
    eps: float = TRANSMISSION_FLOOR,
) -> Tensor:
    """Algebraic inverse of :func:`degrade` (recovers ``J`` from ``I``)."""
    _check_pair(observed, depth, veiling)
    _check_finite(observed=observed, depth=depth, veiling=veiling)
    t_direct = transmission(depth, coeffs, "direct")
    t_back = transmission(depth, coeffs, "backscatter")
    bad = int((t_direct < eps).sum())
    if bad:
        raise SingularityError(
            f"direct transmission below {eps:g} at {bad} pixel-channel entries", count=bad
        )
    out = (observed - veiling * (1.0 - t_back)) / t_direct
    return out.clamp(0.0, 1.0) if clamp else out


def depth_from_relative(
    inv_depth: Tensor,
    scale,
    shift,
    eps: float = DEPTH_DENOM_FLOOR,
) -> Tensor:
    """Convert normalized inverse depth to metric depth: ``1 / (z * scale + shift)``.

    ``scale`` and ``shift`` may be Python scalars, 0-d tensors, or per-image
    tensors of shape ``(N,)`` / ``(N, 1)`` for batched ``inv_depth``.
    """
    scale = torch.as_tensor(scale, dtype=inv_depth.dtype, device=inv_depth.device)
    shift = torch.as_tensor(shift, dtype=inv_depth.dtype, device=inv_depth.device)
    if scale.numel() > 1 or (inv_depth.dim() == 4 and scale.dim() > 0):
        scale = scale.reshape(-1, 1, 1, 1)
    if shift.numel() > 1 or (inv_depth.dim() == 4 and shift.dim() > 0):
        shift = shift.reshape(-1, 1, 1, 1)
    denom = inv_depth * scale + shift
    bad = int((denom <= eps).sum())
    if bad:
        raise SingularityError(f"depth denominator <= {eps:g} at {bad} pixels", count=bad)
    return 1.0 / denom
