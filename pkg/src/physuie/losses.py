"""Training objectives: supervised L1, physical reconstruction L1, depth consistency."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import Tensor

from physuie.errors import ContractError, DivergenceError

DEGENERATE_DEVIATION = 1e-6


@dataclass
class LossWeights:
    lambda_phy: float = 0.2
    lambda_depth: float = 1.0

    def __post_init__(self):
        for name in ("lambda_phy", "lambda_depth"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ContractError(f"{name} must be finite and non-negative, got {value}")
            setattr(self, name, value)


@dataclass
class LossReport:
    sup: float
    phy: float
    depth: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_sup(enhanced: Tensor, reference: Tensor) -> Tensor:
    """Mean absolute error over batch, channels and pixels."""
    _same_shape(enhanced, reference)
    return (enhanced - reference).abs().mean()


def loss_phy(redegraded: Tensor, observed: Tensor) -> Tensor:
    _same_shape(redegraded, observed)
    return (redegraded - observed).abs().mean()


def align_median_mad(z: Tensor, eps: float = DEGENERATE_DEVIATION) -> Tensor:
    """Shift each map by its median and scale by its mean absolute deviation.

    Works on ``(N, 1, H, W)`` or ``(1, H, W)``; the median is the lower median
    (an order statistic), so the alignment is exactly equivariant under
    positive affine maps. Maps whose deviation is below ``eps`` align to zero.
    """
    batched = z.dim() == 4
    flat = z.flatten(1) if batched else z.reshape(1, -1)
    med = flat.median(dim=1, keepdim=True).values
    centered = flat - med
    dev = centered.abs().mean(dim=1, keepdim=True)
    degenerate = dev < eps
    aligned = centered / torch.where(degenerate, torch.ones_like(dev), dev)
    aligned = torch.where(degenerate, torch.zeros_like(aligned), aligned)
    return aligned.view_as(z)


def loss_depth(inv_depth: Tensor, inv_depth_enhanced: Tensor, detach_target: bool = False) -> Tensor:
    """Affine-invariant MAE between inverse depth of the raw and enhanced images."""
    _same_shape(inv_depth, inv_depth_enhanced)
    target = inv_depth.detach() if detach_target else inv_depth
    return (align_median_mad(target) - align_median_mad(inv_depth_enhanced)).abs().mean()


def loss_total(sup, phy, depth, weights: LossWeights | None = None, step: int = -1):
    """Weighted sum ``sup + lambda_phy * phy + lambda_depth * depth``.

    Accepts tensors (returns the differentiable total and a :class:`LossReport`)
    or plain floats. A zero weight drops its term from the graph entirely.
    """
    weights = weights or LossWeights()
    total = sup
    if weights.lambda_phy:
        total = total + weights.lambda_phy * phy
    if weights.lambda_depth:
        total = total + weights.lambda_depth * depth
    s, p, d = (float(x.detach()) if torch.is_tensor(x) else float(x) for x in (sup, phy, depth))
    report_total = s
    if weights.lambda_phy:
        report_total = report_total + weights.lambda_phy * p
    if weights.lambda_depth:
        report_total = report_total + weights.lambda_depth * d
    report = LossReport(s, p, d, report_total)
    graph_total = float(total.detach()) if torch.is_tensor(total) else float(total)
    if not (math.isfinite(report_total) and math.isfinite(graph_total)):
        raise DivergenceError("non-finite loss", step=step, last_report=report)
    return total, report
