"""Image quality and depth evaluation metrics.

Images are channel-first ``3 x H x W`` arrays in ``[0, 1]`` (numpy or torch).
All computations run in float64 numpy for determinism.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np
from scipy import ndimage

from physuie.errors import ConfigError, ContractError, DataError

PSNR_CAP = 100.0

# UIQM component weights and UICM/UISM constants (Panetta et al., 2016)
UIQM_WEIGHTS = (0.0282, 0.2953, 3.5753)
UICM_WEIGHTS = (-0.0268, 0.1586)
UISM_CHANNEL_WEIGHTS = (0.299, 0.587, 0.114)
UIQM_BLOCK = 10
UICM_TRIM = 0.1
# UCIQE weights (Yang and Sowmya, 2015)
UCIQE_WEIGHTS = (0.4680, 0.2745, 0.2576)

DELTA_BASE = 1.25


@dataclass
class MetricReport:
    name: str
    value: float
    count: int = 1
    saturated: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr_report(a, b) -> MetricReport:
    a, b = _np(a), _np(b)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return MetricReport("psnr", PSNR_CAP, saturated=True)
    return MetricReport("psnr", min(PSNR_CAP, 10.0 * math.log10(1.0 / mse)))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit dynamic range, capped at 100 dB."""
    return psnr_report(a, b).value


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    y = ndimage.convolve1d(x, k, axis=0, mode="nearest")
    y = ndimage.convolve1d(y, k, axis=1, mode="nearest")
    return y[r:-r, r:-r]


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-window structural similarity, averaged over channels."""
    a, b = _np(a), _np(b)
    _check_pair(a, b)
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ConfigError(f"ssim needs H, W >= {window}, got {a.shape[-2]}x{a.shape[-1]}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1, c2 = 0.01**2, 0.03**2
    k = _gaussian_kernel(window, sigma)
    scores = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        syy = _filter_valid(y * y, k) - my * my
        sxy = _filter_valid(x * y, k) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


# --- UIQM -----------------------------------------------------------------


def _trimmed_mean(x: np.ndarray, alpha: float = UICM_TRIM) -> float:
    x = np.sort(x.ravel())
    k = x.size
    lo = math.ceil(alpha * k)
    hi = math.floor(alpha * k)
    return float(x[lo : k - hi].mean())


def uicm(rgb255: np.ndarray) -> float:
    r, g, b = rgb255
    rg = r - g
    yb = (r + g) / 2 - b
    mu_rg, mu_yb = _trimmed_mean(rg), _trimmed_mean(yb)
    var_rg = float(np.mean((rg - mu_rg) ** 2))
    var_yb = float(np.mean((yb - mu_yb) ** 2))
    w_mean, w_std = UICM_WEIGHTS
    return w_mean * math.hypot(mu_rg, mu_yb) + w_std * math.sqrt(var_rg + var_yb)


def _blocks(x: np.ndarray, size: int) -> np.ndarray:
    """Split the trailing two axes into non-overlapping ``size`` blocks (cropping the rest)."""
    h, w = x.shape[-2] // size, x.shape[-1] // size
    x = x[..., : h * size, : w * size]
    x = x.reshape(x.shape[:-2] + (h, size, w, size))
    return np.moveaxis(x, -3, -2)  # (..., h, w, size, size)


def _eme(x: np.ndarray, size: int = UIQM_BLOCK) -> float:
    blocks = _blocks(x, size)
    hi = blocks.max(axis=(-2, -1))
    lo = blocks.min(axis=(-2, -1))
    if hi.size == 0:
        return 0.0
    ok = (lo > 0) & (hi > 0)
    terms = np.zeros_like(hi)
    terms[ok] = np.log(hi[ok] / lo[ok])
    return 2.0 / hi.size * float(terms.sum())


def uism(rgb255: np.ndarray) -> float:
    total = 0.0
    for weight, channel in zip(UISM_CHANNEL_WEIGHTS, rgb255):
        mag = np.hypot(ndimage.sobel(channel, 0), ndimage.sobel(channel, 1))
        peak = mag.max()
        if peak > 0:
            mag = mag * (255.0 / peak)
        total += weight * _eme(mag * channel)
    return total


def uiconm(rgb255: np.ndarray, size: int = UIQM_BLOCK) -> float:
    blocks = _blocks(rgb255, size)  # (3, h, w, size, size)
    hi = blocks.max(axis=(0, -2, -1))
    lo = blocks.min(axis=(0, -2, -1))
    if hi.size == 0:
        return 0.0
    top, bot = hi - lo, hi + lo
    ok = (top > 0) & (bot > 0)
    ratio = np.ones_like(top)
    ratio[ok] = top[ok] / bot[ok]
    terms = np.where(ok, ratio * np.log(ratio), 0.0)
    return -1.0 / top.size * float(terms.sum())


def uiqm_components(image) -> Dict[str, float]:
    rgb255 = _np(image) * 255.0
    return {"uicm": uicm(rgb255), "uism": uism(rgb255), "uiconm": uiconm(rgb255)}


def uiqm(image) -> float:
    """Underwater image quality measure: colorfulness, sharpness and contrast."""
    c = uiqm_components(image)
    w1, w2, w3 = UIQM_WEIGHTS
    return w1 * c["uicm"] + w2 * c["uism"] + w3 * c["uiconm"]


# --- UCIQE ----------------------------------------------------------------


_SRGB_TO_XYZ = np.array(
    [[0.412453, 0.357580, 0.180423],
     [0.212671, 0.715160, 0.072169],
     [0.019334, 0.119193, 0.950227]]
)


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """``3 x H x W`` sRGB in ``[0, 1]`` to CIELab (L in ``[0, 100]``).

    The reference white is the image of RGB white under the same matrix, so
    neutral grays map to ``a = b = 0``.
    """
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = np.tensordot(_SRGB_TO_XYZ, lin, axes=1)
    white = _SRGB_TO_XYZ.sum(axis=1)[:, None, None]
    t = xyz / white
    f = np.where(t > (6 / 29) ** 3, np.cbrt(t), t / (3 * (6 / 29) ** 2) + 4 / 29)
    return np.stack([116 * f[1] - 16, 500 * (f[0] - f[1]), 200 * (f[1] - f[2])])


def uciqe_components(image) -> Dict[str, float]:
    """Chroma std, luminance contrast and mean saturation in CIELab.

    L, a and b are divided by 100 so lightness lies in ``[0, 1]``.
    """
    rgb = np.clip(_np(image), 0.0, 1.0)
    lab = srgb_to_lab(rgb) / 100.0
    lum = lab[0].ravel()
    chroma = np.hypot(lab[1], lab[2]).ravel()
    ordered = np.sort(lum)
    n = ordered.size
    contrast = float(ordered[min(n - 1, int(0.99 * n))] - ordered[int(0.01 * n)])
    sat = np.divide(chroma, lum, out=np.zeros_like(chroma), where=lum > 0)
    return {"chroma_std": float(chroma.std()), "lum_contrast": contrast,
            "saturation_mean": float(sat.mean())}


def uciqe(image) -> float:
    c = uciqe_components(image)
    w1, w2, w3 = UCIQE_WEIGHTS
    return w1 * c["chroma_std"] + w2 * c["lum_contrast"] + w3 * c["saturation_mean"]


# --- depth ----------------------------------------------------------------

DEPTH_METRICS = ("rmse", "abs_rel", "log10", "delta1", "delta2", "delta3")


def depth_metrics(pred, gt, mask=None, align: str = "median") -> List[MetricReport]:
    """RMSE, Abs.Rel, log10 error and inlier ratios over valid pixels.

    ``align="median"`` rescales ``pred`` so its median matches ``gt`` on the
    mask; ``align="none"`` compares raw values. Inlier thresholds are inclusive
    (``max(p/g, g/p) <= 1.25**i``).
    """
    pred, gt = _np(pred), _np(gt)
    _check_pair(pred, gt)
    mask = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(_np(mask), dtype=bool)
    _check_pair(pred, mask)
    p, g = pred[mask], gt[mask]
    if p.size == 0:
        raise DataError("depth evaluation mask selects no pixels")
    if np.any(g <= 0):
        raise ContractError("ground-truth depth must be positive on the mask")
    if align == "median":
        p = p * (np.median(g) / np.median(p))
    elif align != "none":
        raise ConfigError(f"unknown depth alignment {align!r}")
    if np.any(p <= 0):
        raise ContractError("predicted depth must be positive on the mask")
    values = {
        "rmse": float(np.sqrt(np.mean((p - g) ** 2))),
        "abs_rel": float(np.mean(np.abs(p - g) / g)),
        "log10": float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
    }
    hi, lo = np.maximum(p, g), np.minimum(p, g)
    for i in (1, 2, 3):
        # cross-multiplied so that exact ratios on the boundary compare equal
        values[f"delta{i}"] = float(np.mean(hi <= DELTA_BASE**i * lo))
    return [MetricReport(name, values[name], count=int(p.size)) for name in DEPTH_METRICS]


def aggregate(reports: Iterable[MetricReport]) -> List[MetricReport]:
    """Mean of per-image reports grouped by name, in first-seen order."""
    groups: Dict[str, List[MetricReport]] = {}
    for r in reports:
        groups.setdefault(r.name, []).append(r)
    out = []
    for name, rs in groups.items():
        out.append(MetricReport(name, math.fsum(r.value for r in rs) / len(rs), count=len(rs),
                                saturated=any(r.saturated for r in rs)))
    return out


FULL_REFERENCE = ("psnr", "ssim")
NO_REFERENCE = ("uiqm", "uciqe")


def image_metrics(image, reference=None, names: Sequence[str] = FULL_REFERENCE + NO_REFERENCE
                  ) -> List[MetricReport]:
    out = []
    for name in names:
        if name == "psnr" and reference is not None:
            out.append(psnr_report(image, reference))
        elif name == "ssim" and reference is not None:
            out.append(MetricReport("ssim", ssim(image, reference)))
        elif name == "uiqm":
            out.append(MetricReport("uiqm", uiqm(image)))
        elif name == "uciqe":
            out.append(MetricReport("uciqe", uciqe(image)))
        elif name not in FULL_REFERENCE:
            raise ConfigError(f"unknown metric {name!r}")
    return out
