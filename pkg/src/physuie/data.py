"""Dataset ingestion, synthetic degradation, and procedural toy scenes."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image, UnidentifiedImageError
from torch import Tensor

from physuie import physics
from physuie.errors import ConfigError, ContractError, DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


@dataclass
class PairedSample:
    input: Tensor
    reference: Optional[Tensor]
    id: str


@dataclass
class DatasetLayout:
    """Where inputs and references live under a dataset root."""

    input_dir: str = "input"
    reference_dir: Optional[str] = "reference"
    size: int = 256
    paired: bool = True

    @classmethod
    def from_yaml(cls, path: str | Path) -> "DatasetLayout":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown layout keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class LoadedDataset:
    samples: List[PairedSample]
    skipped: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> PairedSample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


def read_image(path: str | Path, size: Optional[int] = None) -> Tensor:
    """Decode an 8-bit raster to ``3 x H x W`` float in ``[0, 1]``.

    When ``size`` is given the image is resized to ``size x size`` with
    antialiased bilinear filtering.
    """
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    img = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    if size is not None:
        img = resize(img, size)
    return img


def resize(img: Tensor, size: int) -> Tensor:
    if tuple(img.shape[-2:]) == (size, size):
        return img
    out = F.interpolate(img.unsqueeze(0), size=(size, size), mode="bilinear",
                        align_corners=False, antialias=True)
    return out.squeeze(0).clamp(0.0, 1.0)


def _index(directory: Path) -> Dict[str, Path]:
    if not directory.is_dir():
        raise DataError(f"missing dataset directory: {directory}")
    found: Dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in found:
                raise DataError(f"duplicate stem {p.stem!r} in {directory}")
            found[p.stem] = p
    return found


def load_dataset(root: str | Path, layout: DatasetLayout | None = None) -> LoadedDataset:
    """Load ``root/<input_dir>`` (and references) ordered by filename stem.

    In paired mode, inputs without a reference are skipped and reported in
    ``LoadedDataset.skipped``.
    """
    layout = layout or DatasetLayout()
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    inputs = _index(root / layout.input_dir)
    refs: Dict[str, Path] = {}
    if layout.reference_dir:
        ref_dir = root / layout.reference_dir
        if ref_dir.is_dir():
            refs = _index(ref_dir)
        elif layout.paired:
            raise DataError(f"missing reference directory: {ref_dir}")
    samples, skipped = [], []
    for stem in sorted(inputs):
        ref_path = refs.get(stem)
        if layout.paired and ref_path is None:
            skipped.append(stem)
            continue
        img = read_image(inputs[stem], layout.size)
        ref = read_image(ref_path, layout.size) if ref_path is not None else None
        samples.append(PairedSample(img, ref, stem))
    if skipped:
        log.warning("skipped %d inputs without references: %s", len(skipped), skipped)
    return LoadedDataset(samples, skipped)


def save_image(img: Tensor, path: str | Path) -> None:
    arr = (img.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


# --- synthetic degradation --------------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameter ranges for synthetic degradation."""

    depth_range: tuple = (0.5, 5.0)
    exp_neg_beta_D: tuple = (0.5, 0.95)
    exp_neg_beta_B: tuple = (0.5, 0.95)
    veiling_range: tuple = (0.1, 0.7)
    spatial_veiling: bool = True
    shared_beta: bool = False
    depth_grid: int = 4

    def __post_init__(self):
        d_min, d_max = self.depth_range
        if not 0 < d_min <= d_max <= 10:
            raise ConfigError(f"depth_range must lie in (0, 10], got {self.depth_range}")
        for name in ("exp_neg_beta_D", "exp_neg_beta_B"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi < 1:
                raise ConfigError(f"{name} range must lie in (0, 1), got {(lo, hi)}")
        lo, hi = self.veiling_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigError(f"veiling_range must lie in [0, 1], got {self.veiling_range}")

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSample:
    clean: Tensor
    degraded: Tensor
    veiling: Tensor
    depth: Tensor
    coeffs: physics.ChannelCoefficients
    id: str = ""

    def as_paired(self) -> PairedSample:
        return PairedSample(self.degraded, self.clean, self.id)


def _uniform(gen: torch.Generator, lo: float, hi: float, *shape) -> Tensor:
    return lo + (hi - lo) * torch.rand(*shape, generator=gen)


def smooth_field(gen: torch.Generator, channels: int, h: int, w: int, grid: int) -> Tensor:
    """Random field in ``[0, 1]``: coarse uniform noise bicubically upsampled."""
    coarse = torch.rand(1, channels, grid, grid, generator=gen)
    up = F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=True)[0]
    lo = up.amin(dim=(-2, -1), keepdim=True)
    hi = up.amax(dim=(-2, -1), keepdim=True)
    return (up - lo) / (hi - lo).clamp_min(1e-8)


def generate_synthetic(cleans: Sequence[Tensor], spec: SyntheticSpec | None = None,
                       seed: int = 0) -> List[SyntheticSample]:
    """Degrade clean images with random but recorded formation parameters."""
    if len(cleans) == 0:
        raise DataError("generate_synthetic needs at least one clean image")
    spec = spec or SyntheticSpec()
    gen = torch.Generator().manual_seed(seed)
    out = []
    for i, clean in enumerate(cleans):
        _, h, w = clean.shape
        d_min, d_max = spec.depth_range
        depth = d_min + (d_max - d_min) * smooth_field(gen, 1, h, w, spec.depth_grid)
        v_lo, v_hi = spec.veiling_range
        base = _uniform(gen, v_lo, v_hi, 3, 1, 1)
        if spec.spatial_veiling:
            # brightness varies smoothly around the per-channel base level
            light = 0.6 + 0.4 * smooth_field(gen, 1, h, w, 2)
            veiling = (base * light).clamp(0.0, 1.0)
        else:
            veiling = base.expand(3, h, w).clone()
        exp_d = _uniform(gen, *spec.exp_neg_beta_D, 3)
        exp_b = exp_d.clone() if spec.shared_beta else _uniform(gen, *spec.exp_neg_beta_B, 3)
        coeffs = physics.ChannelCoefficients(exp_d, exp_b)
        degraded = physics.degrade(clean, depth, veiling, coeffs)
        out.append(SyntheticSample(clean, degraded, veiling, depth, coeffs, id=f"syn_{i:05d}"))
    return out


def save_synthetic_params(sample: SyntheticSample, path: str | Path) -> None:
    """Write ground truth as an ``.npz`` sidecar.

    Float32 arrays are stored verbatim, including the unquantized clean and
    degraded images, so the sidecar reloads bitwise.
    """
    np.savez(
        path,
        clean=sample.clean.numpy(),
        degraded=sample.degraded.numpy(),
        veiling=sample.veiling.numpy(),
        depth=sample.depth.numpy(),
        exp_neg_beta_D=sample.coeffs.exp_neg_beta_D.numpy(),
        exp_neg_beta_B=sample.coeffs.exp_neg_beta_B.numpy(),
    )


def load_synthetic_params(path: str | Path) -> SyntheticSample:
    path = Path(path)
    with np.load(path) as z:
        arrays = {k: torch.from_numpy(z[k].copy()) for k in z.files}
    coeffs = physics.ChannelCoefficients(arrays["exp_neg_beta_D"], arrays["exp_neg_beta_B"])
    return SyntheticSample(arrays["clean"], arrays["degraded"], arrays["veiling"],
                           arrays["depth"], coeffs, id=path.stem)


def toy_scenes(n: int, size: int = 64, seed: int = 0) -> List[Tensor]:
    """Procedural clean scenes: smooth color gradients plus random rectangles and discs."""
    if size < 8:
        raise ContractError("toy scenes need size >= 8")
    gen = torch.Generator().manual_seed(seed)
    yy, xx = torch.meshgrid(torch.linspace(0, 1, size), torch.linspace(0, 1, size), indexing="ij")
    scenes = []
    for _ in range(n):
        img = 0.25 + 0.5 * smooth_field(gen, 3, size, size, 3)
        for _ in range(int(torch.randint(3, 7, (1,), generator=gen))):
            color = torch.rand(3, 1, 1, generator=gen)
            cx, cy, r = torch.rand(3, generator=gen).tolist()
            r = 0.08 + 0.2 * r
            if torch.rand(1, generator=gen) < 0.5:
                mask = ((xx - cx) ** 2 + (yy - cy) ** 2) <= r**2
            else:
                mask = ((xx - cx).abs() <= r) & ((yy - cy).abs() <= 0.6 * r)
            img = torch.where(mask, color.expand_as(img), img)
        # fine texture so the enhancer has detail to restore
        img = img + 0.04 * torch.sin(40 * xx + 25 * yy * float(torch.rand(1, generator=gen)))
        scenes.append(img.clamp(0.0, 1.0))
    return scenes


def write_synthetic(samples: Sequence[SyntheticSample], out_dir: str | Path,
                    spec: SyntheticSpec, seed: int) -> List[Path]:
    """Lay out synthetic samples as a paired dataset plus parameter sidecars."""
    out_dir = Path(out_dir)
    written = []
    for sub in ("input", "reference", "params"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        for sub, img in (("input", s.degraded), ("reference", s.clean)):
            p = out_dir / sub / f"{s.id}.png"
            save_image(img, p)
            written.append(p)
        p = out_dir / "params" / f"{s.id}.npz"
        save_synthetic_params(s, p)
        written.append(p)
    manifest = out_dir / "synthetic.json"
    manifest.write_text(json.dumps({"seed": seed, "spec": spec.to_dict(),
                                    "ids": [s.id for s in samples]}, indent=2))
    written.append(manifest)
    return written
