"""Joint training of the enhancer and the deep degradation model."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
import yaml
from torch import Tensor, nn

from physuie import __version__, losses, metrics
from physuie.data import PairedSample, save_image
from physuie.ddm import DdmConfig, DdmOutput, DeepDegradationModel
from physuie.errors import ConfigError, DataError, DivergenceError, ValidationError
from physuie.losses import LossReport, LossWeights
from physuie.uieconv import UIEConv, UieConvConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


def _ablate_ddm(**changes):
    def apply(cfg: "RunConfig") -> "RunConfig":
        return replace(cfg, ddm=replace(cfg.ddm, **changes))
    return apply


def _ablate_uie(**changes):
    def apply(cfg: "RunConfig") -> "RunConfig":
        return replace(cfg, uie=replace(cfg.uie, **changes))
    return apply


def _ablate_weights(**changes):
    def apply(cfg: "RunConfig") -> "RunConfig":
        return replace(cfg, weights=replace(cfg.weights, **changes))
    return apply


ABLATIONS = {
    "no_phy_loss": _ablate_weights(lambda_phy=0.0),
    "no_depth_loss": _ablate_weights(lambda_depth=0.0),
    "global_only": _ablate_uie(enable_local=False),
    "local_only": _ablate_uie(enable_global=False),
    "no_lowpass": _ablate_ddm(vlen_lowpass=False),
    "no_transform": _ablate_ddm(vlen_transform=False),
    "shared_beta": _ablate_ddm(fen_shared_beta=True),
    "no_depth_factors": _ablate_ddm(fen_depth_factors=False),
    "no_additional_inputs": _ablate_ddm(fen_additional_inputs=False),
    "den_finetune_all": _ablate_ddm(den_freeze_policy="finetune-all"),
    "den_freeze_all": _ablate_ddm(den_freeze_policy="freeze-all"),
}


@dataclass
class RunConfig:
    epochs: int = 160
    batch_size: int = 8
    lr: float = 5e-5
    lr_halve_epoch: int = 128
    den_lr_multiplier: float = 0.3
    adam_betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: Optional[float] = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    depth_detach_target: bool = False
    seed: int = 0
    ablations: tuple = ()
    checkpoint_every: int = 1
    image_size: int = 256
    channels_last: bool = True
    uie: UieConvConfig = field(default_factory=UieConvConfig)
    ddm: DdmConfig = field(default_factory=DdmConfig)
    train_root: Optional[str] = None
    val_root: Optional[str] = None
    run_dir: Optional[str] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.lr_halve_epoch <= self.epochs:
            raise ConfigError("lr_halve_epoch must lie in [0, epochs]")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        unknown = [a for a in self.ablations if a not in ABLATIONS]
        if unknown:
            raise ConfigError(f"unknown ablations {unknown}; known: {sorted(ABLATIONS)}")
        self.ablations = tuple(self.ablations)
        self.adam_betas = tuple(self.adam_betas)

    def resolved(self) -> "RunConfig":
        """Copy with every ablation folded into the model and loss settings."""
        cfg = replace(self, ablations=())
        for name in self.ablations:
            cfg = ABLATIONS[name](cfg)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        bad = sorted(set(raw) - known)
        nested = {"weights": LossWeights, "uie": UieConvConfig, "ddm": DdmConfig}
        for key, typ in nested.items():
            if key in raw and isinstance(raw[key], dict):
                sub_known = {f.name for f in fields(typ)}
                bad += [f"{key}.{k}" for k in sorted(set(raw[key]) - sub_known)]
        if bad:
            raise ConfigError(f"unknown config keys: {bad}")
        for key, typ in nested.items():
            if key in raw and isinstance(raw[key], dict):
                raw[key] = typ(**raw[key])
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
        return cls.from_dict(raw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FrameworkOutput:
    enhanced: Tensor
    ddm: DdmOutput
    redegraded: Tensor
    inv_depth_enhanced: Tensor


class Framework(nn.Module):
    """Enhancer plus degradation model, wired for the three training losses."""

    def __init__(self, uie_config: UieConvConfig, ddm_config: DdmConfig):
        super().__init__()
        self.uie = UIEConv(uie_config)
        self.ddm = DeepDegradationModel(ddm_config)

    def forward(self, image: Tensor) -> FrameworkOutput:
        enhanced = self.uie(image)
        est = self.ddm(image)
        redegraded = self.ddm.redegrade(enhanced, est)
        inv_depth_enhanced = self.ddm.den(enhanced)
        return FrameworkOutput(enhanced, est, redegraded, inv_depth_enhanced)

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        den = [p for p in self.ddm.den.parameters() if p.requires_grad]
        den_ids = {id(p) for p in self.ddm.den.parameters()}
        main = [p for p in self.parameters() if p.requires_grad and id(p) not in den_ids]
        return {"main": main, "den": den}

    def bundles(self) -> Dict[str, dict]:
        return {
            "uieconv": self.uie.state_dict(),
            "vlen": self.ddm.vlen.state_dict(),
            "den": self.ddm.den.state_dict(),
            "fen": self.ddm.fen.state_dict(),
        }

    def load_bundles(self, bundles: Dict[str, dict]) -> None:
        self.uie.load_state_dict(bundles["uieconv"])
        self.ddm.vlen.load_state_dict(bundles["vlen"])
        self.ddm.den.load_state_dict(bundles["den"])
        self.ddm.fen.load_state_dict(bundles["fen"])


def compute_losses(model: Framework, image: Tensor, reference: Tensor, cfg: RunConfig,
                   step: int = -1):
    out = model(image)
    sup = losses.loss_sup(out.enhanced, reference)
    phy = losses.loss_phy(out.redegraded, image)
    depth = losses.loss_depth(out.ddm.inv_depth, out.inv_depth_enhanced,
                              detach_target=cfg.depth_detach_target)
    total, report = losses.loss_total(sup, phy, depth, cfg.weights, step=step)
    return total, report, out


def lr_at_epoch(cfg: RunConfig, epoch: int) -> float:
    """Base learning rate, halved once from ``lr_halve_epoch`` onwards."""
    return cfg.lr * (0.5 if epoch >= cfg.lr_halve_epoch else 1.0)


@dataclass
class TrainState:
    model: Framework
    optimizer: torch.optim.Optimizer
    config: RunConfig
    step: int = 0
    epoch: int = 0
    epoch_step: int = 0
    best: Optional[dict] = None
    lr_trace: List[dict] = field(default_factory=list)
    last_report: Optional[LossReport] = None
    history: List[dict] = field(default_factory=list)

    def set_epoch_lr(self, epoch: int) -> None:
        base = lr_at_epoch(self.config, epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = base * (self.config.den_lr_multiplier if group["name"] == "den" else 1.0)

    def group_lrs(self) -> Dict[str, float]:
        return {g["name"]: g["lr"] for g in self.optimizer.param_groups}

    def to_checkpoint(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": __version__,
            "run_config": self.config.to_dict(),
            "uie_config": self.model.uie.config.to_dict(),
            "ddm_config": self.model.ddm.config.to_dict(),
            "bundles": self.model.bundles(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "epoch_step": self.epoch_step,
            "best": self.best,
            "lr_trace": self.lr_trace,
            "history": self.history,
            "torch_rng": torch.get_rng_state(),
        }


def _make_optimizer(model: Framework, cfg: RunConfig) -> torch.optim.Optimizer:
    groups = model.parameter_groups()
    param_groups = [
        {"name": "main", "params": groups["main"], "lr": cfg.lr},
        {"name": "den", "params": groups["den"], "lr": cfg.lr * cfg.den_lr_multiplier},
    ]
    return torch.optim.Adam(param_groups, lr=cfg.lr, betas=cfg.adam_betas,
                            weight_decay=cfg.weight_decay)


def init_state(cfg: RunConfig) -> TrainState:
    """Build a fresh framework and optimizer for ``cfg`` (ablations applied)."""
    torch.manual_seed(cfg.seed)
    eff = cfg.resolved()
    model = Framework(eff.uie, eff.ddm)
    if eff.channels_last:
        model = model.to(memory_format=torch.channels_last)
    state = TrainState(model, _make_optimizer(model, eff), eff)
    state.set_epoch_lr(0)
    return state


def state_from_checkpoint(ckpt: dict) -> TrainState:
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {ckpt.get('format')!r}")
    cfg = RunConfig.from_dict(ckpt["run_config"])
    model = Framework(UieConvConfig(**ckpt["uie_config"]), DdmConfig(**ckpt["ddm_config"]))
    model.load_bundles(ckpt["bundles"])
    if cfg.channels_last:
        model = model.to(memory_format=torch.channels_last)
    optimizer = _make_optimizer(model, cfg)
    optimizer.load_state_dict(ckpt["optimizer"])
    state = TrainState(model, optimizer, cfg, ckpt["step"], ckpt["epoch"], ckpt["epoch_step"],
                       ckpt["best"], list(ckpt["lr_trace"]), history=list(ckpt["history"]))
    torch.set_rng_state(ckpt["torch_rng"])
    return state


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # corrupted or foreign file
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc
    return state_from_checkpoint(ckpt)


def load_framework(path: str | Path) -> Framework:
    model = load_checkpoint(path).model
    model.eval()
    return model


def _atomic_write_bytes(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"checkpoint write to {path} failed; partial state at {tmp}: {exc}") from exc


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    _atomic_write_bytes(path, lambda tmp: torch.save(state.to_checkpoint(), tmp))
    manifest = {
        "config_hash": state.config.config_hash(),
        "freeze_policy": state.model.ddm.den.freeze_policy,
        "code_version": __version__,
        "step": state.step,
        "epoch": state.epoch,
        "files": sorted(p.name for p in path.parent.glob("*.ckpt")),
    }
    _atomic_write_bytes(path.parent / "manifest.json",
                        lambda tmp: Path(tmp).write_text(json.dumps(manifest, indent=2)))
    return path


def stack_batch(batch: Sequence[PairedSample]):
    if not batch:
        raise DataError("empty batch")
    missing = [s.id for s in batch if s.reference is None]
    if missing:
        raise DataError(f"samples without references cannot be trained on: {missing}")
    image = torch.stack([s.input for s in batch])
    reference = torch.stack([s.reference for s in batch])
    if not (torch.isfinite(image).all() and torch.isfinite(reference).all()):
        raise DataError(f"non-finite pixels in batch {[s.id for s in batch]}")
    return image, reference


def train_step(batch: Sequence[PairedSample], state: TrainState):
    """One Adam update of all trainable parameters; returns ``(state, report)``."""
    image, reference = stack_batch(batch)
    model, cfg = state.model, state.config
    if cfg.channels_last:
        image = image.contiguous(memory_format=torch.channels_last)
    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    try:
        total, report, _ = compute_losses(model, image, reference, cfg, step=state.step)
    except DivergenceError as exc:
        exc.last_report = state.last_report
        raise
    except ValidationError as exc:
        # inputs were checked above, so non-finite intermediates come from the weights
        raise DivergenceError(f"non-finite activations: {exc}", step=state.step,
                              last_report=state.last_report) from exc
    total.backward()
    if cfg.grad_clip:
        params = [p for p in model.parameters() if p.grad is not None]
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    state.last_report = report
    return state, report


def _epoch_order(n: int, seed: int, epoch: int) -> List[int]:
    gen = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    return torch.randperm(n, generator=gen).tolist()


@dataclass
class EvaluationResult:
    per_image: Dict[str, List[metrics.MetricReport]]
    aggregate: List[metrics.MetricReport]
    notices: List[str] = field(default_factory=list)

    def value(self, name: str) -> float:
        for r in self.aggregate:
            if r.name == name:
                return r.value
        raise KeyError(name)

    def records(self) -> List[dict]:
        rows = [dict(id=i, **r.to_dict()) for i, rs in self.per_image.items() for r in rs]
        rows += [dict(id="__aggregate__", **r.to_dict()) for r in self.aggregate]
        return rows


@torch.no_grad()
def evaluate(model: Framework, dataset: Sequence[PairedSample],
             names: Sequence[str] = ("psnr", "ssim"), gallery_dir: str | Path | None = None,
             batch_size: int = 8) -> EvaluationResult:
    """Per-image and aggregate metrics of the enhancer on ``dataset``.

    ``"phy"`` is also accepted: the L1 error between the re-degraded
    enhancement and the input.
    """
    model.eval()
    notices = []
    names = list(names)
    if any(s.reference is None for s in dataset):
        dropped = [n for n in names if n in metrics.FULL_REFERENCE]
        if dropped:
            notices.append(f"skipping full-reference metrics {dropped}: references missing")
            log.warning(notices[-1])
    per_image: Dict[str, List[metrics.MetricReport]] = {}
    samples = list(dataset)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        image = torch.stack([s.input for s in chunk])
        out = model(image) if "phy" in names else None
        enhanced = out.enhanced if out is not None else model.uie(image)
        for i, s in enumerate(chunk):
            ref = s.reference if s.reference is not None else None
            reports = metrics.image_metrics(enhanced[i], ref,
                                            [n for n in names if n != "phy"])
            if out is not None:
                value = float(losses.loss_phy(out.redegraded[i], image[i]))
                reports.append(metrics.MetricReport("phy", value))
            per_image[s.id] = reports
            if gallery_dir is not None:
                Path(gallery_dir).mkdir(parents=True, exist_ok=True)
                save_image(enhanced[i], Path(gallery_dir) / f"{s.id}.png")
    agg = metrics.aggregate(r for rs in per_image.values() for r in rs)
    return EvaluationResult(per_image, agg, notices)


class JsonlLog:
    def __init__(self, path: Optional[Path], records: List[dict]):
        self.path = path
        self.records = records

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def fit(train: Sequence[PairedSample], val: Sequence[PairedSample], cfg: RunConfig,
        run_dir: str | Path | None = None, state: TrainState | None = None,
        max_steps: Optional[int] = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs (or until ``max_steps`` total steps).

    Passing ``state`` resumes exactly where it stopped, including the position
    inside a partially finished epoch.
    """
    torch.use_deterministic_algorithms(True)
    state = state or init_state(cfg)
    cfg = state.config
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    logger = JsonlLog(run_dir / "train_log.jsonl" if run_dir else None, state.history)
    train = list(train)
    if not train:
        raise DataError("training set is empty")
    n_batches = math.ceil(len(train) / cfg.batch_size)

    while state.epoch < cfg.epochs:
        epoch = state.epoch
        state.set_epoch_lr(epoch)
        if state.epoch_step == 0:
            state.lr_trace.append({"epoch": epoch, **state.group_lrs()})
        order = _epoch_order(len(train), cfg.seed, epoch)
        for b in range(state.epoch_step, n_batches):
            if max_steps is not None and state.step >= max_steps:
                return state
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            state, report = train_step([train[i] for i in idx], state)
            state.epoch_step = b + 1
            logger.write({"type": "step", "step": state.step, "epoch": epoch,
                          "lr": state.group_lrs()["main"], **report.to_dict()})
        epoch_records = [r for r in logger.records if r["type"] == "step" and r["epoch"] == epoch]
        record = {"type": "epoch", "epoch": epoch, "lr": state.group_lrs()["main"]}
        for key in ("sup", "phy", "depth", "total"):
            if epoch_records:
                record[f"mean_{key}"] = math.fsum(r[key] for r in epoch_records) / len(epoch_records)
        state.epoch += 1
        state.epoch_step = 0
        if val and (epoch + 1) % cfg.checkpoint_every == 0:
            result = evaluate(state.model, val, ("psnr", "ssim"))
            record["val_psnr"] = result.value("psnr")
            record["val_ssim"] = result.value("ssim")
            if state.best is None or record["val_psnr"] > state.best["val_psnr"]:
                state.best = {"epoch": epoch, "val_psnr": record["val_psnr"],
                              "val_ssim": record["val_ssim"]}
                if run_dir is not None:
                    save_checkpoint(state, run_dir / "best.ckpt")
        logger.write(record)
        if run_dir is not None and (state.epoch % cfg.checkpoint_every == 0
                                    or state.epoch == cfg.epochs):
            save_checkpoint(state, run_dir / "last.ckpt")
    return state
