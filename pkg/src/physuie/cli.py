"""Command-line interface: ``physuie <command> [flags]``.

Commands: train, enhance, depth, degrade, simulate, evaluate. Every command
prints a JSON summary on stdout and exits 0 on success, 2 on configuration
errors, 3 on data errors and 4 when training diverges.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import yaml
from PIL import Image

from physuie import data, physics, trainer
from physuie.errors import ConfigError, DataError, PhysUIEError

log = logging.getLogger("physuie")

HOME_ENV = "PHYSUIE_HOME"


@dataclass
class CommandOutcome:
    exit_status: int = 0
    artifacts: List[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"exit_status": self.exit_status, "artifacts": self.artifacts,
                "summary": self.summary}


def home() -> Path:
    return Path(os.environ.get(HOME_ENV, Path.home() / ".physuie"))


def resolve_checkpoint(path: str) -> Path:
    """Relative checkpoint paths that do not exist locally are looked up under the home root."""
    p = Path(path)
    if not p.exists() and not p.is_absolute() and (home() / p).exists():
        return home() / p
    return p


def atomic_write(path: Path, writer: Callable[[str], None]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_rgb(img: torch.Tensor, path: Path) -> None:
    atomic_write(path, lambda tmp: data.save_image(img, tmp))


def _save_gray16(values: torch.Tensor, path: Path) -> None:
    arr = (values.detach().clamp(0, 1).squeeze(0).cpu().numpy() * 65535.0).round().astype(np.uint16)
    atomic_write(path, lambda tmp: Image.fromarray(arr).save(tmp, format="PNG"))


def _save_npy(values: np.ndarray, path: Path) -> None:
    def write(tmp):
        with open(tmp, "wb") as fh:
            np.save(fh, values)
    atomic_write(path, write)


def _check_targets(targets: Sequence[Path], overwrite: bool) -> None:
    existing = [str(p) for p in targets if p.exists()]
    if existing and not overwrite:
        raise ConfigError(f"refusing to overwrite {len(existing)} existing artifact(s), "
                          f"e.g. {existing[0]}; pass --overwrite")


def _list_images(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise DataError(f"input directory does not exist: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in data.IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images found in {directory}")
    return files


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"{args.command} requires {', '.join(missing)}")


def _per_file(files: Sequence[Path], fn: Callable[[Path], List[Path]]):
    """Run ``fn`` on each file; failures are collected and the run continues."""
    artifacts: List[str] = []
    failures: Dict[str, str] = {}
    first_error: Optional[PhysUIEError] = None
    for f in files:
        try:
            artifacts += [str(p) for p in fn(f)]
        except PhysUIEError as exc:
            failures[f.name] = str(exc)
            first_error = first_error or exc
            log.error("%s: %s", f.name, exc)
    status = first_error.exit_code if first_error else 0
    return artifacts, failures, status


# --- commands ---------------------------------------------------------------


def cmd_train(args) -> CommandOutcome:
    _require(args, "config")
    cfg = trainer.RunConfig.from_yaml(args.config)
    if args.seed is not None:
        cfg = trainer.RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    if not cfg.train_root:
        raise ConfigError("config must set train_root")
    run_dir = Path(args.output or cfg.run_dir or home() / "runs" / cfg.config_hash())
    summary: dict = {"run_dir": str(run_dir)}
    state = None
    if args.checkpoint:
        ckpt = resolve_checkpoint(args.checkpoint)
        state = trainer.load_checkpoint(ckpt)
        manifest = ckpt.parent / "manifest.json"
        summary["resumed_from"] = {"checkpoint": str(ckpt), "step": state.step}
        if manifest.is_file():
            summary["resumed_from"]["manifest"] = json.loads(manifest.read_text())
    else:
        _check_targets([run_dir / "last.ckpt", run_dir / "train_log.jsonl"], args.overwrite)
        if args.overwrite:
            for name in ("last.ckpt", "best.ckpt", "train_log.jsonl", "manifest.json"):
                (run_dir / name).unlink(missing_ok=True)
    layout = data.DatasetLayout(size=cfg.image_size)
    train_set = data.load_dataset(cfg.train_root, layout)
    val_set = data.load_dataset(cfg.val_root, layout) if cfg.val_root else []
    state = trainer.fit(train_set, val_set, cfg, run_dir=run_dir, state=state)
    artifacts = sorted(str(p) for p in run_dir.iterdir() if p.is_file())
    summary.update(step=state.step, epoch=state.epoch, best=state.best,
                   skipped=list(train_set.skipped),
                   last_report=state.last_report.to_dict() if state.last_report else None)
    return CommandOutcome(0, artifacts, summary)


def cmd_enhance(args) -> CommandOutcome:
    _require(args, "checkpoint", "input", "output")
    model = trainer.load_framework(resolve_checkpoint(args.checkpoint))
    files = _list_images(Path(args.input))
    out_dir = Path(args.output)
    _check_targets([out_dir / f"{f.stem}.png" for f in files], args.overwrite)

    @torch.no_grad()
    def run(f: Path) -> List[Path]:
        image = data.read_image(f)
        target = out_dir / f"{f.stem}.png"
        _save_rgb(model.uie(image.unsqueeze(0))[0], target)
        return [target]

    artifacts, failures, status = _per_file(files, run)
    return CommandOutcome(status, artifacts, {"processed": len(artifacts), "failed": failures})


def cmd_depth(args) -> CommandOutcome:
    _require(args, "checkpoint", "input", "output")
    model = trainer.load_framework(resolve_checkpoint(args.checkpoint))
    files = _list_images(Path(args.input))
    out_dir = Path(args.output)
    targets = [out_dir / f"{f.stem}.png" for f in files]
    if args.absolute:
        targets += [out_dir / f"{f.stem}_depth.npy" for f in files]
    _check_targets(targets, args.overwrite)

    @torch.no_grad()
    def run(f: Path) -> List[Path]:
        image = data.read_image(f).unsqueeze(0)
        written = [out_dir / f"{f.stem}.png"]
        if args.absolute:
            est = model.ddm(image)
            _save_gray16(est.inv_depth[0], written[0])
            depth = est.abs_depth[0, 0].cpu().numpy().astype(np.float32)
            written.append(out_dir / f"{f.stem}_depth.npy")
            _save_npy(depth, written[1])
        else:
            _save_gray16(model.ddm.den(image)[0], written[0])
        return written

    artifacts, failures, status = _per_file(files, run)
    return CommandOutcome(status, artifacts, {"processed": len(files) - len(failures),
                                              "failed": failures, "absolute": args.absolute})


def _degrade_params(path: Optional[str]) -> dict:
    params = {"depth": 2.0, "veiling": [0.1, 0.5, 0.6],
              "exp_neg_beta_D": [0.7, 0.9, 0.92], "exp_neg_beta_B": [0.75, 0.9, 0.92]}
    if path:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        unknown = sorted(set(raw) - set(params))
        if unknown:
            raise ConfigError(f"unknown degrade parameters: {unknown}")
        params.update(raw)
    return params


def cmd_degrade(args) -> CommandOutcome:
    """Apply the formation model with constant depth, veiling light and coefficients."""
    _require(args, "input", "output")
    params = _degrade_params(args.config)
    try:
        coeffs = physics.ChannelCoefficients(torch.tensor(params["exp_neg_beta_D"], dtype=torch.float32),
                                             torch.tensor(params["exp_neg_beta_B"], dtype=torch.float32))
        coeffs.check_open_unit()
        veiling = torch.tensor(params["veiling"], dtype=torch.float32).view(3, 1, 1)
    except (TypeError, ValueError, RuntimeError) as exc:
        raise ConfigError(f"invalid degrade parameters: {exc}") from exc
    files = _list_images(Path(args.input))
    out_dir = Path(args.output)
    _check_targets([out_dir / f"{f.stem}.png" for f in files], args.overwrite)

    def run(f: Path) -> List[Path]:
        clean = data.read_image(f)
        depth = torch.full((1,) + tuple(clean.shape[-2:]), float(params["depth"]))
        out = physics.degrade(clean, depth, veiling.expand_as(clean), coeffs)
        target = out_dir / f"{f.stem}.png"
        _save_rgb(out, target)
        return [target]

    artifacts, failures, status = _per_file(files, run)
    return CommandOutcome(status, artifacts, {"processed": len(artifacts), "failed": failures,
                                              "params": params})


def cmd_simulate(args) -> CommandOutcome:
    _require(args, "input", "output")
    spec = data.SyntheticSpec()
    if args.config:
        with open(args.config) as fh:
            spec = data.SyntheticSpec.from_dict(yaml.safe_load(fh) or {})
    seed = 0 if args.seed is None else args.seed
    size = args.size
    files = _list_images(Path(args.input))
    cleans = [data.read_image(f, size) for f in files]
    out_dir = Path(args.output)
    _check_targets([out_dir / "synthetic.json"], args.overwrite)
    samples = data.generate_synthetic(cleans, spec, seed)
    for s, f in zip(samples, files):
        s.id = f.stem
    out_dir.mkdir(parents=True, exist_ok=True)
    # stage next to the output so every file lands with a same-filesystem rename
    staging = Path(tempfile.mkdtemp(prefix=".simulate.", dir=out_dir))
    try:
        written = data.write_synthetic(samples, staging, spec, seed)
        artifacts = []
        for p in written:
            target = out_dir / p.relative_to(staging)
            target.parent.mkdir(parents=True, exist_ok=True)
            os.replace(p, target)
            artifacts.append(str(target))
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return CommandOutcome(0, artifacts, {"samples": len(samples), "seed": seed,
                                         "spec": spec.to_dict()})


def cmd_evaluate(args) -> CommandOutcome:
    _require(args, "checkpoint", "input")
    state = trainer.load_checkpoint(resolve_checkpoint(args.checkpoint))
    names = [m.strip() for m in (args.metrics or "psnr,ssim,uiqm,uciqe").split(",") if m.strip()]
    layout = data.DatasetLayout(size=state.config.image_size, paired=False)
    dataset = data.load_dataset(args.input, layout)
    if not len(dataset):
        raise DataError(f"no images found under {args.input}")
    out_dir = Path(args.output) if args.output else None
    if out_dir is not None:
        _check_targets([out_dir / "metrics.csv", out_dir / "metrics.json"], args.overwrite)
    result = trainer.evaluate(state.model, dataset, names,
                              gallery_dir=out_dir / "gallery" if out_dir else None)
    artifacts = []
    if out_dir is not None:
        rows = result.records()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["id", "name", "value", "count", "saturated"])
        writer.writeheader()
        writer.writerows(rows)
        atomic_write(out_dir / "metrics.csv", lambda tmp: Path(tmp).write_text(buf.getvalue()))
        payload = json.dumps({"rows": rows, "notices": result.notices}, indent=2)
        atomic_write(out_dir / "metrics.json", lambda tmp: Path(tmp).write_text(payload))
        artifacts = [str(out_dir / "metrics.csv"), str(out_dir / "metrics.json")]
        artifacts += sorted(str(p) for p in (out_dir / "gallery").glob("*.png"))
    summary = {"aggregate": {r.name: r.value for r in result.aggregate},
               "images": len(dataset), "notices": result.notices}
    return CommandOutcome(0, artifacts, summary)


COMMANDS = {
    "train": cmd_train,
    "enhance": cmd_enhance,
    "depth": cmd_depth,
    "degrade": cmd_degrade,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="physuie", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train the enhancer and degradation model from a run config",
        "enhance": "enhance every image in a directory",
        "depth": "estimate relative (or, with --absolute, metric) depth",
        "degrade": "apply the underwater formation model with fixed parameters",
        "simulate": "build a synthetic paired dataset with recorded parameters",
        "evaluate": "compute quality metrics of a checkpoint on a dataset",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="YAML file (run config, degrade parameters or synthetic spec)")
        p.add_argument("--checkpoint", help=f"checkpoint path; relative paths also searched under ${HOME_ENV}")
        p.add_argument("--input", help="input directory or dataset root")
        p.add_argument("--output", help="output directory")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--overwrite", action="store_true", help="replace existing artifacts")
        if name == "evaluate":
            p.add_argument("--metrics", help="comma-separated: psnr,ssim,uiqm,uciqe,phy")
        if name == "depth":
            p.add_argument("--absolute", action="store_true",
                           help="also write metric depth in metres as .npy")
        if name == "simulate":
            p.add_argument("--size", type=int, default=None, help="resize cleans to a square size")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> CommandOutcome:
    args = build_parser().parse_args(argv)
    if args.seed is not None:
        torch.manual_seed(args.seed)
    try:
        return COMMANDS[args.command](args)
    except PhysUIEError as exc:
        log.error("%s", exc)
        return CommandOutcome(exc.exit_code, [], {"error": type(exc).__name__, "message": str(exc)})


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO if "-v" in (argv or sys.argv) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    outcome = run(argv)
    print(json.dumps(outcome.to_dict(), indent=2, default=str))
    return outcome.exit_status


if __name__ == "__main__":
    sys.exit(main())
