"""Command-line surface: phantom, preprocess, train, generate, evaluate,
inspect-checkpoint.

Option precedence is flags > config file > defaults; the config file is a
flat ``key = value`` text format.  Every generating run writes one
``manifest.json`` beside its outputs with the fully resolved
configuration, so a run is reproducible from its manifest alone.  The
``ALPHAGAN3D_SEED`` environment variable supplies the default seed.
"""
from __future__ import annotations

import argparse
import datetime
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    AugmentationPolicy,
    Volume,
    generate_phantom,
    postprocess_generated,
    preprocess,
    read_nifti,
    write_nifti,
)
from .errors import ContractError, ParseError
from .metrics import ProtocolConfig, evaluate_model
from .networks import ROLES, network_spec_from_text
from .rng import SeedStream
from .training import (
    TrainingConfig,
    bundle_from_checkpoint,
    generate_volumes,
    load_checkpoint,
    run_training,
)

ENV_SEED = "ALPHAGAN3D_SEED"


# ---------------------------------------------------------------------------
# config files and manifests
# ---------------------------------------------------------------------------

def parse_config_file(path) -> dict:
    """Flat ``key = value`` pairs; '#' starts a comment."""
    values = {}
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(),
                             start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError(f"{path}:{ln}: empty key")
        values[key.replace("-", "_")] = value
    return values


def resolve(args, key: str, default, cast=None):
    """flags > config file > environment (seed only) > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    config = getattr(args, "_config_values", {})
    if key in config:
        raw = config[key]
        return cast(raw) if cast else raw
    if key == "seed" and os.environ.get(ENV_SEED):
        return int(os.environ[ENV_SEED])
    return default


def write_manifest(out_dir: Path, command: str, resolved: dict,
                   inputs: list, outputs: list, started: str) -> Path:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config": resolved,
        "seed": resolved.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "started_utc": started,
        "finished_utc": _utcnow(),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def parse_shape(text) -> tuple:
    if isinstance(text, tuple):
        return text
    parts = str(text).lower().replace("x", ",").split(",")
    dims = [int(p) for p in parts if p]
    if len(dims) == 1:
        dims = dims * 3
    if len(dims) != 3 or min(dims) < 1:
        raise ParseError(f"bad shape {text!r}; use N or DxHxW")
    return tuple(dims)


def _load_volume_dir(path) -> list:
    path = Path(path)
    files = sorted(p for p in path.iterdir()
                   if p.name.endswith(".nii") or p.name.endswith(".nii.gz"))
    if not files:
        raise ContractError(f"no NIfTI volumes found in {path}")
    return [read_nifti(p) for p in files], files


def write_pgm_montage(volume: np.ndarray, path) -> None:
    """All axial slices tiled into one binary PGM for quick inspection."""
    arr = np.asarray(volume, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    img = (scaled * 255.0).astype(np.uint8)
    nx, ny, nz = img.shape
    cols = math.ceil(math.sqrt(nz))
    rows = math.ceil(nz / cols)
    sheet = np.zeros((rows * ny, cols * nx), dtype=np.uint8)
    for k in range(nz):
        r, c = divmod(k, cols)
        sheet[r * ny:(r + 1) * ny, c * nx:(c + 1) * nx] = img[:, :, k].T
    with open(path, "wb") as fh:
        fh.write(f"P5\n{sheet.shape[1]} {sheet.shape[0]}\n255\n".encode())
        fh.write(sheet.tobytes())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    started = _utcnow()
    count = resolve(args, "count", 8, int)
    shape = parse_shape(resolve(args, "shape", "16", str))
    structures = resolve(args, "structures", 3, int)
    seed = resolve(args, "seed", 0, int)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i in range(count):
        vol = generate_phantom(seed + i, shape, structures)
        path = out_dir / f"phantom_{i:03d}.nii.gz"
        write_nifti(vol, path)
        outputs.append(path)
    write_manifest(out_dir, "phantom",
                   {"count": count, "shape": list(shape),
                    "structures": structures, "seed": seed},
                   [], outputs, started)
    print(f"wrote {count} phantoms to {out_dir}")
    return 0


def cmd_preprocess(args) -> int:
    started = _utcnow()
    target = resolve(args, "target", None, int)
    volumes, files = _load_volume_dir(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for vol, src in zip(volumes, files):
        tensor = preprocess(vol.voxels, target=target)
        dest = out_dir / (src.name.split(".")[0] + ".npy")
        np.save(dest, tensor)
        outputs.append(dest)
    write_manifest(out_dir, "preprocess",
                   {"target": target, "count": len(files)},
                   files, outputs, started)
    print(f"preprocessed {len(files)} volumes to {out_dir}")
    return 0


AUGMENT_CHOICES = {"none": None,
                   "flip": AugmentationPolicy.flip_only,
                   "all": AugmentationPolicy.all_transforms}


def cmd_train(args) -> int:
    started = _utcnow()
    seed = resolve(args, "seed", 0, int)
    augment_kind = resolve(args, "augment", "none", str)
    if augment_kind not in AUGMENT_CHOICES:
        raise ContractError(f"--augment must be one of {sorted(AUGMENT_CHOICES)}")
    factory = AUGMENT_CHOICES[augment_kind]
    volumes, files = _load_volume_dir(args.data)
    target = resolve(args, "target", None, int)
    dataset = [preprocess(v.voxels, target=target) for v in volumes]
    volume_shape = dataset[0].shape

    spec_overrides = None
    arch_dir = resolve(args, "arch_dir", None, str)
    if arch_dir:
        spec_overrides = {}
        for role in ROLES:
            path = Path(arch_dir) / f"{role}.txt"
            if path.exists():
                network_spec_from_text(path.read_text())  # validate early
                spec_overrides[role] = path.read_text()
        if not spec_overrides:
            raise ContractError(f"no <role>.txt spec files found in {arch_dir}")

    config = TrainingConfig(
        preset=resolve(args, "preset", "sigmarat2", str),
        loss=resolve(args, "loss", "l_g3", str),
        iterations=resolve(args, "iters", 2000, int),
        batch_size=resolve(args, "batch", 4, int),
        latent_dim=resolve(args, "latent", None, int),
        width_mult=resolve(args, "width", 1.0, float),
        volume_shape=volume_shape,
        optimizer=resolve(args, "optimizer", None, str),
        learning_rate=resolve(args, "lr", 2e-4, float),
        seed=seed,
        checkpoint_interval=resolve(args, "checkpoint_interval", 1000, int),
        augmentation=None if factory is None else factory(),
        gdl_alpha=resolve(args, "gdl_alpha", 1.0, float),
        spec_overrides=spec_overrides,
    ).resolved()

    out_dir = Path(args.out)
    bundle, log_path = run_training(dataset, config, out_dir,
                                    resume_from=args.resume)
    outputs = [log_path, out_dir / "final.agan"]
    write_manifest(out_dir, "train", {
        "preset": config.preset, "loss": config.loss,
        "iterations": config.iterations, "batch_size": config.batch_size,
        "latent_dim": config.latent_dim, "width_mult": config.width_mult,
        "volume_shape": list(volume_shape), "optimizer": config.optimizer,
        "learning_rate": config.learning_rate, "seed": seed,
        "checkpoint_interval": config.checkpoint_interval,
        "augment": augment_kind, "gdl_alpha": config.gdl_alpha,
        "lambda1": config.weights.lambda1, "lambda2": config.weights.lambda2,
        "lambda3": config.weights.lambda3, "arch_dir": str(arch_dir or ""),
        "data": str(args.data), "resume": str(args.resume or ""),
    }, files, outputs, started)
    print(f"trained {config.iterations} iterations; final checkpoint at "
          f"{out_dir / 'final.agan'}")
    return 0


def cmd_generate(args) -> int:
    started = _utcnow()
    seed = resolve(args, "seed", 0, int)
    count = resolve(args, "count", 8, int)
    bundle = bundle_from_checkpoint(load_checkpoint(args.model))
    reference = read_nifti(args.reference) if args.reference else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = generate_volumes(bundle, count, SeedStream(seed))
    outputs = []
    for i, tensor in enumerate(tensors):
        if reference is not None:
            vol = postprocess_generated(tensor, reference)
            path = out_dir / f"generated_{i:03d}.nii.gz"
            write_nifti(vol, path, reference=reference)
        else:
            vol = Volume.create(tensor.astype(np.float32))
            path = out_dir / f"generated_{i:03d}.nii.gz"
            write_nifti(vol, path)
        outputs.append(path)
        if args.montage:
            mpath = out_dir / f"generated_{i:03d}.pgm"
            write_pgm_montage(vol.voxels, mpath)
            outputs.append(mpath)
    write_manifest(out_dir, "generate", {
        "model": str(args.model), "count": count, "seed": seed,
        "reference": str(args.reference or ""), "montage": bool(args.montage),
    }, [args.model], outputs, started)
    print(f"generated {count} volumes to {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    started = _utcnow()
    seed = resolve(args, "seed", 0, int)
    bundle = bundle_from_checkpoint(load_checkpoint(args.model))
    volumes, files = _load_volume_dir(args.real)
    real = [preprocess(v.voxels) for v in volumes]
    cfg = ProtocolConfig(
        n_generated=resolve(args, "generated", 32, int),
        pair_comparisons=resolve(args, "pairs", 200, int),
        msssim_trials=resolve(args, "msssim_trials", 5, int),
        msssim_window=resolve(args, "msssim_window", 5, int),
        mmd_trials=resolve(args, "mmd_trials", 5, int),
        mmd_subset=resolve(args, "mmd_subset", 16, int),
        seed=seed,
    )
    report = evaluate_model(bundle, real, cfg)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_csv(), encoding="utf-8")
    print(report.to_text(), end="")
    write_manifest(report_path.parent, "evaluate", {
        "model": str(args.model), "real": str(args.real),
        "report": str(report_path), "seed": seed,
        "n_generated": cfg.n_generated, "pair_comparisons": cfg.pair_comparisons,
        "msssim_trials": cfg.msssim_trials, "msssim_window": cfg.msssim_window,
        "mmd_trials": cfg.mmd_trials, "mmd_subset": cfg.mmd_subset,
    }, files, [report_path], started)
    return 0


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    meta = ckpt.meta
    print(f"checkpoint {args.checkpoint}")
    for key in sorted(meta):
        print(f"  {key}: {meta[key]}")
    params = ckpt.arrays("param/")
    total = sum(int(np.prod(a.shape)) for a in params.values())
    print(f"  parameters: {len(params)} tensors, {total} scalars")
    if args.verbose:
        for name in sorted(params):
            arr = params[name]
            print(f"    {name} {tuple(arr.shape)} {arr.dtype}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alphagan3d",
        description="Desk-scale 3D alpha-GAN synthesis engine")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("phantom", help="generate synthetic phantom volumes")
    add_common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--shape", help="cube extent N or DxHxW")
    p.add_argument("--structures", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="pad to cube and normalize to [-1,1]")
    add_common(p)
    p.add_argument("--data", required=True, help="directory of NIfTI volumes")
    p.add_argument("--target", type=int, help="cube extent (default: max axis)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train an alpha-GAN bundle")
    add_common(p)
    p.add_argument("--data", required=True, help="directory of NIfTI volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("adni_baseline", "sigmarat1", "sigmarat2"))
    p.add_argument("--loss", choices=("l_g1", "l_g2", "l_g3"))
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--latent", type=int)
    p.add_argument("--width", type=float)
    p.add_argument("--optimizer", choices=("adam", "adamw"))
    p.add_argument("--lr", type=float)
    p.add_argument("--target", type=int)
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.add_argument("--augment", choices=tuple(AUGMENT_CHOICES))
    p.add_argument("--gdl-alpha", dest="gdl_alpha", type=float)
    p.add_argument("--arch-dir", dest="arch_dir",
                   help="directory of <role>.txt network spec files")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode volumes from a checkpoint")
    add_common(p)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--count", type=int)
    p.add_argument("--reference", help="NIfTI whose header/affine to copy")
    p.add_argument("--montage", action="store_true",
                   help="also write per-volume PGM slice montages")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="metric report against a real set")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--real", required=True, help="directory of NIfTI volumes")
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument("--generated", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--msssim-trials", dest="msssim_trials", type=int)
    p.add_argument("--msssim-window", dest="msssim_window", type=int)
    p.add_argument("--mmd-trials", dest="mmd_trials", type=int)
    p.add_argument("--mmd-subset", dest="mmd_subset", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint contents")
    p.add_argument("checkpoint")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_inspect)

    return parser


def dispatch(argv=None) -> int:
    """Run one subcommand; 0 on success, 1 on contract/format errors,
    2 on usage errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    if getattr(args, "config", None):
        try:
            args._config_values = parse_config_file(args.config)
        except (OSError, ParseError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    else:
        args._config_values = {}
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
