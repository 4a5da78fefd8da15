"""Command-line front end.

Exit codes: 0 ok, 2 configuration or argument error, 3 numeric failure,
4 file format error, 5 artifact incompatibility, 1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .attacks import SETTINGS, finetune_attack, pgd_attack, random_key_attack, transform_robustness, write_histogram_csv
from .caks import SecretKey, select_key
from .codebook import SignatureCodebook, embed, format_signature, parse_signature, random_signature
from .distortion import KINDS, DistortionRanges
from .errors import CompatibilityError, ConfigError, ContractViolation, FormatError, KeySelectionError, NumericFailure
from .extractor import Extractor
from .field import FieldConfig, PoseDistribution, RadianceField
from .renderer import render_image, write_ppm
from .rng import make_rng
from .scene import PretrainConfig, make_scene, pretrain
from .trainer import TrainConfig, optimize
from .verify import embed_batch, verify_model

log = logging.getLogger("nsig")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERIC, EXIT_FORMAT, EXIT_COMPAT = 0, 1, 2, 3, 4, 5


# --------------------------------------------------------------------------
# configuration


@dataclass
class SceneConfig:
    seed: int = 0
    n_train: int = 40
    n_test: int = 10


@dataclass
class AttackConfig:
    transform_trials: int = 50
    finetune_trials: int = 10
    finetune_steps: int = 500
    finetune_lr: float = 1e-2
    pgd_trials: int = 50
    pgd_steps: int = 40
    pgd_targets: str = "grids"
    guessed_key_seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    randomkey_trials: int = 200


@dataclass
class PipelineConfig:
    seed: int = 0
    scene: SceneConfig = dc_field(default_factory=SceneConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    poses: PoseDistribution = dc_field(default_factory=PoseDistribution)
    pretrain: PretrainConfig = dc_field(default_factory=PretrainConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    attacks: AttackConfig = dc_field(default_factory=AttackConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value: Any, annotation: Any, where: str) -> Any:
    ann = str(annotation)
    if ann.startswith("tuple") or ann.startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(f"field '{where}' must be a list")
        return tuple(value)
    if ann in ("int",) and not (isinstance(value, int) and not isinstance(value, bool)):
        raise ConfigError(f"field '{where}' must be an integer")
    if ann in ("float",):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field '{where}' must be a number")
        return float(value)
    if ann == "bool" and not isinstance(value, bool):
        raise ConfigError(f"field '{where}' must be true or false")
    if ann == "str" and not isinstance(value, str):
        raise ConfigError(f"field '{where}' must be a string")
    if ann == "int | None" and value is not None and not isinstance(value, int):
        raise ConfigError(f"field '{where}' must be an integer or null")
    return value


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"field '{where}' must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        path = f"{where}.{k}" if where else k
        if k not in fields:
            raise ConfigError(f"unknown field '{path}'")
        f = fields[k]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[k] = _build(type(default), v, path)
        else:
            kwargs[k] = _coerce(v, f.type, path)
    try:
        return cls(**kwargs)
    except (ContractViolation, TypeError) as exc:
        raise ConfigError(f"invalid '{where or 'config'}': {exc}") from exc


def load_config(path: str | Path | None, env: dict | None = None) -> PipelineConfig:
    """Strict config load; NSIG_SEED in ``env`` overrides the global seed."""
    env = os.environ if env is None else env
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    cfg = _build(PipelineConfig, data, "")
    if "NSIG_SEED" in env:
        try:
            cfg.seed = int(env["NSIG_SEED"])
        except ValueError as exc:
            raise ConfigError("NSIG_SEED must be an integer") from exc
    # the global seed drives every run seed not set explicitly
    explicit_train = data.get("train", {}) if isinstance(data.get("train"), dict) else {}
    explicit_pre = data.get("pretrain", {}) if isinstance(data.get("pretrain"), dict) else {}
    if "NSIG_SEED" in env or "seed" not in explicit_pre:
        cfg.pretrain.seed = cfg.seed
    if "NSIG_SEED" in env or "seed" not in explicit_train:
        cfg.train.seed = cfg.seed
    if "NSIG_SEED" in env or "key_seed" not in explicit_train:
        cfg.train.key_seed = cfg.seed
    return cfg


# --------------------------------------------------------------------------
# helpers


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _signatures(values, n_bits: int) -> list[np.ndarray]:
    return [parse_signature(v, n_bits) for v in values or []]


def _trials(args, default: int) -> int:
    return default if args.trials is None else args.trials


def _load_model(path) -> RadianceField:
    return RadianceField.load(path)


# --------------------------------------------------------------------------
# commands


def cmd_pretrain(args, cfg: PipelineConfig) -> int:
    if args.steps is not None:
        cfg.pretrain.steps = args.steps
    if cfg.pretrain.steps == 0:
        log.warning("--steps 0: writing an untrained model")
    refs = make_scene(cfg.scene.seed, cfg.scene.n_train, cfg.scene.n_test, cfg.poses)
    field = RadianceField.create(cfg.field, cfg.seed)
    field, heldout, losses = pretrain(field, refs, cfg.pretrain)
    field.save(args.out)
    _emit({"out": str(args.out), "steps": cfg.pretrain.steps, "heldout_psnr": heldout,
           "final_loss": losses[-1] if losses else None})
    return EXIT_OK


def cmd_optimize(args, cfg: PipelineConfig) -> int:
    field = _load_model(args.model)
    if args.bits is not None:
        cfg.train.n_bits = args.bits
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    if args.no_distortion:
        cfg.train.distortion = False
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cb, ext, key, report = optimize(field, cfg.train, poses=cfg.poses)
    cb.save(out / "codebook.nscb")
    ext.save(out / "extractor.nsex")
    key.save(out / "key.json")
    report = dict(report)
    # wall time lives apart from the report so reruns reproduce report.json byte for byte
    (out / "report.json").write_text(json.dumps({k: v for k, v in report.items() if not k.endswith("seconds")},
                                                sort_keys=True, indent=1) + "\n")
    (out / "timing.json").write_text(json.dumps({k: v for k, v in report.items() if k.endswith("seconds")},
                                                sort_keys=True, indent=1) + "\n")
    _emit({"out_dir": str(out), "final_accuracy": report["final_accuracy"], "psnr_mean": report["psnr_mean"],
           "wall_seconds": report["wall_seconds"]})
    return EXIT_OK


def cmd_embed(args, cfg: PipelineConfig) -> int:
    field = _load_model(args.model)
    cb = SignatureCodebook.load(args.codebook)
    sigs = _signatures(args.signature, cb.n_bits)
    if args.out is not None:
        if len(sigs) != 1:
            raise ConfigError("--out takes exactly one --signature")
        t0 = time.perf_counter()
        wm = embed(field, cb, sigs[0])
        seconds = time.perf_counter() - t0
        wm.save(args.out)
        _emit({"models": [str(args.out)], "signatures": [format_signature(sigs[0])], "seconds": [seconds], "warnings": []})
        return EXIT_OK
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    batch = embed_batch(field, cb, sigs, args.out_dir)
    _emit({"models": batch.paths, "signatures": [format_signature(s) for s in sigs], "seconds": batch.seconds,
           "warnings": batch.warnings})
    return EXIT_OK


def cmd_render(args, cfg: PipelineConfig) -> int:
    field = _load_model(args.model)
    if args.key is not None:
        pose = SecretKey.load(args.key).pose
    else:
        pose = cfg.poses.sample(make_rng(args.pose_seed, 51))
    with torch.no_grad():
        img = render_image(field, pose, args.samples)
    write_ppm(args.out, img)
    _emit({"out": str(args.out), "pose": pose.to_dict(), "samples": args.samples})
    return EXIT_OK


def cmd_verify(args, cfg: PipelineConfig) -> int:
    key = SecretKey.load(args.key)
    ext = Extractor.load(args.extractor)
    sigs = _signatures(args.signature, key.n_bits)
    report = verify_model(args.model, key, ext, sigs, args.threshold, n_samples=cfg.train.n_samples)
    d = report.to_dict()
    d["accuracy"] = report.best_accuracy
    _emit(d)
    return EXIT_OK


def cmd_caks(args, cfg: PipelineConfig) -> int:
    field = _load_model(args.model)
    key, cands = select_key(field, args.pose_seed, args.bits, args.patch, args.patch, args.selection_seed,
                            args.mode, args.threshold, cfg.poses, cfg.train.n_samples)
    key.save(args.out)
    _emit({"out": str(args.out), "p0": len(cands.p0), "p1": len(cands.p1), "p2": len(cands.p2),
           "complexity_threshold": cands.complexity_threshold})
    return EXIT_OK


def cmd_attack(args, cfg: PipelineConfig) -> int:
    field = _load_model(args.model)
    cb = SignatureCodebook.load(args.codebook)
    key = SecretKey.load(args.key)
    ext = Extractor.load(args.extractor)
    if cb.entry_shape != tuple(field.theta_e.shape):
        raise CompatibilityError("codebook does not match the model")
    out = Path(args.out_dir) if args.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    a = cfg.attacks
    seed = cfg.seed
    ns = cfg.train.n_samples
    if args.kind == "transform":
        report = transform_robustness(field, cb, key, ext, trials=_trials(args, a.transform_trials), seed=seed, n_samples=ns)
    elif args.kind == "finetune":
        refs = make_scene(cfg.scene.seed, cfg.scene.n_train, 0, cfg.poses)
        key_clean = refs.scene.render(key.pose, field.t_near, field.t_far)
        report = finetune_attack(field, cb, key, ext, list(zip(refs.train_poses, refs.train_images)), key_clean,
                                 SETTINGS, a.finetune_steps, trials=_trials(args, a.finetune_trials),
                                 lr=a.finetune_lr, seed=seed, poses=cfg.poses, n_samples=ns)
    elif args.kind == "pgd":
        keys = "actual" if args.guessed is None else [int(s) for s in args.guessed.split(",")]
        report = pgd_attack(field, cb, key, ext, args.delta, keys, a.pgd_steps, _trials(args, a.pgd_trials),
                            a.pgd_targets, seed, cfg.poses, ns)
    else:
        sigs = _signatures(args.signature, cb.n_bits) or [random_signature(make_rng(seed, 91), cb.n_bits)]
        model = embed(field, cb, sigs[0])
        trials = _trials(args, a.randomkey_trials)
        report, hist = random_key_attack(model, key, ext, sigs[0], trials, seed, cfg.poses, ns)
        if out:
            write_histogram_csv(out / "randomkey_histogram.csv", hist)
    if out:
        (out / f"{args.kind}_report.json").write_text(report.to_json(include_wall_time=False) + "\n")
    _emit(report.to_dict())
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsig", description="Radiance-field signature embedding toolkit.")
    p.add_argument("--config", help="pipeline config JSON (strict schema)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="render the procedural scene and fit a field to it")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("optimize", help="train codebook and extractor for a frozen field")
    s.add_argument("--model", required=True)
    s.add_argument("--bits", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--no-distortion", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("embed", help="embed signatures into copies of a field")
    s.add_argument("--model", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--signature", action="append", required=True, help="hex (0x3A7F) or bitstring; repeatable")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--out")
    g.add_argument("--out-dir")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("render", help="render a full view to PPM")
    s.add_argument("--model", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--key")
    g.add_argument("--pose-seed", type=int)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("verify", help="extract a signature and compare with expected ones")
    s.add_argument("--model", required=True)
    s.add_argument("--key", required=True)
    s.add_argument("--extractor", required=True)
    s.add_argument("--signature", action="append", required=True)
    s.add_argument("--threshold", type=float, default=0.9)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("caks", help="select a secret key")
    s.add_argument("--model", required=True)
    s.add_argument("--bits", type=int, default=16)
    s.add_argument("--patch", type=int, default=8)
    s.add_argument("--pose-seed", type=int, default=0)
    s.add_argument("--selection-seed", type=int)
    s.add_argument("--mode", default="background-gray", choices=["background-gray", "low-variation"])
    s.add_argument("--threshold", type=float, default=0.9)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_caks)

    s = sub.add_parser("attack", help="run a robustness attack")
    s.add_argument("--kind", required=True, choices=["transform", "finetune", "pgd", "randomkey"])
    s.add_argument("--model", required=True, help="original (unwatermarked) field")
    s.add_argument("--codebook", required=True)
    s.add_argument("--key", required=True)
    s.add_argument("--extractor", required=True)
    s.add_argument("--signature", action="append")
    s.add_argument("--trials", type=int)
    s.add_argument("--delta", type=float, default=1.0)
    s.add_argument("--guessed", help="comma-separated seeds for guessed attack keys (pgd)")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_attack)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, ContractViolation) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericFailure as exc:
        log.error("numeric failure%s: %s", f" at step {exc.step}" if exc.step is not None else "", exc)
        return EXIT_NUMERIC
    except FormatError as exc:
        log.error("format error: %s", exc)
        return EXIT_FORMAT
    except CompatibilityError as exc:
        log.error("incompatible artifacts: %s", exc)
        return EXIT_COMPAT
    except KeySelectionError as exc:
        log.error("key selection failed: %s", exc)
        return EXIT_OTHER
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
