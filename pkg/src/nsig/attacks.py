"""Robustness harness: image transforms, fine-tuning, PGD on parameters, random keys."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .caks import SecretKey, select_key
from .codebook import SignatureCodebook, embed, random_signature
from .distortion import KINDS, DistortionRanges, apply, make_spec, sample_patches
from .errors import ContractViolation
from .extractor import Extractor, binarize, bit_accuracy, extract_logits
from .field import PoseDistribution, RadianceField
from .numerics import OptimizerState, adam_step, bce_with_logits, forward_backward
from .renderer import DEFAULT_SAMPLES, generate_rays, pixel_grid, render_image, render_patch_set, render_rays
from .rng import make_rng
from .verify import extract_signature, psnr

log = logging.getLogger(__name__)

CHECKPOINTS = (0, 100, 300, 500)
SETTINGS = ("w/o CI, w/o PK", "w/o CI, w/ PK", "w/ CI, w/o PK", "w/ CI, w/ PK")


@dataclass
class AttackReport:
    kind: str
    params: dict
    conditions: dict  # condition name -> {"accuracy": mean, "accuracies": [...], ...}
    seeds: dict
    wall_seconds: float = 0.0
    notes: list[str] = dc_field(default_factory=list)

    def to_dict(self, include_wall_time: bool = True) -> dict:
        d = asdict(self)
        if not include_wall_time:
            d.pop("wall_seconds")
        return d

    def to_json(self, include_wall_time: bool = True) -> str:
        return json.dumps(self.to_dict(include_wall_time), sort_keys=True, indent=1)

    def accuracy(self, condition: str) -> float:
        return self.conditions[condition]["accuracy"]


def _summary(accs: Sequence[float], **extra) -> dict:
    return {"accuracy": float(np.mean(accs)) if len(accs) else None, "accuracies": [float(a) for a in accs], "trials": len(accs), **extra}


# --------------------------------------------------------------------------
# image-level transforms


def transform_robustness(
    field: RadianceField,
    cb: SignatureCodebook,
    key: SecretKey,
    ext: Extractor,
    kinds: Sequence[str] = ("none",) + KINDS,
    trials: int = 50,
    seed: int = 0,
    ranges: DistortionRanges | None = None,
    n_samples: int = DEFAULT_SAMPLES,
) -> AttackReport:
    """Accuracy when the key-pose render is distorted before patches are read.

    Each trial embeds a fresh signature, renders the key view once and runs
    every kind on that render with freshly drawn parameters.
    """
    t0 = time.time()
    rng = make_rng(seed, 81)
    accs = {k: [] for k in kinds}
    for _ in range(trials):
        m = random_signature(rng, cb.n_bits)
        with torch.no_grad():
            image = render_image(embed(field, cb, m), key.pose, n_samples)
        for kind in kinds:
            spec = make_spec(kind, rng, ranges)
            distorted, coord_map = apply(image, spec, differentiable=False)
            patches = sample_patches(distorted, key.centers, key.h, key.w, coord_map)
            accs[kind].append(bit_accuracy(binarize(extract_logits(ext, patches)), m))
    return AttackReport(
        "transform",
        {"kinds": list(kinds), "trials": trials, "ranges": asdict(ranges or DistortionRanges())},
        {k: _summary(v) for k, v in accs.items()},
        {"seed": seed},
        time.time() - t0,
    )


# --------------------------------------------------------------------------
# fine-tuning


def _ray_table(pose):
    rows, cols = pixel_grid(pose.H, pose.W)
    o, d = generate_rays(pose, np.stack([rows + 0.5, cols + 0.5], -1))
    return rows, cols, o, d


def finetune_attack(
    field: RadianceField,
    cb: SignatureCodebook,
    key: SecretKey,
    ext: Extractor,
    clean_views: Sequence[tuple] = (),
    key_view_clean: torch.Tensor | None = None,
    settings: Sequence[str] = SETTINGS,
    steps: int = 500,
    checkpoints: Sequence[int] = CHECKPOINTS,
    trials: int = 10,
    lr: float = 1e-2,
    batch_rays: int = 1024,
    noise_sigma: float = 0.02,
    n_views: int = 20,
    seed: int = 0,
    poses: PoseDistribution | None = None,
    n_samples: int = DEFAULT_SAMPLES,
) -> AttackReport:
    """Photometric fine-tuning of every field parameter of a watermarked model.

    ``clean_views`` are ``(pose, image)`` pairs of the clean scene (used with
    clean images and without the pose key); ``key_view_clean`` is the clean
    image at the key pose (clean images with the pose key). Without clean
    images the attacker fits the model's own renders plus fresh Gaussian noise.
    The true key is only used to score checkpoints.
    """
    t0 = time.time()
    poses = poses or PoseDistribution()
    checkpoints = sorted(c for c in checkpoints if c <= steps)
    conditions = {}
    notes = []
    for s_idx, setting in enumerate(settings):
        with_ci = setting.startswith("w/ CI")
        with_pk = setting.endswith("w/ PK")
        if with_ci and with_pk and key_view_clean is None:
            raise ContractViolation("clean key-pose image required for the clean-image, pose-key setting")
        if with_ci and not with_pk and not clean_views:
            raise ContractViolation("clean views required for the clean-image, random-pose setting")
        rng = make_rng(seed, 83, s_idx)
        per_ckpt = {c: [] for c in checkpoints}
        for trial in range(trials):
            m = random_signature(rng, cb.n_bits)
            model = embed(field, cb, m)
            frozen = model.clone()
            if with_pk:
                views = [(key.pose, key_view_clean if with_ci else None)]
            elif with_ci:
                views = list(clean_views)
            else:
                views = [(poses.sample(rng), None) for _ in range(n_views)]
            tables = [_ray_table(p) for p, _ in views]
            params = model.parameters()
            opt = OptimizerState(lr=lr, decay=1.0, eps=1e-15)
            last_good = {k: v.clone() for k, v in params.items()}
            for step in range(steps + 1):
                if step in per_ckpt:
                    per_ckpt[step].append(bit_accuracy(extract_signature(model, key, ext, n_samples), m))
                    last_good = {k: v.clone() for k, v in params.items()}
                if step == steps:
                    break
                v = int(rng.integers(len(views)))
                rows, cols, o, d = tables[v]
                pix = rng.choice(len(rows), size=batch_rays, replace=False)
                tpix = torch.from_numpy(pix)
                if with_ci:
                    target = views[v][1].reshape(-1, 3)[tpix]
                else:
                    with torch.no_grad():
                        target = render_rays(frozen, o[tpix], d[tpix], rows[pix], cols[pix], n_samples, jitter_seed=0)
                    target = target + torch.from_numpy(rng.normal(0.0, noise_sigma, target.shape).astype(np.float32))
                for p in params.values():
                    p.requires_grad_(True)
                pred = render_rays(model, o[tpix], d[tpix], rows[pix], cols[pix], n_samples, jitter_seed=step + 1)
                loss = ((pred - target) ** 2).mean()
                if not torch.isfinite(loss):
                    notes.append(f"{setting} trial {trial}: non-finite loss at step {step}, restored last checkpoint")
                    with torch.no_grad():
                        for k, p in params.items():
                            p.copy_(last_good[k])
                    for p in params.values():
                        p.requires_grad_(False)
                    continue
                grads = forward_backward(loss, params)
                for p in params.values():
                    p.requires_grad_(False)
                adam_step(opt, params, grads)
        conditions[setting] = {str(c): _summary(per_ckpt[c]) for c in checkpoints}
        conditions[setting]["accuracy"] = conditions[setting][str(checkpoints[-1])]["accuracy"]
    return AttackReport(
        "finetune",
        {"steps": steps, "checkpoints": list(checkpoints), "trials": trials, "lr": lr, "batch_rays": batch_rays,
         "noise_sigma": noise_sigma, "n_views": n_views},
        conditions,
        {"seed": seed},
        time.time() - t0,
        notes,
    )


# --------------------------------------------------------------------------
# PGD on parameters


def _project(p: torch.Tensor, base: torch.Tensor, delta: float) -> torch.Tensor:
    """Nearest point of the l_inf ball around ``base``, exact in the stored dtype."""
    b = base.double()
    out = (b + (p.double() - b).clamp(-delta, delta)).to(p.dtype)
    # rounding to the stored dtype can land one ulp outside the ball; step those entries back toward base
    over = _excess(out, base, delta) > 0
    while over.any():
        out = torch.where(over, torch.nextafter(out, base), out)
        over = _excess(out, base, delta) > 0
    return out


def _excess(p: torch.Tensor, base: torch.Tensor, delta: float) -> torch.Tensor:
    """``|p - base| - delta`` in float64, which holds a float32 difference exactly."""
    return (p.double() - base.double()).abs() - delta


def pgd_perturb(
    model: RadianceField,
    ext: Extractor,
    attack_key: SecretKey,
    target_bits,
    delta: float,
    steps: int = 40,
    step_size: float | None = None,
    targets: str = "grids",
    n_samples: int = DEFAULT_SAMPLES,
    max_violation: list | None = None,
) -> RadianceField:
    """l_inf projected sign-gradient descent on the extractor's loss toward ``target_bits``.

    ``targets`` is ``"grids"`` (all feature grids) or ``"all"`` (grids and
    decoder). Returns the perturbed copy; ``max_violation`` collects
    ``max|params - original| - delta`` after every step.
    """
    step_size = delta / 10.0 if step_size is None else step_size
    attacked = model.clone()
    params = attacked.parameters()
    names = [k for k in params if targets == "all" or k.startswith("grid")]
    base = {k: params[k].clone() for k in names}
    tgt = torch.as_tensor(np.asarray(target_bits), dtype=torch.float32)
    ext.eval()
    for _ in range(steps):
        leaves = {k: params[k] for k in names}
        for p in leaves.values():
            p.requires_grad_(True)
        logits = ext(render_patch_set(attacked, attack_key, n_samples))
        grads = forward_backward(bce_with_logits(logits, tgt), leaves)
        with torch.no_grad():
            for k in names:
                p = params[k]
                p.requires_grad_(False)
                p.sub_(step_size * grads[k].sign())
                p.copy_(_project(p, base[k], delta))
        if max_violation is not None:
            max_violation.append(max(float(_excess(params[k], base[k], delta).max()) for k in names))
    return attacked


def pgd_attack(
    field: RadianceField,
    cb: SignatureCodebook,
    key: SecretKey,
    ext: Extractor,
    delta: float,
    attack_keys: str | Sequence[int] = "actual",
    steps: int = 40,
    trials: int = 50,
    targets: str = "grids",
    seed: int = 0,
    poses: PoseDistribution | None = None,
    n_samples: int = DEFAULT_SAMPLES,
) -> AttackReport:
    """PGD toward a random signature using either the true key or keys guessed from seeds.

    With guessed keys the trials are spread evenly over the given seeds. The
    true key scores the attacked model; PSNR compares attacked and unattacked
    full renders at the attack pose.
    """
    t0 = time.time()
    poses = poses or PoseDistribution()
    rng = make_rng(seed, 87)
    accs, psnrs, violations = [], [], []
    guessed = attack_keys != "actual"
    seeds = list(attack_keys) if guessed else []
    for trial in range(trials):
        m = random_signature(rng, cb.n_bits)
        m_random = random_signature(rng, cb.n_bits)
        model = embed(field, cb, m)
        if guessed:
            g_seed = seeds[trial * len(seeds) // max(1, trials)]
            attack_key, _ = select_key(model, 100_000 + g_seed, cb.n_bits, key.h, key.w, poses=poses, n_samples=n_samples)
        else:
            attack_key = key
        viol = []
        attacked = pgd_perturb(model, ext, attack_key, m_random, delta, steps, targets=targets, n_samples=n_samples,
                               max_violation=viol)
        violations.append(max(viol) if viol else 0.0)
        accs.append(bit_accuracy(extract_signature(attacked, key, ext, n_samples), m))
        with torch.no_grad():
            psnrs.append(psnr(render_image(attacked, attack_key.pose, n_samples), render_image(model, attack_key.pose, n_samples)))
    name = f"{'guessed' if guessed else 'actual'} key, delta={delta}"
    return AttackReport(
        "pgd",
        {"delta": delta, "steps": steps, "step_size": delta / 10.0, "norm": "linf", "targets": targets,
         "attack_keys": "actual" if not guessed else seeds, "trials": trials},
        {name: _summary(accs, psnr=[float(p) for p in psnrs], psnr_mean=float(np.mean(psnrs)) if psnrs else None,
                        max_constraint_violation=float(max(violations)) if violations else 0.0)},
        {"seed": seed},
        time.time() - t0,
    )


# --------------------------------------------------------------------------
# random keys


def random_key_attack(
    model: RadianceField,
    key: SecretKey,
    ext: Extractor,
    signature,
    trials: int = 200,
    seed: int = 0,
    poses: PoseDistribution | None = None,
    n_samples: int = DEFAULT_SAMPLES,
) -> tuple[AttackReport, list[tuple[float, int]]]:
    """Accuracy histogram of keys drawn by the key-selection pipeline at random seeds.

    Histogram bins are the attainable accuracies ``k / N_b``.
    """
    t0 = time.time()
    poses = poses or PoseDistribution()
    n_bits = len(key.centers)
    rng = make_rng(seed, 89)
    correct = bit_accuracy(extract_signature(model, key, ext, n_samples), signature)
    accs = []
    for _ in range(trials):
        pose_seed, sel_seed = (int(v) for v in rng.integers(0, 2**31, 2))
        guess, _ = select_key(model, pose_seed, n_bits, key.h, key.w, sel_seed, poses=poses, n_samples=n_samples)
        accs.append(bit_accuracy(extract_signature(model, guess, ext, n_samples), signature))
    counts = np.bincount(np.rint(np.array(accs, dtype=np.float64) * n_bits).astype(int), minlength=n_bits + 1) if accs else np.zeros(n_bits + 1, int)
    hist = [(k / n_bits, int(c)) for k, c in enumerate(counts)]
    below = float(np.mean([a < correct - 0.2 for a in accs])) if accs else None
    report = AttackReport(
        "randomkey",
        {"trials": trials},
        {"correct key": {"accuracy": correct, "trials": 1},
         "random keys": _summary(accs, fraction_below_correct_minus_0_2=below)},
        {"seed": seed},
        time.time() - t0,
    )
    return report, hist


def write_histogram_csv(path: str | Path, hist: Sequence[tuple[float, int]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_center", "count"])
        for center, count in hist:
            w.writerow([repr(float(center)), int(count)])
