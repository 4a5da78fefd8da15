"""Joint optimization of the signature codebook and the extractor.

The field stays frozen. Each iteration draws a random signature, renders the
key view with the signature embedded, corrupts it with a random distortion,
reads the key patches and takes one Adam step on codebook plus extractor.

Because the field is frozen, everything about the key view that does not
depend on the finest grid is computed once (:class:`KeyView`). Only samples
that are inside the cube and visible in the original render are re-decoded
each step; the rest keep their original density and color.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
import torch

from .caks import DEFAULT_GRAY_THRESHOLD, SecretKey, select_key
from .codebook import SignatureCodebook, codebook_init, embed, random_signature, signature_representation
from .distortion import DistortionRanges, DistortionSpec, apply, sample_patches, sample_spec
from .errors import ContractViolation, NumericFailure
from .extractor import Extractor
from .field import CameraPose, PoseDistribution, RadianceField
from .numerics import OptimizerState, adam_step, bce_with_logits, corner_weights, forward_backward, trilinear_gather
from .renderer import BACKGROUND, DEFAULT_SAMPLES, composite, generate_rays, pixel_grid, render_image, sample_depths, sample_field, transmittance
from .rng import make_rng
from .verify import psnr, signature_accuracy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_bits: int = 16
    iterations: int = 3000
    content_rays: int = 4096
    gamma: float = 10.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.999
    weight_decay: float = 5e-4
    codebook_scale: float = 1e-3
    distortion: bool = True
    ranges: DistortionRanges = dc_field(default_factory=DistortionRanges)
    seed: int = 0
    key_seed: int = 0
    selection_seed: int | None = None
    patch_h: int = 8
    patch_w: int = 8
    filter_mode: str = "background-gray"
    gray_threshold: float = DEFAULT_GRAY_THRESHOLD
    n_samples: int = DEFAULT_SAMPLES
    min_transmittance: float = 1e-4
    min_alpha: float = 1e-4
    recalibration_steps: int = 100
    eval_signatures: int = 50
    eval_poses: int = 5
    log_every: int = 100

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractViolation("gamma must be >= 0")
        if self.iterations < 0:
            raise ContractViolation("iterations must be >= 0")
        if self.n_bits < 1:
            raise ContractViolation("need at least one signature bit")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# losses


def content_loss(watermarked: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Mean squared error over rays and channels."""
    return ((watermarked - original) ** 2).mean()


def signature_loss(logits: torch.Tensor, m) -> torch.Tensor:
    """Mean per-bit cross-entropy between logistic(logits) and the bits (each term capped)."""
    target = torch.as_tensor(np.asarray(m), dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ContractViolation(f"{logits.shape[0]} logits for {target.numel()} bits")
    return bce_with_logits(logits, target)


def overall_loss(lc, ls, gamma: float):
    return lc + gamma * ls


# --------------------------------------------------------------------------
# cached key view


class KeyView:
    """Differentiable render of one pose as a function of the finest grid only."""

    def __init__(
        self,
        field: RadianceField,
        pose: CameraPose,
        n_samples: int = DEFAULT_SAMPLES,
        jitter_seed: int = 0,
        min_transmittance: float = 1e-4,
        min_alpha: float = 1e-4,
        background: float = BACKGROUND,
    ):
        self.field = field
        self.pose = pose
        self.background = background
        H, W = pose.H, pose.W
        rows, cols = pixel_grid(H, W)
        dtype = field.theta_e.dtype
        o, d = generate_rays(pose, np.stack([rows + 0.5, cols + 0.5], -1), dtype)
        t, deltas = sample_depths(field.t_near, field.t_far, rows, cols, n_samples, jitter_seed, dtype)
        with torch.no_grad():
            sigma0, rgb0 = sample_field(field, o, d, t, background)
            pts = o[:, None, :] + t[..., None] * d[:, None, :]
            inside = ((pts >= 0) & (pts <= 1)).all(-1)
            alpha0 = 1.0 - torch.exp(-sigma0 * deltas)
            active = inside & (transmittance(sigma0, deltas) >= min_transmittance) & (alpha0 >= min_alpha)
            self.active = active.reshape(-1).nonzero().squeeze(-1)
            pa = pts.reshape(-1, 3)[self.active]
            self.dirs = d[:, None, :].expand_as(pts).reshape(-1, 3)[self.active]
            coarse = []
            for g in field.grids[:-1]:
                idx, w = corner_weights(pa, g.shape[0])
                coarse.append(trilinear_gather(g, idx, w))
            self.coarse = torch.cat(coarse, -1) if coarse else pa.new_zeros(len(pa), 0)
            self.idx, self.w = corner_weights(pa, field.theta_e.shape[0])
            self.sigma0 = sigma0
            self.rgb0 = rgb0
            self.deltas = deltas
            self.image0 = composite(sigma0, deltas, rgb0, background).reshape(H, W, 3)

    @property
    def n_active(self) -> int:
        return int(self.active.numel())

    def render(self, theta_e: torch.Tensor) -> torch.Tensor:
        """(H, W, 3) image with ``theta_e`` as the finest grid."""
        n, s = self.sigma0.shape
        fine = trilinear_gather(theta_e, self.idx, self.w)
        sig_a, rgb_a = self.field.decode(torch.cat([self.coarse, fine], -1), self.dirs)
        sigma = self.sigma0.reshape(-1).index_put((self.active,), sig_a).reshape(n, s)
        rgb = self.rgb0.reshape(-1, 3).index_put((self.active,), rgb_a).reshape(n, s, 3)
        return composite(sigma, self.deltas, rgb, self.background).reshape(self.pose.H, self.pose.W, 3)


# --------------------------------------------------------------------------
# training state


@dataclass
class Trainer:
    field: RadianceField
    key: SecretKey
    cfg: TrainConfig
    codebook: SignatureCodebook
    extractor: Extractor
    view: KeyView
    opt: OptimizerState
    rng: np.random.Generator
    history: list[dict] = dc_field(default_factory=list)

    @classmethod
    def create(cls, field: RadianceField, key: SecretKey, cfg: TrainConfig) -> "Trainer":
        cb = codebook_init(cfg.n_bits, tuple(field.theta_e.shape), cfg.seed, cfg.codebook_scale)
        ext = Extractor(patch_size=(cfg.patch_h, cfg.patch_w), seed=cfg.seed)
        view = KeyView(field, key.pose, cfg.n_samples, 0, cfg.min_transmittance, cfg.min_alpha)
        opt = OptimizerState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.lr_decay, cfg.weight_decay)
        return cls(field, key, cfg, cb, ext, view, opt, make_rng(cfg.seed, 71))

    def leaves(self) -> dict[str, torch.Tensor]:
        out = {"codebook": self.codebook.entries}
        out.update({f"extractor.{k}": p for k, p in self.extractor.named_parameters()})
        return out

    def watermarked_view(self, m, grad: bool = True) -> torch.Tensor:
        g_m = signature_representation(self.codebook, m)
        with torch.set_grad_enabled(grad):
            return self.view.render(self.field.theta_e + g_m)

    def key_patches(self, image: torch.Tensor, spec: DistortionSpec) -> torch.Tensor:
        distorted, coord_map = apply(image, spec, differentiable=True)
        return sample_patches(distorted, self.key.centers, self.key.h, self.key.w, coord_map)


def train_step(tr: Trainer, step: int | None = None) -> dict:
    """One iteration; returns the losses and the distortion kind used."""
    cfg = tr.cfg
    step = len(tr.history) if step is None else step
    m = random_signature(tr.rng, cfg.n_bits)
    spec = sample_spec(tr.rng, cfg.ranges) if cfg.distortion else DistortionSpec("none")
    H, W = tr.key.pose.H, tr.key.pose.W
    pix = torch.from_numpy(tr.rng.choice(H * W, size=min(cfg.content_rays, H * W), replace=False))

    leaves = tr.leaves()
    for p in leaves.values():
        p.requires_grad_(True)
    tr.extractor.train()
    image = tr.watermarked_view(m)
    lc = content_loss(image.reshape(-1, 3)[pix], tr.view.image0.reshape(-1, 3)[pix])
    logits = tr.extractor(tr.key_patches(image, spec))
    ls = signature_loss(logits, m)
    loss = overall_loss(lc, ls, cfg.gamma)
    if not torch.isfinite(loss):
        raise NumericFailure(
            f"non-finite loss at step {step} (content {lc.item()}, signature {ls.item()}, distortion {spec.kind})",
            node="overall_loss",
            step=step,
        )
    grads = forward_backward(loss, leaves)
    adam_step(tr.opt, leaves, grads)
    for p in leaves.values():
        p.requires_grad_(False)
    rec = {"step": step, "loss": loss.item(), "content": lc.item(), "signature": ls.item(), "kind": spec.kind,
           "signature_bits": "".join(map(str, m))}
    tr.history.append(rec)
    return rec


@torch.no_grad()
def recalibrate_normalization(tr: Trainer, steps: int) -> None:
    """Re-estimate the extractor's running statistics with the final codebook, then freeze them."""
    if steps <= 0:
        tr.extractor.eval()
        return
    rng = make_rng(tr.cfg.seed, 73)
    bns = [mod for mod in tr.extractor.modules() if isinstance(mod, torch.nn.BatchNorm2d)]
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None  # cumulative average
    tr.extractor.train()
    for _ in range(steps):
        m = random_signature(rng, tr.cfg.n_bits)
        spec = sample_spec(rng, tr.cfg.ranges) if tr.cfg.distortion else DistortionSpec("none")
        tr.extractor(tr.key_patches(tr.watermarked_view(m, grad=False), spec))
    for bn, mom in zip(bns, saved):
        bn.momentum = mom
    tr.extractor.eval()


def downsample(values: list[float], points: int = 100) -> list[float]:
    if len(values) <= points:
        return [float(v) for v in values]
    edges = np.linspace(0, len(values), points + 1).astype(int)
    return [float(np.mean(values[a:b])) for a, b in zip(edges[:-1], edges[1:])]


def optimize(
    field: RadianceField,
    cfg: TrainConfig | None = None,
    key: SecretKey | None = None,
    poses: PoseDistribution | None = None,
) -> tuple[SignatureCodebook, Extractor, SecretKey, dict]:
    """Select a key (unless given), train, freeze normalization and evaluate on fresh signatures."""
    cfg = cfg or TrainConfig()
    poses = poses or PoseDistribution()
    t0 = time.time()
    if key is None:
        key, _ = select_key(field, cfg.key_seed, cfg.n_bits, cfg.patch_h, cfg.patch_w, cfg.selection_seed,
                            cfg.filter_mode, cfg.gray_threshold, poses, cfg.n_samples)
    tr = Trainer.create(field, key, cfg)
    log.info("key view: %d active samples of %d", tr.view.n_active, tr.view.sigma0.numel())
    for step in range(cfg.iterations):
        rec = train_step(tr, step)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            recent = tr.history[-cfg.log_every :]
            log.info("step %d loss %.4f content %.2e signature %.4f (%.0fs)", step + 1,
                     np.mean([r["loss"] for r in recent]), np.mean([r["content"] for r in recent]),
                     np.mean([r["signature"] for r in recent]), time.time() - t0)
    recalibrate_normalization(tr, cfg.recalibration_steps if cfg.iterations else 0)
    train_seconds = time.time() - t0

    eval_rng = make_rng(cfg.seed, 79)
    sigs = [random_signature(eval_rng, cfg.n_bits) for _ in range(cfg.eval_signatures)]
    accs = signature_accuracy(field, tr.codebook, key, tr.extractor, sigs, cfg.n_samples)
    psnrs = []
    with torch.no_grad():
        for k in range(cfg.eval_poses):
            pose = poses.sample(eval_rng)
            wm = embed(field, tr.codebook, random_signature(eval_rng, cfg.n_bits))
            psnrs.append(psnr(render_image(wm, pose, cfg.n_samples), render_image(field, pose, cfg.n_samples)))
    losses = [r["loss"] for r in tr.history]
    report = {
        "config": cfg.to_dict(),
        "seeds": {"train": cfg.seed, "key": cfg.key_seed, "selection": key.created_from.get("selection-seed")},
        "active_samples": tr.view.n_active,
        "loss_curve": downsample(losses),
        "content_curve": downsample([r["content"] for r in tr.history]),
        "signature_curve": downsample([r["signature"] for r in tr.history]),
        "trained_signatures": sorted({r["signature_bits"] for r in tr.history}),
        "final_accuracy": float(np.mean(accs)) if accs else None,
        "accuracies": accs,
        "psnr": psnrs,
        "psnr_mean": float(np.mean(psnrs)) if psnrs else None,
        "train_seconds": train_seconds,
        "wall_seconds": time.time() - t0,
    }
    return tr.codebook, tr.extractor, key, report
