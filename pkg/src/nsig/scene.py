"""Procedural desk-scale scene and photometric pretraining of the field."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from .errors import NumericFailure
from .field import CameraPose, FieldConfig, PoseDistribution, RadianceField
from .numerics import OptimizerState, adam_step, forward_backward
from .renderer import composite, generate_rays, pixel_grid, render_image, render_rays, sample_depths
from .rng import make_rng

log = logging.getLogger(__name__)

REFERENCE_SAMPLES = 256


@dataclass
class Blob:
    center: np.ndarray
    radii: np.ndarray
    power: float  # 2 = ellipsoid, 4 = rounded box
    color: np.ndarray
    stripe_dir: np.ndarray
    stripe_freq: float
    stripe_phase: float


@dataclass
class Scene:
    """Soft-edged colored ellipsoids and rounded boxes with striped albedo."""

    blobs: list[Blob]
    peak_density: float = 40.0
    edge_width: float = 0.015

    def _blob_bounds(self, b: Blob) -> tuple[np.ndarray, np.ndarray]:
        # outside this box the sigmoid falloff is below 1e-12 of the peak density
        margin = b.radii + 28.0 * self.edge_width * b.radii / b.radii.mean() + 1e-3
        return b.center - margin, b.center + margin

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        boxes = [self._blob_bounds(b) for b in self.blobs]
        return np.min([lo for lo, _ in boxes], 0), np.max([hi for _, hi in boxes], 0)

    def density_color(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = x.to(torch.float64)
        sig_total = x.new_zeros(x.shape[0])
        col = x.new_zeros(x.shape[0], 3)
        lo, hi = self.bounds()
        keep = ((x >= torch.from_numpy(lo)) & (x <= torch.from_numpy(hi))).all(-1).nonzero().squeeze(-1)
        xk = x[keep]
        for b in self.blobs:
            blo, bhi = self._blob_bounds(b)
            near_k = ((xk >= torch.from_numpy(blo)) & (xk <= torch.from_numpy(bhi))).all(-1).nonzero().squeeze(-1)
            if near_k.numel() == 0:
                continue
            near = keep[near_k]
            xn = xk[near_k]
            u = (xn - torch.from_numpy(b.center)) / torch.from_numpy(b.radii)
            q = (u.abs() ** b.power).sum(-1) ** (1.0 / b.power)
            dist = (q - 1.0) * float(b.radii.mean())
            s = self.peak_density * torch.sigmoid(-dist / self.edge_width)
            stripe = 0.7 + 0.3 * torch.sin(2 * math.pi * b.stripe_freq * (xn @ torch.from_numpy(b.stripe_dir)) + b.stripe_phase)
            sig_total.index_add_(0, near, s)
            col.index_add_(0, near, s[:, None] * stripe[:, None] * torch.from_numpy(b.color)[None, :])
        return sig_total, col / sig_total.clamp_min(1e-12)[:, None]

    def render_rays(self, origins, dirs, rows, cols, t_near, t_far, n_samples=REFERENCE_SAMPLES, chunk=2048) -> torch.Tensor:
        out = []
        for start in range(0, len(rows), chunk):
            sl = slice(start, start + chunk)
            t, deltas = sample_depths(t_near, t_far, rows[sl], cols[sl], n_samples, None, torch.float64)
            o = origins[sl].to(torch.float64)
            d = dirs[sl].to(torch.float64)
            pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
            sigma, rgb = self.density_color(pts)
            out.append(composite(sigma.reshape(t.shape), deltas, rgb.reshape(*t.shape, 3), 1.0))
        return torch.cat(out).to(torch.float32)

    def render(self, pose: CameraPose, t_near: float, t_far: float, n_samples: int = REFERENCE_SAMPLES) -> torch.Tensor:
        rows, cols = pixel_grid(pose.H, pose.W)
        o, d = generate_rays(pose, np.stack([rows + 0.5, cols + 0.5], -1), torch.float64)
        return self.render_rays(o, d, rows, cols, t_near, t_far, n_samples).reshape(pose.H, pose.W, 3)


@dataclass
class ReferenceSet:
    scene: Scene
    train_poses: list[CameraPose]
    train_images: torch.Tensor  # (N, H, W, 3)
    test_poses: list[CameraPose]
    test_images: torch.Tensor
    poses: PoseDistribution = dc_field(default_factory=PoseDistribution)
    t_near: float = FieldConfig.t_near
    t_far: float = FieldConfig.t_far


def random_scene(seed: int) -> Scene:
    rng = make_rng(seed, 31)
    blobs = []
    for _ in range(int(rng.integers(3, 7))):
        radii = rng.uniform(0.12, 0.2, 3)
        center = rng.uniform(0.3, 0.7, 3)
        hue = rng.uniform(0, 1)
        color = np.array([0.5 + 0.45 * math.cos(2 * math.pi * (hue + k / 3)) for k in range(3)])
        color = 0.1 + 0.75 * (color - color.min()) / max(1e-6, color.max() - color.min()) * rng.uniform(0.6, 1.0)
        v = rng.normal(size=3)
        blobs.append(
            Blob(
                center=center,
                radii=radii,
                power=float(rng.choice([2.0, 4.0])),
                color=color,
                stripe_dir=v / np.linalg.norm(v),
                stripe_freq=float(rng.uniform(3.0, 5.5)),
                stripe_phase=float(rng.uniform(0, 2 * math.pi)),
            )
        )
    return Scene(blobs)


def make_scene(seed: int = 0, n_train: int = 40, n_test: int = 10, poses: PoseDistribution | None = None) -> ReferenceSet:
    """Deterministic procedural scene with reference renders on a hemisphere of poses."""
    poses = poses or PoseDistribution()
    scene = random_scene(seed)
    rng = make_rng(seed, 32)
    train = [poses.sample(rng) for _ in range(n_train)]
    test = [poses.sample(rng) for _ in range(n_test)]
    t_near, t_far = FieldConfig.t_near, FieldConfig.t_far
    render = lambda ps: torch.stack([scene.render(p, t_near, t_far) for p in ps]) if ps else torch.zeros(0, poses.H, poses.W, 3)
    return ReferenceSet(scene, train, render(train), test, render(test), poses, t_near, t_far)


# --------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainConfig:
    steps: int = 5000
    batch_rays: int = 1024
    lr: float = 1e-2
    final_lr_ratio: float = 0.05
    n_samples: int = 64
    seed: int = 0
    log_every: int = 500


def psnr_value(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a.to(torch.float64) - b.to(torch.float64)) ** 2).mean())
    return 100.0 if mse == 0 else min(100.0, 10.0 * math.log10(1.0 / mse))


def heldout_psnr(field: RadianceField, refs: ReferenceSet, n_samples: int = 64) -> float:
    if not refs.test_poses:
        return float("nan")
    with torch.no_grad():
        vals = [psnr_value(render_image(field, p, n_samples), img) for p, img in zip(refs.test_poses, refs.test_images)]
    return float(np.mean(vals))


def pretrain(
    field: RadianceField, refs: ReferenceSet, cfg: PretrainConfig | None = None
) -> tuple[RadianceField, float, list[float]]:
    """Fit the field to the reference renders with random ray batches.

    Returns the trained copy, held-out PSNR and the per-step loss curve.
    """
    cfg = cfg or PretrainConfig()
    field = field.clone()
    if cfg.steps == 0:
        return field, heldout_psnr(field, refs, cfg.n_samples), []
    params = field.parameters()
    for p in params.values():
        p.requires_grad_(True)
    decay = cfg.final_lr_ratio ** (1.0 / max(1, cfg.steps))
    state = OptimizerState(lr=cfg.lr, decay=decay, eps=1e-15)
    rng = make_rng(cfg.seed, 41)
    n_img, H, W, _ = refs.train_images.shape
    flat_refs = refs.train_images.reshape(n_img, H * W, 3)
    rows_all, cols_all = pixel_grid(H, W)
    coords = np.stack([rows_all + 0.5, cols_all + 0.5], -1)
    tables = [generate_rays(p, coords) for p in refs.train_poses]
    all_origins = torch.stack([o for o, _ in tables])
    all_dirs = torch.stack([d for _, d in tables])

    losses = []
    t0 = time.time()
    for step in range(cfg.steps):
        img = torch.from_numpy(rng.integers(0, n_img, cfg.batch_rays))
        pix = rng.integers(0, H * W, cfg.batch_rays)
        tpix = torch.from_numpy(pix)
        target = flat_refs[img, tpix]
        pred = render_rays(
            field, all_origins[img, tpix], all_dirs[img, tpix], rows_all[pix], cols_all[pix], cfg.n_samples,
            jitter_seed=cfg.seed * 100003 + step + 1,
        )
        loss = ((pred - target) ** 2).mean()
        if not torch.isfinite(loss):
            raise NumericFailure(f"pretraining diverged at step {step}", step=step)
        grads = forward_backward(loss, params)
        adam_step(state, params, grads)
        losses.append(loss.item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("pretrain step %d loss %.5f (%.1fs)", step + 1, np.mean(losses[-cfg.log_every :]), time.time() - t0)
    for p in params.values():
        p.requires_grad_(False)
    return field, heldout_psnr(field, refs, cfg.n_samples), losses
