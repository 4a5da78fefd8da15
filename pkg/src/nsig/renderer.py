"""Ray generation, stratified sampling and alpha compositing."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch

from .errors import ContractViolation
from .field import CameraPose, RadianceField
from .rng import pixel_jitter

if TYPE_CHECKING:
    from .caks import SecretKey

DEFAULT_SAMPLES = 64
BACKGROUND = 1.0
CHUNK_RAYS = 4096


def generate_rays(pose: CameraPose, coords, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """World-space ray origins and unit directions through continuous ``(row, col)`` coords."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    rows, cols = coords[:, 0], coords[:, 1]
    if (rows < 0).any() or (rows > pose.H).any() or (cols < 0).any() or (cols > pose.W).any():
        raise ContractViolation("pixel coordinates outside the image")
    cam = np.stack([(cols - pose.cx) / pose.focal, -(rows - pose.cy) / pose.focal, -np.ones_like(rows)], -1)
    dirs = cam @ pose.R.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.t, dirs.shape)
    return torch.tensor(origins, dtype=dtype), torch.tensor(dirs, dtype=dtype)


def pixel_grid(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return rows.reshape(-1), cols.reshape(-1)


def sample_depths(
    t_near: float, t_far: float, rows, cols, n_samples: int, jitter_seed: int | None, dtype=torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stratified depths (N, S) and their quadrature widths (N, S).

    Widths come from midpoints between consecutive samples, clipped to
    ``[t_near, t_far]``, so they always sum to ``t_far - t_near``.
    """
    n = len(rows)
    if jitter_seed is None:
        u = np.full((n, n_samples), 0.5)
    else:
        u = pixel_jitter(rows, cols, n_samples, jitter_seed)
    step = (t_far - t_near) / n_samples
    t = t_near + (np.arange(n_samples)[None, :] + u) * step
    edges = np.concatenate([np.full((n, 1), t_near), 0.5 * (t[:, 1:] + t[:, :-1]), np.full((n, 1), t_far)], axis=1)
    return torch.tensor(t, dtype=dtype), torch.tensor(np.diff(edges, axis=1), dtype=dtype)


def composite(
    sigma: torch.Tensor, deltas: torch.Tensor, rgb: torch.Tensor, background: float | torch.Tensor = BACKGROUND
) -> torch.Tensor:
    """Discrete volume rendering along the last sample axis.

    ``alpha_i = 1 - exp(-sigma_i delta_i)``, ``T_i = prod_{j<i} (1 - alpha_j)``,
    ``C = sum_i T_i alpha_i c_i + T_end * background``.
    """
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    cum = torch.cumsum(tau, -1)
    trans = torch.exp(-torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1]], -1))
    weights = trans * alpha
    t_end = torch.exp(-cum[..., -1:])
    return (weights.unsqueeze(-1) * rgb).sum(-2) + t_end * background


def transmittance(sigma: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    cum = torch.cumsum(sigma * deltas, -1)
    return torch.exp(-torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1]], -1))


def sample_field(
    field: RadianceField, origins: torch.Tensor, dirs: torch.Tensor, t: torch.Tensor, background: float = BACKGROUND
) -> tuple[torch.Tensor, torch.Tensor]:
    """Density (N, S) and color (N, S, 3) at every sample; only in-cube samples hit the field."""
    n, s = t.shape
    pts = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
    inside = ((pts >= 0) & (pts <= 1)).all(-1).nonzero().squeeze(-1)
    sigma = pts.new_zeros(n * s)
    rgb = pts.new_full((n * s, 3), background)
    if inside.numel():
        d = dirs[:, None, :].expand(n, s, 3).reshape(-1, 3)[inside]
        s_in, c_in = field.decode(field.features(pts[inside]), d)
        sigma = sigma.index_put((inside,), s_in)
        rgb = rgb.index_put((inside,), c_in)
    return sigma.reshape(n, s), rgb.reshape(n, s, 3)


def render_rays(
    field: RadianceField,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    rows,
    cols,
    n_samples: int = DEFAULT_SAMPLES,
    jitter_seed: int | None = 0,
    background: float = BACKGROUND,
    chunk: int = CHUNK_RAYS,
) -> torch.Tensor:
    """Composite colors (N, 3); jitter is keyed by integer ``(rows, cols)``."""
    if n_samples < 1:
        raise ContractViolation("need at least one sample per ray")
    dtype = field.theta_e.dtype
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = []
    for start in range(0, len(rows), chunk):
        sl = slice(start, start + chunk)
        t, deltas = sample_depths(field.t_near, field.t_far, rows[sl], cols[sl], n_samples, jitter_seed, dtype)
        o, d = origins[sl].to(dtype), dirs[sl].to(dtype)
        sigma, rgb = sample_field(field, o, d, t, background)
        out.append(composite(sigma, deltas, rgb, background))
    return torch.cat(out, 0) if out else origins.new_zeros((0, 3))


def render_pixels(
    field: RadianceField, pose: CameraPose, rows, cols, n_samples: int = DEFAULT_SAMPLES, jitter_seed: int | None = 0
) -> torch.Tensor:
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    origins, dirs = generate_rays(pose, np.stack([rows + 0.5, cols + 0.5], -1), field.theta_e.dtype)
    return render_rays(field, origins, dirs, rows, cols, n_samples, jitter_seed)


def render_image(
    field: RadianceField, pose: CameraPose, n_samples: int = DEFAULT_SAMPLES, jitter_seed: int | None = 0
) -> torch.Tensor:
    """Full H x W x 3 render; differentiable if the field tensors require grad."""
    rows, cols = pixel_grid(pose.H, pose.W)
    return render_pixels(field, pose, rows, cols, n_samples, jitter_seed).reshape(pose.H, pose.W, 3)


def patch_pixels(centers: np.ndarray, h: int, w: int, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel rows/cols (N_b*h*w,) of axis-aligned patches around ``centers``."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    top = centers[:, 0] - h / 2.0
    left = centers[:, 1] - w / 2.0
    if not (np.allclose(top, np.round(top)) and np.allclose(left, np.round(left))):
        raise ContractViolation("patch centers are not pixel aligned")
    top = np.round(top).astype(np.int64)
    left = np.round(left).astype(np.int64)
    if (top < 0).any() or (left < 0).any() or (top + h > H).any() or (left + w > W).any():
        raise ContractViolation("patch extends outside the image")
    dr, dc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rows = (top[:, None, None] + dr[None]).reshape(-1)
    cols = (left[:, None, None] + dc[None]).reshape(-1)
    return rows, cols


def render_patch_set(
    field: RadianceField, key: "SecretKey", n_samples: int = DEFAULT_SAMPLES, jitter_seed: int | None = 0
) -> torch.Tensor:
    """The keyed rendering operator: (N_b, h, w, 3) patches in key order."""
    key.validate()
    rows, cols = patch_pixels(key.centers, key.h, key.w, key.pose.H, key.pose.W)
    colors = render_pixels(field, key.pose, rows, cols, n_samples, jitter_seed)
    return colors.reshape(len(key.centers), key.h, key.w, 3)


def to_uint8(image) -> np.ndarray:
    """Round half-up from [0, 1] to 8-bit."""
    a = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    return np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path: str | Path, image) -> None:
    a = to_uint8(image)
    h, w = a.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + a.reshape(h, w, 3).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ContractViolation("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ContractViolation("only maxval 255 supported")
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3)
