"""Seeded image corruptions applied between rendering and patch extraction.

Images are ``(H, W, 3)`` tensors in [0, 1]. Geometric kinds also return a
3x3 affine map taking continuous ``(row, col)`` pixel coordinates of the
clean image to their location in the distorted image, so keyed patches can be
read from where the content moved.
"""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ContractViolation
from .rng import make_rng

KINDS = ("rotation", "cropping", "scaling", "jpeg", "blurring", "noise", "brightness")
ALL_KINDS = ("none",) + KINDS + ("combined",)
GEOMETRIC = ("rotation", "scaling")
WHITE = 1.0

# Standard JPEG base quantization tables (luma, chroma), row-major.
_Q_LUMA = np.array([
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.float64).reshape(8, 8)
_Q_CHROMA = np.array([
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
] + [99] * 32, dtype=np.float64).reshape(8, 8)


@dataclass
class DistortionRanges:
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    crop_keep: tuple[float, float] = (0.7, 1.0)
    scale: tuple[float, float] = (0.75, 1.25)
    jpeg_quality: tuple[float, float] = (50.0, 95.0)
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    blur_kernel: int = 5
    noise_sigma: tuple[float, float] = (0.01, 0.06)
    brightness: tuple[float, float] = (-0.15, 0.15)
    combined_min: int = 2
    combined_max: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionRanges":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractViolation(f"unknown distortion range fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class DistortionSpec:
    """A fully parameterized corruption; ``parts`` lists the stages of a combined spec."""

    kind: str = "none"
    params: dict = dc_field(default_factory=dict)
    seed: int = 0
    parts: list["DistortionSpec"] = dc_field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ContractViolation(f"unknown distortion kind '{self.kind}'")

    def to_dict(self) -> dict:
        d = asdict(self)
        if not self.parts:
            d.pop("parts")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistortionSpec":
        return cls(d["kind"], dict(d.get("params", {})), int(d.get("seed", 0)), [cls.from_dict(p) for p in d.get("parts", [])])


def _draw_params(kind: str, rng: np.random.Generator, r: DistortionRanges) -> dict:
    if kind == "rotation":
        return {"angle_deg": float(rng.uniform(*r.rotation_deg))}
    if kind == "cropping":
        return {"keep": float(rng.uniform(*r.crop_keep))}
    if kind == "scaling":
        return {"factor": float(rng.uniform(*r.scale))}
    if kind == "jpeg":
        return {"quality": float(rng.uniform(*r.jpeg_quality))}
    if kind == "blurring":
        return {"sigma": float(rng.uniform(*r.blur_sigma)), "kernel": int(r.blur_kernel)}
    if kind == "noise":
        return {"sigma": float(rng.uniform(*r.noise_sigma))}
    if kind == "brightness":
        return {"offset": float(rng.uniform(*r.brightness))}
    return {}


def make_spec(kind: str, rng: np.random.Generator, ranges: DistortionRanges | None = None) -> DistortionSpec:
    """A spec of the given kind with parameters drawn from ``ranges``."""
    ranges = ranges or DistortionRanges()
    if kind == "combined":
        n = int(rng.integers(ranges.combined_min, ranges.combined_max + 1))
        kinds = [KINDS[i] for i in rng.permutation(len(KINDS))[:n]]
        parts = [DistortionSpec(k, _draw_params(k, rng, ranges), int(rng.integers(2**31))) for k in kinds]
        return DistortionSpec("combined", {}, int(rng.integers(2**31)), parts)
    if kind not in ALL_KINDS:
        raise ContractViolation(f"unknown distortion kind '{kind}'")
    return DistortionSpec(kind, _draw_params(kind, rng, ranges), int(rng.integers(2**31)))


def sample_spec(rng: np.random.Generator, ranges: DistortionRanges | None = None) -> DistortionSpec:
    """Training draw: kind uniform over none, the seven corruptions and combined."""
    return make_spec(ALL_KINDS[int(rng.integers(len(ALL_KINDS)))], rng, ranges)


# --------------------------------------------------------------------------
# primitives


def _warp(img: torch.Tensor, src_of_dst: np.ndarray) -> torch.Tensor:
    """Bilinear resample with white fill; ``src_of_dst`` maps output (row, col) to input (row, col)."""
    H, W = img.shape[:2]
    r, c = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    pts = np.stack([r, c, np.ones_like(r)], -1) @ src_of_dst.T
    grid = np.stack([2.0 * pts[..., 1] / W - 1.0, 2.0 * pts[..., 0] / H - 1.0], -1)
    g = torch.tensor(grid, dtype=img.dtype)[None]
    x = (img - WHITE).permute(2, 0, 1)[None]
    out = F.grid_sample(x, g, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[0].permute(1, 2, 0) + WHITE


def _about_center(linear: np.ndarray, H: int, W: int) -> np.ndarray:
    c = np.array([H / 2.0, W / 2.0])
    A = np.eye(3)
    A[:2, :2] = linear
    A[:2, 2] = c - linear @ c
    return A


def rotation_map(angle_deg: float, H: int, W: int) -> np.ndarray:
    """Counter-clockwise (as displayed) rotation about the image center, in (row, col)."""
    a = math.radians(angle_deg)
    # rows point down, so a ccw turn on screen is this matrix in (row, col)
    lin = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return _about_center(lin, H, W)


def scaling_map(factor: float, H: int, W: int) -> np.ndarray:
    return _about_center(np.eye(2) * factor, H, W)


def crop_mask(keep: float, H: int, W: int, dtype=torch.float32) -> torch.Tensor:
    """1 inside the centered ``keep``-fraction window, 0 outside."""
    h, w = max(1, int(round(keep * H))), max(1, int(round(keep * W)))
    top, left = (H - h) // 2, (W - w) // 2
    m = torch.zeros(H, W, 1, dtype=dtype)
    m[top : top + h, left : left + w] = 1.0
    return m


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: torch.Tensor, sigma: float, size: int = 5) -> torch.Tensor:
    k = torch.tensor(gaussian_kernel(sigma, size), dtype=img.dtype)
    x = img.permute(2, 0, 1)[:, None]  # (3, 1, H, W)
    p = size // 2
    x = F.conv2d(F.pad(x, (p, p, 0, 0), mode="replicate"), k.view(1, 1, 1, -1))
    x = F.conv2d(F.pad(x, (0, 0, p, p), mode="replicate"), k.view(1, 1, -1, 1))
    return x[:, 0].permute(1, 2, 0)


def quant_tables(quality: float) -> tuple[np.ndarray, np.ndarray]:
    """libjpeg quality scaling of the base tables."""
    q = int(round(min(100, max(1, quality))))
    scale = 5000 / q if q < 50 else 200 - 2 * q
    tab = lambda base: np.clip(np.floor((base * scale + 50) / 100), 1, 255)
    return tab(_Q_LUMA), tab(_Q_CHROMA)


def _dct_matrix() -> np.ndarray:
    D = np.zeros((8, 8))
    for k in range(8):
        a = math.sqrt(1 / 8) if k == 0 else math.sqrt(2 / 8)
        for n in range(8):
            D[k, n] = a * math.cos(math.pi * (2 * n + 1) * k / 16)
    return D


_DCT = _dct_matrix()
_RGB2YCC = np.array([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]])


def jpeg_differentiable(img: torch.Tensor, quality: float) -> torch.Tensor:
    """8x8 DCT quantization in YCbCr 4:4:4; rounding passes gradients straight through."""
    H, W = img.shape[:2]
    ph, pw = (-H) % 8, (-W) % 8
    x = img.permute(2, 0, 1)[None] * 255.0
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    x = x[0]
    m = torch.tensor(_RGB2YCC, dtype=img.dtype)
    ycc = torch.einsum("ij,jhw->ihw", m, x) + torch.tensor([0.0, 128.0, 128.0], dtype=img.dtype)[:, None, None]
    ycc = ycc - 128.0
    C, Hp, Wp = ycc.shape
    blocks = ycc.reshape(C, Hp // 8, 8, Wp // 8, 8).permute(0, 1, 3, 2, 4)
    D = torch.tensor(_DCT, dtype=img.dtype)
    coef = D @ blocks @ D.T
    ql, qc = quant_tables(quality)
    Q = torch.tensor(np.stack([ql, qc, qc]), dtype=img.dtype)[:, None, None]
    scaled = coef / Q
    rounded = scaled + (torch.round(scaled) - scaled).detach()
    rec = D.T @ (rounded * Q) @ D
    ycc = rec.permute(0, 1, 3, 2, 4).reshape(C, Hp, Wp) + 128.0
    ycc = ycc - torch.tensor([0.0, 128.0, 128.0], dtype=img.dtype)[:, None, None]
    rgb = torch.einsum("ij,jhw->ihw", torch.tensor(np.linalg.inv(_RGB2YCC), dtype=img.dtype), ycc)
    return (rgb[:, :H, :W] / 255.0).clamp(0.0, 1.0).permute(1, 2, 0)


def jpeg_exact(img: torch.Tensor, quality: float) -> torch.Tensor:
    """Round trip through a real JPEG encoder (4:4:4, libjpeg quality scaling)."""
    a = np.floor(np.clip(img.detach().cpu().numpy(), 0, 1) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(a, "RGB").save(buf, format="JPEG", quality=int(round(quality)), subsampling=0)
    back = np.asarray(Image.open(io.BytesIO(buf.getvalue())).convert("RGB"), dtype=np.float64) / 255.0
    return torch.tensor(back, dtype=img.dtype)


def _noise(shape, sigma: float, seed: int, dtype) -> torch.Tensor:
    return torch.tensor(make_rng(seed, 61).normal(0.0, sigma, shape), dtype=dtype)


def apply(image: torch.Tensor, spec: DistortionSpec, differentiable: bool = True) -> tuple[torch.Tensor, np.ndarray]:
    """Distorted image and the forward (row, col) coordinate map of the clean image.

    ``differentiable=False`` swaps the straight-through JPEG for a real
    encoder; every other kind is the same operation either way.
    """
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ContractViolation("expected an (H, W, 3) image")
    H, W = image.shape[:2]
    p = spec.params
    kind = spec.kind
    if kind == "none":
        return image, np.eye(3)
    if kind == "combined":
        A = np.eye(3)
        for part in spec.parts:
            image, Ap = apply(image, part, differentiable)
            A = Ap @ A
        return image, A
    if kind == "rotation":
        A = rotation_map(p["angle_deg"], H, W)
        return _warp(image, np.linalg.inv(A)), A
    if kind == "scaling":
        A = scaling_map(p["factor"], H, W)
        return _warp(image, np.linalg.inv(A)), A
    if kind == "cropping":
        m = crop_mask(p["keep"], H, W, image.dtype)
        return image * m + WHITE * (1 - m), np.eye(3)
    if kind == "jpeg":
        f = jpeg_differentiable if differentiable else jpeg_exact
        return f(image, p["quality"]), np.eye(3)
    if kind == "blurring":
        return gaussian_blur(image, p["sigma"], int(p.get("kernel", 5))), np.eye(3)
    if kind == "noise":
        return (image + _noise(image.shape, p["sigma"], spec.seed, image.dtype)).clamp(0.0, 1.0), np.eye(3)
    if kind == "brightness":
        return (image + p["offset"]).clamp(0.0, 1.0), np.eye(3)
    raise ContractViolation(f"unknown distortion kind '{kind}'")


def sample_patches(image: torch.Tensor, centers, h: int, w: int, coord_map: np.ndarray | None = None) -> torch.Tensor:
    """``(N, h, w, 3)`` axis-aligned patches around ``coord_map`` applied to ``centers``.

    Off-lattice centers are read bilinearly with white outside the image; an
    identity map reads the pixels directly.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    H, W = image.shape[:2]
    if coord_map is None or np.array_equal(coord_map, np.eye(3)):
        top = np.round(centers[:, 0] - h / 2.0).astype(np.int64)
        left = np.round(centers[:, 1] - w / 2.0).astype(np.int64)
        if (top < 0).any() or (left < 0).any() or (top + h > H).any() or (left + w > W).any():
            raise ContractViolation("patch extends outside the image")
        rows = torch.from_numpy(top[:, None] + np.arange(h)[None])  # (N, h)
        cols = torch.from_numpy(left[:, None] + np.arange(w)[None])  # (N, w)
        return image[rows[:, :, None], cols[:, None, :]]
    moved = np.concatenate([centers, np.ones((len(centers), 1))], 1) @ coord_map.T
    dr = np.arange(h) + 0.5 - h / 2.0
    dc = np.arange(w) + 0.5 - w / 2.0
    rr = moved[:, 0, None, None] + dr[None, :, None] + 0 * dc[None, None, :]
    cc = moved[:, 1, None, None] + 0 * dr[None, :, None] + dc[None, None, :]
    grid = np.stack([2.0 * cc / W - 1.0, 2.0 * rr / H - 1.0], -1).reshape(1, -1, w, 2)
    x = (image - WHITE).permute(2, 0, 1)[None]
    out = F.grid_sample(x, torch.tensor(grid, dtype=image.dtype), mode="bilinear", padding_mode="zeros", align_corners=False)
    return (out[0].permute(1, 2, 0) + WHITE).reshape(len(centers), h, w, 3)
