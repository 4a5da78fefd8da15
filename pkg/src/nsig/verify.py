"""Embedding many signatures, ownership verification and image-quality metrics."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .caks import SecretKey
from .codebook import SignatureCodebook, as_bits, embed, format_signature
from .errors import CompatibilityError
from .extractor import Extractor, binarize, bit_accuracy, extract_logits
from .field import CameraPose, RadianceField
from .renderer import DEFAULT_SAMPLES, render_image, render_patch_set

PSNR_CAP = 100.0
MATCH_THRESHOLD = 0.9
REC601 = torch.tensor([0.299, 0.587, 0.114], dtype=torch.float64)


# --------------------------------------------------------------------------
# metrics


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give the cap."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gray(img) -> torch.Tensor:
    x = torch.as_tensor(img, dtype=torch.float64)
    return x @ REC601 if x.ndim == 3 else x


def _gauss_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim_terms(a, b, k1: float = 0.01, k2: float = 0.03, size: int = 11, sigma: float = 1.5) -> dict[str, float]:
    """Mean luminance, contrast and structure terms and their product (SSIM).

    Grayscale (Rec.601) images, Gaussian-weighted local statistics over the
    valid region, dynamic range 1.
    """
    x, y = _gray(a)[None, None], _gray(b)[None, None]
    w = _gauss_window(size, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    c3 = c2 / 2
    blur = lambda t: F.conv2d(t, w)
    mx, my = blur(x), blur(y)
    vx = (blur(x * x) - mx * mx).clamp_min(0.0)
    vy = (blur(y * y) - my * my).clamp_min(0.0)
    cxy = blur(x * y) - mx * my
    sx, sy = vx.sqrt(), vy.sqrt()
    lum = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
    con = (2 * sx * sy + c2) / (vx + vy + c2)
    struct = (cxy + c3) / (sx * sy + c3)
    ssim_map = lum * (2 * cxy + c2) / (vx + vy + c2)
    return {
        "luminance": float(lum.mean()),
        "contrast": float(con.mean()),
        "structure": float(struct.mean()),
        "ssim": float(ssim_map.mean()),
    }


def ssim(a, b) -> float:
    return ssim_terms(a, b)["ssim"]


# --------------------------------------------------------------------------
# embedding


@dataclass
class EmbedBatch:
    models: list[RadianceField]
    paths: list[str]
    seconds: list[float]
    warnings: list[str]


def embed_batch(
    field: RadianceField, cb: SignatureCodebook, signatures: Sequence, out_dir: str | Path | None = None, prefix: str = "model"
) -> EmbedBatch:
    """One watermarked copy per signature; optionally written as ``<prefix>_<bits>.nsig``."""
    models, paths, seconds, warnings = [], [], [], []
    seen = set()
    for m in signatures:
        bits = as_bits(m, cb.n_bits)
        tag = format_signature(bits)
        if tag in seen:
            warnings.append(f"duplicate signature {tag}")
        seen.add(tag)
        t0 = time.perf_counter()
        wm = embed(field, cb, bits)
        seconds.append(time.perf_counter() - t0)
        models.append(wm)
        if out_dir is not None:
            path = Path(out_dir) / f"{prefix}_{tag}.nsig"
            wm.save(path)
            paths.append(str(path))
    return EmbedBatch(models, paths, seconds, warnings)


# --------------------------------------------------------------------------
# verification


@dataclass
class VerificationReport:
    extracted: list[int]
    accuracies: list[float]
    best_index: int | None
    best_accuracy: float | None
    matched_index: int | None
    threshold: float
    psnr: list[float] = dc_field(default_factory=list)
    ssim: list[float] = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def check_compatible(model: RadianceField, key: SecretKey, ext: Extractor, cb: SignatureCodebook | None = None) -> None:
    if (key.h, key.w) != tuple(ext.patch_size):
        raise CompatibilityError(f"key patches {key.h}x{key.w} but extractor expects {ext.patch_size}")
    if cb is not None and cb.entry_shape != tuple(model.theta_e.shape):
        raise CompatibilityError(f"codebook entries {cb.entry_shape} do not match model theta_e {tuple(model.theta_e.shape)}")


def extract_signature(model: RadianceField, key: SecretKey, ext: Extractor, n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    """Render the keyed patches and binarize the extractor's logits."""
    check_compatible(model, key, ext)
    with torch.no_grad():
        patches = render_patch_set(model, key, n_samples)
    return binarize(extract_logits(ext, patches))


def verify_model(
    model: RadianceField | str | Path,
    key: SecretKey,
    ext: Extractor,
    expected: Sequence,
    threshold: float = MATCH_THRESHOLD,
    original: RadianceField | None = None,
    poses: Sequence[CameraPose] = (),
    n_samples: int = DEFAULT_SAMPLES,
) -> VerificationReport:
    """Extract the signature and compare it with every expected one.

    When ``original`` and ``poses`` are given, PSNR/SSIM of the model's renders
    against the original's are reported per pose.
    """
    if not isinstance(model, RadianceField):
        model = RadianceField.load(model)
    bits = extract_signature(model, key, ext, n_samples)
    accs = [bit_accuracy(bits, as_bits(m, len(bits))) for m in expected]
    best = int(np.argmax(accs)) if accs else None
    best_acc = accs[best] if accs else None
    matched = best if best is not None and best_acc >= threshold else None
    ps, ss = [], []
    if original is not None:
        with torch.no_grad():
            for pose in poses:
                a = render_image(model, pose, n_samples)
                b = render_image(original, pose, n_samples)
                ps.append(psnr(a, b))
                ss.append(ssim(a, b))
    return VerificationReport([int(b) for b in bits], accs, best, best_acc, matched, threshold, ps, ss)


def signature_accuracy(
    field: RadianceField, cb: SignatureCodebook, key: SecretKey, ext: Extractor, signatures: Sequence, n_samples: int = DEFAULT_SAMPLES
) -> list[float]:
    """Bit accuracy of each signature after embedding it and extracting with ``key``."""
    out = []
    for m in signatures:
        bits = as_bits(m, cb.n_bits)
        out.append(bit_accuracy(extract_signature(embed(field, cb, bits), key, ext, n_samples), bits))
    return out
