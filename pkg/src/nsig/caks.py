"""Complexity-aware selection of the secret pose and patch key.

Pipeline for one rendered view: split it into a lattice of ``h x w`` patches,
drop background patches, rank the survivors by how poorly they compress, keep
the top ``ceil(1.5 * N_b)`` and draw ``N_b`` of those at random.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractViolation, FormatError, KeySelectionError
from .field import CameraPose, PoseDistribution, RadianceField
from .renderer import DEFAULT_SAMPLES, render_image, to_uint8
from .rng import make_rng

KEY_VERSION = 1
FILTER_MODES = ("background-gray", "low-variation")
DEFAULT_GRAY_THRESHOLD = 0.9
CANDIDATE_RATIO = 1.5
REC601 = (0.299, 0.587, 0.114)


def partition(H: int, W: int, h: int, w: int) -> np.ndarray:
    """Patch centers ``(x_i, y_j) = (i*h + h/2, j*w + w/2)`` in row-major lattice order."""
    if h <= 0 or w <= 0:
        raise ContractViolation("patch size must be positive")
    if h > H or w > W:
        raise ContractViolation(f"patch {h}x{w} larger than image {H}x{W}")
    n_h, n_w = H // h, W // w
    ii, jj = np.meshgrid(np.arange(n_h), np.arange(n_w), indexing="ij")
    return np.stack([ii * h + h / 2.0, jj * w + w / 2.0], -1).reshape(-1, 2).astype(np.float64)


def _as_array(patch) -> np.ndarray:
    if isinstance(patch, torch.Tensor):
        patch = patch.detach().cpu().numpy()
    return np.asarray(patch, dtype=np.float64)


def color_variation(patch) -> float:
    """Mean over channels of the per-channel pixel variance."""
    p = _as_array(patch).reshape(-1, 3)
    # variance is shift invariant; shifting makes constant patches exactly 0
    return float((p - p[:1]).var(axis=0).mean())


def mean_gray(patch) -> float:
    p = _as_array(patch).reshape(-1, 3)
    return float((p @ np.array(REC601)).mean())


def visual_complexity(patch) -> float:
    """Raw-DEFLATE (level 6) size of the 8-bit row-major RGB bytes over their raw size."""
    raw = to_uint8(_as_array(patch)).tobytes()
    enc = zlib.compressobj(6, zlib.DEFLATED, -15, 8, zlib.Z_DEFAULT_STRATEGY)
    return len(enc.compress(raw) + enc.flush()) / len(raw)


@dataclass
class Candidate:
    index: int  # position in the lattice
    center: tuple[float, float]
    patch: np.ndarray
    complexity: float | None = None


def filter_variation(
    candidates: list[Candidate], mode: str = "background-gray", threshold: float = DEFAULT_GRAY_THRESHOLD
) -> list[Candidate]:
    """Stage-one filter.

    ``background-gray`` drops patches whose mean Rec.601 gray is at or above
    ``threshold``. ``low-variation`` keeps patches whose color variation is
    strictly below ``threshold``.
    """
    if mode == "background-gray":
        return [c for c in candidates if mean_gray(c.patch) < threshold]
    if mode == "low-variation":
        return [c for c in candidates if color_variation(c.patch) < threshold]
    raise ContractViolation(f"unknown filter mode '{mode}' (expected one of {FILTER_MODES})")


def n_candidates(n_bits: int) -> int:
    return math.ceil(CANDIDATE_RATIO * n_bits)


def filter_complexity(candidates: list[Candidate], n_bits: int) -> tuple[list[Candidate], float]:
    """Top ``ceil(1.5 N_b)`` patches by complexity, ties in lattice order; returns them and the threshold."""
    need = n_candidates(n_bits)
    if len(candidates) < need:
        raise KeySelectionError(
            f"only {len(candidates)} patches survive the background filter, need {need} for N_b={n_bits} "
            f"(short by {need - len(candidates)})"
        )
    for c in candidates:
        if c.complexity is None:
            c.complexity = visual_complexity(c.patch)
    ranked = sorted(candidates, key=lambda c: (-c.complexity, c.index))
    kept = ranked[:need]
    return kept, kept[-1].complexity


@dataclass
class PatchCandidates:
    p0: list[Candidate]
    p1: list[Candidate]
    p2: list[Candidate]
    complexity_threshold: float


def build_candidates(
    image,
    h: int,
    w: int,
    n_bits: int,
    mode: str = "background-gray",
    threshold: float = DEFAULT_GRAY_THRESHOLD,
) -> PatchCandidates:
    """Run the partition and both filters on one rendered ``H x W x 3`` view."""
    img = _as_array(image)
    H, W = img.shape[:2]
    centers = partition(H, W, h, w)
    p0 = []
    for k, (x, y) in enumerate(centers):
        top, left = int(x - h / 2), int(y - w / 2)
        p0.append(Candidate(k, (float(x), float(y)), img[top : top + h, left : left + w]))
    p1 = filter_variation(p0, mode, threshold)
    p2, delta = filter_complexity(p1, n_bits)
    return PatchCandidates(p0, p1, p2, delta)


@dataclass
class SecretKey:
    """Pose key plus the ordered list of patch centers (row, col) in pixels."""

    pose: CameraPose
    centers: np.ndarray  # (N_b, 2)
    h: int = 8
    w: int = 8
    created_from: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)

    @property
    def n_bits(self) -> int:
        return len(self.centers)

    def to_dict(self) -> dict:
        return {
            "version": KEY_VERSION,
            "pose": self.pose.to_dict(),
            "patch": {"h": int(self.h), "w": int(self.w), "centers": [[float(x), float(y)] for x, y in self.centers]},
            "created-from": dict(self.created_from),
        }

    def to_json(self) -> str:
        # json emits floats via repr, i.e. the shortest round-trip form
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SecretKey":
        try:
            if d["version"] != KEY_VERSION:
                raise FormatError(f"unsupported key version {d['version']}")
            patch = d["patch"]
            return cls(CameraPose.from_dict(d["pose"]), np.array(patch["centers"], dtype=np.float64),
                       int(patch["h"]), int(patch["w"]), dict(d.get("created-from", {})))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed key file: missing {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "SecretKey":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(f"key file is not JSON: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "SecretKey":
        return cls.from_json(Path(path).read_text())

    def validate(self) -> None:
        problems = key_violations(self.to_dict())
        if problems:
            raise ContractViolation("invalid key: " + "; ".join(problems))


def key_violations(key: dict, H: int | None = None, W: int | None = None) -> list[str]:
    """Every broken key invariant, checked from the key data alone (no rendering)."""
    out = []
    pose = key.get("pose", {})
    H = int(pose.get("H", 0)) if H is None else H
    W = int(pose.get("W", 0)) if W is None else W
    if (pose.get("H"), pose.get("W")) != (H, W):
        out.append(f"key image size {pose.get('H')}x{pose.get('W')} != {H}x{W}")
    try:
        CameraPose.from_dict(pose)
    except (ContractViolation, KeyError, ValueError) as exc:
        out.append(f"pose: {exc}")
    patch = key.get("patch", {})
    h, w = int(patch.get("h", 0)), int(patch.get("w", 0))
    centers = np.asarray(patch.get("centers", []), dtype=np.float64).reshape(-1, 2)
    if len(centers) == 0:
        out.append("empty patch key")
    if h <= 0 or w <= 0 or h > H or w > W:
        out.append(f"bad patch size {h}x{w}")
        return out
    i = (centers[:, 0] - h / 2.0) / h
    j = (centers[:, 1] - w / 2.0) / w
    if not (np.all(i == np.round(i)) and np.all(j == np.round(j))):
        out.append("centers off the patch lattice")
    if np.any(i < 0) or np.any(j < 0) or np.any(i >= H // h) or np.any(j >= W // w):
        out.append("patch outside the image")
    if len({(float(x), float(y)) for x, y in centers}) != len(centers):
        out.append("duplicate centers")
    return out


def select_key(
    field: RadianceField,
    pose_seed: int,
    n_bits: int,
    h: int = 8,
    w: int = 8,
    selection_seed: int | None = None,
    mode: str = "background-gray",
    threshold: float = DEFAULT_GRAY_THRESHOLD,
    poses: PoseDistribution | None = None,
    n_samples: int = DEFAULT_SAMPLES,
) -> tuple[SecretKey, PatchCandidates]:
    """Draw a pose, render it, filter the patch lattice and sample ``n_bits`` centers from P2."""
    poses = poses or PoseDistribution()
    selection_seed = pose_seed if selection_seed is None else selection_seed
    pose = poses.sample(make_rng(pose_seed, 51))
    with torch.no_grad():
        image = render_image(field, pose, n_samples)
    cands = build_candidates(image, h, w, n_bits, mode, threshold)
    pick = make_rng(selection_seed, 53).choice(len(cands.p2), size=n_bits, replace=False)
    centers = np.array([cands.p2[k].center for k in pick])
    key = SecretKey(pose, centers, h, w, {"pose-seed": int(pose_seed), "selection-seed": int(selection_seed)})
    key.validate()
    return key, cands
