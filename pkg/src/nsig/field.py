"""Dense multi-level grid radiance field and camera poses.

The field stores ``L`` dense feature grids over the unit cube and a small
decoder. The finest grid is the embedding portion (the only part a signature
touches); every other grid plus the decoder weights form the unchanged
portion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import containers
from .errors import ContractViolation, FormatError
from .numerics import corner_weights, trilinear_gather
from .rng import make_rng

MODEL_MAGIC = b"NSIG"

DECODER_NAMES = ("w1", "b1", "w_sigma", "b_sigma", "w2", "b2", "w_rgb", "b_rgb")


@dataclass
class FieldConfig:
    resolutions: tuple[int, ...] = (16, 32)
    features: int = 2
    hidden: int = 32
    t_near: float = 1.1
    t_far: float = 2.9


def _mm(a: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    # single rows take BLAS's gemv path, whose rounding differs from gemm;
    # keep every row on gemm so a sample decodes identically in any batch
    if a.shape[0] == 1:
        return (torch.cat([a, a]) @ w)[:1]
    return a @ w


class RadianceField:
    """Grid field ``(x, d) -> (sigma, rgb)`` over the unit cube.

    Decoder::

        h1    = relu(W1 [f_0, ..., f_{L-1}] + b1)        # view independent
        sigma = softplus(w_sigma h1 + b_sigma)
        h2    = relu(W2 [h1, d] + b2)
        rgb   = logistic(W_rgb h2 + b_rgb)
    """

    def __init__(self, grids: list[torch.Tensor], decoder: dict[str, torch.Tensor], t_near: float, t_far: float):
        if not t_near < t_far:
            raise ContractViolation(f"t_near {t_near} must be < t_far {t_far}")
        self.grids = list(grids)
        self.decoder = dict(decoder)
        self.t_near = float(t_near)
        self.t_far = float(t_far)

    # ---------------------------------------------------------------- build

    @classmethod
    def create(cls, cfg: FieldConfig | None = None, seed: int = 0) -> "RadianceField":
        cfg = cfg or FieldConfig()
        rng = make_rng(seed, 11)
        grids = [
            torch.from_numpy(rng.uniform(-1e-2, 1e-2, (r, r, r, cfg.features)).astype(np.float32)) for r in cfg.resolutions
        ]
        n_in = cfg.features * len(cfg.resolutions)
        h = cfg.hidden

        def lin(fan_in, fan_out):
            bound = math.sqrt(6.0 / fan_in)
            return torch.from_numpy(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32))

        decoder = {
            "w1": lin(n_in, h),
            "b1": torch.full((h,), 0.1),
            "w_sigma": lin(h, 1) * 0.1,
            "b_sigma": torch.full((1,), -2.0),
            "w2": lin(h + 3, h),
            "b2": torch.full((h,), 0.1),
            "w_rgb": lin(h, 3) * 0.1,
            "b_rgb": torch.zeros(3),
        }
        return cls(grids, decoder, cfg.t_near, cfg.t_far)

    @classmethod
    def zeros(cls, cfg: FieldConfig | None = None) -> "RadianceField":
        f = cls.create(cfg)
        return cls([torch.zeros_like(g) for g in f.grids], {k: torch.zeros_like(v) for k, v in f.decoder.items()}, f.t_near, f.t_far)

    # ----------------------------------------------------------- structure

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(g.shape[0] for g in self.grids)

    @property
    def n_features(self) -> int:
        return self.grids[0].shape[-1]

    @property
    def hidden(self) -> int:
        return self.decoder["w1"].shape[1]

    @property
    def theta_e(self) -> torch.Tensor:
        return self.grids[-1]

    def named_arrays(self) -> list[tuple[str, torch.Tensor]]:
        """All parameters in serialization order."""
        return [(f"grid{i}", g) for i, g in enumerate(self.grids)] + [(k, self.decoder[k]) for k in DECODER_NAMES]

    def split_params(self) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """(embedding portion, unchanged portion) as views of this field's tensors."""
        last = f"grid{len(self.grids) - 1}"
        theta_u = {name: t for name, t in self.named_arrays() if name != last}
        return self.theta_e, theta_u

    @classmethod
    def from_split(cls, theta_e: torch.Tensor, theta_u: dict[str, torch.Tensor], t_near: float, t_far: float) -> "RadianceField":
        n_coarse = sum(1 for k in theta_u if k.startswith("grid"))
        grids = [theta_u[f"grid{i}"] for i in range(n_coarse)] + [theta_e]
        return cls(grids, {k: theta_u[k] for k in DECODER_NAMES}, t_near, t_far)

    def with_theta_e(self, theta_e: torch.Tensor) -> "RadianceField":
        """Same unchanged portion (shared tensors), different embedding portion."""
        if theta_e.shape != self.theta_e.shape:
            raise ContractViolation(f"theta_e shape {tuple(theta_e.shape)} != {tuple(self.theta_e.shape)}")
        return RadianceField(self.grids[:-1] + [theta_e], self.decoder, self.t_near, self.t_far)

    def clone(self) -> "RadianceField":
        return RadianceField(
            [g.detach().clone() for g in self.grids],
            {k: v.detach().clone() for k, v in self.decoder.items()},
            self.t_near,
            self.t_far,
        )

    def to(self, dtype: torch.dtype) -> "RadianceField":
        return RadianceField(
            [g.detach().to(dtype) for g in self.grids],
            {k: v.detach().to(dtype) for k, v in self.decoder.items()},
            self.t_near,
            self.t_far,
        )

    def parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.named_arrays())

    # --------------------------------------------------------------- query

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated interpolated features of every level, (N, L*F)."""
        feats = []
        for g in self.grids:
            idx, w = corner_weights(x, g.shape[0])
            feats.append(trilinear_gather(g, idx, w))
        return torch.cat(feats, -1)

    def decode_density(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        p = self.decoder
        h1 = torch.relu(_mm(feats, p["w1"]) + p["b1"])
        sigma = F.softplus(_mm(h1, p["w_sigma"]) + p["b_sigma"]).squeeze(-1)
        return sigma, h1

    def decode_color(self, h1: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        p = self.decoder
        h2 = torch.relu(_mm(torch.cat([h1, d.to(h1.dtype)], -1), p["w2"]) + p["b2"])
        return torch.sigmoid(_mm(h2, p["w_rgb"]) + p["b_rgb"])

    def decode(self, feats: torch.Tensor, d: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        sigma, h1 = self.decode_density(feats)
        return sigma, self.decode_color(h1, d)

    def query(self, x: torch.Tensor, d: torch.Tensor, background: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
        """Density (N,) and color (N, 3) at points ``x`` seen along unit directions ``d``.

        Points outside the unit cube are vacuum: density 0, background color.
        """
        x = torch.as_tensor(x, dtype=self.theta_e.dtype)
        d = torch.as_tensor(d, dtype=self.theta_e.dtype)
        inside = ((x >= 0) & (x <= 1)).all(-1)
        sigma = x.new_zeros(x.shape[0])
        rgb = x.new_full((x.shape[0], 3), background)
        if inside.any():
            s_in, c_in = self.decode(self.features(x[inside]), d[inside])
            sigma = sigma.index_put((inside.nonzero().squeeze(-1),), s_in)
            rgb = rgb.index_put((inside.nonzero().squeeze(-1),), c_in)
        return sigma, rgb

    # ------------------------------------------------------- serialization

    def header(self) -> dict:
        return {
            "kind": "radiance-field",
            "grid_resolutions": list(self.resolutions),
            "feature_width": self.n_features,
            "decoder_layers": [self.n_features * len(self.grids), self.hidden, self.hidden, 4],
            "bounds": [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
            "t_near": self.t_near,
            "t_far": self.t_far,
        }

    def to_bytes(self) -> bytes:
        arrays = [(name, t.detach().cpu().numpy()) for name, t in self.named_arrays()]
        return containers.pack(MODEL_MAGIC, self.header(), arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RadianceField":
        header, arrays = containers.unpack(data, MODEL_MAGIC)
        try:
            n = len(header["grid_resolutions"])
            grids = [torch.from_numpy(arrays[f"grid{i}"]) for i in range(n)]
            decoder = {k: torch.from_numpy(arrays[k]) for k in DECODER_NAMES}
            return cls(grids, decoder, header["t_near"], header["t_far"])
        except KeyError as exc:
            raise FormatError(f"model container missing {exc}") from exc

    def save(self, path: str | Path) -> None:
        containers.write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "RadianceField":
        return cls.from_bytes(containers.read(path))


def field_query(field: RadianceField, x, d) -> tuple[torch.Tensor, torch.Tensor]:
    """Functional alias of :meth:`RadianceField.query` that checks ``|d| = 1``."""
    d = torch.as_tensor(d, dtype=field.theta_e.dtype)
    if not torch.allclose(d.norm(dim=-1), torch.ones(()), atol=1e-5):
        raise ContractViolation("view directions must be unit vectors")
    return field.query(torch.as_tensor(x, dtype=field.theta_e.dtype), d)


def split_params(field: RadianceField) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    return field.split_params()


# ------------------------------------------------------------------ cameras


@dataclass
class CameraPose:
    """Camera-to-world pose ``[R | t]`` with pinhole intrinsics.

    Camera looks down its local -z axis, +x right, +y up. Pixel coordinates
    are continuous ``(row, col)`` with pixel centers at ``i + 0.5``.
    """

    R: np.ndarray
    t: np.ndarray
    focal: float
    cx: float
    cy: float
    H: int
    W: int
    meta: dict = dc_field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-5):
            raise ContractViolation("pose rotation is not orthonormal")
        if np.linalg.det(self.R) <= 0:
            raise ContractViolation("pose rotation has det != +1")
        if self.H <= 0 or self.W <= 0 or self.focal <= 0:
            raise ContractViolation("image size and focal length must be positive")

    def to_dict(self) -> dict:
        return {
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
            "focal": float(self.focal),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "H": int(self.H),
            "W": int(self.W),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.array(d["R"]).reshape(3, 3), np.array(d["t"]), d["focal"], d["cx"], d["cy"], int(d["H"]), int(d["W"]))


CENTER = np.array([0.5, 0.5, 0.5])


def look_at(eye, target=CENTER, up=(0.0, 0.0, 1.0), focal=200.0, H=128, W=128) -> CameraPose:
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    R = np.stack([right, true_up, back], axis=1)
    return CameraPose(R, eye, focal, W / 2.0, H / 2.0, H, W)


@dataclass
class PoseDistribution:
    """Cameras on an upper hemisphere around the cube center, looking inward."""

    radius: float = 2.0
    min_elevation_deg: float = 10.0
    max_elevation_deg: float = 70.0
    focal: float = 200.0
    H: int = 128
    W: int = 128

    def pose(self, azimuth: float, elevation: float) -> CameraPose:
        eye = CENTER + self.radius * np.array(
            [math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)]
        )
        p = look_at(eye, CENTER, focal=self.focal, H=self.H, W=self.W)
        p.meta = {"azimuth": azimuth, "elevation": elevation}
        return p

    def sample(self, rng: np.random.Generator) -> CameraPose:
        az = rng.uniform(0.0, 2 * math.pi)
        lo, hi = math.radians(self.min_elevation_deg), math.radians(self.max_elevation_deg)
        # uniform in area on the spherical band
        el = math.asin(rng.uniform(math.sin(lo), math.sin(hi)))
        return self.pose(az, el)
