"""Learnable signature codebook and additive signature embedding.

The codebook holds two grid-shaped entries per bit position. A signature's
representation is the sum, over bit positions, of the entry selected by that
bit; embedding adds the representation to the field's finest grid and leaves
everything else untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import containers
from .errors import CompatibilityError, ContractViolation, FormatError
from .field import RadianceField
from .rng import make_rng

CODEBOOK_MAGIC = b"NSCB"


@dataclass
class SignatureCodebook:
    entries: torch.Tensor  # (N_b, 2, *theta_e_shape)

    @property
    def n_bits(self) -> int:
        return self.entries.shape[0]

    @property
    def entry_shape(self) -> tuple[int, ...]:
        return tuple(self.entries.shape[2:])

    def to_bytes(self) -> bytes:
        flat = self.entries.detach().cpu().numpy().reshape(self.n_bits, 2, -1)
        header = {"kind": "signature-codebook", "n_bits": self.n_bits, "theta_e_shape": list(self.entry_shape)}
        return containers.pack(CODEBOOK_MAGIC, header, [("entries", flat)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignatureCodebook":
        header, arrays = containers.unpack(data, CODEBOOK_MAGIC)
        try:
            shape = (header["n_bits"], 2, *header["theta_e_shape"])
            return cls(torch.from_numpy(arrays["entries"].reshape(shape)))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"codebook container malformed: {exc}") from exc

    def save(self, path: str | Path) -> None:
        containers.write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "SignatureCodebook":
        return cls.from_bytes(containers.read(path))


def codebook_init(n_bits: int, entry_shape, seed: int = 0, scale: float = 1e-3, dtype=torch.float32) -> SignatureCodebook:
    """I.i.d. normal entries with standard deviation ``scale``."""
    if scale < 0:
        raise ContractViolation("codebook scale must be >= 0")
    shape = (n_bits, 2, *entry_shape)
    if scale == 0:
        return SignatureCodebook(torch.zeros(shape, dtype=dtype))
    rng = make_rng(seed, 23)
    return SignatureCodebook(torch.from_numpy(rng.normal(0.0, scale, shape)).to(dtype))


def as_bits(m, n_bits: int | None = None) -> np.ndarray:
    bits = np.asarray(m, dtype=np.int64).reshape(-1)
    if not np.isin(bits, (0, 1)).all():
        raise ContractViolation("signature entries must be 0 or 1")
    if n_bits is not None and len(bits) != n_bits:
        raise ContractViolation(f"signature has {len(bits)} bits, codebook expects {n_bits}")
    return bits


def signature_representation(cb: SignatureCodebook | torch.Tensor, m) -> torch.Tensor:
    """``G_m = sum_n G_w(n, m(n))``, differentiable in the codebook entries."""
    entries = cb.entries if isinstance(cb, SignatureCodebook) else cb
    bits = as_bits(m, entries.shape[0])
    picked = entries[torch.arange(len(bits)), torch.from_numpy(bits)]
    out = picked[0]
    for n in range(1, len(bits)):
        out = out + picked[n]
    return out


def embed(field: RadianceField, cb: SignatureCodebook, m) -> RadianceField:
    """Watermarked copy: finest grid plus the signature representation, the rest cloned verbatim."""
    if cb.entry_shape != tuple(field.theta_e.shape):
        raise CompatibilityError(f"codebook entry shape {cb.entry_shape} != theta_e shape {tuple(field.theta_e.shape)}")
    with torch.no_grad():
        g_m = signature_representation(cb, m).to(field.theta_e.dtype)
        out = field.clone()
        out.grids[-1] = out.grids[-1] + g_m
    return out


def random_signature(rng: np.random.Generator, n_bits: int) -> np.ndarray:
    return rng.integers(0, 2, n_bits).astype(np.int64)


def parse_signature(text: str, n_bits: int | None = None) -> np.ndarray:
    """Bits from ``0x3A7F`` hex (MSB first, zero-padded to ``n_bits``) or a ``0101...`` string."""
    s = text.strip().lower()
    if s.startswith("0x"):
        value = int(s[2:], 16)
        width = n_bits if n_bits is not None else 4 * len(s[2:])
        if value >= 1 << width:
            raise ContractViolation(f"signature {text} does not fit in {width} bits")
        return as_bits([(value >> (width - 1 - i)) & 1 for i in range(width)], n_bits)
    if s.startswith("0b"):
        s = s[2:]
    if not s or set(s) - {"0", "1"}:
        raise ContractViolation(f"cannot parse signature '{text}'")
    return as_bits([int(c) for c in s], n_bits)


def format_signature(bits) -> str:
    return "".join(str(int(b)) for b in bits)
