"""Seeded randomness.

Every random draw in the package goes through a Philox (counter-based) bit
generator keyed by a root seed plus a stream path, so independent consumers
never share state and runs are reproducible.
"""

import numpy as np
import torch

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, *(int(s) & 0xFFFFFFFF for s in stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(0, 2**62)))


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return x ^ (x >> np.uint64(31))


def pixel_jitter(rows: np.ndarray, cols: np.ndarray, n_samples: int, seed: int) -> np.ndarray:
    """Uniform [0, 1) offsets, one per (pixel, sample), derived only from coordinates.

    The result depends on nothing but ``(row, col, sample index, seed)``, so a
    pixel gets the same offsets whether it is rendered in a full image, inside
    a patch, or alone.
    """
    rows = np.asarray(rows, dtype=np.int64).astype(np.uint64)
    cols = np.asarray(cols, dtype=np.int64).astype(np.uint64)
    idx = np.arange(n_samples, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = _splitmix(_splitmix(np.uint64(seed & 0xFFFFFFFF)) ^ _splitmix(rows))
        base = _splitmix(base ^ (cols * np.uint64(0xD6E8FEB86659FD93)))
        h = _splitmix(base[:, None] ^ (idx[None, :] * np.uint64(0xA24BAED4963EE407)))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 2**53)
