"""Convolutional per-patch bit extractor."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import containers
from .errors import ContractViolation, FormatError, NumericFailure

EXTRACTOR_MAGIC = b"NSEX"
CHANNELS = (16, 32, 32, 64, 64, 64, 64)
STRIDES = (1, 2, 1, 2, 1, 1, 1)


class Extractor(nn.Module):
    """Seven conv-norm-relu blocks, a 1x1 head, global average pooling and a scalar affine output.

    Maps a batch of ``(N, h, w, 3)`` patches in [0, 1] to ``N`` logits.
    """

    def __init__(self, channels=CHANNELS, strides=STRIDES, patch_size=(8, 8), seed: int = 0):
        super().__init__()
        if len(channels) != len(strides):
            raise ContractViolation("channels and strides must have equal length")
        self.channels = tuple(int(c) for c in channels)
        self.strides = tuple(int(s) for s in strides)
        self.patch_size = tuple(int(s) for s in patch_size)
        layers = []
        c_in = 3
        for c, s in zip(self.channels, self.strides):
            layers += [nn.Conv2d(c_in, c, 3, stride=s, padding=1, bias=False), nn.BatchNorm2d(c), nn.ReLU()]
            c_in = c
        self.blocks = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, 1, 1)
        self.out = nn.Linear(1, 1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_uniform_(m.weight, a=0.0, nonlinearity="relu", generator=g)
                    if m.bias is not None:
                        m.bias.zero_()
                elif isinstance(m, nn.BatchNorm2d):
                    m.reset_parameters()
            self.out.weight.fill_(1.0)
            self.out.bias.zero_()

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.ndim != 4 or tuple(patches.shape[1:]) != (*self.patch_size, 3):
            raise ContractViolation(f"expected (N, {self.patch_size[0]}, {self.patch_size[1]}, 3) patches, got {tuple(patches.shape)}")
        x = patches.permute(0, 3, 1, 2) * 2.0 - 1.0
        x = self.head(self.blocks(x)).mean(dim=(2, 3))
        return self.out(x).squeeze(-1)

    def architecture(self) -> dict:
        return {"channels": list(self.channels), "strides": list(self.strides), "patch_size": list(self.patch_size)}

    def to_bytes(self) -> bytes:
        arrays = [(k, v.detach().cpu().numpy()) for k, v in self.state_dict().items() if not k.endswith("num_batches_tracked")]
        return containers.pack(EXTRACTOR_MAGIC, {"kind": "extractor", "architecture": self.architecture()}, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Extractor":
        header, arrays = containers.unpack(data, EXTRACTOR_MAGIC)
        try:
            arch = header["architecture"]
            ext = cls(arch["channels"], arch["strides"], arch["patch_size"])
            state = ext.state_dict()
            for k, v in arrays.items():
                if k not in state or tuple(state[k].shape) != v.shape:
                    raise FormatError(f"unexpected extractor array '{k}' {v.shape}")
                state[k] = torch.from_numpy(v)
            missing = {k for k in state if not k.endswith("num_batches_tracked")} - set(arrays)
            if missing:
                raise FormatError(f"extractor container lacks {sorted(missing)}")
            ext.load_state_dict(state)
        except KeyError as exc:
            raise FormatError(f"extractor header lacks {exc}") from exc
        return ext.eval()

    def save(self, path: str | Path) -> None:
        containers.write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Extractor":
        return cls.from_bytes(containers.read(path))


def extract_logits(ext: Extractor, patches: torch.Tensor) -> torch.Tensor:
    """Inference logits using frozen normalization statistics; one per patch.

    Patches go through one at a time: batched convolution kernels may pick a
    different reduction order, and a patch's logit must not depend on its
    neighbours in the batch.
    """
    was_training = ext.training
    ext.eval()
    try:
        with torch.no_grad():
            x = patches.to(torch.float32)
            if len(x) == 0:
                return x.new_zeros(0)
            return torch.cat([ext(x[i : i + 1]) for i in range(len(x))])
    finally:
        ext.train(was_training)


def binarize(logits) -> np.ndarray:
    """Bit 1 for strictly positive logits, 0 otherwise."""
    a = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits, dtype=np.float64)
    if np.isnan(a).any():
        raise NumericFailure("NaN logit cannot be binarized")
    return (a > 0).astype(np.int64)


def bit_accuracy(predicted, expected) -> float:
    p = np.asarray(predicted).reshape(-1)
    e = np.asarray(expected).reshape(-1)
    if p.shape != e.shape:
        raise ContractViolation(f"signature lengths differ: {p.shape[0]} vs {e.shape[0]}")
    if p.size == 0:
        raise ContractViolation("empty signature")
    return float((p == e).mean())
