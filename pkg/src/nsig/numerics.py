"""Reverse-mode differentiation helpers, Adam, and finite-difference checks.

Dense arrays are ``torch.Tensor``; torch's autograd tape does the reverse
traversal. This module adds the pieces the pipeline relies on beyond that:
a checked backward pass, the trilinear grid gather with an explicit scatter
backward, the two loss reductions, a small Adam with exponential learning-rate
decay and decoupled weight decay, and a central-difference gradient checker.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation, NumericFailure

DiffArray = torch.Tensor

BCE_CLAMP = 30.0


@contextlib.contextmanager
def precision64() -> Iterator[None]:
    """Temporarily make float64 the default dtype (gradient-check builds)."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


def forward_backward(root: torch.Tensor, leaves: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``root`` with respect to every named leaf.

    Leaves the root does not depend on get an all-zero gradient.
    """
    if root.numel() != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {tuple(root.shape)}")
    names = list(leaves)
    tensors = [leaves[n] for n in names]
    grads = torch.autograd.grad(root, tensors, allow_unused=True)
    out = {}
    for name, leaf, g in zip(names, tensors, grads):
        if g is None:
            g = torch.zeros_like(leaf)
        if torch.isnan(g).any():
            raise NumericFailure(f"NaN in gradient of leaf '{name}'", node=name)
        out[name] = g
    return out


# --------------------------------------------------------------------------
# trilinear gather


def corner_weights(points: torch.Tensor, resolution: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Flat corner indices (N, 8) and weights (N, 8) for points in [0, 1]^3.

    Vertex ``i`` of a grid with ``resolution`` vertices per axis sits at
    ``i / (resolution - 1)``. Points are clamped into the unit cube.
    """
    r = resolution
    u = points.clamp(0.0, 1.0) * (r - 1)
    # land exactly on a vertex when rounding put us a hair off it
    snapped = u.round()
    u = torch.where((u - snapped).abs() <= 8 * torch.finfo(u.dtype).eps * r, snapped, u)
    i0 = u.floor().clamp(0, r - 2)
    frac = u - i0
    i0 = i0.long()
    ix, iy, iz = i0.unbind(-1)
    fx, fy, fz = frac.unbind(-1)
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    idx = []
    w = []
    for dx, wx in ((0, gx), (1, fx)):
        for dy, wy in ((0, gy), (1, fy)):
            for dz, wz in ((0, gz), (1, fz)):
                idx.append(((ix + dx) * r + (iy + dy)) * r + (iz + dz))
                w.append(wx * wy * wz)
    return torch.stack(idx, -1), torch.stack(w, -1)


class _TrilinearGather(torch.autograd.Function):
    @staticmethod
    def forward(ctx, flat_grid, idx, weights):
        ctx.save_for_backward(idx, weights)
        ctx.n_vertices = flat_grid.shape[0]
        corners = flat_grid[idx]
        ctx.grid_values = corners if ctx.needs_input_grad[2] else None
        return torch.einsum("nkf,nk->nf", corners, weights)

    @staticmethod
    def backward(ctx, grad_out):
        idx, weights = ctx.saved_tensors
        n_feat = grad_out.shape[1]
        contrib = (weights.unsqueeze(-1) * grad_out.unsqueeze(1)).reshape(-1, n_feat)
        grad = grad_out.new_zeros((ctx.n_vertices, n_feat))
        grad.index_add_(0, idx.reshape(-1), contrib)
        grad_w = None
        if ctx.needs_input_grad[2]:
            grad_w = torch.einsum("nkf,nf->nk", ctx.grid_values, grad_out)
        return grad, None, grad_w


def trilinear_gather(grid: torch.Tensor, idx: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Interpolate ``grid`` (R, R, R, F) at precomputed corners; returns (N, F).

    Backward scatters the incoming adjoint to the eight corners with the same
    weights, so the scattered mass sums to the adjoint.
    """
    flat = grid.reshape(-1, grid.shape[-1])
    return _TrilinearGather.apply(flat, idx, weights.to(grid.dtype))


def trilinear(grid: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    idx, w = corner_weights(points, grid.shape[0])
    return trilinear_gather(grid, idx, w)


# --------------------------------------------------------------------------
# loss reductions


def squared_error(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).mean()


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor, clamp: float = BCE_CLAMP) -> torch.Tensor:
    """Mean binary cross-entropy of logistic(logits) against 0/1 targets.

    Each per-element term is capped at ``clamp``.
    """
    per = F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="none")
    return per.clamp(max=clamp).mean()


# --------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.999
    weight_decay: float = 0.0
    # leaves that receive weight decay; None means all of them
    decay_leaves: set[str] | None = None
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def current_lr(self) -> float:
        """Learning rate the next step will use."""
        return self.lr * self.decay**self.step


@torch.no_grad()
def adam_step(
    state: OptimizerState,
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
) -> tuple[Mapping[str, torch.Tensor], OptimizerState]:
    """Bias-corrected Adam with decoupled weight decay, updating ``params`` in place."""
    if set(params) != set(grads):
        raise ContractViolation("params and grads name different leaves")
    lr = state.current_lr
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1**t
    bc2 = 1 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractViolation(f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)} for '{name}'")
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        if state.weight_decay and (state.decay_leaves is None or name in state.decay_leaves):
            p.mul_(1 - lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


# --------------------------------------------------------------------------
# gradient check


def gradcheck(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-6,
    seed: int = 0,
    entries: Mapping[int, Sequence[int]] | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` may return any shape; it is reduced to a scalar with a fixed random
    projection. ``entries`` optionally restricts the check to some flat indices
    of some inputs (``{input position: [flat indices]}``).
    Relative error is ``|analytic - numeric| / max(|numeric|, 1e-3 * scale, 1e-8)``
    where ``scale`` is the largest ``|numeric|`` among the checked entries; the
    floor keeps near-zero entries from turning round-off into huge ratios.
    """
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    with torch.no_grad():
        out0 = fn(*xs)
    gen = torch.Generator().manual_seed(seed)
    proj = torch.rand(out0.shape, generator=gen, dtype=torch.float64) + 0.5

    def scalar(*args):
        return (fn(*args) * proj).sum()

    analytic = torch.autograd.grad(scalar(*xs), xs, allow_unused=True)
    pairs = []
    for pos, x in enumerate(xs):
        if entries is not None and pos not in entries:
            continue
        a = analytic[pos]
        a = torch.zeros_like(x) if a is None else a
        flat_a = a.reshape(-1)
        which = entries[pos] if entries is not None else range(x.numel())
        for k in which:
            with torch.no_grad():
                flat = x.view(-1)
                orig = flat[k].item()
                flat[k] = orig + eps
                fp = scalar(*xs).item()
                flat[k] = orig - eps
                fm = scalar(*xs).item()
                flat[k] = orig
            pairs.append((flat_a[k].item(), (fp - fm) / (2 * eps)))
    if not pairs:
        return 0.0
    scale = max(abs(n) for _, n in pairs)
    return max(abs(a - n) / max(abs(n), 1e-3 * scale, 1e-8) for a, n in pairs)


def random_entries(n: int, count: int, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(n, size=min(count, n), replace=False).tolist())
