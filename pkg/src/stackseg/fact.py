"""Shared low-rank weight increments for the frozen attention projections.

Two factor matrices U, V (d x r) are shared by every encoder block; each
block contributes only a tiny r x r core per adapted projection. The
increment for layer l and projection p is

    delta_W = s * U @ Sigma[l][p] @ V^T

and the effective projection is W0 + delta_W, recomputed on every
forward pass so W0 itself is never touched. Only the query and value
projections are adapted; keys, output projections and MLPs stay frozen.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .tensor import Tensor, gaussian, zeros
from .tensor import ops

INIT_SIGMA = 0.02


@dataclass
class FacTFactors:
    """Shared factors plus per-layer cores for the q and v projections."""

    dim: int
    rank: int
    u: Tensor
    v: Tensor
    sigma_q: list[Tensor]
    sigma_v: list[Tensor]
    scale: float = 1.0

    @property
    def depth(self) -> int:
        return len(self.sigma_q)


def init_factors(dim: int, rank: int, depth: int, seed: int, scale: float = 1.0) -> FacTFactors:
    """Gaussian shared factors, zero cores: increments start exactly at 0."""
    if not 0 < rank < dim:
        raise ConfigError(f"rank must satisfy 0 < rank < dim, got rank={rank}, dim={dim}")
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    u = gaussian((dim, rank), INIT_SIGMA, seed, tag="fact.u", requires_grad=True)
    v = gaussian((dim, rank), INIT_SIGMA, seed, tag="fact.v", requires_grad=True)
    sigma_q = [zeros((rank, rank), requires_grad=True) for _ in range(depth)]
    sigma_v = [zeros((rank, rank), requires_grad=True) for _ in range(depth)]
    return FacTFactors(dim=dim, rank=rank, u=u, v=v, sigma_q=sigma_q, sigma_v=sigma_v, scale=scale)


def delta_weight(factors: FacTFactors, layer: int, which: str) -> Tensor:
    """s * U @ Sigma @ V^T for one layer and projection ("q" or "v")."""
    if which == "q":
        sigma = factors.sigma_q[layer]
    elif which == "v":
        sigma = factors.sigma_v[layer]
    else:
        raise ConfigError(f"projection must be 'q' or 'v', got {which!r}")
    core = ops.matmul(ops.matmul(factors.u, sigma), ops.transpose(factors.v, (1, 0)))
    return ops.scale(core, factors.scale)


def effective_qv(factors: FacTFactors, w_q: Tensor, w_v: Tensor, layer: int) -> tuple[Tensor, Tensor]:
    """Frozen base projections plus their low-rank increments."""
    dq = delta_weight(factors, layer, "q")
    dv = delta_weight(factors, layer, "v")
    return ops.add(w_q, dq), ops.add(w_v, dv)


def named_factor_params(factors: FacTFactors) -> list[tuple[str, Tensor]]:
    out = [("fact.u", factors.u), ("fact.v", factors.v)]
    for i, s in enumerate(factors.sigma_q):
        out.append((f"fact.sigma_q.{i}", s))
    for i, s in enumerate(factors.sigma_v):
        out.append((f"fact.sigma_v.{i}", s))
    return out


def fact_param_count(dim: int, rank: int, depth: int) -> int:
    """Closed form: shared U and V plus 2*depth rank-squared cores."""
    return 2 * dim * rank + 2 * depth * rank * rank
