"""Depth-mixing adapters: the only cross-slice pathway in the encoder.

Each adapter is a residual bottleneck around a token map M of shape
[B*N, h, w, d] (N slices of B volumes merged into the batch):

    out = M + up( gelu( Conv3D( down( Norm(M) ) ) ) )

where down/up are d->c and c->d linear maps and Conv3D has a 3x1x1
kernel, so information moves along the slice axis only. The up
projection starts at zero, making a fresh adapter an exact identity.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, ShapeError
from .tensor import Tensor, gaussian, zeros
from .tensor import ops

PLACEMENTS = ("before", "after", "both")
LN_EPS = 1e-6


@dataclass
class Adapter3DParams:
    norm_gamma: Tensor  # [d]
    norm_beta: Tensor  # [d]
    w_down: Tensor  # [d, c]
    conv_kernel: Tensor  # [c, c, 3, 1, 1]
    conv_bias: Tensor  # [c]
    w_up: Tensor  # [c, d], zero at init

    @property
    def dim(self) -> int:
        return self.w_down.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[1]


def default_bottleneck(dim: int) -> int:
    # Kept small so the adapter group stays a trivial fraction of the model.
    return 4


def init_adapter(dim: int, bottleneck: int, seed: int, tag: str) -> Adapter3DParams:
    if not 0 < bottleneck < dim:
        raise ConfigError(
            f"bottleneck must satisfy 0 < c < dim, got c={bottleneck}, dim={dim}"
        )
    from .tensor import full

    return Adapter3DParams(
        norm_gamma=full((dim,), 1.0, requires_grad=True),
        norm_beta=zeros((dim,), requires_grad=True),
        w_down=gaussian((dim, bottleneck), 0.02, seed, tag=f"{tag}.down", requires_grad=True),
        conv_kernel=gaussian(
            (bottleneck, bottleneck, 3, 1, 1), 0.02, seed, tag=f"{tag}.conv", requires_grad=True
        ),
        conv_bias=zeros((bottleneck,), requires_grad=True),
        w_up=zeros((bottleneck, dim), requires_grad=True),
    )


def reshape_to_3d(m: Tensor, batch: int, slices: int) -> Tensor:
    """[B*N, h, w, c] -> [B, c, N, h, w]; (b*N+n, y, x, ch) -> (b, ch, n, y, x)."""
    if m.ndim != 4:
        raise ShapeError(f"expected [B*N, h, w, c], got {m.shape}")
    bn, h, w, c = m.shape
    if bn != batch * slices:
        raise ShapeError(f"leading dim {bn} != batch {batch} * slices {slices}")
    z = ops.reshape(m, (batch, slices, h, w, c))
    return ops.transpose(z, (0, 4, 1, 2, 3))


def reshape_from_3d(m: Tensor, batch: int, slices: int) -> Tensor:
    """Inverse of reshape_to_3d: [B, c, N, h, w] -> [B*N, h, w, c]."""
    if m.ndim != 5:
        raise ShapeError(f"expected [B, c, N, h, w], got {m.shape}")
    b, c, n, h, w = m.shape
    if b != batch or n != slices:
        raise ShapeError(f"dims {m.shape} inconsistent with batch {batch}, slices {slices}")
    z = ops.transpose(m, (0, 2, 3, 4, 1))
    return ops.reshape(z, (batch * slices, h, w, c))


def adapter_forward(m: Tensor, batch: int, slices: int, p: Adapter3DParams) -> Tensor:
    """Residual depth-mixing update of a token map [B*N, h, w, d]."""
    if m.shape[-1] != p.dim:
        raise ShapeError(f"token dim {m.shape[-1]} != adapter dim {p.dim}")
    z = ops.layer_norm(m, p.norm_gamma, p.norm_beta, eps=LN_EPS)
    z = ops.matmul(z, p.w_down)
    z = reshape_to_3d(z, batch, slices)
    z = ops.conv3d_depth(z, p.conv_kernel, padding_d=1, bias=p.conv_bias)
    z = ops.gelu(z)
    z = reshape_from_3d(z, batch, slices)
    z = ops.matmul(z, p.w_up)
    return ops.add(m, z)


@dataclass
class AdapterSet:
    """Adapters instrumented into encoder blocks, keyed by (block, site)."""

    placement: str
    table: dict[tuple[int, str], Adapter3DParams]

    def get(self, block: int, site: str) -> Adapter3DParams | None:
        return self.table.get((block, site))


def build_adapter_set(
    depth: int, dim: int, bottleneck: int, placement: str, seed: int
) -> AdapterSet:
    """One independent adapter per instrumented site (no sharing)."""
    if placement not in PLACEMENTS:
        raise ConfigError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    sites = []
    if placement in ("before", "both"):
        sites.append("before")
    if placement in ("after", "both"):
        sites.append("after")
    table = {}
    for blk in range(depth):
        for site in sites:
            table[(blk, site)] = init_adapter(
                dim, bottleneck, seed, tag=f"adapter.{blk}.{site}"
            )
    return AdapterSet(placement=placement, table=table)


def named_adapter_params(adapters: AdapterSet) -> list[tuple[str, Tensor]]:
    out = []
    for (blk, site) in sorted(adapters.table.keys()):
        p = adapters.table[(blk, site)]
        base = f"adapter.{blk}.{site}"
        out.extend(
            [
                (f"{base}.norm_gamma", p.norm_gamma),
                (f"{base}.norm_beta", p.norm_beta),
                (f"{base}.w_down", p.w_down),
                (f"{base}.conv_kernel", p.conv_kernel),
                (f"{base}.conv_bias", p.conv_bias),
                (f"{base}.w_up", p.w_up),
            ]
        )
    return out


def adapter_param_count(dim: int, bottleneck: int, sites: int) -> int:
    per_site = 2 * dim + dim * bottleneck + bottleneck * dim + (
        bottleneck * bottleneck * 3 + bottleneck
    )
    return per_site * sites
