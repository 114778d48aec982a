"""Spatial-temporal codebooks and the joint quantization path.

Latent grids are split into a spatial branch (the raw latents) and a
temporal branch (inter-frame attention plus motion residuals). Each branch
is quantized against its own codebook by nearest-neighbor retrieval and the
two quantized grids are fused by element-wise addition. A marginal-prior
regularizer keeps both codebooks from collapsing onto a few items.

All functions accept latent tensors shaped ``(..., t, h, w, D)``; a leading
batch axis is optional. Everything here is differentiable where the
training path needs it to be.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ShapeError

DISTANCE_FLOOR = 1e-8
ACTIVE_MASS_RATIO = 0.1  # posterior "active" floor, as a fraction of uniform mass


class Codebook(nn.Module):
    """An ordered set of learnable code items.

    Items are initialized uniformly in [-1/N, 1/N] per component so that
    early quantization errors stay bounded.
    """

    def __init__(self, size: int, dim: int, kind: str):
        super().__init__()
        if size < 2:
            raise ConfigError(f"codebook size must be >= 2, got {size}")
        if kind not in ("spatial", "temporal"):
            raise ConfigError(f"codebook kind must be spatial or temporal, got {kind!r}")
        self.kind = kind
        self.weight = nn.Parameter(torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size))

    @property
    def size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        return self.weight[indices]


@dataclass
class CodeIndexGrid:
    """A (t, h, w) grid of integer code indices for one codebook."""

    indices: torch.Tensor
    codebook_kind: str

    def __post_init__(self) -> None:
        if self.indices.ndim != 3:
            raise ShapeError(f"index grid must be (t, h, w), got {tuple(self.indices.shape)}")
        if self.indices.dtype not in (torch.int32, torch.int64):
            raise ShapeError("index grid must hold integers")
        if (self.indices < 0).any():
            raise ShapeError("index grid contains negative indices")


@dataclass
class RegularizerReport:
    """Marginal posterior over code items plus its divergence from uniform.

    ``posterior`` sums to one; ``kl_value`` is a true KL (zero iff the
    posterior is uniform); ``utilization`` is the fraction of items whose
    posterior mass exceeds ``ACTIVE_MASS_RATIO / N``.
    """

    posterior: torch.Tensor
    kl_value: torch.Tensor
    utilization: float

    def to_dict(self) -> dict:
        return {
            "kl_value": float(self.kl_value.detach()),
            "utilization": self.utilization,
            "posterior": [float(p) for p in self.posterior.detach()],
        }


def pairwise_distances(flat: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
    """Exact Euclidean distances between row vectors, (M, D) x (N, D) -> (M, N).

    Avoids the matmul expansion so that engineered ties stay exact ties.
    """
    return torch.cdist(flat, items, compute_mode="donot_use_mm_for_euclid_dist")


def _first_argmin(values: torch.Tensor) -> torch.Tensor:
    """Argmin along the last axis with a guaranteed lowest-index tie-break."""
    n = values.shape[-1]
    is_min = values == values.amin(dim=-1, keepdim=True)
    candidates = torch.arange(n, device=values.device).expand_as(values)
    return torch.where(is_min, candidates, n).amin(dim=-1)


def first_argmax(values: torch.Tensor) -> torch.Tensor:
    """Argmax along the last axis with a guaranteed lowest-index tie-break."""
    return _first_argmin(-values)


def temporal_attention(z: torch.Tensor) -> torch.Tensor:
    """Mix each spatial location's per-frame latents by dot-product attention.

    At every (h, w), frame i's output is the softmax-weighted combination of
    all frames' vectors at that location, with raw (unscaled) dot-product
    scores. A single frame or a time-constant input passes through
    unchanged.
    """
    if z.ndim < 4:
        raise ShapeError(f"latent grid must be (..., t, h, w, D), got {tuple(z.shape)}")
    per_loc = z.movedim(-4, -2)  # (..., h, w, t, D)
    scores = per_loc @ per_loc.transpose(-1, -2)
    out = torch.softmax(scores, dim=-1) @ per_loc
    return out.movedim(-2, -4)


def motion_residual(z: torch.Tensor, window: int = 1) -> torch.Tensor:
    """Difference between each frame's latents and those ``window`` frames
    earlier, clamped to frame 0 at the clip start (frame 0's residual is
    zero)."""
    if window < 1:
        raise ConfigError(f"motion residual window must be >= 1, got {window}")
    t = z.shape[-4]
    ref_idx = torch.clamp(torch.arange(t, device=z.device) - window, min=0)
    return z - z.index_select(-4, ref_idx)


def split_latents(z: torch.Tensor, window: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
    """Spatial branch (the latents unchanged) and temporal branch
    (attention-mixed latents plus motion residuals)."""
    return z, temporal_attention(z) + motion_residual(z, window)


def nn_quantize(latents: torch.Tensor, codebook: Codebook) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest-neighbor retrieval: per-cell argmin of Euclidean distance.

    Returns ``(indices, quantized)`` where ``indices`` has the latent grid
    shape without the channel axis and ``quantized`` holds the selected
    items (differentiable into the codebook). Ties break to the lowest
    index.
    """
    if latents.shape[-1] != codebook.dim:
        raise ShapeError(
            f"latent dim {latents.shape[-1]} does not match codebook dim {codebook.dim}"
        )
    grid_shape = latents.shape[:-1]
    flat = latents.reshape(-1, codebook.dim)
    with torch.no_grad():
        indices = _first_argmin(pairwise_distances(flat, codebook.weight))
    quantized = codebook.weight[indices].reshape(latents.shape)
    return indices.reshape(grid_shape), quantized


def st_lookup(
    z: torch.Tensor,
    spatial: Codebook,
    temporal: Codebook,
    window: int = 1,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Joint quantization: split, retrieve per branch, fuse by addition.

    Returns ``(z_q, spatial_indices, temporal_indices)``.
    """
    z_s, z_t = split_latents(z, window)
    i_s, q_s = nn_quantize(z_s, spatial)
    i_t, q_t = nn_quantize(z_t, temporal)
    return q_s + q_t, i_s, i_t


def straight_through(z: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward the quantized values, backpropagate as identity onto ``z``.

    Written so the forward value equals ``z_q`` exactly (z - z is a true
    zero), not merely up to rounding.
    """
    if z.shape != z_q.shape:
        raise ShapeError(f"straight-through shapes differ: {tuple(z.shape)} vs {tuple(z_q.shape)}")
    return z_q.detach() + (z - z.detach())


def marginal_prior_kl(
    latents: torch.Tensor,
    codebook: Codebook,
    distance_floor: float = DISTANCE_FLOOR,
) -> RegularizerReport:
    """Divergence of the soft code-usage marginal from the uniform prior.

    Builds the cell-to-item Euclidean distance matrix, turns reciprocal
    distances into row-normalized similarity scores, averages rows into a
    posterior over items, and returns KL(posterior || uniform). Distances
    are floored so a latent sitting exactly on an item never divides by
    zero.
    """
    flat = latents.reshape(-1, codebook.dim)
    dist = pairwise_distances(flat, codebook.weight).clamp_min(distance_floor)
    scores = (1.0 / dist)
    scores = scores / scores.sum(dim=1, keepdim=True)
    posterior = scores.mean(dim=0)
    kl = (posterior * (posterior * codebook.size).log()).sum().clamp_min(0.0)
    return RegularizerReport(posterior, kl, _active_fraction(posterior, codebook.size))


def counting_prior_kl(latents: torch.Tensor, codebook: Codebook) -> RegularizerReport:
    """Reference regularizer that counts hard retrieved indices.

    The posterior is the empirical frequency of each item's retrieval,
    given a gradient path via a straight-through softmax over negative
    distances. Kept for ablation comparison against the soft-mass
    marginal regularizer.
    """
    flat = latents.reshape(-1, codebook.dim)
    dist = pairwise_distances(flat, codebook.weight)
    soft = torch.softmax(-dist, dim=1)
    hard = F.one_hot(_first_argmin(dist), codebook.size).to(soft.dtype)
    rows = hard + soft - soft.detach()
    posterior = rows.mean(dim=0)
    safe = posterior.detach() > 0
    # items never retrieved contribute 0 (the limit of p*log(pN)) and get no
    # gradient -- exactly the unfairness to inactive items this baseline has
    terms = torch.where(
        safe,
        posterior * (posterior.clamp_min(1e-30) * codebook.size).log(),
        torch.zeros_like(posterior),
    )
    kl = terms.sum().clamp_min(0.0)
    return RegularizerReport(posterior, kl, _active_fraction(posterior, codebook.size))


def _active_fraction(posterior: torch.Tensor, size: int) -> float:
    floor = ACTIVE_MASS_RATIO / size
    return float((posterior.detach() >= floor).float().mean())


def code_loss(z: torch.Tensor, z_q: torch.Tensor, beta: float = 0.25) -> torch.Tensor:
    """Two-term code-level loss with mean reduction over cells and channels.

    The first term moves codebook items toward (stop-gradient) encoder
    outputs; the second, scaled by ``beta``, commits encoder outputs to the
    (stop-gradient) selected items.
    """
    if z.shape != z_q.shape:
        raise ShapeError(f"code loss shapes differ: {tuple(z.shape)} vs {tuple(z_q.shape)}")
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    return F.mse_loss(z_q, z.detach()) + beta * F.mse_loss(z, z_q.detach())


def utilization(indices: torch.Tensor, size: int) -> float:
    """Fraction of the ``size`` items appearing at least once in the grid."""
    flat = torch.as_tensor(indices).reshape(-1)
    if flat.numel() == 0:
        return 0.0
    if int(flat.min()) < 0 or int(flat.max()) >= size:
        raise ShapeError("index grid holds values outside [0, N)")
    return float(torch.unique(flat).numel()) / float(size)
