"""Code-index prediction from degraded-video latents.

Two independent transformers, one per codebook, classify every latent cell
into a code index. Latent grids are flattened in a fixed t-major, then h,
then w order (recorded in checkpoints; training and inference must agree).
Learnable position embeddings pin each model to the grid size it was
trained at, so feeding a different resolution is an explicit error rather
than a silent misprediction.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .quantize import Codebook, first_argmax

FLATTEN_ORDER = "thw"


class LookupTransformer(nn.Module):
    """Transformer classifier over flattened latent cells.

    ``grid_size`` fixes the sequence length (t*h*w) and therefore the
    length of the learnable position embeddings.
    """

    def __init__(
        self,
        kind: str,
        grid_size: tuple[int, int, int],
        num_codes: int,
        dim: int,
        layers: int = 6,
        heads: int = 8,
        mlp_ratio: int = 4,
    ):
        super().__init__()
        if kind not in ("spatial", "temporal"):
            raise ConfigError(f"lookup kind must be spatial or temporal, got {kind!r}")
        if dim % heads != 0:
            raise ConfigError(f"model width {dim} must be divisible by heads {heads}")
        self.kind = kind
        self.grid_size = tuple(int(g) for g in grid_size)
        self.num_codes = int(num_codes)
        seq_len = self.grid_size[0] * self.grid_size[1] * self.grid_size[2]
        self.in_proj = nn.Linear(dim, dim)
        self.pos_emb = nn.Parameter(torch.randn(seq_len, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=dim,
            nhead=heads,
            dim_feedforward=mlp_ratio * dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)
        self.head = nn.Linear(dim, num_codes)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """(B, L, D) latent sequence -> (B, L, N) logits."""
        if seq.shape[-2] != self.pos_emb.shape[0]:
            raise ShapeError(
                f"sequence length {seq.shape[-2]} does not match the learned position "
                f"embeddings ({self.pos_emb.shape[0]}); the input resolution must match "
                f"the training resolution"
            )
        h = self.in_proj(seq) + self.pos_emb
        return self.head(self.encoder(h))


def flatten_grid(z: torch.Tensor) -> torch.Tensor:
    """(..., t, h, w, D) -> (..., t*h*w, D) in the fixed t-major order."""
    lead, (t, h, w, d) = z.shape[:-4], z.shape[-4:]
    return z.reshape(*lead, t * h * w, d)


def unflatten_indices(flat: torch.Tensor, grid_size: tuple[int, int, int]) -> torch.Tensor:
    """Inverse of the index flattening for a (..., t*h*w) tensor."""
    t, h, w = grid_size
    return flat.reshape(*flat.shape[:-1], t, h, w)


def predict_codes(
    z_branch: torch.Tensor, model: LookupTransformer
) -> tuple[torch.Tensor, torch.Tensor]:
    """Classify each latent cell; returns ``(logits, indices)``.

    ``z_branch`` is a (t, h, w, D) or (B, t, h, w, D) branch latent grid.
    Indices are the per-cell argmax with lowest-index tie-break, unflattened
    back to the grid shape.
    """
    batched = z_branch.ndim == 5
    grid = tuple(z_branch.shape[-4:-1])
    if grid != model.grid_size:
        raise ShapeError(
            f"latent grid {grid} does not match the model's training grid "
            f"{model.grid_size}; learned position embeddings fix the resolution"
        )
    seq = flatten_grid(z_branch)
    if not batched:
        seq = seq[None]
    logits = model(seq)
    indices = unflatten_indices(first_argmax(logits), model.grid_size)
    if not batched:
        logits, indices = logits[0], indices[0]
    return logits, indices


def cross_entropy_codes(logits: torch.Tensor, gt_indices: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy between predicted logits and ground-truth indices.

    ``logits`` is (..., L, N) or unflattened (..., t, h, w, N); the
    ground-truth index tensor must match the leading shape.
    """
    n = logits.shape[-1]
    flat_logits = logits.reshape(-1, n)
    flat_gt = gt_indices.reshape(-1)
    if flat_logits.shape[0] != flat_gt.shape[0]:
        raise ShapeError(
            f"{flat_logits.shape[0]} logit rows vs {flat_gt.shape[0]} ground-truth cells"
        )
    if int(flat_gt.min()) < 0 or int(flat_gt.max()) >= n:
        raise ShapeError(f"ground-truth indices fall outside [0, {n})")
    return nn.functional.cross_entropy(flat_logits, flat_gt)


def assemble_quantized(
    i_s: torch.Tensor, i_t: torch.Tensor, spatial: Codebook, temporal: Codebook
) -> torch.Tensor:
    """Rebuild fused quantized latents from index grids: C_S[i] + C_T[j]."""
    if i_s.shape != i_t.shape:
        raise ShapeError(f"index grids differ in shape: {tuple(i_s.shape)} vs {tuple(i_t.shape)}")
    for name, grid, book in (("spatial", i_s, spatial), ("temporal", i_t, temporal)):
        bad = (grid < 0) | (grid >= book.size)
        if bad.any():
            cell = bad.nonzero()[0].tolist()
            raise ShapeError(
                f"{name} index {int(grid[tuple(cell)])} out of range [0, {book.size}) "
                f"at cell {tuple(cell)}"
            )
    return spatial.weight[i_s] + temporal.weight[i_t]


def stage2_code_loss(z_l: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Mean squared distance pulling LQ latents toward (frozen) quantized
    latents; gradients reach the LQ encoder only."""
    if z_l.shape != z_q.shape:
        raise ShapeError(f"shapes differ: {tuple(z_l.shape)} vs {tuple(z_q.shape)}")
    return nn.functional.mse_loss(z_l, z_q.detach())
