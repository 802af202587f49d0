"""Dynamic interaction: human+object graph with a similarity adjacency.

Nodes per frame are the N person slots followed by the E object slots. The
adjacency refinement encoder is slot-indexed: smaller inputs are scattered
into the configured (N_max + E_max) layout before it runs.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .nn import EncoderLayer, softmax_rows


def _normalize_rows(scores: torch.Tensor, node_mask: torch.Tensor) -> torch.Tensor:
    """Masked row softmax for (B,T,n,n); rows of invalid nodes are zeroed."""
    A = softmax_rows(scores, node_mask[:, None, None, :])
    return A * node_mask[:, None, :, None].to(A.dtype)


def similarity_adjacency(M: torch.Tensor, node_mask: torch.Tensor, norm: nn.Module,
                         dropout: nn.Module | None = None) -> torch.Tensor:
    """a_t(i,j) = dropout(m_i) . norm(m_j), then masked row softmax. M is (B,T,n,D)."""
    left = M if dropout is None else dropout(M)
    scores = left @ norm(M).transpose(-1, -2)
    return _normalize_rows(scores, node_mask)


def node_layout(num_persons: int, num_objects: int, max_persons: int) -> torch.Tensor:
    """Slot index of each node in the configured layout (persons first, then objects)."""
    return torch.cat([torch.arange(num_persons), max_persons + torch.arange(num_objects)])


def refine_adjacency(A: torch.Tensor, encoder: EncoderLayer, node_mask: torch.Tensor,
                     layout: torch.Tensor | None = None, size: int | None = None,
                     tokens: str = "frame") -> torch.Tensor:
    """Run the adjacency sequence through an encoder and renormalize rows.

    ``tokens="frame"`` makes one token per frame (the flattened n x n matrix,
    sequence length T); ``"row"`` makes one sequence per row index with the
    row vectors over time as tokens.
    """
    b, t, n, _ = A.shape
    if layout is not None and size is not None and size != n:
        full = A.new_zeros(b, t, size, size)
        full[:, :, layout[:, None], layout[None, :]] = A
    else:
        full, layout, size = A, None, n
    if tokens == "frame":
        out = encoder(full.reshape(b, t, size * size)).view(b, t, size, size)
    else:
        rows = full.permute(0, 2, 1, 3).reshape(b * size, t, size)
        out = encoder(rows).view(b, size, t, size).permute(0, 2, 1, 3)
    if layout is not None:
        out = out[:, :, layout[:, None], layout[None, :]]
    return _normalize_rows(out, node_mask)


def gcn_apply(A: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """Y_t = A_t M_t for every frame; (B,T,n,n) x (B,T,n,D)."""
    if A.shape[-1] != M.shape[-2] or A.shape[:-2] != M.shape[:-2]:
        raise ValueError(f"adjacency {tuple(A.shape)} incompatible with nodes {tuple(M.shape)}")
    return A @ M


def importance_scores(A: torch.Tensor, node_mask: torch.Tensor, num_persons: int) -> torch.Tensor:
    """Column sums of the adjacency over frames and rows, for person columns.

    Returns (B, num_persons); padded persons score 0. The largest score marks
    the person the rest of the graph attends to most.
    """
    cols = A.sum(dim=(1, 2))[:, :num_persons]
    return cols * node_mask[:, :num_persons].to(cols.dtype)


class DIM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.variant = c.interaction
        self.max_persons = c.max_persons
        self.use_objects = self.variant != "none_ball" and c.max_objects > 0
        self.slots = c.max_persons + (c.max_objects if self.use_objects else 0)
        self.tokens = c.adjacency_tokens
        self.norm = nn.LayerNorm(c.d_model)
        self.dropout = nn.Dropout(c.dropout)
        self.encoder = None
        if self.variant in ("full", "none_ball"):
            width = self.slots * self.slots if self.tokens == "frame" else self.slots
            # the flattened adjacency width rarely divides by the model head count
            self.encoder = EncoderLayer(width, 1, c.ffn_dim, c.dropout, c.residual, c.layer_norm)

    def nodes(self, P: torch.Tensor, O: torch.Tensor, person_mask: torch.Tensor,
              object_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Stack node features (B,T,n,D), node mask (B,n) and slot layout."""
        n = P.shape[1]
        M = P.transpose(1, 2)
        mask = person_mask
        e = O.shape[1] if self.use_objects else 0
        if e:
            M = torch.cat([M, O.transpose(1, 2)], dim=2)
            mask = torch.cat([person_mask, object_mask], dim=1)
        return M, mask, node_layout(n, e, self.max_persons)

    def forward(self, P: torch.Tensor, O: torch.Tensor, person_mask: torch.Tensor,
                object_mask: torch.Tensor) -> dict[str, torch.Tensor]:
        b, n, t, d = P.shape
        if self.variant == "erase":
            zeros = P.new_zeros(b, t, n, d)
            return {"Y": zeros, "tokens": P.new_zeros(b, n, d), "adjacency": None,
                    "raw_adjacency": None, "node_mask": person_mask}
        M, mask, layout = self.nodes(P, O, person_mask, object_mask)
        raw = similarity_adjacency(M, mask, self.norm, self.dropout)
        A = raw
        if self.encoder is not None:
            A = refine_adjacency(raw, self.encoder, mask, layout, self.slots, self.tokens)
        Y = gcn_apply(A, M)
        tokens = Y[:, :, :n].mean(dim=1) * person_mask[..., None].to(Y.dtype)
        return {"Y": Y, "tokens": tokens, "adjacency": A, "raw_adjacency": raw, "node_mask": mask}
