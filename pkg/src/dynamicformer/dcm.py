"""Dynamic composition: temporal and spatial encoders chained in a cycle.

Person features travel as (B, N, T, D). The temporal encoder folds persons
into the batch and attends over frames; the spatial encoder folds frames
into the batch and attends over persons.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .nn import EncoderLayer, glorot_linear


def _zero_masked(x: torch.Tensor, person_mask: torch.Tensor | None) -> torch.Tensor:
    if person_mask is None:
        return x
    return x * person_mask[:, :, None, None].to(x.dtype)


def temporal_encode(P: torch.Tensor, layer: EncoderLayer, e_time: torch.Tensor | None = None,
                    person_mask: torch.Tensor | None = None) -> torch.Tensor:
    """(B,N,T,D) -> (B,N,T,D); attention runs along T only, persons never mix."""
    b, n, t, d = P.shape
    X = P if e_time is None else P + e_time[:t]
    out = layer(X.reshape(b * n, t, d)).view(b, n, t, d)
    return _zero_masked(out, person_mask)


def spatial_encode(V: torch.Tensor, layer: EncoderLayer, e_pos: torch.Tensor | None = None,
                   person_mask: torch.Tensor | None = None) -> torch.Tensor:
    """(B,T,N,D) -> (B,T,N,D); attention runs along N within each frame.

    Padded persons get no attention weight and come out as zero.
    """
    b, t, n, d = V.shape
    X = V if e_pos is None else V + e_pos[:n]
    mask = None
    if person_mask is not None:
        mask = person_mask[:, None, :].expand(b, t, n).reshape(b * t, n)
    return layer(X.reshape(b * t, n, d), mask).view(b, t, n, d)


def build_relation(V: torch.Tensor, per_frame: bool = False) -> torch.Tensor:
    """Pairwise relation blocks r_ij = [V_i, V_j].

    V is (B,N,T,D). By default each person is pooled over time first, giving
    (B,N,N,2D); ``per_frame=True`` keeps time: (B,T,N,N,2D).
    """
    if per_frame:
        V = V.transpose(1, 2)                   # B,T,N,D
    else:
        V = V.mean(dim=2)                       # B,N,D
    n = V.shape[-2]
    left = V.unsqueeze(-2).expand(*V.shape[:-1], n, V.shape[-1])
    right = V.unsqueeze(-3).expand(*V.shape[:-2], n, n, V.shape[-1])
    return torch.cat([left, right], dim=-1)


class DCM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config
        self.variant = c.composition
        self.layers = c.dcm_layers
        self.reinject = c.reinject_embeddings
        self.e_time = nn.Parameter(torch.empty(c.num_frames, c.d_model))
        self.e_pos = nn.Parameter(torch.empty(c.max_persons, c.d_model))
        nn.init.normal_(self.e_time, std=0.02)
        nn.init.normal_(self.e_pos, std=0.02)

        def stack():
            return nn.ModuleList(EncoderLayer(c.d_model, c.heads, c.ffn_dim, c.dropout,
                                              c.residual, c.layer_norm) for _ in range(c.dcm_layers))

        if self.variant == "baseline":
            self.fc = glorot_linear(c.d_model, c.d_model)
        else:
            self.spatial = stack()
            if self.variant != "spatial_only":
                self.temporal = stack()

    def embeddings(self):
        if self.variant == "unembed":
            return None, None
        return self.e_time, self.e_pos

    def compose_cycle(self, P: torch.Tensor, person_mask: torch.Tensor | None = None) -> torch.Tensor:
        e_time, e_pos = self.embeddings()
        V = P
        for i in range(self.layers):
            inject = self.reinject or i == 0
            V = temporal_encode(V, self.temporal[i], e_time if inject else None, person_mask)
            V = spatial_encode(V.transpose(1, 2), self.spatial[i], e_pos if inject else None,
                               person_mask).transpose(1, 2)
        return V

    def forward(self, P: torch.Tensor, person_mask: torch.Tensor | None = None) -> torch.Tensor:
        if self.variant in ("full", "unembed"):
            return self.compose_cycle(P, person_mask)
        n = P.shape[1]
        if self.variant == "baseline":
            X = P + self.e_time + self.e_pos[:n, None, :]
            return _zero_masked(X + F.relu(self.fc(X)), person_mask)
        if self.variant == "spatial_only":
            V = (P + self.e_time).transpose(1, 2)
            for i in range(self.layers):
                inject = self.reinject or i == 0
                V = spatial_encode(V, self.spatial[i], self.e_pos if inject else None, person_mask)
            return V.transpose(1, 2)
        # sum: the two branches see the same input and are added at the end
        Vt, Vs = P, P.transpose(1, 2)
        for i in range(self.layers):
            inject = self.reinject or i == 0
            Vt = temporal_encode(Vt, self.temporal[i], self.e_time if inject else None, person_mask)
            Vs = spatial_encode(Vs, self.spatial[i], self.e_pos if inject else None, person_mask)
        return Vt + Vs.transpose(1, 2)
