"""Shared neural primitives: masked softmax, attention, encoder layer.

Tensors are plain ``torch.Tensor``; reverse-mode differentiation comes from
torch autograd. Everything here is written against the equations directly
(no ``nn.MultiheadAttention``) so the value-residual form can be kept.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def glorot_linear(d_in: int, d_out: int, bias: bool = True) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, bias=bias)
    nn.init.xavier_uniform_(layer.weight)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


def softmax_rows(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis; masked (False) positions come out exactly 0.

    ``mask`` broadcasts against ``x``. A row with no valid position is an
    error rather than a silent NaN.
    """
    if mask is None:
        return torch.softmax(x, dim=-1)
    mask = mask.to(torch.bool).expand_as(x)
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("softmax_rows: a row has every position masked")
    return torch.softmax(x.masked_fill(~mask, float("-inf")), dim=-1)


def masked_mean(x: torch.Tensor, mask: torch.Tensor, dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of ``x`` over ``dim`` counting only entries where ``mask`` is set.

    ``mask`` has the shape of ``x`` without the trailing feature axis. Returns
    the mean (zero where nothing is valid) and a bool tensor flagging the empty
    reductions.
    """
    m = mask.to(x.dtype).unsqueeze(-1)
    total = (x * m).sum(dim=dim)
    count = m.sum(dim=dim)
    empty = count.squeeze(-1) == 0
    return total / count.clamp(min=1), empty


class MultiHeadAttention(nn.Module):
    """softmax(Q K^T / sqrt(D)) V + V, split over heads.

    With ``residual="input"`` the conventional ``x + out_proj(attn)`` is used
    instead. Scaling uses the full model width D in both modes.
    """

    def __init__(self, d_model: int, heads: int = 8, dropout: float = 0.0, residual: str = "value"):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.residual = residual
        self.q = glorot_linear(d_model, d_model)
        self.k = glorot_linear(d_model, d_model)
        self.v = glorot_linear(d_model, d_model)
        self.out = glorot_linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        self.last_weights: torch.Tensor | None = None

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d_model // self.heads).transpose(1, 2)

    def forward(self, x_q: torch.Tensor, x_kv: torch.Tensor | None = None,
                key_mask: torch.Tensor | None = None) -> torch.Tensor:
        if x_kv is None:
            x_kv = x_q
        if x_q.shape[-1] != self.d_model or x_kv.shape[-1] != self.d_model:
            raise ValueError(f"feature dim {x_q.shape[-1]}/{x_kv.shape[-1]} != {self.d_model}")
        if x_q.shape[1] == 0 or x_kv.shape[1] == 0:
            raise ValueError("attention over an empty sequence")
        b, lq, _ = x_q.shape
        v_full = self.v(x_kv)
        q, k, v = self._split(self.q(x_q)), self._split(self.k(x_kv)), self._split(v_full)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_model)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        w = softmax_rows(scores, mask)
        self.last_weights = w.detach()
        attn = (w @ v).transpose(1, 2).reshape(b, lq, self.d_model)
        if self.residual == "value":
            # the +V term is the value projection of the query-aligned tokens
            if x_kv is not x_q and x_kv.shape[1] != lq:
                raise ValueError("value residual needs query and key/value sequences of equal length")
            return self.dropout(self.out(attn)) + v_full
        return x_q + self.dropout(self.out(attn))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, hidden: int, d_out: int | None = None):
        super().__init__()
        self.w1 = glorot_linear(d_model, hidden)
        self.w2 = glorot_linear(hidden, d_out or d_model)

    def forward(self, x):
        return self.w2(F.relu(self.w1(x)))


class EncoderLayer(nn.Module):
    """Attention block followed by the FFN block, post-norm.

    Positions where ``mask`` is False are zeroed on output, so padded tokens
    stay exactly zero through a stack of layers.
    """

    def __init__(self, d_model: int, heads: int = 8, ffn_dim: int = 1024, dropout: float = 0.0,
                 residual: str = "value", layer_norm: bool = True):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, dropout, residual)
        self.ffn = FeedForward(d_model, ffn_dim)
        self.drop = nn.Dropout(dropout)
        self.norm1 = nn.LayerNorm(d_model) if layer_norm else nn.Identity()
        self.norm2 = nn.LayerNorm(d_model) if layer_norm else nn.Identity()

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(self.attn(x, key_mask=mask))
        out = self.norm2(h + self.drop(self.ffn(h)))
        if mask is not None:
            out = out * mask.unsqueeze(-1).to(out.dtype)
        return out


def backward(loss: torch.Tensor, params: dict[str, torch.Tensor] | nn.Module | None = None
             ) -> dict[str, torch.Tensor]:
    """Backpropagate a scalar loss; return gradients keyed by parameter name."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()
    if params is None:
        return {}
    named = params.named_parameters() if isinstance(params, nn.Module) else params.items()
    return {name: p.grad for name, p in named if p.requires_grad}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
