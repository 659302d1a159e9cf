"""Transformer building blocks shared by the image encoder, BEV encoder,
and map decoder.

All attention here is plain scaled dot-product over explicit linear
projections, pre-norm residual layout. Positional embeddings are added
to queries and keys only, never to values, so zeroing the residual
output projections turns any block into an exact identity; tests rely
on that to isolate single stages.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def trunc_normal_(tensor: torch.Tensor, std: float = 0.02) -> None:
    with torch.no_grad():
        tensor.normal_(0.0, std)
        tensor.clamp_(-2.0 * std, 2.0 * std)


class MultiheadAttention(nn.Module):
    """Scaled dot-product attention over (tokens, channels) inputs."""

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError("channels must divide evenly into heads")
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        q_pos: torch.Tensor | None = None,
        k_pos: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if q_pos is not None:
            query = query + q_pos
        if k_pos is not None:
            key = key + k_pos
        tq, c = query.shape
        tk = key.shape[0]
        q = self.q_proj(query).reshape(tq, self.num_heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(key).reshape(tk, self.num_heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(value).reshape(tk, self.num_heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(tq, c)
        return self.out_proj(out)


class MLP(nn.Module):
    def __init__(self, channels: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, out if out is not None else channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual block: attention then MLP."""

    def __init__(self, channels: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attn = MultiheadAttention(channels, num_heads)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = MLP(channels, int(channels * mlp_ratio))

    def forward(self, x: torch.Tensor, pos: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, q_pos=pos, k_pos=pos)
        x = x + self.mlp(self.norm2(x))
        return x


def zero_residual_init_(module: nn.Module) -> None:
    """Zero every residual output projection under ``module``.

    Pre-norm blocks whose out_proj/fc2 weights and biases are zero pass
    their input through unchanged, which pins down exactly one stage of
    a larger model when testing or warm-starting.
    """
    for name, param in module.named_parameters():
        leaf = name.rsplit(".", 2)
        if len(leaf) >= 2 and leaf[-2] in ("out_proj", "fc2"):
            with torch.no_grad():
                param.zero_()
