"""Vector-map decoder: instance queries scattered into point queries,
decoded against the BEV grid, gathered back for classification.

Scatter builds point query (i, j) as instance_embedding[i] +
point_position_embedding[j], with the positional table shared across
instances. Each layer runs self-attention over all N*n point tokens,
cross-attention into the H*W BEV tokens (full dot-product, with 2D
positional embeddings on the BEV keys), and an MLP, all pre-norm
residual. After every layer the class head reads the mean of each
instance's point tokens and the point head regresses sigmoid-normalized
BEV coordinates, so deeper layers can be supervised alongside the last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .blocks import MLP, MultiheadAttention, trunc_normal_
from .core import (
    BEVGridSpec,
    MapClass,
    MapElement,
    ScoredMap,
    make_scored_map,
    CLASS_ORDER,
    NUM_CLASSES,
)


@dataclass(frozen=True)
class DecoderConfig:
    num_instances: int = 20
    points_per_element: int = 8
    num_layers: int = 2
    num_heads: int = 4
    channels: int = 32

    def __post_init__(self):
        if self.num_instances < 1:
            raise ValueError("need at least one instance query")
        if self.points_per_element < 2:
            raise ValueError("elements need at least two points")
        if self.channels % self.num_heads != 0:
            raise ValueError("channels must divide evenly into heads")

    def to_dict(self) -> dict:
        return {
            "num_instances": self.num_instances,
            "points_per_element": self.points_per_element,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(**d)


@dataclass
class DecoderOutput:
    """Per decoder layer: (N, 3) class logits and (N, n, 2) points in (0,1)."""

    class_logits: list  # of torch.Tensor (N, 3)
    points: list  # of torch.Tensor (N, n, 2)

    @property
    def num_layers(self) -> int:
        return len(self.points)

    @property
    def final_logits(self) -> torch.Tensor:
        return self.class_logits[-1]

    @property
    def final_points(self) -> torch.Tensor:
        return self.points[-1]


class DecoderLayer(nn.Module):
    def __init__(self, channels: int, num_heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.self_attn = MultiheadAttention(channels, num_heads)
        self.norm2 = nn.LayerNorm(channels)
        self.cross_attn = MultiheadAttention(channels, num_heads)
        self.norm3 = nn.LayerNorm(channels)
        self.mlp = MLP(channels, int(channels * mlp_ratio))

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        query_pos: torch.Tensor,
        memory_pos: torch.Tensor,
    ) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, h, q_pos=query_pos, k_pos=query_pos)
        x = x + self.cross_attn(
            self.norm2(x), memory, memory, q_pos=query_pos, k_pos=memory_pos
        )
        x = x + self.mlp(self.norm3(x))
        return x


class MapDecoder(nn.Module):
    def __init__(self, config: DecoderConfig, grid_cells: int):
        super().__init__()
        self.config = config
        c = config.channels
        self.instance_embed = nn.Parameter(torch.zeros(config.num_instances, c))
        self.point_pos_embed = nn.Parameter(torch.zeros(config.points_per_element, c))
        self.bev_pos_embed = nn.Parameter(torch.zeros(grid_cells, c))
        trunc_normal_(self.instance_embed)
        trunc_normal_(self.point_pos_embed)
        trunc_normal_(self.bev_pos_embed)
        self.memory_norm = nn.LayerNorm(c)
        self.layers = nn.ModuleList(
            DecoderLayer(c, config.num_heads) for _ in range(config.num_layers)
        )
        self.point_head = MLP(c, c, 2)
        self.class_head = nn.Linear(c, NUM_CLASSES)

    def forward(self, bev: torch.Tensor) -> DecoderOutput:
        """(C, H, W) BEV feature -> per-layer logits and normalized points."""
        n_inst = self.config.num_instances
        n_pts = self.config.points_per_element
        c = self.config.channels
        memory = self.memory_norm(bev.reshape(c, -1).transpose(0, 1))  # (HW, C)

        scatter = self.instance_embed.unsqueeze(1) + self.point_pos_embed.unsqueeze(0)
        query_pos = scatter.reshape(n_inst * n_pts, c)
        x = query_pos
        logits_per_layer = []
        points_per_layer = []
        for layer in self.layers:
            x = layer(x, memory, query_pos, self.bev_pos_embed)
            tokens = x.reshape(n_inst, n_pts, c)
            points_per_layer.append(torch.sigmoid(self.point_head(tokens)))
            gathered = tokens.mean(dim=1)
            logits_per_layer.append(self.class_head(gathered))
        return DecoderOutput(class_logits=logits_per_layer, points=points_per_layer)


def denormalize_points(points: np.ndarray, grid: BEVGridSpec) -> np.ndarray:
    """Map (…, 2) coordinates from (0,1)^2 to metric BEV x/y."""
    x_lo, x_hi = grid.x_range
    y_lo, y_hi = grid.y_range
    out = np.empty_like(points)
    out[..., 0] = x_lo + points[..., 0] * (x_hi - x_lo)
    out[..., 1] = y_lo + points[..., 1] * (y_hi - y_lo)
    return out


def normalize_points(points: np.ndarray, grid: BEVGridSpec) -> np.ndarray:
    """Inverse of denormalize_points."""
    x_lo, x_hi = grid.x_range
    y_lo, y_hi = grid.y_range
    out = np.empty_like(points)
    out[..., 0] = (points[..., 0] - x_lo) / (x_hi - x_lo)
    out[..., 1] = (points[..., 1] - y_lo) / (y_hi - y_lo)
    return out


def predictions_to_map(
    out: DecoderOutput, grid: BEVGridSpec, score_threshold: float
) -> ScoredMap:
    """Final-layer outputs -> scored map elements above the threshold."""
    logits = out.final_logits.detach().cpu().numpy()
    points = out.final_points.detach().cpu().numpy()
    probs = 1.0 / (1.0 + np.exp(-logits))
    scored = []
    for i in range(points.shape[0]):
        conf = float(probs[i].max())
        if conf < score_threshold:
            continue
        cls = CLASS_ORDER[int(probs[i].argmax())]
        metric = denormalize_points(points[i], grid)
        scored.append((MapElement(cls, metric), conf))
    return make_scored_map(scored)
