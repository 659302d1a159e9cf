"""Patch-transformer image encoder with tapped block outputs.

Stands in for a pretrained foundation encoder at desk scale; what the
rest of the pipeline exercises is the integration surface: which blocks
get tapped, how taps are aggregated, and which parameters train under a
given freeze policy. The trunk (patch embed, blocks, final norm) is
subject to the freeze policy; the aggregation neck is new capacity and
always trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .blocks import SelfAttentionBlock, trunc_normal_

AGGREGATIONS = ("last_layer", "concat", "multi_layer_cnn")
FREEZE_POLICIES = ("frozen", "finetune_last", "full")


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 8
    embed_dim: int = 32
    num_blocks: int = 4
    num_heads: int = 4
    aggregation: str = "last_layer"
    tap_blocks: tuple[int, ...] = ()
    freeze_policy: str = "full"

    def __post_init__(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation: {self.aggregation}")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ValueError(f"unknown freeze_policy: {self.freeze_policy}")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must divide evenly into heads")
        taps = self.tap_blocks or self._default_taps()
        if any(t < 1 or t > self.num_blocks for t in taps):
            raise ValueError("tap_blocks must lie in [1, num_blocks]")
        if list(taps) != sorted(set(taps)):
            raise ValueError("tap_blocks must be strictly increasing")
        if self.aggregation == "last_layer" and tuple(taps) != (self.num_blocks,):
            raise ValueError("last_layer aggregation taps exactly the final block")
        object.__setattr__(self, "tap_blocks", tuple(taps))

    def _default_taps(self) -> tuple[int, ...]:
        if self.aggregation == "last_layer":
            return (self.num_blocks,)
        # spread three taps across the depth, ending at the last block
        lo = max(1, self.num_blocks // 2)
        mid = max(lo + 1, (3 * self.num_blocks) // 4)
        taps = sorted({lo, mid, self.num_blocks})
        return tuple(taps)

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "num_blocks": self.num_blocks,
            "num_heads": self.num_heads,
            "aggregation": self.aggregation,
            "tap_blocks": list(self.tap_blocks),
            "freeze_policy": self.freeze_policy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        kw = dict(d)
        kw["tap_blocks"] = tuple(kw.get("tap_blocks", ()))
        return cls(**kw)


class ImageBackbone(nn.Module):
    """Trunk: patchify, add 2D positional embeddings, run pre-norm blocks,
    return the tapped block outputs as (C, h, w) feature maps."""

    def __init__(self, config: BackboneConfig, image_size: tuple[int, int]):
        super().__init__()
        h, w = image_size
        p = config.patch_size
        if h % p != 0 or w % p != 0:
            raise ValueError(f"image size {image_size} not divisible by patch {p}")
        self.config = config
        self.feat_shape = (h // p, w // p)
        c = config.embed_dim
        self.patch_embed = nn.Conv2d(3, c, kernel_size=p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(self.feat_shape[0] * self.feat_shape[1], c))
        trunc_normal_(self.pos_embed)
        for i in range(1, config.num_blocks + 1):
            setattr(self, f"block_{i}", SelfAttentionBlock(c, config.num_heads))
        self.final_norm = nn.LayerNorm(c)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """images: (M, 3, H, W) -> list over taps of (M, C, h, w)."""
        fh, fw = self.feat_shape
        x = self.patch_embed(images)  # (M, C, fh, fw)
        m, c = x.shape[0], x.shape[1]
        x = x.reshape(m, c, fh * fw).transpose(1, 2)  # (M, T, C)
        x = x + self.pos_embed
        taps = {}
        for i in range(1, self.config.num_blocks + 1):
            block = getattr(self, f"block_{i}")
            x = torch.stack([block(x[j]) for j in range(m)])
            if i in self.config.tap_blocks:
                taps[i] = x
        outs = []
        for i in self.config.tap_blocks:
            t = self.final_norm(taps[i])
            outs.append(t.transpose(1, 2).reshape(m, c, fh, fw))
        return outs

    def trainable_parameter_names(self) -> set[str]:
        policy = self.config.freeze_policy
        if policy == "frozen":
            return set()
        names = {name for name, _ in self.named_parameters()}
        if policy == "full":
            return names
        last = f"block_{self.config.num_blocks}"
        return {n for n in names if n.startswith(last) or n.startswith("final_norm")}


class FeatureNeck(nn.Module):
    """Aggregates tapped trunk outputs into one (M, C, h, w) feature map."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c = config.embed_dim
        n_taps = len(config.tap_blocks)
        if config.aggregation == "concat":
            self.proj = nn.Conv2d(n_taps * c, c, kernel_size=1)
        elif config.aggregation == "multi_layer_cnn":
            self.laterals = nn.ModuleList(nn.Conv2d(c, c, kernel_size=1) for _ in range(n_taps))
            self.fuse = nn.Conv2d(c, c, kernel_size=3, padding=1)

    def forward(self, taps: list[torch.Tensor]) -> torch.Tensor:
        agg = self.config.aggregation
        if agg == "last_layer":
            return taps[-1]
        if agg == "concat":
            return self.proj(torch.cat(taps, dim=1))
        # top-down sum over lateral projections, deepest first, then fuse
        total = None
        for tap, lateral in zip(reversed(taps), reversed(list(self.laterals))):
            lat = lateral(tap)
            total = lat if total is None else total + lat
        return self.fuse(total)


def extract_features(images: torch.Tensor, trunk: ImageBackbone, neck: FeatureNeck) -> torch.Tensor:
    """(M, 3, H, W) images -> (M, C, h, w) aggregated camera features."""
    return neck(trunk(images))
