"""Lifts multi-camera features onto the BEV grid.

Every BEV cell is raised to a few pillar heights, projected into each
camera, and bilinearly samples that camera's feature map; valid hits
are averaged, projected to BEV channels, and added to the cell's
learnable query embedding. Cells no camera can see keep the bare query.
Self-attention layers then refine the H*W cell tokens.

The projection geometry depends only on the grid and the rig, so it is
precomputed once as constants; gradients flow through the sampled
feature values alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .blocks import SelfAttentionBlock, trunc_normal_
from .core import BEVGridSpec, CameraParams


@dataclass(frozen=True)
class BEVEncoderConfig:
    bev_channels: int = 32
    pillar_heights: tuple[float, ...] = (-1.0, 0.0, 1.0)
    num_refine_layers: int = 1
    num_heads: int = 4

    def __post_init__(self):
        if len(self.pillar_heights) < 1:
            raise ValueError("need at least one pillar height")
        if self.bev_channels % self.num_heads != 0:
            raise ValueError("bev_channels must divide evenly into heads")
        object.__setattr__(self, "pillar_heights", tuple(self.pillar_heights))

    def to_dict(self) -> dict:
        return {
            "bev_channels": self.bev_channels,
            "pillar_heights": list(self.pillar_heights),
            "num_refine_layers": self.num_refine_layers,
            "num_heads": self.num_heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BEVEncoderConfig":
        kw = dict(d)
        if "pillar_heights" in kw:
            kw["pillar_heights"] = tuple(kw["pillar_heights"])
        return cls(**kw)


def pillar_geometry(
    grid: BEVGridSpec,
    cam: CameraParams,
    heights: tuple[float, ...],
    feat_shape: tuple[int, int],
) -> dict:
    """Constant sampling plan for one camera.

    Returns valid: (P, HW) bool; corners: (P, HW, 4) flat feature
    indices; weights: (P, HW, 4) bilinear weights summing to 1 wherever
    valid. Feature coordinates clamp at the border, so weights stay a
    partition of unity even for hits near the image edge.
    """
    centers = grid.cell_centers().reshape(-1, 2)
    hw = centers.shape[0]
    img_h, img_w = cam.image_size
    fh, fw = feat_shape
    rot = cam.extrinsic[:3, :3]
    trans = cam.extrinsic[:3, 3]
    fx, fy = cam.intrinsic[0, 0], cam.intrinsic[1, 1]
    cx, cy = cam.intrinsic[0, 2], cam.intrinsic[1, 2]

    valid = np.zeros((len(heights), hw), dtype=bool)
    corners = np.zeros((len(heights), hw, 4), dtype=np.int64)
    weights = np.zeros((len(heights), hw, 4), dtype=np.float64)
    for p, z in enumerate(heights):
        world = np.column_stack([centers, np.full(hw, z)])
        pc = world @ rot.T + trans
        ahead = pc[:, 2] > cam.z_near
        depth = np.where(ahead, pc[:, 2], 1.0)
        u = fx * pc[:, 0] / depth + cx
        v = fy * pc[:, 1] / depth + cy
        ok = ahead & (u >= 0) & (u < img_w) & (v >= 0) & (v < img_h)
        fu = u * fw / img_w - 0.5
        fv = v * fh / img_h - 0.5
        x0 = np.floor(fu)
        y0 = np.floor(fv)
        wx = fu - x0
        wy = fv - y0
        x0c = np.clip(x0, 0, fw - 1).astype(np.int64)
        x1c = np.clip(x0 + 1, 0, fw - 1).astype(np.int64)
        y0c = np.clip(y0, 0, fh - 1).astype(np.int64)
        y1c = np.clip(y0 + 1, 0, fh - 1).astype(np.int64)
        corners[p, :, 0] = y0c * fw + x0c
        corners[p, :, 1] = y0c * fw + x1c
        corners[p, :, 2] = y1c * fw + x0c
        corners[p, :, 3] = y1c * fw + x1c
        weights[p, :, 0] = (1 - wy) * (1 - wx)
        weights[p, :, 1] = (1 - wy) * wx
        weights[p, :, 2] = wy * (1 - wx)
        weights[p, :, 3] = wy * wx
        valid[p] = ok
    return {"valid": valid, "corners": corners, "weights": weights}


class BEVEncoder(nn.Module):
    def __init__(
        self,
        config: BEVEncoderConfig,
        grid: BEVGridSpec,
        rig: tuple[CameraParams, ...],
        feat_channels: int,
        feat_shape: tuple[int, int],
    ):
        super().__init__()
        self.config = config
        self.grid_shape = (grid.rows, grid.cols)
        hw = grid.rows * grid.cols
        c = config.bev_channels
        self.input_proj = nn.Linear(feat_channels, c)
        self.query_embed = nn.Parameter(torch.zeros(hw, c))
        self.pos_embed = nn.Parameter(torch.zeros(hw, c))
        trunc_normal_(self.query_embed)
        trunc_normal_(self.pos_embed)
        self.refine = nn.ModuleList(
            SelfAttentionBlock(c, config.num_heads) for _ in range(config.num_refine_layers)
        )
        self._geometry = []
        for cam in rig:
            g = pillar_geometry(grid, cam, config.pillar_heights, feat_shape)
            self._geometry.append(
                {
                    "valid": torch.from_numpy(g["valid"]),
                    "corners": torch.from_numpy(g["corners"]),
                    "weights": torch.from_numpy(g["weights"]),
                }
            )

    def sample_pillars(self, cam_feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Average the valid pillar hits per cell, before any projection.

        cam_feats: (M, C_in, fh, fw) -> (HW, C_in) means and (HW,) hit mask.
        """
        if cam_feats.shape[0] != len(self._geometry):
            raise ValueError("feature count does not match the rig")
        m, c_in = cam_feats.shape[0], cam_feats.shape[1]
        flat = cam_feats.reshape(m, c_in, -1).transpose(1, 2)  # (M, T, C_in)
        hw = self._geometry[0]["valid"].shape[1]
        accum = torch.zeros(hw, c_in, dtype=cam_feats.dtype)
        count = torch.zeros(hw, dtype=cam_feats.dtype)
        for j, geom in enumerate(self._geometry):
            for p in range(geom["valid"].shape[0]):
                ok = geom["valid"][p]
                if not bool(ok.any()):
                    continue
                idx = geom["corners"][p]  # (HW, 4)
                w = geom["weights"][p].to(cam_feats.dtype)  # (HW, 4)
                sampled = (flat[j][idx] * w.unsqueeze(-1)).sum(dim=1)  # (HW, C_in)
                accum = accum + sampled * ok.unsqueeze(-1)
                count = count + ok.to(cam_feats.dtype)
        hit = count > 0
        mean = accum / count.clamp(min=1.0).unsqueeze(-1)
        return mean, hit

    def forward(self, cam_feats: torch.Tensor) -> torch.Tensor:
        """(M, C_in, fh, fw) camera features -> (C, rows, cols) BEV feature."""
        mean, hit = self.sample_pillars(cam_feats)
        tokens = self.query_embed + self.input_proj(mean) * hit.unsqueeze(-1)
        for block in self.refine:
            tokens = block(tokens, pos=self.pos_embed)
        rows, cols = self.grid_shape
        return tokens.transpose(0, 1).reshape(-1, rows, cols)
