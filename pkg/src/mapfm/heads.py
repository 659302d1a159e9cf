"""Dense segmentation heads over BEV and camera features.

Three roles share one two-layer 3x3 conv decoder topology: `arss`
predicts drivable-area and pedestrian-crossing BEV masks (2 channels,
sigmoid per class since the regions overlap), `bev_lines` predicts the
3 line classes on the BEV grid, and `pv_lanes` predicts a single lane
channel per camera, bilinearly upsampled back to image resolution.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

ROLE_CHANNELS = {"arss": 2, "bev_lines": 3, "pv_lanes": 1}


class SegHead(nn.Module):
    def __init__(self, in_channels: int, role: str):
        super().__init__()
        if role not in ROLE_CHANNELS:
            raise ValueError(f"unknown head role: {role}")
        self.role = role
        self.conv1 = nn.Conv2d(in_channels, in_channels, kernel_size=3, padding=1)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(in_channels, ROLE_CHANNELS[role], kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(C, H, W) or (B, C, H, W) input -> logits with K role channels."""
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        logits = self.conv2(self.act(self.conv1(x)))
        return logits.squeeze(0) if squeeze else logits


def arss_forward(bev: torch.Tensor, head: SegHead) -> torch.Tensor:
    if head.role != "arss":
        raise ValueError("head role must be arss")
    return head(bev)


def aux_seg_forward(
    x: torch.Tensor,
    role: str,
    head: SegHead,
    image_size: tuple[int, int] | None = None,
) -> torch.Tensor:
    if role not in ("bev_lines", "pv_lanes"):
        raise ValueError(f"not an auxiliary role: {role}")
    if head.role != role:
        raise ValueError(f"head role {head.role} does not match {role}")
    logits = head(x)
    if role == "pv_lanes":
        if image_size is None:
            raise ValueError("pv_lanes needs the target image size")
        squeeze = logits.dim() == 3
        if squeeze:
            logits = logits.unsqueeze(0)
        logits = F.interpolate(logits, size=image_size, mode="bilinear", align_corners=False)
        if squeeze:
            logits = logits.squeeze(0)
    return logits


def hard_masks(logits: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Per-class binary masks from logits: probability >= threshold."""
    return (torch.sigmoid(logits) >= threshold).to(torch.uint8)
