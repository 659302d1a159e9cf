"""Full pipeline model: images -> camera features -> BEV -> heads + decoder.

Works in float64 on CPU so gradients can be checked against finite
differences exactly where the tests demand it.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import BackboneConfig, FeatureNeck, ImageBackbone
from .bev_encoder import BEVEncoder, BEVEncoderConfig
from .core import BEVGridSpec, CameraParams
from .decoder import DecoderConfig, DecoderOutput, MapDecoder
from .heads import SegHead, aux_seg_forward


@dataclass
class ModelOutput:
    decoder: DecoderOutput
    arss_logits: torch.Tensor  # (2, rows, cols)
    bev_line_logits: torch.Tensor  # (3, rows, cols)
    pv_logits: torch.Tensor  # (M, 1, h, w)
    bev_feature: torch.Tensor  # (C, rows, cols)


class MapModel(nn.Module):
    def __init__(
        self,
        grid: BEVGridSpec,
        rig: tuple[CameraParams, ...],
        backbone_cfg: BackboneConfig,
        bev_cfg: BEVEncoderConfig,
        decoder_cfg: DecoderConfig,
    ):
        super().__init__()
        self.grid = grid
        self.rig = rig
        image_size = rig[0].image_size
        if any(cam.image_size != image_size for cam in rig):
            raise ValueError("all cameras must share one image size")
        # pin the default dtype while submodules initialize: seeded init
        # draws must produce the same float64 bits no matter what ambient
        # default the caller happens to have set
        prev_dtype = torch.get_default_dtype()
        torch.set_default_dtype(torch.float64)
        try:
            self.backbone = ImageBackbone(backbone_cfg, image_size)
            self.neck = FeatureNeck(backbone_cfg)
            self.bev_encoder = BEVEncoder(
                bev_cfg, grid, rig, backbone_cfg.embed_dim, self.backbone.feat_shape
            )
            self.arss_head = SegHead(bev_cfg.bev_channels, "arss")
            self.bev_lines_head = SegHead(bev_cfg.bev_channels, "bev_lines")
            self.pv_head = SegHead(backbone_cfg.embed_dim, "pv_lanes")
            self.decoder = MapDecoder(decoder_cfg, grid.rows * grid.cols)
        finally:
            torch.set_default_dtype(prev_dtype)
        self.double()

    def forward(self, images: torch.Tensor) -> ModelOutput:
        """images: (M, 3, H, W) float64 in [0, 1]."""
        feats = self.neck(self.backbone(images))  # (M, C_img, fh, fw)
        bev = self.bev_encoder(feats)  # (C, rows, cols)
        image_size = self.rig[0].image_size
        pv = aux_seg_forward(feats, "pv_lanes", self.pv_head, image_size)
        return ModelOutput(
            decoder=self.decoder(bev),
            arss_logits=self.arss_head(bev),
            bev_line_logits=self.bev_lines_head(bev),
            pv_logits=pv,
            bev_feature=bev,
        )

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        """Every parameter minus those excluded by the freeze policy."""
        allowed = {f"backbone.{n}" for n in self.backbone.trainable_parameter_names()}
        out = []
        for name, param in self.named_parameters():
            if name.startswith("backbone.") and name not in allowed:
                continue
            out.append((name, param))
        return out
