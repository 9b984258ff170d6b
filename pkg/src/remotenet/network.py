"""Full network assembly and ablation variant construction.

Topology: the four encoder features are each projected to the decoder width;
the deepest runs through a GLTB chain, then two fusion+GLTB rungs climb back
up (strides 16 and 8), and the stride-4 rung goes through fusion plus feature
refinement before the segmentation head upsamples to the input size.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ABLATIONS, ModelConfig, require_valid
from .decoder import GLTB
from .encoder import Encoder
from .exceptions import ConfigError
from .fusion import make_fusion
from .params import ParamStore, initialize_parameters
from .refine import FeatureRefinement, SegmentationHead, refinement_mode


def _up2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class RemoteNet(nn.Module):
    """Encoder-decoder segmentation network with global-local decoding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        require_valid(cfg)
        self.cfg = cfg
        d = cfg.decoder_dim
        self.encoder = Encoder(cfg)
        self.proj = nn.ModuleList(
            [nn.Conv2d(cfg.stage_dims[i], d, 1) for i in range(4)])

        def gltb_chain():
            return nn.Sequential(*[
                GLTB(d, cfg.window_size, cfg.decoder_heads, cfg.ffn_expansion,
                     residual=cfg.gltb_residual)
                for _ in range(cfg.gltb_per_scale)
            ])

        self.gltb_s32 = gltb_chain()
        self.gltb_s16 = gltb_chain()
        self.gltb_s8 = gltb_chain()
        self.fuse_s16 = make_fusion(cfg)
        self.fuse_s8 = make_fusion(cfg)
        self.fuse_s4 = make_fusion(cfg)
        self.refine = FeatureRefinement(d, refinement_mode(cfg))
        self.head = SegmentationHead(d, cfg.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[2], x.shape[3]
        e1, e2, e3, e4 = self.encoder(x)
        p1, p2, p3, p4 = (proj(e) for proj, e in
                          zip(self.proj, (e1, e2, e3, e4)))
        d4 = self.gltb_s32(p4)
        d3 = self.gltb_s16(self.fuse_s16(p3, _up2(d4)))
        d2 = self.gltb_s8(self.fuse_s8(p2, _up2(d3)))
        refined = self.refine(self.fuse_s4(p1, _up2(d2)))
        return self.head(refined, (h, w))

    def param_store(self) -> ParamStore:
        return ParamStore.from_model(self)

    def load_param_store(self, store: ParamStore) -> None:
        store.load_into(self)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def build_network(cfg: ModelConfig, seed: int = 0) -> RemoteNet:
    """Construct and deterministically initialize a network."""
    model = RemoteNet(cfg)
    initialize_parameters(model, seed)
    return model


def make_variant(cfg: ModelConfig, variant: str, seed: int = 0) -> RemoteNet:
    """Build the named ablation variant of ``cfg``."""
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {ABLATIONS}")
    from dataclasses import replace

    return build_network(replace(cfg, ablation=variant), seed=seed)
