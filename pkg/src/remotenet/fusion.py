"""Encoder/decoder feature fusion gated by channel-wise attention scores."""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .exceptions import ShapeError


class AttentionMapModule(nn.Module):
    """Channel scores in (0, 1): sigmoid(GAP(GELU(Conv1x1(x))))."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim, 1)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = self.act(self.conv(x)).mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(pooled)


class FeatureFusion(nn.Module):
    """Fuses an encoder feature with a decoder feature of the same shape.

    full:      s = AMM(e + d); out = f + GELU(BN(Conv3x3(f)))
               with f = s * Conv1x1(e) + s * Conv1x1(d)
    no_amm:    same wiring with s fixed to 1 (no AMM parameters)
    no_fusion: plain e + d, no learned parameters
    """

    def __init__(self, dim: int, ablation: str = "full",
                 per_branch: bool = False, cross: bool = False):
        super().__init__()
        self.mode = "no_fusion" if ablation == "no_fusion" else (
            "no_amm" if ablation == "no_amm" else "full")
        self.per_branch = per_branch
        self.cross = cross
        if self.mode == "no_fusion":
            return
        self.conv_enc = nn.Conv2d(dim, dim, 1)
        self.conv_dec = nn.Conv2d(dim, dim, 1)
        self.post_conv = nn.Conv2d(dim, dim, 3, padding=1, bias=False)
        self.post_norm = nn.BatchNorm2d(dim)
        self.post_act = nn.GELU()
        if self.mode == "full":
            if per_branch:
                self.amm_enc = AttentionMapModule(dim)
                self.amm_dec = AttentionMapModule(dim)
            else:
                self.amm = AttentionMapModule(dim)

    def forward(self, e: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        if e.shape != d.shape:
            raise ShapeError(f"fusion inputs must match: {tuple(e.shape)} vs "
                             f"{tuple(d.shape)}; upsample the decoder feature first")
        if self.mode == "no_fusion":
            return e + d
        if self.mode == "no_amm":
            fused = self.conv_enc(e) + self.conv_dec(d)
        elif self.per_branch:
            s_e, s_d = self.amm_enc(e), self.amm_dec(d)
            if self.cross:
                s_e, s_d = s_d, s_e
            fused = s_e * self.conv_enc(e) + s_d * self.conv_dec(d)
        else:
            s = self.amm(e + d)
            fused = s * self.conv_enc(e) + s * self.conv_dec(d)
        return fused + self.post_act(self.post_norm(self.post_conv(fused)))


def make_fusion(cfg: ModelConfig) -> FeatureFusion:
    return FeatureFusion(cfg.decoder_dim, ablation=cfg.ablation,
                         per_branch=cfg.amm_per_branch, cross=cfg.amm_cross)
