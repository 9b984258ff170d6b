"""Feature refinement over the final fused feature, and the segmentation head."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .encoder import DepthwiseConv2d
from .exceptions import ConfigError, ShapeError


class FeatureRefinement(nn.Module):
    """Three parallel spatial branches over the fused shallow/deep feature.

    full:       y = x + b3 + Conv1x1(concat(b1, b2)); out = y + GELU(BN(Conv3x3(y)))
    two_branch: b3 dropped, y = x + Conv1x1(concat(b1, b2))
    off:        identity
    with b1 = DWConv3x3(x), b2 = DWConv5x5(x), b3 = Conv1x1(x).
    """

    def __init__(self, dim: int, mode: str = "full"):
        super().__init__()
        if mode not in ("full", "two_branch", "off"):
            raise ConfigError(f"unknown refinement mode {mode!r}")
        self.mode = mode
        self.dim = dim
        if mode == "off":
            return
        self.branch1 = DepthwiseConv2d(dim, 3)
        self.branch2 = DepthwiseConv2d(dim, 5)
        if mode == "full":
            self.branch3 = nn.Conv2d(dim, dim, 1)
        self.merge = nn.Conv2d(2 * dim, dim, 1)
        self.post_conv = nn.Conv2d(dim, dim, 3, padding=1, bias=False)
        self.post_norm = nn.BatchNorm2d(dim)
        self.post_act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise ShapeError(f"expected [B, {self.dim}, H, W], got {tuple(x.shape)}")
        if self.mode == "off":
            return x
        merged = self.merge(torch.cat([self.branch1(x), self.branch2(x)], dim=1))
        y = x + merged
        if self.mode == "full":
            y = y + self.branch3(x)
        return y + self.post_act(self.post_norm(self.post_conv(y)))


class SegmentationHead(nn.Module):
    """1x1 projection to class logits, bilinearly upsampled to the target size."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.dim = dim
        self.proj = nn.Conv2d(dim, num_classes, 1)

    def forward(self, x: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise ShapeError(f"expected [B, {self.dim}, H, W], got {tuple(x.shape)}")
        out_h, out_w = out_hw
        if out_h < x.shape[2] or out_w < x.shape[3]:
            raise ConfigError(f"target size {out_hw} smaller than feature "
                              f"{tuple(x.shape[2:])}")
        logits = self.proj(x)
        if (out_h, out_w) != tuple(logits.shape[2:]):
            logits = F.interpolate(logits, size=(out_h, out_w), mode="bilinear",
                                   align_corners=False)
        return logits


def refinement_mode(cfg: ModelConfig) -> str:
    if cfg.ablation == "no_frm":
        return "off"
    if cfg.ablation == "frm_two_branch":
        return "two_branch"
    return "full"
