"""Global-local transformer block for the decoder.

The attention stage sums a window-based multi-head self-attention branch
(global context) with a 1x1/3x3/5x5 convolutional branch (local context),
pushes the sum through a depthwise separable convolution, and finishes with a
Mix-FFN. Batch normalization precedes both the attention stage and the FFN.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import (DepthwiseConv2d, MixFFN, RelativePositionBias2d,
                      scaled_dot_attention)
from .exceptions import ConfigError, ShapeError


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping window tiles.

    Maps smaller than the window shrink the effective window to the map
    extent, so a window covering the whole map equals dense attention. Maps
    larger than the window are reflect-padded up to a tile multiple and the
    output is cropped back.
    """

    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        if window <= 0:
            raise ConfigError(f"window size must be positive, got {window}")
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.window = window
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.pos_bias = RelativePositionBias2d(heads, window)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        win_h = min(self.window, h)
        win_w = min(self.window, w)
        pad_b = (-h) % win_h
        pad_r = (-w) % win_w
        if pad_b or pad_r:
            x = F.pad(x, (0, pad_r, 0, pad_b), mode="reflect")
        hp, wp = h + pad_b, w + pad_r
        tiles_h, tiles_w = hp // win_h, wp // win_w

        # [B, C, th, wh, tw, ww] -> [B * tiles, wh * ww, C]
        tokens = (x.reshape(b, c, tiles_h, win_h, tiles_w, win_w)
                  .permute(0, 2, 4, 3, 5, 1)
                  .reshape(b * tiles_h * tiles_w, win_h * win_w, c))
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        bias = self.pos_bias(win_h, win_w, win_h, win_w, step=1)
        out = scaled_dot_attention(q, k, v, self.heads, self.scale, bias)
        out = self.proj(out)

        out = (out.reshape(b, tiles_h, tiles_w, win_h, win_w, c)
               .permute(0, 5, 1, 3, 2, 4)
               .reshape(b, c, hp, wp))
        if pad_b or pad_r:
            out = out[:, :, :h, :w]
        return out


class LocalBranch(nn.Module):
    """Sum of 1x1, 3x3, and 5x5 convolutions, each batch-normalized."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(dim)
        self.conv3 = nn.Conv2d(dim, dim, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(dim)
        self.conv5 = nn.Conv2d(dim, dim, 5, padding=2, bias=False)
        self.bn5 = nn.BatchNorm2d(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (self.bn1(self.conv1(x)) + self.bn3(self.conv3(x))
                + self.bn5(self.conv5(x)))


class DepthwiseSeparableConv(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.depthwise = DepthwiseConv2d(dim, 3, bias=False)
        self.pointwise = nn.Conv2d(dim, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pointwise(self.depthwise(x))


class GlobalLocalAttention(nn.Module):
    """Window-MHSA global branch plus convolutional local branch, summed and
    refined by a depthwise separable convolution."""

    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.global_branch = WindowAttention(dim, window, heads)
        self.local_branch = LocalBranch(dim)
        self.merge = DepthwiseSeparableConv(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.merge(self.global_branch(x) + self.local_branch(x))


class GLTB(nn.Module):
    """Global-local transformer block: BN -> GLA -> residual, BN -> FFN -> residual."""

    def __init__(self, dim: int, window: int, heads: int, expansion: int,
                 residual: bool = True):
        super().__init__()
        self.residual = residual
        self.norm_attn = nn.BatchNorm2d(dim)
        self.attn = GlobalLocalAttention(dim, window, heads)
        self.norm_ffn = nn.BatchNorm2d(dim)
        self.ffn = MixFFN(dim, expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ShapeError(f"expected rank-4 input, got {tuple(x.shape)}")
        attn_out = self.attn(self.norm_attn(x))
        y = x + attn_out if self.residual else attn_out
        ffn_out = self.ffn(self.norm_ffn(y))
        return y + ffn_out if self.residual else ffn_out
