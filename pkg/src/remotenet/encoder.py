"""Four-stage hierarchical encoder.

Each stage tokenizes with an overlapped patch embedding, then runs transformer
blocks whose self-attention reads keys/values from a spatially reduced map and
adds a learned 2D relative-position bias to the logits before softmax.
All modules carry features as [batch, channels, height, width] tensors.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import NamedTuple, Optional

import torch
from torch import nn

from .config import ModelConfig
from .exceptions import ConfigError, NumericError, ShapeError

_FINITE_CHECKS = True


@contextmanager
def finite_checks(enabled: bool):
    """Toggle the non-finite input guard in attention.

    Disabled by the gradient checker: its batched parameter sweeps run under
    vmap, where a data-dependent `.all()` cannot execute."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = previous


def attention_map(q: torch.Tensor, k: torch.Tensor, heads: int, scale: float,
                  bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Softmax attention weights [B, heads, Nq, Nk] from token tensors [B, N, C]."""
    b, nq, c = q.shape
    head_dim = c // heads
    qh = q.reshape(b, nq, heads, head_dim).permute(0, 2, 1, 3)
    kh = k.reshape(b, k.shape[1], heads, head_dim).permute(0, 2, 1, 3)
    logits = (qh * scale) @ kh.transpose(-2, -1)
    if bias is not None:
        logits = logits + bias
    return logits.softmax(dim=-1)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                         heads: int, scale: float,
                         bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Multi-head Softmax(q k^T * scale + bias) v over token tensors [B, N, C]."""
    if q.shape[-1] != k.shape[-1] or k.shape[:2] != v.shape[:2]:
        raise ShapeError(f"inconsistent attention shapes {tuple(q.shape)}, "
                         f"{tuple(k.shape)}, {tuple(v.shape)}")
    if q.shape[-1] % heads != 0:
        raise ShapeError(f"channels {q.shape[-1]} not divisible by heads {heads}")
    if _FINITE_CHECKS:
        for name, t in (("q", q), ("k", k), ("v", v)):
            if not torch.isfinite(t).all():
                raise NumericError(f"non-finite values in attention input {name}")
    b, nq, c = q.shape
    head_dim = c // heads
    weights = attention_map(q, k, heads, scale, bias)
    vh = v.reshape(b, v.shape[1], heads, head_dim).permute(0, 2, 1, 3)
    out = weights @ vh
    return out.permute(0, 2, 1, 3).reshape(b, nq, c)


def relative_index_map(hq: int, wq: int, hk: int, wk: int, step: int,
                       cap: int) -> torch.Tensor:
    """Flat table indices [Nq, Nk] for the 2D offset between query positions
    and key positions placed on a grid coarsened by ``step``.

    Offsets are clamped to +-(cap - 1) so the same table serves any input size.
    """
    qr = torch.arange(hq).repeat_interleave(wq)
    qc = torch.arange(wq).repeat(hq)
    kr = (torch.arange(hk) * step).repeat_interleave(wk)
    kc = (torch.arange(wk) * step).repeat(hk)
    dr = (qr[:, None] - kr[None, :]).clamp(-(cap - 1), cap - 1)
    dc = (qc[:, None] - kc[None, :]).clamp(-(cap - 1), cap - 1)
    return (dr + cap - 1) * (2 * cap - 1) + (dc + cap - 1)


class RelativePositionBias2d(nn.Module):
    """Learned additive attention bias indexed by query/key 2D offsets."""

    def __init__(self, heads: int, max_grid: int):
        super().__init__()
        if max_grid < 1:
            raise ConfigError(f"positional grid cap must be >= 1, got {max_grid}")
        self.heads = heads
        self.max_grid = max_grid
        side = 2 * max_grid - 1
        self.bias_table = nn.Parameter(torch.zeros(side * side, heads))
        self._index_cache: dict[tuple, torch.Tensor] = {}

    def forward(self, hq: int, wq: int, hk: int, wk: int, step: int = 1) -> torch.Tensor:
        key = (hq, wq, hk, wk, step)
        idx = self._index_cache.get(key)
        if idx is None:
            idx = relative_index_map(hq, wq, hk, wk, step, self.max_grid)
            self._index_cache[key] = idx
        bias = self.bias_table[idx.reshape(-1)]
        return bias.reshape(hq * wq, hk * wk, self.heads).permute(2, 0, 1)


class DepthwiseConv2d(nn.Conv2d):
    """Per-channel 2D convolution with same-padding.

    CPU grouped conv in float64 falls back to a per-channel loop; for that
    dtype the kernel is evaluated as shifted weighted sums instead (identical
    math, vectorized over channels, vmap-compatible).
    """

    def __init__(self, channels: int, kernel: int, bias: bool = True):
        super().__init__(channels, channels, kernel, padding=kernel // 2,
                         groups=channels, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dtype != torch.float64:
            return super().forward(x)
        c = x.shape[1]
        h, w = x.shape[2], x.shape[3]
        pad = self.padding[0]
        kh, kw = self.kernel_size
        xp = nn.functional.pad(x, (pad, pad, pad, pad))
        out = None
        for i in range(kh):
            for j in range(kw):
                term = xp[:, :, i:i + h, j:j + w] * self.weight[:, 0, i, j].view(1, c, 1, 1)
                out = term if out is None else out + term
        if self.bias is not None:
            out = out + self.bias.view(1, c, 1, 1)
        return out


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel dim of a [B, C, H, W] tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class OverlapPatchEmbed(nn.Module):
    """Strided convolution tokenizer with kernel > stride, then channel LayerNorm."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int):
        super().__init__()
        if stride <= 0:
            raise ConfigError(f"patch stride must be positive, got {stride}")
        if kernel < stride:
            raise ConfigError(f"patch kernel {kernel} < stride {stride}: "
                              "patches would not overlap")
        self.proj = nn.Conv2d(in_channels, out_channels, kernel, stride,
                              padding=kernel // 2)
        self.norm = ChannelLayerNorm(out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.proj(x))


class EfficientSelfAttention(nn.Module):
    """Self-attention with keys/values from a spatially reduced map plus a
    2D positional bias on the logits. Queries keep full resolution."""

    def __init__(self, dim: int, heads: int, sr_ratio: int, pos_grid: int,
                 scale_mode: str = "head_dim"):
        super().__init__()
        if sr_ratio <= 0:
            raise ConfigError(f"sr_ratio must be positive, got {sr_ratio}")
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.sr_ratio = sr_ratio
        self.scale = (dim if scale_mode == "channels" else dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)
        self.pos_bias = RelativePositionBias2d(heads, pos_grid)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        q = self.q(tokens)
        if self.sr_ratio > 1:
            if h % self.sr_ratio or w % self.sr_ratio:
                raise ShapeError(f"feature grid {h}x{w} not divisible by "
                                 f"sr_ratio {self.sr_ratio}")
            reduced = self.sr(x)
            hk, wk = reduced.shape[2], reduced.shape[3]
            kv_tokens = self.sr_norm(reduced.flatten(2).transpose(1, 2))
        else:
            hk, wk = h, w
            kv_tokens = tokens
        kv = self.kv(kv_tokens)
        k, v = kv.chunk(2, dim=-1)
        bias = self.pos_bias(h, w, hk, wk, step=self.sr_ratio)
        out = scaled_dot_attention(q, k, v, self.heads, self.scale, bias)
        out = self.proj(out)
        return out.transpose(1, 2).reshape(b, c, h, w)


class MixFFN(nn.Module):
    """Pointwise expand -> 3x3 depthwise conv -> GELU -> pointwise project."""

    def __init__(self, dim: int, expansion: int):
        super().__init__()
        if expansion < 1:
            raise ConfigError(f"ffn expansion must be >= 1, got {expansion}")
        hidden = dim * expansion
        self.expand = nn.Conv2d(dim, hidden, 1)
        self.dwconv = DepthwiseConv2d(hidden, 3)
        self.act = nn.GELU()
        self.project = nn.Conv2d(hidden, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.act(self.dwconv(self.expand(x))))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, sr_ratio: int, pos_grid: int,
                 expansion: int, scale_mode: str):
        super().__init__()
        self.norm1 = ChannelLayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, heads, sr_ratio, pos_grid, scale_mode)
        self.norm2 = ChannelLayerNorm(dim)
        self.ffn = MixFFN(dim, expansion)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.ffn(self.norm2(x))
        return x


class EncoderStage(nn.Module):
    def __init__(self, in_channels: int, dim: int, kernel: int, stride: int,
                 depth: int, heads: int, sr_ratio: int, pos_grid: int,
                 expansion: int, scale_mode: str):
        super().__init__()
        self.patch_embed = OverlapPatchEmbed(in_channels, dim, kernel, stride)
        self.blocks = nn.ModuleList([
            TransformerBlock(dim, heads, sr_ratio, pos_grid, expansion, scale_mode)
            for _ in range(depth)
        ])
        self.norm = ChannelLayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(x)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class StageFeature(NamedTuple):
    tensor: torch.Tensor
    stage_index: int  # 1-based
    stride_from_input: int


class Encoder(nn.Module):
    """Hierarchical feature extractor emitting four multi-scale features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_ch = 3
        for i in range(4):
            stages.append(EncoderStage(
                in_ch, cfg.stage_dims[i], cfg.patch_kernels[i], cfg.patch_strides[i],
                cfg.stage_depths[i], cfg.stage_heads[i], cfg.sr_ratios[i],
                cfg.pos_grid[i], cfg.ffn_expansion, cfg.attn_scale))
            in_ch = cfg.stage_dims[i]
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected [B, 3, H, W] input, got {tuple(x.shape)}")
        stride = self.cfg.total_stride
        h, w = x.shape[2], x.shape[3]
        if h % stride or w % stride:
            raise ShapeError(f"input {h}x{w} not divisible by total stride {stride}; "
                             "pad the input first")
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return tuple(features)

    def stage_features(self, x: torch.Tensor) -> list[StageFeature]:
        features = self.forward(x)
        out = []
        stride = 1
        for i, feat in enumerate(features):
            stride *= self.cfg.patch_strides[i]
            out.append(StageFeature(feat, i + 1, stride))
        return out
