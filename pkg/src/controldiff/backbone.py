"""Compact text-conditioned diffusion UNet (pixel space).

Layout: an encoder of 12 blocks (input conv, then two residual blocks per
resolution level with a strided-conv downsample between levels), a middle
block, and a decoder of 12 blocks that mirrors the encoder.  Skip wiring is
the classic UNet pairing: decoder block i concatenates the output of encoder
block j with i + j = 13.  Cross-attention over prompt tokens runs at the two
lowest resolutions (configurable) with bias-free single-head projections.

Feature maps are (batch, channels, height, width) tensors; token sequences
are (batch, tokens, token_dim).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import NUM_LEVELS, BackboneConfig
from .errors import (ConfigurationError, ContractViolation, DomainError,
                     NumericsError)


def timestep_embedding(t, dim: int, max_steps: int | None = None,
                       dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal timestep embedding.

    Layout is [sin(t*f_0) .. sin(t*f_{h-1}), cos(t*f_0) .. cos(t*f_{h-1})]
    with h = dim // 2 and frequencies f_i = 10000^(-i/h), so the first
    channel oscillates at unit frequency.  Accepts a python int (returns a
    (dim,) vector) or a 1-D tensor of steps (returns (len(t), dim)).
    """
    if dim % 2 != 0:
        raise ConfigurationError(f"embedding dim must be even, got {dim}")
    scalar = not torch.is_tensor(t)
    steps = torch.as_tensor(t).reshape(-1)
    if (steps < 0).any():
        raise DomainError(f"negative timestep in {steps.tolist()[:4]}")
    if max_steps is not None and (steps >= max_steps).any():
        raise DomainError(f"timestep >= {max_steps}")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) / half *
                      torch.arange(half, dtype=torch.float64))
    angles = steps.double()[:, None] * freqs[None, :]
    emb = torch.cat([angles.sin(), angles.cos()], dim=-1).to(dtype)
    return emb[0] if scalar else emb


class CrossAttention(nn.Module):
    """Single-head attention from spatial positions to prompt tokens.

    All projections are bias-free, so a zero token contributes a zero key
    and a zero value.  The attention result is added residually onto the
    input feature map; there is no output projection.
    """

    def __init__(self, channels: int, token_dim: int):
        super().__init__()
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(token_dim, channels, bias=False)
        self.to_v = nn.Linear(token_dim, channels, bias=False)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim != 3:
            raise ContractViolation(f"tokens must be (B, T, d), got {tuple(tokens.shape)}")
        if tokens.shape[1] == 0:
            raise ContractViolation("empty token sequence")
        if tokens.shape[2] != self.to_k.in_features:
            raise ConfigurationError(
                f"token dim {tokens.shape[2]} does not match key projection "
                f"input {self.to_k.in_features}"
            )
        b, c, h, w = x.shape
        flat = x.reshape(b, c, h * w).transpose(1, 2)  # (B, HW, C)
        q = self.to_q(flat)
        k = self.to_k(tokens)
        v = self.to_v(tokens)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = weights @ v  # (B, HW, C)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ResBlock(nn.Module):
    """GroupNorm -> SiLU -> conv, timestep shift, then a second norm/conv.

    norm1 may be swapped for a condition-modulated normalization by adapter
    code; in that case forward receives the condition features to pass it.
    """

    def __init__(self, in_channels: int, out_channels: int, time_dim: int,
                 groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(groups, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.shortcut = (nn.Conv2d(in_channels, out_channels, 1)
                         if in_channels != out_channels else nn.Identity())

    def forward(self, x, t_emb, cond_feat=None):
        h = self.norm1(x) if cond_feat is None else self.norm1(x, cond_feat)
        h = self.conv1(F.silu(h))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.shortcut(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class EncoderBlock(nn.Module):
    """One of the 12 encoder outputs: input conv, residual(+attn), or downsample."""

    def __init__(self, kind: str, resolution: int, out_channels: int,
                 conv=None, res=None, attn=None, down=None):
        super().__init__()
        self.kind = kind
        self.resolution = resolution
        self.out_channels = out_channels
        self.conv = conv
        self.res = res
        self.attn = attn
        self.down = down

    def forward(self, x, t_emb, tokens, cond_feat=None):
        if self.kind == "in":
            return self.conv(x)
        if self.kind == "down":
            return self.down(x)
        h = self.res(x, t_emb, cond_feat)
        if self.attn is not None:
            h = self.attn(h, tokens)
        return h


class MiddleBlock(nn.Module):
    def __init__(self, channels: int, token_dim: int, time_dim: int,
                 groups: int, use_attn: bool):
        super().__init__()
        self.res1 = ResBlock(channels, channels, time_dim, groups)
        self.attn = CrossAttention(channels, token_dim) if use_attn else None
        self.res2 = ResBlock(channels, channels, time_dim, groups)

    def forward(self, x, t_emb, tokens):
        h = self.res1(x, t_emb)
        if self.attn is not None:
            h = self.attn(h, tokens)
        return self.res2(h, t_emb)


class DecoderBlock(nn.Module):
    """Residual block over concat(carry, skip), optional attention/upsample."""

    def __init__(self, resolution: int, res: ResBlock, attn=None, up=None):
        super().__init__()
        self.resolution = resolution
        self.res = res
        self.attn = attn
        self.up = up

    def forward(self, x, skip, t_emb, tokens):
        h = self.res(torch.cat([x, skip], dim=1), t_emb)
        if self.attn is not None:
            h = self.attn(h, tokens)
        if self.up is not None:
            h = self.up(h)
        return h


def _check_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise NumericsError(f"non-finite activations in {where}")


def build_encoder_blocks(cfg: BackboneConfig) -> nn.ModuleList:
    """The 12-block encoder stack; shared between the base model and copies."""
    blocks = [EncoderBlock("in", cfg.image_size, cfg.base_channels,
                           conv=nn.Conv2d(cfg.in_channels, cfg.base_channels,
                                          3, padding=1))]
    prev = cfg.base_channels
    for level, ch in enumerate(cfg.channels):
        res = cfg.image_size >> level
        for _ in range(cfg.blocks_per_level):
            attn = (CrossAttention(ch, cfg.token_dim)
                    if res in cfg.attention_resolutions else None)
            blocks.append(EncoderBlock(
                "res", res, ch,
                res=ResBlock(prev, ch, cfg.time_embed_dim, cfg.norm_groups),
                attn=attn))
            prev = ch
        if level < NUM_LEVELS - 1:
            blocks.append(EncoderBlock("down", res // 2, prev,
                                       down=Downsample(prev)))
    return nn.ModuleList(blocks)


def run_encoder(blocks, middle, x, t_emb, tokens, cond_feats=None):
    """Run an encoder stack and its middle block, collecting all 12 outputs.

    cond_feats maps resolution -> feature map and is consumed only by blocks
    whose norm was swapped for a condition-modulated one.
    """
    skips = []
    h = x
    for i, block in enumerate(blocks):
        feat = None
        if cond_feats is not None and getattr(block.res, "wants_cond", False):
            feat = cond_feats[block.resolution]
        h = block(h, t_emb, tokens, feat)
        _check_finite(h, f"encoder block {i + 1}")
        skips.append(h)
    m = middle(h, t_emb, tokens)
    _check_finite(m, "middle block")
    return skips, m


class UNetBackbone(nn.Module):
    """Encoder/middle/decoder noise-prediction model with frozen-friendly API."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.token_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
        )
        self.encoder_blocks = build_encoder_blocks(cfg)
        top = cfg.channels[-1]
        lowest = cfg.image_size >> (NUM_LEVELS - 1)
        self.middle = MiddleBlock(top, cfg.token_dim, cfg.time_embed_dim,
                                  cfg.norm_groups,
                                  use_attn=lowest in cfg.attention_resolutions)

        skip_channels = [b.out_channels for b in self.encoder_blocks]
        blocks = []
        prev = top
        for level in reversed(range(NUM_LEVELS)):
            ch = cfg.channels[level]
            res = cfg.image_size >> level
            for b in range(cfg.blocks_per_level + 1):
                skip_ch = skip_channels.pop()
                attn = (CrossAttention(ch, cfg.token_dim)
                        if res in cfg.attention_resolutions else None)
                up = (Upsample(ch)
                      if b == cfg.blocks_per_level and level > 0 else None)
                blocks.append(DecoderBlock(
                    res,
                    ResBlock(prev + skip_ch, ch, cfg.time_embed_dim,
                             cfg.norm_groups),
                    attn=attn, up=up))
                prev = ch
        self.decoder_blocks = nn.ModuleList(blocks)
        self.out_norm = nn.GroupNorm(cfg.norm_groups, cfg.base_channels)
        self.out_conv = nn.Conv2d(cfg.base_channels, cfg.in_channels, 3,
                                  padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        # (decoder block, encoder output) indices of the last forward, 1-based
        self.last_skip_pairing: list[tuple[int, int]] = []

    @property
    def dtype(self):
        return self.out_conv.weight.dtype

    def encode_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Token ids (B, K0) -> embeddings (B, K0, d)."""
        return self.token_embedding(token_ids)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.cfg.time_embed_dim, dtype=self.dtype)
        return self.time_mlp(emb)

    def encoder_forward(self, x, t_emb, tokens):
        if x.shape[-1] != self.cfg.image_size or x.shape[-2] != x.shape[-1]:
            raise ContractViolation(
                f"expected square {self.cfg.image_size}px input, got "
                f"{tuple(x.shape[-2:])}"
            )
        return run_encoder(self.encoder_blocks, self.middle, x, t_emb, tokens)

    def decoder_forward(self, m, skips, t_emb, tokens):
        n = len(self.decoder_blocks)
        if len(skips) != n:
            raise ContractViolation(f"expected {n} skips, got {len(skips)}")
        self.last_skip_pairing = []
        h = m
        for i, block in enumerate(self.decoder_blocks, start=1):
            j = n + 1 - i
            self.last_skip_pairing.append((i, j))
            h = block(h, skips[j - 1], t_emb, tokens)
            _check_finite(h, f"decoder block {i}")
        return self.out_conv(F.silu(self.out_norm(h)))

    def forward(self, x_t, t, tokens):
        t_emb = self.time_embedding(t)
        skips, m = self.encoder_forward(x_t, t_emb, tokens)
        return self.decoder_forward(m, skips, t_emb, tokens)


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> UNetBackbone:
    """Construct a backbone with seeded parameter initialization."""
    torch.manual_seed(seed)
    return UNetBackbone(cfg)


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model
