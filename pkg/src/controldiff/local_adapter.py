"""Local control adapter: a condition-modulated copy of the UNet encoder.

The adapter re-runs the (copied) encoder and middle block on the noised
image while a small convolution stack extracts multi-scale features from the
stacked condition maps. At the first residual block of each resolution the
plain normalization is swapped for feature-denormalization: the condition
features, passed through a zero-initialized 1x1 convolution, produce a
multiplicative and an additive modulation of the normalized activations.
Every adapter output joins the base computation through its own
zero-initialized 1x1 convolution: skip j is fused as f_j + zero(f'_j) into
decoder block i with i + j = 13, and the middle output as m + zero(m').

All zero convolutions start at exactly zero, and the modulation convolutions
carry zero biases, so an untrained adapter leaves the base model's output
bit-identical.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import MiddleBlock, build_encoder_blocks, run_encoder
from .config import NUM_LEVELS, BackboneConfig, LocalAdapterConfig
from .errors import ConfigurationError, ContractViolation, StateError


def zero_conv(channels):
    """1x1 convolution initialized to produce exactly zero."""
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class FeatureDenorm(nn.Module):
    """Condition-modulated group normalization.

    Computes norm(x) * (1 + conv_gamma(zero(h))) + conv_beta(zero(h)) where h
    is the condition feature map at this resolution. The zero convolution and
    the modulation biases start at zero, so a fresh instance is exactly plain
    normalization.
    """

    def __init__(self, channels, cond_channels, groups=8):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.zero = zero_conv(cond_channels)
        self.conv_gamma = nn.Conv2d(cond_channels, channels, 3, padding=1)
        self.conv_beta = nn.Conv2d(cond_channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv_gamma.bias)
        nn.init.zeros_(self.conv_beta.bias)

    def forward(self, x, cond_feat=None):
        z = self.norm(x)
        if cond_feat is None:
            return z
        if cond_feat.shape[-2:] != x.shape[-2:]:
            raise ContractViolation(
                f"condition features {tuple(cond_feat.shape[-2:])} do not match "
                f"activations {tuple(x.shape[-2:])}"
            )
        h = self.zero(cond_feat)
        return z * (1.0 + self.conv_gamma(h)) + self.conv_beta(h)


class ConditionEncoder(nn.Module):
    """Stride-2 convolution stack producing condition features at every level."""

    def __init__(self, in_channels, widths, image_size):
        super().__init__()
        if len(widths) != NUM_LEVELS:
            raise ConfigurationError(f"need {NUM_LEVELS} widths, got {len(widths)}")
        self.in_channels = in_channels
        self.image_size = image_size
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[k - 1], widths[k], 3, stride=2, padding=1)
            for k in range(1, NUM_LEVELS)
        )

    def forward(self, stack):
        """Condition stack (B, C, H, W) -> {resolution: features} at 4 scales."""
        if stack.ndim != 4 or stack.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"expected (B, {self.in_channels}, H, W) condition stack, got "
                f"{tuple(stack.shape)}"
            )
        h = F.silu(self.stem(stack))
        feats = {self.image_size: h}
        for k, down in enumerate(self.downs, start=1):
            h = F.silu(down(h))
            feats[self.image_size >> k] = h
        return feats


def _injection_indices(blocks):
    # the first residual block at each resolution
    seen, indices = set(), []
    for i, block in enumerate(blocks):
        if block.kind == "res" and block.resolution not in seen:
            seen.add(block.resolution)
            indices.append(i)
    return indices


class LocalAdapter(nn.Module):
    """Copied encoder + condition extractor + zero-convolution fusion."""

    def __init__(self, cfg: BackboneConfig, adapter_cfg: LocalAdapterConfig | None = None):
        super().__init__()
        self.cfg = cfg
        self.adapter_cfg = adapter_cfg or LocalAdapterConfig()
        widths = self.adapter_cfg.extractor_channels
        self.extractor = ConditionEncoder(
            self.adapter_cfg.condition_channels, widths, cfg.image_size
        )
        self.encoder_blocks = build_encoder_blocks(cfg)
        self.injection_indices = _injection_indices(self.encoder_blocks)
        for idx in self.injection_indices:
            res_block = self.encoder_blocks[idx].res
            level = (cfg.image_size // self.encoder_blocks[idx].resolution).bit_length() - 1
            res_block.norm1 = FeatureDenorm(
                res_block.norm1.num_channels, widths[level], cfg.norm_groups
            )
            res_block.wants_cond = True
        top = cfg.channels[-1]
        lowest = cfg.image_size >> (NUM_LEVELS - 1)
        self.middle = MiddleBlock(
            top, cfg.token_dim, cfg.time_embed_dim, cfg.norm_groups,
            use_attn=lowest in cfg.attention_resolutions,
        )
        self.skip_zeros = nn.ModuleList(
            zero_conv(b.out_channels) for b in self.encoder_blocks
        )
        self.middle_zero = zero_conv(top)
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    def init_from_base(self, base):
        """Copy encoder and middle weights from a frozen base model."""
        remapped = {}
        for key, value in base.encoder_blocks.state_dict().items():
            idx = int(key.split(".", 1)[0])
            if idx in self.injection_indices and ".res.norm1." in key:
                key = key.replace(".res.norm1.", ".res.norm1.norm.")
            remapped[key] = value
        missing, unexpected = self.encoder_blocks.load_state_dict(remapped, strict=False)
        if unexpected:
            raise ConfigurationError(f"base weights do not fit adapter topology: {unexpected[:3]}")
        for key in missing:  # only the fresh modulation layers may be uncopied
            if not any(s in key for s in (".zero.", ".conv_gamma.", ".conv_beta.")):
                raise ConfigurationError(f"missing copied weight {key}")
        self.middle.load_state_dict(base.middle.state_dict())
        self.initialized.fill_(True)
        return self

    def forward(self, z_t, stack, t_emb, tokens):
        """Adapter pass: returns (12 adapter skips, adapter middle output)."""
        if not bool(self.initialized):
            raise StateError("adapter used before init_from_base or checkpoint load")
        feats = self.extractor(stack)
        return run_encoder(self.encoder_blocks, self.middle, z_t, t_emb, tokens,
                           cond_feats=feats)

    def fuse(self, skips, m, adapter_skips, adapter_m):
        """Zero-convolved residual fusion of adapter outputs into base skips."""
        if len(skips) != len(adapter_skips) or len(skips) != len(self.skip_zeros):
            raise ContractViolation(
                f"skip count mismatch: {len(skips)} base vs {len(adapter_skips)} adapter"
            )
        fused = [s + zc(a) for s, a, zc in zip(skips, adapter_skips, self.skip_zeros)]
        return fused, m + self.middle_zero(adapter_m)
