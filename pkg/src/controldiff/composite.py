"""Base model plus optional adapters behind one noise-prediction interface.

The adapters never modify base weights. The local adapter contributes
zero-convolved residuals to the skip connections and middle output; the
global adapter extends the prompt with weighted condition tokens. Requests
decide per call which paths run: a request without a global embedding keeps
the plain text prompt (and is bit-identical to the base model when the local
zero convolutions are untrained), a request without a condition stack skips
the local adapter entirely.

Classifier-free guidance uses a learned "empty" branch: padding-only text,
an all-zero condition stack, and zeroed global tokens, mirroring the
structure of the conditional branch so both see the same prompt length.
"""

from __future__ import annotations

import torch
from torch import nn

from .diffusion import ddim_sample
from .errors import ConfigurationError, ContractViolation
from .global_adapter import build_extended_prompt
from .text import PAD_ID


class ControlledModel(nn.Module):
    """UNet backbone with a local and/or global adapter attached."""

    def __init__(self, base, local_adapter=None, global_adapter=None):
        super().__init__()
        self.base = base
        self.local_adapter = local_adapter
        self.global_adapter = global_adapter

    @property
    def image_size(self):
        return self.base.cfg.image_size

    def prompt_tokens(self, token_ids, global_embed=None, global_present=None, weight=1.0):
        """Embed text ids, extending with weighted global tokens when given."""
        text = self.base.encode_text(token_ids)
        if global_embed is None:
            return text
        if self.global_adapter is None:
            raise ConfigurationError("global condition supplied but no global adapter attached")
        tokens = self.global_adapter.encode(global_embed, present=global_present)
        return build_extended_prompt(text, tokens, weight).tokens

    def forward(self, x_t, t, token_ids, local_stack=None, global_embed=None,
                global_present=None, weight=1.0):
        tokens = self.prompt_tokens(token_ids, global_embed, global_present, weight)
        t_emb = self.base.time_embedding(t)
        skips, m = self.base.encoder_forward(x_t, t_emb, tokens)
        if local_stack is not None:
            if self.local_adapter is None:
                raise ConfigurationError("condition stack supplied but no local adapter attached")
            adapter_skips, adapter_m = self.local_adapter(x_t, local_stack, t_emb, tokens)
            skips, m = self.local_adapter.fuse(skips, m, adapter_skips, adapter_m)
        return self.base.decoder_forward(m, skips, t_emb, tokens)


def _batch_size(token_ids, local_stack, global_embed):
    for tensor in (token_ids, local_stack, global_embed):
        if tensor is not None:
            return tensor.shape[0]
    raise ContractViolation("sampling request needs at least one of tokens/stack/embedding")


def sample_batch(model, schedule, sampler_config, *, token_ids=None, local_stack=None,
                 global_embed=None, weight=1.0, generator=None, text_len=8):
    """DDIM-sample a batch of images in [0, 1] under the given conditions.

    The unconditional guidance branch mirrors the conditional one: same
    prompt length (global tokens zeroed, not removed), an all-zero condition
    stack when a stack is given, and padding-only text.
    """
    b = _batch_size(token_ids, local_stack, global_embed)
    if token_ids is None:
        token_ids = torch.full((b, text_len), PAD_ID, dtype=torch.long)
    pad_ids = torch.full_like(token_ids, PAD_ID)
    present = None
    if global_embed is not None:
        present = (global_embed.abs().sum(dim=1) > 0).to(global_embed.dtype)

    def cond_fn(x, t):
        return model(x, t, token_ids, local_stack=local_stack, global_embed=global_embed,
                     global_present=present, weight=weight)

    def uncond_fn(x, t):
        stack = torch.zeros_like(local_stack) if local_stack is not None else None
        embed = torch.zeros_like(global_embed) if global_embed is not None else None
        zeros = present * 0.0 if present is not None else None
        return model(x, t, pad_ids, local_stack=stack, global_embed=embed,
                     global_present=zeros, weight=weight)

    was_training = model.training
    model.eval()
    try:
        shape = (b, model.base.cfg.in_channels, model.image_size, model.image_size)
        x = ddim_sample(cond_fn, uncond_fn, schedule, shape, sampler_config, generator)
    finally:
        if was_training:
            model.train()
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)
