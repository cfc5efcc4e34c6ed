"""Global control adapter: condition embedding -> weighted prompt tokens.

A small feedforward network maps the global condition embedding to K * d
values, reshaped into K tokens of the text token dimension d. The tokens are
scaled by an inference-time weight and appended after the K0 text tokens, so
every cross-attention layer sees one extended prompt. Token i is exactly the
slice [(i-1)*d, i*d) of the network output.

Dropped global conditions are handled by a per-sample presence mask that
zeroes the tokens; zero tokens produce zero keys and values under the
bias-free attention projections but still receive softmax mass, so appending
them is not a strict no-op. Callers that have no global condition at all
simply keep the plain text prompt.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import GlobalAdapterConfig
from .errors import ConfigurationError, ContractViolation, DomainError


class GlobalAdapter(nn.Module):
    """3-layer feedforward encoder producing K global prompt tokens."""

    def __init__(self, cfg: GlobalAdapterConfig | None = None, token_dim: int = 64):
        super().__init__()
        self.cfg = cfg or GlobalAdapterConfig()
        self.token_dim = token_dim
        out_dim = self.cfg.num_tokens * token_dim
        self.mlp = nn.Sequential(
            nn.Linear(self.cfg.embed_dim, self.cfg.hidden_dim),
            nn.SiLU(),
            nn.Linear(self.cfg.hidden_dim, self.cfg.hidden_dim),
            nn.SiLU(),
            nn.Linear(self.cfg.hidden_dim, out_dim),
        )

    def encode(self, embedding, present=None):
        """Global embeddings (B, D_g) -> tokens (B, K, d), zeroed where absent."""
        if embedding.ndim != 2 or embedding.shape[1] != self.cfg.embed_dim:
            raise ConfigurationError(
                f"expected (B, {self.cfg.embed_dim}) embedding, got {tuple(embedding.shape)}"
            )
        flat = self.mlp(embedding)
        if flat.shape[1] != self.cfg.num_tokens * self.token_dim:
            raise ConfigurationError(
                f"encoder output {flat.shape[1]} != K*d = "
                f"{self.cfg.num_tokens * self.token_dim}"
            )
        tokens = flat.view(-1, self.cfg.num_tokens, self.token_dim)
        if present is not None:
            tokens = tokens * present.view(-1, 1, 1).to(tokens.dtype)
        return tokens

    def forward(self, embedding, present=None):
        return self.encode(embedding, present)


@dataclass
class ExtendedPrompt:
    """Text tokens followed by weighted global tokens, as one sequence."""

    tokens: torch.Tensor  # (B, K0 + K, d)
    weight: float
    num_text: int
    num_global: int


def build_extended_prompt(text_tokens, global_tokens, weight):
    """Concatenate [text tokens, weight * global tokens] along the sequence axis."""
    if weight < 0:
        raise DomainError(f"prompt weight must be non-negative, got {weight}")
    if text_tokens.ndim != 3 or global_tokens.ndim != 3:
        raise ContractViolation("token sequences must be (B, T, d)")
    if text_tokens.shape[0] != global_tokens.shape[0] or text_tokens.shape[2] != global_tokens.shape[2]:
        raise ContractViolation(
            f"incompatible token shapes {tuple(text_tokens.shape)} and "
            f"{tuple(global_tokens.shape)}"
        )
    tokens = torch.cat([text_tokens, weight * global_tokens], dim=1)
    return ExtendedPrompt(
        tokens=tokens,
        weight=float(weight),
        num_text=text_tokens.shape[1],
        num_global=global_tokens.shape[1],
    )
