"""Forward noising, the denoising objective, and DDIM sampling with guidance.

The model works in [-1, 1] image space; `ddim_sample` returns that space and
callers rescale to [0, 1] pixels. Noise levels follow a linear beta schedule
whose cumulative products are kept in float64 and cast at the point of use.
"""

from __future__ import annotations

import torch

from .config import SamplerConfig, ScheduleConfig
from .errors import ConfigurationError, ContractViolation, DomainError, NumericsError


class NoiseSchedule:
    """Per-step variances and their cumulative products for T diffusion steps."""

    def __init__(self, config=None):
        self.config = config or ScheduleConfig()
        self.T = self.config.num_steps
        self.betas = torch.linspace(
            self.config.beta_start, self.config.beta_end, self.T, dtype=torch.float64
        )
        self.alphas_cumprod = torch.cumprod(1.0 - self.betas, dim=0)
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ConfigurationError("betas must lie strictly inside (0, 1)")
        if not (self.alphas_cumprod.diff() < 0).all():
            raise ConfigurationError("alphas_cumprod must be strictly decreasing")

    def _gather(self, t, like):
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t[None]
        if (t < 0).any() or (t >= self.T).any():
            raise DomainError(f"timestep out of range [0, {self.T})")
        ab = self.alphas_cumprod[t].to(like.dtype)
        return ab.view(-1, *([1] * (like.ndim - 1)))

    def alpha_bar(self, t, like):
        """Cumulative product at step t, broadcast against `like`."""
        return self._gather(t, like)


def q_sample(schedule, x0, t, eps):
    """Noised sample at step t: sqrt(a_bar)*x0 + sqrt(1-a_bar)*eps."""
    if eps.shape != x0.shape:
        raise ContractViolation(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = schedule.alpha_bar(t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def training_loss(model, schedule, x0, *, generator=None, t=None, eps=None):
    """Mean squared error of the model's noise prediction at a random step.

    `model` is a callable (x_t, t) -> predicted eps with any conditioning
    already bound. `t` and `eps` may be passed explicitly for testing;
    otherwise they are drawn from `generator`.
    """
    b = x0.shape[0]
    if t is None:
        t = torch.randint(0, schedule.T, (b,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(schedule, x0, t, eps)
    pred = model(x_t, t)
    if pred.shape != eps.shape:
        raise ContractViolation(f"model output shape {tuple(pred.shape)} != eps shape {tuple(eps.shape)}")
    loss = torch.mean((pred - eps) ** 2)
    if not torch.isfinite(loss):
        raise NumericsError(f"non-finite training loss at t={t.tolist()}")
    return loss


def cfg_combine(eps_cond, eps_uncond, scale):
    """Classifier-free guidance: eps_uncond + scale * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ContractViolation(
            f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    return eps_uncond + scale * (eps_cond - eps_uncond)


def uniform_timesteps(T, num_steps):
    """Descending timesteps with uniform stride, ending at 0."""
    if not 1 <= num_steps <= T:
        raise ConfigurationError(f"num_steps must be in [1, {T}], got {num_steps}")
    stride = T // num_steps
    return list(range((num_steps - 1) * stride, -1, -stride))


@torch.no_grad()
def ddim_sample(cond_fn, uncond_fn, schedule, shape, config=None, generator=None):
    """Deterministic DDIM sampling loop with classifier-free guidance.

    `cond_fn` and `uncond_fn` map (x_t, t) -> eps with conditioning bound.
    Predicted x0 is clamped to [-1, 1] each step; returns the final x0-space
    batch of `shape`.
    """
    config = config or SamplerConfig()
    if config.eta != 0.0:
        raise ConfigurationError("only deterministic sampling (eta=0) is supported")
    if uncond_fn is None and config.cfg_scale != 1.0:
        raise ConfigurationError("guidance needs an unconditional pathway (cfg_scale != 1)")
    steps = uniform_timesteps(schedule.T, config.num_steps)
    x = torch.randn(shape, generator=generator)
    for i, t in enumerate(steps):
        t_batch = torch.full((shape[0],), t, dtype=torch.long)
        if config.cfg_scale == 1.0:
            eps = cond_fn(x, t_batch)
        elif config.cfg_scale == 0.0:
            eps = uncond_fn(x, t_batch)
        else:
            eps = cfg_combine(cond_fn(x, t_batch), uncond_fn(x, t_batch), config.cfg_scale)
        ab = schedule.alpha_bar(t_batch, x)
        x0_pred = ((x - (1.0 - ab).sqrt() * eps) / ab.sqrt()).clamp(-1.0, 1.0)
        eps_adj = (x - ab.sqrt() * x0_pred) / (1.0 - ab).sqrt()
        if i + 1 < len(steps):
            ab_prev = schedule.alpha_bar(torch.full_like(t_batch, steps[i + 1]), x)
        else:
            ab_prev = torch.ones_like(ab)
        x = ab_prev.sqrt() * x0_pred + (1.0 - ab_prev).sqrt() * eps_adj
    return x
