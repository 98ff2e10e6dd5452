# services/models/diffusion.py
"""Score-based diffusion shared by the acoustic and gesture pathways.

Data y0 is carried towards N(mu, I) by the variance-preserving SDE with the
linear schedule beta(t) = beta0 + (beta1 - beta0) t. Networks estimate the
score of x_t and are trained with the lambda(t)-weighted score-matching loss.
Tensors are [B x C x T] (or any [B x ...] layout) with a mask broadcastable to them.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch
import torch.nn as nn

from ..error_handler import NonFiniteError
from .params import DiffusionParams

logger = logging.getLogger(__name__)

# score_fn(x_t, mask, mu, t) -> score estimate shaped like x_t; t has shape [B]
ScoreFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]

TimeLike = Union[float, torch.Tensor]


class NoiseSchedule:
    """beta(t) linear in t; B(t) its integral; lambda = 1 - exp(-B); alpha = exp(-B/2)"""

    def __init__(self, beta0: float = 0.05, beta1: float = 20.0):
        if not 0 < beta0 < beta1:
            raise ValueError(f"Schedule needs 0 < beta0 < beta1, got {beta0}, {beta1}")
        self.beta0 = float(beta0)
        self.beta1 = float(beta1)

    @classmethod
    def from_params(cls, params: DiffusionParams) -> 'NoiseSchedule':
        return cls(params.beta0, params.beta1)

    @staticmethod
    def _as_tensor(t: TimeLike) -> torch.Tensor:
        return t if isinstance(t, torch.Tensor) else torch.tensor(t, dtype=torch.float64)

    def beta(self, t: TimeLike) -> torch.Tensor:
        t = self._as_tensor(t)
        return self.beta0 + (self.beta1 - self.beta0) * t

    def cumulative(self, t: TimeLike) -> torch.Tensor:
        t = self._as_tensor(t)
        return self.beta0 * t + 0.5 * (self.beta1 - self.beta0) * t ** 2

    def lam(self, t: TimeLike) -> torch.Tensor:
        return -torch.expm1(-self.cumulative(t))

    def alpha(self, t: TimeLike) -> torch.Tensor:
        return torch.exp(-0.5 * self.cumulative(t))


@dataclass
class DiffusionState:
    x_t: torch.Tensor
    t: torch.Tensor
    mu: torch.Tensor


def _per_item(t: TimeLike, like: torch.Tensor) -> torch.Tensor:
    """Time as a [B] tensor on like's device and dtype"""
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.dim() == 0:
        t = t.expand(like.shape[0])
    return t


def _expand(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.view(-1, *([1] * (like.dim() - 1)))


def forward_sample(y0: torch.Tensor, mu: torch.Tensor, t: TimeLike, noise: torch.Tensor,
                   schedule: Optional[NoiseSchedule] = None) -> DiffusionState:
    """x_t = alpha y0 + (1 - alpha) mu + sqrt(lambda) noise"""
    schedule = schedule or NoiseSchedule()
    if y0.shape != mu.shape or noise.shape != y0.shape:
        raise ValueError(f"Shape mismatch: y0 {tuple(y0.shape)}, mu {tuple(mu.shape)}, noise {tuple(noise.shape)}")

    t = _per_item(t, y0)
    if torch.any(t <= 0) or torch.any(t > 1):
        raise ValueError(f"Diffusion time must lie in (0, 1], got {t.tolist()}")

    time = _expand(t, y0)
    alpha = schedule.alpha(time)
    x_t = alpha * y0 + (1.0 - alpha) * mu + torch.sqrt(schedule.lam(time)) * noise
    return DiffusionState(x_t=x_t, t=t, mu=mu)


def score_matching_loss(score_fn: ScoreFn, y0: torch.Tensor, mu: torch.Tensor,
                        mask: Optional[torch.Tensor] = None,
                        generator: Optional[torch.Generator] = None,
                        schedule: Optional[NoiseSchedule] = None,
                        t_min: float = 1e-4,
                        t: Optional[TimeLike] = None,
                        noise: Optional[torch.Tensor] = None,
                        reduction: str = 'mean') -> torch.Tensor:
    """mean || sqrt(lambda(t)) s(x_t) + eps ||^2 over unmasked elements, t ~ U(t_min, 1)"""
    schedule = schedule or NoiseSchedule()
    if mask is None:
        mask = torch.ones_like(y0[:, :1])

    if t is None:
        t = torch.rand(y0.shape[0], generator=generator, dtype=y0.dtype, device=y0.device)
        t = t * (1.0 - t_min) + t_min
    t = _per_item(t, y0)
    if noise is None:
        noise = torch.randn(y0.shape, generator=generator, dtype=y0.dtype, device=y0.device)

    state = forward_sample(y0, mu, t, noise, schedule)
    x_t = state.x_t * mask
    noise = noise * mask

    score = score_fn(x_t, mask, mu, t)
    weighted = score * torch.sqrt(schedule.lam(_expand(t, y0)))
    squared = (weighted + noise) ** 2 * mask
    counts = mask.expand_as(y0)

    if reduction == 'none':
        dims = tuple(range(1, y0.dim()))
        return squared.sum(dim=dims) / counts.sum(dim=dims)
    return squared.sum() / counts.sum()


def _initial_state(mu: torch.Tensor, mask: torch.Tensor, temperature: float,
                   generator: Optional[torch.Generator]) -> torch.Tensor:
    if not temperature > 0:
        raise ValueError(f"Temperature must be positive, got {temperature}")
    noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return (mu + noise / math.sqrt(temperature)) * mask


def _check_finite(x: torch.Tensor, step: int) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"Sampler state became non-finite at step {step}", step=step)


@torch.no_grad()
def sample_ode(score_fn: ScoreFn, mu: torch.Tensor, steps: int, temperature: float = 1.5,
               generator: Optional[torch.Generator] = None, mask: Optional[torch.Tensor] = None,
               schedule: Optional[NoiseSchedule] = None) -> torch.Tensor:
    """Euler integration of dx = 0.5 (mu - x - s) beta dt from t = 1 down to 0"""
    schedule = schedule or NoiseSchedule()
    if steps < 1:
        raise ValueError(f"Need at least one step, got {steps}")
    if mask is None:
        mask = torch.ones_like(mu[:, :1])

    h = 1.0 / steps
    x = _initial_state(mu, mask, temperature, generator)
    for i in range(steps):
        t = torch.full((mu.shape[0],), 1.0 - i * h, dtype=mu.dtype, device=mu.device)
        beta = schedule.beta(_expand(t, mu))
        dx = 0.5 * (mu - x - score_fn(x, mask, mu, t)) * beta * h
        x = (x - dx) * mask
        _check_finite(x, i)
    return x


@torch.no_grad()
def sample_sde(score_fn: ScoreFn, mu: torch.Tensor, steps: int, temperature: float = 1.0,
               generator: Optional[torch.Generator] = None, mask: Optional[torch.Tensor] = None,
               schedule: Optional[NoiseSchedule] = None) -> torch.Tensor:
    """Reverse-time Euler-Maruyama: dx = (0.5 (mu - x) - s) beta dt + sqrt(beta) dW"""
    schedule = schedule or NoiseSchedule()
    if steps < 1:
        raise ValueError(f"Need at least one step, got {steps}")
    if mask is None:
        mask = torch.ones_like(mu[:, :1])

    h = 1.0 / steps
    x = _initial_state(mu, mask, temperature, generator)
    for i in range(steps):
        t = torch.full((mu.shape[0],), 1.0 - i * h, dtype=mu.dtype, device=mu.device)
        beta = schedule.beta(_expand(t, mu))
        drift = (0.5 * (mu - x) - score_fn(x, mask, mu, t)) * beta * h
        z = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        x = (x - drift - torch.sqrt(beta * h) * z) * mask
        _check_finite(x, i)
    return x


class Diffusion(nn.Module):
    """A score network bound to a noise schedule"""

    def __init__(self, estimator: nn.Module, params: Optional[DiffusionParams] = None):
        super().__init__()
        params = params or DiffusionParams()
        self.estimator = estimator
        self.schedule = NoiseSchedule.from_params(params)
        self.t_min = params.t_min

    def score(self, x_t, mask, mu, t):
        return self.estimator(x_t, mask, mu, t)

    def loss(self, y0: torch.Tensor, mask: torch.Tensor, mu: torch.Tensor,
             generator: Optional[torch.Generator] = None, reduction: str = 'mean') -> torch.Tensor:
        return score_matching_loss(self.score, y0, mu, mask, generator=generator,
                                   schedule=self.schedule, t_min=self.t_min, reduction=reduction)

    @torch.no_grad()
    def reverse(self, mu: torch.Tensor, mask: torch.Tensor, steps: int, temperature: float = 1.5,
                stochastic: bool = False, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        sampler = sample_sde if stochastic else sample_ode
        return sampler(self.score, mu, steps, temperature, generator=generator,
                       mask=mask, schedule=self.schedule)
