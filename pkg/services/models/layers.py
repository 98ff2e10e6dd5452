# services/models/layers.py
import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


def sequence_mask(lengths: torch.Tensor, max_length: Optional[int] = None) -> torch.Tensor:
    """[B] lengths -> [B x max_length] boolean mask"""
    if max_length is None:
        max_length = int(lengths.max())
    positions = torch.arange(max_length, dtype=lengths.dtype, device=lengths.device)
    return positions.unsqueeze(0) < lengths.unsqueeze(1)


def pad_to_multiple(length: int, multiple: int) -> int:
    return multiple * math.ceil(length / multiple)


def generate_path(durations: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Integer durations [B x P] -> hard alignment [B x P x T] limited to mask [B x P x T]"""
    cum_durations = torch.cumsum(durations, dim=1)
    frames = torch.arange(mask.shape[-1], device=durations.device)
    starts = (cum_durations - durations).unsqueeze(-1)
    path = (frames.view(1, 1, -1) >= starts) & (frames.view(1, 1, -1) < cum_durations.unsqueeze(-1))
    return path.to(mask.dtype) * mask


class Mish(nn.Module):
    def forward(self, x):
        return x * torch.tanh(F.softplus(x))


class SinusoidalPosEmb(nn.Module):
    """Sinusoidal embedding of the continuous diffusion time"""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, x: torch.Tensor, scale: float = 1000.0) -> torch.Tensor:
        half_dim = self.dim // 2
        emb = math.log(10000) / (half_dim - 1)
        emb = torch.exp(torch.arange(half_dim, device=x.device, dtype=x.dtype) * -emb)
        emb = scale * x.unsqueeze(1) * emb.unsqueeze(0)
        return torch.cat((emb.sin(), emb.cos()), dim=-1)


class ChannelLayerNorm(nn.Module):
    """Layer norm over the channel axis of [B x C x T] tensors"""

    def __init__(self, channels: int, eps: float = 1e-4):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = torch.mean(x, dim=1, keepdim=True)
        variance = torch.mean((x - mean) ** 2, dim=1, keepdim=True)
        x = (x - mean) * torch.rsqrt(variance + self.eps)
        shape = [1, -1] + [1] * (x.dim() - 2)
        return x * self.gamma.view(*shape) + self.beta.view(*shape)


class FrameGroupNorm(nn.Module):
    """Group norm whose statistics are taken per time frame (the last axis).

    Works for [B x C x T] and [B x C x F x T]; frames never share statistics, so
    padded frames cannot leak into real ones and the layer commutes with time shifts.
    """

    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        batch, channels = x.shape[:2]
        grouped = x.reshape(batch, self.groups, channels // self.groups, *x.shape[2:])
        reduce_dims = tuple(range(2, grouped.dim() - 1))
        mean = grouped.mean(dim=reduce_dims, keepdim=True)
        variance = grouped.var(dim=reduce_dims, keepdim=True, unbiased=False)
        x = ((grouped - mean) * torch.rsqrt(variance + self.eps)).reshape(x.shape)
        shape = [1, -1] + [1] * (x.dim() - 2)
        return x * self.weight.view(*shape) + self.bias.view(*shape)


class Rezero(nn.Module):
    def __init__(self, fn: nn.Module):
        super().__init__()
        self.fn = fn
        self.g = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return self.fn(x) * self.g


class Residual(nn.Module):
    def __init__(self, fn: nn.Module):
        super().__init__()
        self.fn = fn

    def forward(self, x, *args, **kwargs):
        return self.fn(x, *args, **kwargs) + x
