# services/models/encoder.py
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..aligner import DurationAlignment
from ..error_handler import AlignmentError, TokenizationError
from .layers import ChannelLayerNorm, sequence_mask
from .params import EncoderParams

MAX_FRAMES_PER_SYMBOL = 10 ** 4
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class EncoderOutput:
    mu_tilde: torch.Tensor  # [B x n_feats x P]
    hidden: torch.Tensor    # [B x H x P]
    mask: torch.Tensor      # [B x 1 x P]


class ConvReluNorm(nn.Module):
    def __init__(self, in_channels, hidden_channels, out_channels, kernel_size, n_layers, p_dropout):
        super().__init__()
        self.conv_layers = nn.ModuleList()
        self.norm_layers = nn.ModuleList()
        for i in range(n_layers):
            self.conv_layers.append(nn.Conv1d(in_channels if i == 0 else hidden_channels, hidden_channels,
                                              kernel_size, padding=kernel_size // 2))
            self.norm_layers.append(ChannelLayerNorm(hidden_channels))
        self.relu_drop = nn.Sequential(nn.ReLU(), nn.Dropout(p_dropout))
        self.proj = nn.Conv1d(hidden_channels, out_channels, 1)
        self.proj.weight.data.zero_()
        self.proj.bias.data.zero_()

    def forward(self, x, x_mask):
        x_org = x
        for conv, norm in zip(self.conv_layers, self.norm_layers):
            x = conv(x * x_mask)
            x = norm(x)
            x = self.relu_drop(x)
        x = x_org + self.proj(x)
        return x * x_mask


class RelativeBiasAttention(nn.Module):
    """Multi-head self-attention with a learned per-head bias on clipped relative offsets"""

    def __init__(self, channels, n_heads, window_size, p_dropout):
        super().__init__()
        self.n_heads = n_heads
        self.k_channels = channels // n_heads
        self.window_size = window_size

        self.conv_q = nn.Conv1d(channels, channels, 1)
        self.conv_k = nn.Conv1d(channels, channels, 1)
        self.conv_v = nn.Conv1d(channels, channels, 1)
        self.conv_o = nn.Conv1d(channels, channels, 1)
        self.drop = nn.Dropout(p_dropout)
        self.rel_bias = nn.Parameter(torch.zeros(n_heads, 2 * window_size + 1)) if window_size > 0 else None

        for conv in (self.conv_q, self.conv_k, self.conv_v):
            nn.init.xavier_uniform_(conv.weight)

    def forward(self, x, attn_mask):
        b, c, t = x.shape
        query = self.conv_q(x).view(b, self.n_heads, self.k_channels, t).transpose(2, 3)
        key = self.conv_k(x).view(b, self.n_heads, self.k_channels, t).transpose(2, 3)
        value = self.conv_v(x).view(b, self.n_heads, self.k_channels, t).transpose(2, 3)

        scores = torch.matmul(query, key.transpose(-2, -1)) / math.sqrt(self.k_channels)
        if self.rel_bias is not None:
            positions = torch.arange(t, device=x.device)
            offsets = (positions.unsqueeze(0) - positions.unsqueeze(1)).clamp(-self.window_size, self.window_size)
            scores = scores + self.rel_bias[:, offsets + self.window_size].unsqueeze(0)
        scores = scores.masked_fill(attn_mask == 0, -1e4)

        p_attn = self.drop(F.softmax(scores, dim=-1))
        output = torch.matmul(p_attn, value).transpose(2, 3).reshape(b, c, t)
        return self.conv_o(output)


class FFN(nn.Module):
    def __init__(self, in_channels, out_channels, filter_channels, kernel_size, p_dropout):
        super().__init__()
        self.conv_1 = nn.Conv1d(in_channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.conv_2 = nn.Conv1d(filter_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.drop = nn.Dropout(p_dropout)

    def forward(self, x, x_mask):
        x = torch.relu(self.conv_1(x * x_mask))
        x = self.drop(x)
        x = self.conv_2(x * x_mask)
        return x * x_mask


class AttentionStack(nn.Module):
    def __init__(self, params: EncoderParams):
        super().__init__()
        self.drop = nn.Dropout(params.p_dropout)
        self.attn_layers = nn.ModuleList()
        self.norm_layers_1 = nn.ModuleList()
        self.ffn_layers = nn.ModuleList()
        self.norm_layers_2 = nn.ModuleList()
        for _ in range(params.n_layers):
            self.attn_layers.append(RelativeBiasAttention(params.n_channels, params.n_heads,
                                                          params.window_size, params.p_dropout))
            self.norm_layers_1.append(ChannelLayerNorm(params.n_channels))
            self.ffn_layers.append(FFN(params.n_channels, params.n_channels, params.filter_channels,
                                       params.kernel_size, params.p_dropout))
            self.norm_layers_2.append(ChannelLayerNorm(params.n_channels))

    def forward(self, x, x_mask):
        attn_mask = x_mask.unsqueeze(2) * x_mask.unsqueeze(-1)
        for attn, norm_1, ffn, norm_2 in zip(self.attn_layers, self.norm_layers_1,
                                             self.ffn_layers, self.norm_layers_2):
            x = x * x_mask
            y = self.drop(attn(x, attn_mask))
            x = norm_1(x + y)
            y = self.drop(ffn(x, x_mask))
            x = norm_2(x + y)
        return x * x_mask


class DurationPredictor(nn.Module):
    def __init__(self, in_channels, filter_channels, kernel_size, p_dropout):
        super().__init__()
        self.drop = nn.Dropout(p_dropout)
        self.conv_1 = nn.Conv1d(in_channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.norm_1 = ChannelLayerNorm(filter_channels)
        self.conv_2 = nn.Conv1d(filter_channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.norm_2 = ChannelLayerNorm(filter_channels)
        self.proj = nn.Conv1d(filter_channels, 1, 1)

    def forward(self, x, x_mask):
        x = self.drop(self.norm_1(torch.relu(self.conv_1(x * x_mask))))
        x = self.drop(self.norm_2(torch.relu(self.conv_2(x * x_mask))))
        x = self.proj(x * x_mask)
        return x * x_mask


class TextEncoder(nn.Module):
    """Symbols -> per-symbol mel means and log-durations"""

    def __init__(self, params: EncoderParams, n_vocab: int):
        super().__init__()
        self.params = params
        self.n_channels = params.n_channels

        self.emb = nn.Embedding(n_vocab, params.n_channels)
        nn.init.normal_(self.emb.weight, 0.0, params.n_channels ** -0.5)

        self.prenet = ConvReluNorm(params.n_channels, params.n_channels, params.n_channels,
                                   kernel_size=5, n_layers=3, p_dropout=0.5)
        self.encoder = AttentionStack(params)
        self.proj_m = nn.Conv1d(params.n_channels, params.n_feats, 1)
        self.proj_w = DurationPredictor(params.n_channels, params.filter_channels_dp,
                                        params.kernel_size, params.p_dropout)

    def encode(self, x: torch.Tensor, x_lengths: torch.Tensor) -> EncoderOutput:
        if x.shape[1] > self.params.max_length:
            raise TokenizationError(
                f"Sequence of {x.shape[1]} symbols exceeds the configured maximum {self.params.max_length}"
            )

        x_mask = sequence_mask(x_lengths, x.shape[1]).unsqueeze(1).to(self.emb.weight.dtype)
        h = self.emb(x) * math.sqrt(self.n_channels)
        h = h.transpose(1, -1)
        h = self.prenet(h, x_mask)
        h = self.encoder(h, x_mask)
        mu = self.proj_m(h) * x_mask
        return EncoderOutput(mu_tilde=mu, hidden=h, mask=x_mask)

    def predict_durations(self, enc: EncoderOutput) -> torch.Tensor:
        """Log-durations [B x 1 x P]; the encoder receives no gradient from this head"""
        return self.proj_w(enc.hidden.detach(), enc.mask)

    def forward(self, x, x_lengths):
        enc = self.encode(x, x_lengths)
        return enc.mu_tilde, self.predict_durations(enc), enc.mask


def durations_to_frames(log_d_hat: Union[np.ndarray, torch.Tensor], scale: float = 1.0) -> DurationAlignment:
    """d_p = max(1, round(scale * exp(log_d_hat_p))), rounding half up"""
    if not scale > 0:
        raise AlignmentError(f"Duration scale must be positive, got {scale}")
    if isinstance(log_d_hat, torch.Tensor):
        log_d_hat = log_d_hat.detach().cpu().double().numpy()

    values = np.asarray(log_d_hat, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(values)):
        raise AlignmentError("Predicted log-durations are not finite")

    with np.errstate(over='ignore'):
        frames = np.floor(scale * np.exp(values) + 0.5)
    if np.any(frames > MAX_FRAMES_PER_SYMBOL):
        raise AlignmentError(f"Predicted duration exceeds {MAX_FRAMES_PER_SYMBOL} frames for one symbol")

    return DurationAlignment(np.maximum(frames, 1).astype(np.int64))


def _masked_mean(values: torch.Tensor, mask: torch.Tensor, reduction: str) -> torch.Tensor:
    # values and mask broadcast to [B x C x T]; the mean counts every unmasked element once
    mask = mask.expand_as(values)
    if reduction == 'none':
        dims = tuple(range(1, values.dim()))
        return torch.sum(values * mask, dim=dims) / torch.sum(mask, dim=dims)
    return torch.sum(values * mask) / torch.sum(mask)


def prior_loss(mu: torch.Tensor, y: torch.Tensor, mask: Optional[torch.Tensor] = None,
               reduction: str = 'mean') -> torch.Tensor:
    """Mean over unmasked frames and channels of 0.5 * ((y - mu)^2 + log 2 pi)"""
    if mask is None:
        mask = torch.ones_like(y[:, :1])
    return _masked_mean(0.5 * ((y - mu) ** 2 + _LOG_2PI), mask, reduction)


def duration_loss(log_d_hat: torch.Tensor, durations: torch.Tensor, mask: Optional[torch.Tensor] = None,
                  reduction: str = 'mean') -> torch.Tensor:
    """Mean over unmasked symbols of (log d_hat - log(1e-8 + d))^2"""
    if mask is None:
        mask = torch.ones_like(log_d_hat)
    target = torch.log(1e-8 + durations.to(log_d_hat.dtype))
    return _masked_mean((log_d_hat - target) ** 2, mask, reduction)
