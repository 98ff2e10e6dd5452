# services/models/gesture_decoder.py
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import FrameGroupNorm, Mish, SinusoidalPosEmb, pad_to_multiple
from .params import GestureUNetParams, PrenetParams


class FeedForward(nn.Module):
    def __init__(self, d_model, mult, p_dropout):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(d_model),
            nn.Linear(d_model, d_model * mult),
            nn.SiLU(),
            nn.Dropout(p_dropout),
            nn.Linear(d_model * mult, d_model),
            nn.Dropout(p_dropout),
        )

    def forward(self, x):
        return self.net(x)


class ConvModule(nn.Module):
    """Pointwise -> GLU -> depthwise -> norm -> Swish -> pointwise, on [B x T x D]"""

    def __init__(self, d_model, kernel_size, p_dropout):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pointwise_in = nn.Conv1d(d_model, 2 * d_model, 1)
        self.depthwise = nn.Conv1d(d_model, d_model, kernel_size, padding=kernel_size // 2, groups=d_model)
        # Layer norm instead of batch norm keeps padded frames and batch composition out of the statistics
        self.conv_norm = nn.LayerNorm(d_model)
        self.pointwise_out = nn.Conv1d(d_model, d_model, 1)
        self.drop = nn.Dropout(p_dropout)

    def forward(self, x, frame_mask):
        mask = frame_mask.unsqueeze(1)  # [B x 1 x T]
        x = self.norm(x).transpose(1, 2)
        x = F.glu(self.pointwise_in(x), dim=1)
        x = self.depthwise(x * mask)
        x = F.silu(self.conv_norm(x.transpose(1, 2))).transpose(1, 2)
        x = self.pointwise_out(x) * mask
        return self.drop(x.transpose(1, 2))


class ConformerBlock(nn.Module):
    def __init__(self, params: PrenetParams):
        super().__init__()
        d_model = params.d_model
        self.ff1 = FeedForward(d_model, params.ff_mult, params.p_dropout)
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, params.n_heads, dropout=params.p_dropout, batch_first=True)
        self.attn_drop = nn.Dropout(params.p_dropout)
        self.conv = ConvModule(d_model, params.conv_kernel, params.p_dropout)
        self.ff2 = FeedForward(d_model, params.ff_mult, params.p_dropout)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x, frame_mask):
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        h, _ = self.attn(h, h, h, key_padding_mask=~frame_mask, need_weights=False)
        x = x + self.attn_drop(h)
        x = x + self.conv(x, frame_mask)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x) * frame_mask.unsqueeze(-1)


def sinusoidal_positions(length: int, d_model: int, device=None, dtype=None) -> torch.Tensor:
    position = torch.arange(length, device=device, dtype=torch.float32).unsqueeze(1)
    div_term = torch.exp(torch.arange(0, d_model, 2, device=device, dtype=torch.float32)
                         * (-math.log(10000.0) / d_model))
    table = torch.zeros(length, d_model, device=device)
    table[:, 0::2] = torch.sin(position * div_term)
    table[:, 1::2] = torch.cos(position * div_term[:d_model // 2])
    return table.to(dtype) if dtype is not None else table


class ConformerPrenet(nn.Module):
    """Maps upsampled mel means [B x 80 x T] to pose means [B x 45 x T]"""

    def __init__(self, params: PrenetParams):
        super().__init__()
        self.params = params
        self.input_proj = nn.Linear(params.n_in, params.d_model)
        self.drop = nn.Dropout(params.p_dropout)
        self.blocks = nn.ModuleList([ConformerBlock(params) for _ in range(params.n_layers)])
        self.output_proj = nn.Linear(params.d_model, params.n_out)

    def forward(self, mu, mask):
        if mu.dim() != 3 or mu.shape[1] != self.params.n_in:
            raise ValueError(f"Expected means of shape [B, {self.params.n_in}, T], got {tuple(mu.shape)}")

        frame_mask = mask[:, 0] > 0  # [B x T]
        x = self.input_proj(mu.transpose(1, 2))
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], device=x.device, dtype=x.dtype).unsqueeze(0)
        x = self.drop(x) * frame_mask.unsqueeze(-1)
        for block in self.blocks:
            x = block(x, frame_mask)
        return self.output_proj(x).transpose(1, 2) * mask


class Block1d(nn.Module):
    def __init__(self, dim, dim_out, kernel_size, groups):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim_out, kernel_size, padding=kernel_size // 2)
        self.norm = FrameGroupNorm(groups, dim_out)
        self.act = Mish()

    def forward(self, x, mask):
        return self.act(self.norm(self.conv(x * mask))) * mask


class ResnetBlock1d(nn.Module):
    def __init__(self, dim, dim_out, time_emb_dim, kernel_size, groups):
        super().__init__()
        self.mlp = nn.Sequential(Mish(), nn.Linear(time_emb_dim, dim_out))
        self.block1 = Block1d(dim, dim_out, kernel_size, groups)
        self.block2 = Block1d(dim_out, dim_out, kernel_size, groups)
        self.res_conv = nn.Conv1d(dim, dim_out, 1) if dim != dim_out else nn.Identity()

    def forward(self, x, mask, time_emb):
        h = self.block1(x, mask)
        h = h + self.mlp(time_emb).unsqueeze(-1)
        h = self.block2(h, mask)
        return (h + self.res_conv(x * mask)) * mask


class GestureUNet(nn.Module):
    """Score estimator over pose channels; convolutions run along time only, so 45 channels need no padding"""

    def __init__(self, params: GestureUNetParams):
        super().__init__()
        self.params = params
        dim, k, groups = params.dim, params.kernel_size, params.groups
        self.pe_scale = params.pe_scale
        self.multiple = 2 ** params.depth

        self.time_pos_emb = SinusoidalPosEmb(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), Mish(), nn.Linear(dim * 4, dim))

        dims = [2 * params.n_feats, *map(lambda m: dim * m, params.dim_mults)]
        in_out = list(zip(dims[:-1], dims[1:]))
        num_resolutions = len(in_out)

        self.downs = nn.ModuleList([])
        self.ups = nn.ModuleList([])
        for ind, (dim_in, dim_out) in enumerate(in_out):
            is_last = ind >= (num_resolutions - 1)
            self.downs.append(nn.ModuleList([
                ResnetBlock1d(dim_in, dim_out, dim, k, groups),
                ResnetBlock1d(dim_out, dim_out, dim, k, groups),
                nn.Conv1d(dim_out, dim_out, 3, 2, 1) if not is_last else nn.Identity()]))

        mid_dim = dims[-1]
        self.mid_block1 = ResnetBlock1d(mid_dim, mid_dim, dim, k, groups)
        self.mid_block2 = ResnetBlock1d(mid_dim, mid_dim, dim, k, groups)

        for dim_in, dim_out in reversed(in_out[1:]):
            self.ups.append(nn.ModuleList([
                ResnetBlock1d(dim_out * 2, dim_in, dim, k, groups),
                ResnetBlock1d(dim_in, dim_in, dim, k, groups),
                nn.ConvTranspose1d(dim_in, dim_in, 4, 2, 1)]))

        self.final_block = Block1d(dim, dim, k, groups)
        self.final_conv = nn.Conv1d(dim, params.n_feats, 1)
        nn.init.zeros_(self.final_conv.weight)
        nn.init.zeros_(self.final_conv.bias)

    def forward(self, x, mask, mu, t):
        """x, mu: [B x n_feats x T]; mask: [B x 1 x T]; t: [B]"""
        if x.shape != mu.shape or x.dim() != 3 or x.shape[1] != self.params.n_feats:
            raise ValueError(f"Expected x and mu of shape [B, {self.params.n_feats}, T], "
                             f"got {tuple(x.shape)} and {tuple(mu.shape)}")
        if mask.shape != (x.shape[0], 1, x.shape[2]):
            raise ValueError(f"Mask shape {tuple(mask.shape)} does not match input {tuple(x.shape)}")

        length = x.shape[-1]
        padded = pad_to_multiple(length, self.multiple)
        if padded != length:
            extra = padded - length
            mu = F.pad(mu, (0, extra), mode='replicate')
            x = torch.cat([x, mu[:, :, length:]], dim=-1)
            mask = F.pad(mask, (0, extra))

        t = self.mlp(self.time_pos_emb(t, scale=self.pe_scale))
        x = torch.cat([mu, x], dim=1)

        hiddens = []
        masks = [mask]
        for resnet1, resnet2, downsample in self.downs:
            mask_down = masks[-1]
            x = resnet1(x, mask_down, t)
            x = resnet2(x, mask_down, t)
            hiddens.append(x)
            x = downsample(x * mask_down)
            masks.append(mask_down[:, :, ::2])

        masks = masks[:-1]
        mask_mid = masks[-1]
        x = self.mid_block1(x, mask_mid, t)
        x = self.mid_block2(x, mask_mid, t)

        for resnet1, resnet2, upsample in self.ups:
            mask_up = masks.pop()
            x = torch.cat((x, hiddens.pop()), dim=1)
            x = resnet1(x, mask_up, t)
            x = resnet2(x, mask_up, t)
            x = upsample(x * mask_up)

        x = self.final_block(x, mask)
        output = self.final_conv(x * mask)
        return (output * mask)[:, :, :length]
