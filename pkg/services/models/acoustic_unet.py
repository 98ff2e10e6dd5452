# services/models/acoustic_unet.py
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import FrameGroupNorm, Mish, Residual, Rezero, SinusoidalPosEmb, pad_to_multiple
from .params import AcousticUNetParams


class Upsample(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv = nn.ConvTranspose2d(dim, dim, 4, 2, 1)

    def forward(self, x):
        return self.conv(x)


class Downsample(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim, 3, 2, 1)

    def forward(self, x):
        return self.conv(x)


class Block(nn.Module):
    def __init__(self, dim, dim_out, groups=8):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim_out, 3, padding=1)
        self.norm = FrameGroupNorm(groups, dim_out)
        self.act = Mish()

    def forward(self, x, mask):
        output = self.act(self.norm(self.conv(x * mask)))
        return output * mask


class ResnetBlock(nn.Module):
    def __init__(self, dim, dim_out, time_emb_dim, groups=8):
        super().__init__()
        self.mlp = nn.Sequential(Mish(), nn.Linear(time_emb_dim, dim_out))
        self.block1 = Block(dim, dim_out, groups=groups)
        self.block2 = Block(dim_out, dim_out, groups=groups)
        self.res_conv = nn.Conv2d(dim, dim_out, 1) if dim != dim_out else nn.Identity()

    def forward(self, x, mask, time_emb):
        h = self.block1(x, mask)
        h = h + self.mlp(time_emb).unsqueeze(-1).unsqueeze(-1)
        h = self.block2(h, mask)
        return (h + self.res_conv(x * mask)) * mask


class LinearAttention(nn.Module):
    def __init__(self, dim, heads=4, dim_head=32):
        super().__init__()
        self.heads = heads
        hidden_dim = dim_head * heads
        self.to_qkv = nn.Conv2d(dim, hidden_dim * 3, 1, bias=False)
        self.to_out = nn.Conv2d(hidden_dim, dim, 1)

    def forward(self, x):
        b, _, h, w = x.shape
        qkv = self.to_qkv(x).reshape(b, 3, self.heads, -1, h * w)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
        k = k.softmax(dim=-1)
        context = torch.einsum('bhdn,bhen->bhde', k, v)
        out = torch.einsum('bhde,bhdn->bhen', context, q)
        return self.to_out(out.reshape(b, -1, h, w))


def _attention(dim: int, enabled: bool) -> nn.Module:
    return Residual(Rezero(LinearAttention(dim))) if enabled else nn.Identity()


class AcousticUNet(nn.Module):
    """Score estimator over mel-spectrograms; x and mu enter as two image planes [F x T]"""

    def __init__(self, params: AcousticUNetParams):
        super().__init__()
        self.params = params
        dim, groups = params.dim, params.groups
        self.pe_scale = params.pe_scale
        self.multiple = 2 ** params.depth

        self.time_pos_emb = SinusoidalPosEmb(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), Mish(), nn.Linear(dim * 4, dim))

        dims = [2, *map(lambda m: dim * m, params.dim_mults)]
        in_out = list(zip(dims[:-1], dims[1:]))
        num_resolutions = len(in_out)

        self.downs = nn.ModuleList([])
        self.ups = nn.ModuleList([])
        for ind, (dim_in, dim_out) in enumerate(in_out):
            is_last = ind >= (num_resolutions - 1)
            self.downs.append(nn.ModuleList([
                ResnetBlock(dim_in, dim_out, time_emb_dim=dim, groups=groups),
                ResnetBlock(dim_out, dim_out, time_emb_dim=dim, groups=groups),
                _attention(dim_out, params.attention),
                Downsample(dim_out) if not is_last else nn.Identity()]))

        mid_dim = dims[-1]
        self.mid_block1 = ResnetBlock(mid_dim, mid_dim, time_emb_dim=dim, groups=groups)
        self.mid_attn = _attention(mid_dim, params.attention)
        self.mid_block2 = ResnetBlock(mid_dim, mid_dim, time_emb_dim=dim, groups=groups)

        for dim_in, dim_out in reversed(in_out[1:]):
            self.ups.append(nn.ModuleList([
                ResnetBlock(dim_out * 2, dim_in, time_emb_dim=dim, groups=groups),
                ResnetBlock(dim_in, dim_in, time_emb_dim=dim, groups=groups),
                _attention(dim_in, params.attention),
                Upsample(dim_in)]))

        self.final_block = Block(dim, dim, groups=groups)
        self.final_conv = nn.Conv2d(dim, 1, 1)
        nn.init.zeros_(self.final_conv.weight)
        nn.init.zeros_(self.final_conv.bias)

    def forward(self, x, mask, mu, t):
        """x, mu: [B x n_feats x T]; mask: [B x 1 x T]; t: [B]. Returns the score, shaped like x."""
        if x.shape != mu.shape or x.dim() != 3 or x.shape[1] != self.params.n_feats:
            raise ValueError(f"Expected x and mu of shape [B, {self.params.n_feats}, T], "
                             f"got {tuple(x.shape)} and {tuple(mu.shape)}")
        if mask.shape != (x.shape[0], 1, x.shape[2]):
            raise ValueError(f"Mask shape {tuple(mask.shape)} does not match input {tuple(x.shape)}")

        length = x.shape[-1]
        padded = pad_to_multiple(length, self.multiple)
        if padded != length:
            # Padding frames repeat the last mean frame and stay masked out
            extra = padded - length
            mu = F.pad(mu, (0, extra), mode='replicate')
            x = torch.cat([x, mu[:, :, length:]], dim=-1)
            mask = F.pad(mask, (0, extra))

        t = self.mlp(self.time_pos_emb(t, scale=self.pe_scale))

        x = torch.stack([mu, x], 1)
        mask = mask.unsqueeze(1)

        hiddens = []
        masks = [mask]
        for resnet1, resnet2, attn, downsample in self.downs:
            mask_down = masks[-1]
            x = resnet1(x, mask_down, t)
            x = resnet2(x, mask_down, t)
            x = attn(x)
            hiddens.append(x)
            x = downsample(x * mask_down)
            masks.append(mask_down[:, :, :, ::2])

        masks = masks[:-1]
        mask_mid = masks[-1]
        x = self.mid_block1(x, mask_mid, t)
        x = self.mid_attn(x)
        x = self.mid_block2(x, mask_mid, t)

        for resnet1, resnet2, attn, upsample in self.ups:
            mask_up = masks.pop()
            x = torch.cat((x, hiddens.pop()), dim=1)
            x = resnet1(x, mask_up, t)
            x = resnet2(x, mask_up, t)
            x = attn(x)
            x = upsample(x * mask_up)

        x = self.final_block(x, mask)
        output = self.final_conv(x * mask)

        return (output * mask).squeeze(1)[:, :, :length]
