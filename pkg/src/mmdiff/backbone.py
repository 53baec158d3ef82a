"""Compact pixel-space denoising UNet: ResNet blocks with injected time
embedding, self-attention plus text cross-attention at the lower resolutions,
and four fusion sites on the downsampling path where image-form condition
latents are added.

The output convolution is zero-initialized, so a fresh model predicts exactly
zero noise; attention output projections and the second conv of every ResNet
block start at zero as well, opening the corresponding pathways gradually
during training. Gated condition modules deliberately do NOT zero-initialize
their internals: their tanh gate already starts closed, and zeroing the
attention would also kill the gradient that opens it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioners import (GatedTokenAttention, MultiheadSelfAttention,
                           fuse_image_latents, zero_module)
from .config import ModelConfig
from .errors import ShapeError

PAD_TOKEN = 0   # embedding of an all-pad sequence is the null caption


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0):
    """Sinusoidal embeddings of integer timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period)
                      * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeResBlock(nn.Module):
    def __init__(self, cin, cout, t_dim, groups=8):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = zero_module(nn.Conv2d(cout, cout, 3, padding=1))
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, width, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = zero_module(nn.Linear(width, width))

    def forward(self, x, ctx):
        B, N, D = x.shape
        H = self.num_heads
        q = self.q(x).view(B, N, H, D // H).transpose(1, 2)
        k = self.k(ctx).view(B, ctx.shape[1], H, D // H).transpose(1, 2)
        v = self.v(ctx).view(B, ctx.shape[1], H, D // H).transpose(1, 2)
        h = F.scaled_dot_product_attention(q, k, v)
        return self.out(h.transpose(1, 2).reshape(B, N, D))


class TransformerBlock(nn.Module):
    """One conditioning site: self-attention over visual tokens, gated local
    attention with spatial tokens, gated global attention refreshing the text
    tokens with non-spatial tokens, then text cross-attention and a
    feed-forward, in that order.
    """

    def __init__(self, width, num_heads):
        super().__init__()
        self.norm_sa = nn.LayerNorm(width)
        self.sa = MultiheadSelfAttention(width, num_heads)
        zero_module(self.sa.out)
        self.lsa = GatedTokenAttention(width, num_heads)
        self.gsa = GatedTokenAttention(width, num_heads)
        self.norm_ca = nn.LayerNorm(width)
        self.ca = CrossAttention(width, num_heads)
        self.norm_ff = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, 4 * width), nn.SiLU(),
                                zero_module(nn.Linear(4 * width, width)))

    def forward(self, x, h_text, sp_tokens=None, nsp_tokens=None,
                alpha_sp: float = 1.0, alpha_nsp: float = 1.0):
        B, C, H, W = x.shape
        t = x.flatten(2).transpose(1, 2)
        t = t + self.sa(self.norm_sa(t))
        if sp_tokens is not None:
            t = self.lsa(t, sp_tokens, alpha_sp)
        if nsp_tokens is not None:
            h_text = self.gsa(h_text, nsp_tokens, alpha_nsp)
        t = t + self.ca(self.norm_ca(t), h_text)
        t = t + self.ff(self.norm_ff(t))
        return t.transpose(1, 2).reshape(B, C, H, W)


class TextEmbedder(nn.Module):
    """Caption token ids -> textual tokens, via a learned vocabulary table and
    learned positions. Stands in for the pretrained text encoder of the
    full-scale setup; an all-pad sequence is the null caption."""

    def __init__(self, vocab_size, text_len, width):
        super().__init__()
        self.text_len = text_len
        self.table = nn.Embedding(vocab_size, width)
        self.pos = nn.Parameter(torch.zeros(text_len, width))
        nn.init.normal_(self.pos, std=0.02)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.shape[-1] != self.text_len:
            raise ShapeError(f"caption length {token_ids.shape[-1]} != {self.text_len}")
        return self.table(token_ids) + self.pos


@dataclass
class ConditionContext:
    """Precomputed conditioning activations for one forward pass. ``None``
    token fields skip their pathway entirely (the bare-backbone arithmetic
    path); image_latents is a list of four per-site tensors, already summed
    over image-form modalities, or None for no fusion."""

    h_text: torch.Tensor
    sp_tokens: torch.Tensor | None = None
    nsp_tokens: torch.Tensor | None = None
    image_latents: list[list[torch.Tensor]] | None = None   # [site][modality]


class DenoisingUNet(nn.Module):
    """Three resolution levels (image_size, /2, /4), two ResNet blocks per
    level, one transformer block per attention level on each path plus the
    middle. Fusion sites sit at the input of the first ResNet block of each
    encoder level and of the middle block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if len(cfg.widths) != 3:
            raise ShapeError("this UNet is built for exactly 3 levels")
        w0, w1, w2 = cfg.widths
        c = cfg.image_channels
        s = cfg.image_size
        heads = cfg.num_heads
        t_dim = 4 * w0
        self.cfg = cfg
        self.t_dim = t_dim
        self.time_mlp = nn.Sequential(nn.Linear(w0, t_dim), nn.SiLU(),
                                      nn.Linear(t_dim, t_dim))
        self.conv_in = nn.Conv2d(c, w0, 3, padding=1)

        self.rb00 = TimeResBlock(w0, w0, t_dim)
        self.rb01 = TimeResBlock(w0, w0, t_dim)
        self.down0 = nn.Conv2d(w0, w0, 3, stride=2, padding=1)
        self.rb10 = TimeResBlock(w0, w1, t_dim)
        self.rb11 = TimeResBlock(w1, w1, t_dim)
        self.tb1 = TransformerBlock(w1, heads)
        self.down1 = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
        self.rb20 = TimeResBlock(w1, w2, t_dim)
        self.rb21 = TimeResBlock(w2, w2, t_dim)
        self.tb2 = TransformerBlock(w2, heads)

        self.mid_rb1 = TimeResBlock(w2, w2, t_dim)
        self.mid_tb = TransformerBlock(w2, heads)
        self.mid_rb2 = TimeResBlock(w2, w2, t_dim)

        self.urb21 = TimeResBlock(2 * w2, w2, t_dim)
        self.urb22 = TimeResBlock(2 * w2, w2, t_dim)
        self.utb2 = TransformerBlock(w2, heads)
        self.up1 = nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1)
        self.urb11 = TimeResBlock(2 * w1, w1, t_dim)
        self.urb12 = TimeResBlock(2 * w1, w1, t_dim)
        self.utb1 = TransformerBlock(w1, heads)
        self.up0 = nn.ConvTranspose2d(w1, w0, 4, stride=2, padding=1)
        self.urb01 = TimeResBlock(2 * w0, w0, t_dim)
        self.urb02 = TimeResBlock(2 * w0, w0, t_dim)

        self.norm_out = nn.GroupNorm(8, w0)
        self.conv_out = zero_module(nn.Conv2d(w0, c, 3, padding=1))

        # (channels, resolution) of the four image-form fusion sites
        self.fusion_sites = [(w0, s), (w0, s // 2), (w1, s // 4), (w2, s // 4)]

    @property
    def transformer_blocks(self) -> list[TransformerBlock]:
        return [self.tb1, self.tb2, self.mid_tb, self.utb2, self.utb1]

    def forward(self, z_t: torch.Tensor, t: torch.Tensor,
                ctx: ConditionContext,
                alphas: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> torch.Tensor:
        cfg = self.cfg
        if z_t.shape[-3:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(f"input shape {tuple(z_t.shape)} does not match the "
                             f"configured image geometry")
        a_im, a_sp, a_nsp = alphas
        sites = ctx.image_latents if ctx.image_latents is not None else [None] * 4

        t_emb = self.time_mlp(timestep_embedding(t.to(z_t.dtype), cfg.widths[0]))

        def rb(block, h, site):
            if site is None:
                return block(h, t_emb)
            return fuse_image_latents(h, site, a_im, block, t_emb)

        def tb(block, h):
            return block(h, ctx.h_text, ctx.sp_tokens, ctx.nsp_tokens, a_sp, a_nsp)

        h = self.conv_in(z_t)
        h = rb(self.rb00, h, sites[0])
        s0 = h
        h = self.rb01(h, t_emb)
        s1 = h
        h = self.down0(h)
        h = rb(self.rb10, h, sites[1])
        s2 = h
        h = tb(self.tb1, self.rb11(h, t_emb))
        s3 = h
        h = self.down1(h)
        h = rb(self.rb20, h, sites[2])
        s4 = h
        h = tb(self.tb2, self.rb21(h, t_emb))
        s5 = h

        h = rb(self.mid_rb1, h, sites[3])
        h = tb(self.mid_tb, h)
        h = self.mid_rb2(h, t_emb)

        h = self.urb21(torch.cat([h, s5], dim=1), t_emb)
        h = self.urb22(torch.cat([h, s4], dim=1), t_emb)
        h = tb(self.utb2, h)
        h = self.up1(h)
        h = self.urb11(torch.cat([h, s3], dim=1), t_emb)
        h = self.urb12(torch.cat([h, s2], dim=1), t_emb)
        h = tb(self.utb1, h)
        h = self.up0(h)
        h = self.urb01(torch.cat([h, s1], dim=1), t_emb)
        h = self.urb02(torch.cat([h, s0], dim=1), t_emb)
        return self.conv_out(F.silu(self.norm_out(h)))
