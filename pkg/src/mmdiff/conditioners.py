"""Conditioning pathways: image-form encoders with latent fusion, token
embedders for boxes / keypoints / palette / style, and the gated local/global
self-attention modules that inject tokens into the backbone.

Null handling follows one rule everywhere: token-form modalities fall back to
a learnable null token initialized to zero; image-form modalities are fed
non-trainable zero-filled arrays. Together with zero-initialized output convs
and zero-initialized attention gates, a freshly initialized model is exactly
transparent to every condition.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditions import ConditionSet
from .errors import InputError, ShapeError


def zero_module(module: nn.Module) -> nn.Module:
    """Zero out all parameters of a module and return it."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def fourier_embed(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    """Octave Fourier features of coordinates.

    Layout (documented contract): component-major, then frequency, with the
    sin/cos pair innermost, i.e. for input (..., D) the output is

        [sin(pi x_0), cos(pi x_0), sin(2 pi x_0), cos(2 pi x_0), ...,
         sin(2^(K-1) pi x_0), cos(...), sin(pi x_1), ...]

    of length 2 * n_freq * D.
    """
    if n_freq < 1:
        raise InputError(f"n_freq must be >= 1, got {n_freq}")
    freqs = (2.0 ** torch.arange(n_freq, dtype=x.dtype, device=x.device)) * math.pi
    angles = x.unsqueeze(-1) * freqs            # (..., D, n_freq)
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return out.flatten(start_dim=-3)


class ResBlock2d(nn.Module):
    """GroupNorm/SiLU double-conv residual block; optional stride-2 downsample
    folded into the first conv (skip path average-pools to match)."""

    def __init__(self, cin, cout, downsample=False, groups=8):
        super().__init__()
        stride = 2 if downsample else 1
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        skip = []
        if downsample:
            skip.append(nn.AvgPool2d(2))
        if cin != cout:
            skip.append(nn.Conv2d(cin, cout, 1))
        self.skip = nn.Sequential(*skip) if skip else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ImageFormEncoder(nn.Module):
    """Encoder for one dense condition map (sketch or depth).

    Eight ResNet blocks of two convolutions each; downsampling is folded into
    the blocks that cross a backbone resolution boundary, and the latents are
    tapped after blocks 2, 4, 6 and 8 through zero-initialized 1x1 convs, so a
    fresh encoder contributes exactly nothing.

    ``fusion_sites`` lists (channels, resolution) of the four backbone fusion
    points, ordered from the input resolution down.
    """

    TAPS = (1, 3, 5, 7)   # 0-indexed blocks whose outputs feed the zero-convs

    def __init__(self, in_channels: int, image_size: int,
                 fusion_sites: list[tuple[int, int]],
                 channels: tuple[int, ...]):
        super().__init__()
        if len(channels) != 8 or len(fusion_sites) != 4:
            raise ShapeError("expected 8 block widths and 4 fusion sites")
        self.image_size = image_size
        self.stem = nn.Conv2d(in_channels, channels[0], 3, padding=1)
        blocks = []
        res = image_size
        resolutions = []
        site_res = [r for _, r in fusion_sites]
        cin = channels[0]
        for i, cout in enumerate(channels):
            want = site_res[self.TAPS.index(i)] if i in self.TAPS else None
            down = want is not None and res > want
            if down:
                res //= 2
            blocks.append(ResBlock2d(cin, cout, downsample=down))
            resolutions.append(res)
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.taps = nn.ModuleList(
            zero_module(nn.Conv2d(channels[b], site_ch, 1))
            for b, (site_ch, _) in zip(self.TAPS, fusion_sites))
        for b, (_, site_res_i) in zip(self.TAPS, fusion_sites):
            if resolutions[b] != site_res_i:
                raise ShapeError("encoder resolutions do not match fusion sites")

    def forward(self, cond_map: torch.Tensor) -> list[torch.Tensor]:
        if cond_map.shape[-1] != self.image_size or cond_map.shape[-2] != self.image_size:
            raise ShapeError(
                f"condition map is {tuple(cond_map.shape[-2:])}, "
                f"expected {(self.image_size, self.image_size)}")
        h = self.stem(cond_map)
        latents = []
        tap_iter = iter(self.taps)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i in self.TAPS:
                latents.append(next(tap_iter)(h))
        return latents


def fuse_image_latents(h_v: torch.Tensor, latents: list[torch.Tensor],
                       alpha_im: float, resblock, t_emb: torch.Tensor) -> torch.Tensor:
    """ResBlk(h_v + alpha_im * sum_k latents_k) at one fusion site."""
    if not latents:
        return resblock(h_v, t_emb)
    total = latents[0]
    for lat in latents[1:]:
        total = total + lat
    if total.shape != h_v.shape:
        raise ShapeError(f"latent shape {tuple(total.shape)} != visual "
                         f"feature shape {tuple(h_v.shape)}")
    return resblock(h_v + alpha_im * total, t_emb)


def _token_mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.SiLU(),
        nn.Linear(hidden, hidden), nn.SiLU(),
        nn.Linear(hidden, out_dim),
    )


def _norm_mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    """3-layer MLP with LayerNorm and SiLU (palette / style pathway)."""
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.LayerNorm(hidden), nn.SiLU(),
        nn.Linear(hidden, hidden), nn.LayerNorm(hidden), nn.SiLU(),
        nn.Linear(hidden, out_dim),
    )


class BoxEmbedder(nn.Module):
    """Grounding boxes -> spatial tokens: class embedding concatenated with
    Fourier-embedded corner coordinates, projected by a 3-layer MLP. Short
    lists are padded with a learnable zero-initialized null token."""

    def __init__(self, num_classes: int, n_box: int, token_width: int,
                 hidden: int, n_freq: int):
        super().__init__()
        self.num_classes = num_classes
        self.n_box = n_box
        self.n_freq = n_freq
        self.class_embed = nn.Embedding(num_classes, token_width)
        self.mlp = _token_mlp(token_width + 8 * n_freq, hidden, token_width)
        self.null_token = nn.Parameter(torch.zeros(token_width))

    def forward(self, boxes_batch: list[list[tuple] | None]) -> torch.Tensor:
        p = self.null_token
        B, N, D = len(boxes_batch), self.n_box, p.shape[0]
        class_ids = torch.zeros(B, N, dtype=torch.long, device=p.device)
        coords = torch.zeros(B, N, 4, dtype=p.dtype, device=p.device)
        mask = torch.zeros(B, N, dtype=torch.bool, device=p.device)
        for b, boxes in enumerate(boxes_batch):
            for j, (class_id, x1, y1, x2, y2) in enumerate(boxes or []):
                if not 0 <= class_id < self.num_classes:
                    raise InputError(f"class_id {class_id} outside vocabulary")
                if j >= N:
                    raise InputError(f"more than {N} boxes")
                class_ids[b, j] = class_id
                coords[b, j] = torch.tensor([x1, y1, x2, y2], dtype=p.dtype)
                mask[b, j] = True
        feats = torch.cat(
            [self.class_embed(class_ids), fourier_embed(coords, self.n_freq)], dim=-1)
        tokens = self.mlp(feats)
        return torch.where(mask[..., None], tokens, p.expand(B, N, D))


class KeypointEmbedder(nn.Module):
    """Keypoints -> spatial tokens: person and joint embedding tables plus
    Fourier-embedded coordinates, one slot per (person, joint) pair."""

    def __init__(self, n_person: int, n_joint: int, token_width: int,
                 hidden: int, n_freq: int):
        super().__init__()
        self.n_person, self.n_joint = n_person, n_joint
        self.n_freq = n_freq
        half = token_width // 2
        self.person_embed = nn.Embedding(n_person, half)
        self.joint_embed = nn.Embedding(n_joint, half)
        self.mlp = _token_mlp(2 * half + 4 * n_freq, hidden, token_width)
        self.null_token = nn.Parameter(torch.zeros(token_width))

    def forward(self, kps_batch: list[list[tuple] | None]) -> torch.Tensor:
        p = self.null_token
        B, N = len(kps_batch), self.n_person * self.n_joint
        person = torch.zeros(B, N, dtype=torch.long, device=p.device)
        joint = torch.zeros(B, N, dtype=torch.long, device=p.device)
        coords = torch.zeros(B, N, 2, dtype=p.dtype, device=p.device)
        mask = torch.zeros(B, N, dtype=torch.bool, device=p.device)
        for b, kps in enumerate(kps_batch):
            for person_id, joint_id, x, y in kps or []:
                if not 0 <= person_id < self.n_person:
                    raise InputError(f"person_id {person_id} out of range")
                if not 0 <= joint_id < self.n_joint:
                    raise InputError(f"joint_id {joint_id} out of range")
                slot = person_id * self.n_joint + joint_id
                person[b, slot], joint[b, slot] = person_id, joint_id
                coords[b, slot] = torch.tensor([x, y], dtype=p.dtype)
                mask[b, slot] = True
        feats = torch.cat([
            self.person_embed(person), self.joint_embed(joint),
            fourier_embed(coords, self.n_freq)], dim=-1)
        tokens = self.mlp(feats)
        return torch.where(mask[..., None], tokens, p.expand(B, N, p.shape[0]))


class PaletteEmbedder(nn.Module):
    """Color histogram -> one non-spatial token. Bin values are scaled by 10
    before the Fourier embedding (the raw magnitudes are tiny)."""

    SCALE = 10.0

    def __init__(self, n_bins: int, token_width: int, hidden: int, n_freq: int):
        super().__init__()
        self.n_bins = n_bins
        self.n_freq = n_freq
        self.mlp = _norm_mlp(2 * n_freq * n_bins, hidden, token_width)
        self.null_token = nn.Parameter(torch.zeros(token_width))

    def forward(self, palettes: list | None) -> torch.Tensor:
        p = self.null_token
        B = len(palettes)
        rows = []
        for hist in palettes:
            if hist is None:
                rows.append(p)
                continue
            h = torch.as_tensor(hist, dtype=p.dtype, device=p.device)
            if h.shape != (self.n_bins,):
                raise ShapeError(f"palette must have {self.n_bins} bins")
            if torch.any(h < 0):
                raise InputError("palette bins must be nonnegative")
            rows.append(self.mlp(fourier_embed(h * self.SCALE, self.n_freq)))
        return torch.stack(rows).reshape(B, 1, -1)


class StyleEmbedder(nn.Module):
    """Style feature vector -> one non-spatial token."""

    def __init__(self, style_dim: int, token_width: int, hidden: int):
        super().__init__()
        self.style_dim = style_dim
        self.mlp = _norm_mlp(style_dim, hidden, token_width)
        self.null_token = nn.Parameter(torch.zeros(token_width))

    def forward(self, styles: list) -> torch.Tensor:
        p = self.null_token
        rows = []
        for vec in styles:
            if vec is None:
                rows.append(p)
                continue
            v = torch.as_tensor(vec, dtype=p.dtype, device=p.device)
            if v.shape != (self.style_dim,):
                raise ShapeError(f"style vector must have length {self.style_dim}")
            rows.append(self.mlp(v))
        return torch.stack(rows).reshape(len(styles), 1, -1)


class MultiheadSelfAttention(nn.Module):
    def __init__(self, width: int, num_heads: int):
        super().__init__()
        if width % num_heads:
            raise ShapeError(f"width {width} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x):
        B, N, D = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (t.view(B, N, self.num_heads, D // self.num_heads).transpose(1, 2)
                   for t in (q, k, v))
        h = F.scaled_dot_product_attention(q, k, v)
        return self.out(h.transpose(1, 2).reshape(B, N, D))


class GatedTokenAttention(nn.Module):
    """Shared form of the local (spatial-token) and global (non-spatial-token)
    gated attention:

        out = x + alpha * tanh(beta) * SA([x ; tokens])[:, :x_len]

    ``beta`` is a learnable scalar initialized to zero, so a fresh module is an
    exact identity; SA attends jointly over the concatenation and the result is
    sliced back to the leading tokens.
    """

    def __init__(self, width: int, num_heads: int):
        super().__init__()
        self.beta = nn.Parameter(torch.zeros(()))
        self.norm = nn.LayerNorm(width)
        self.attn = MultiheadSelfAttention(width, num_heads)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor,
                alpha: float = 1.0) -> torch.Tensor:
        if tokens.shape[-1] != x.shape[-1]:
            raise ShapeError(
                f"token width {tokens.shape[-1]} != feature width {x.shape[-1]}")
        n = x.shape[1]
        joint = torch.cat([x, tokens], dim=1)
        attended = self.attn(self.norm(joint))[:, :n]
        return x + alpha * torch.tanh(self.beta) * attended


def local_self_attention(module: GatedTokenAttention, h_v: torch.Tensor,
                         sp_tokens: torch.Tensor, alpha_sp: float) -> torch.Tensor:
    """h_v + alpha_sp * tanh(beta_l) * SA([h_v ; spatial tokens])[: V]."""
    return module(h_v, sp_tokens, alpha_sp)


def global_self_attention(module: GatedTokenAttention, h_text: torch.Tensor,
                          nsp_tokens: torch.Tensor, alpha_nsp: float) -> torch.Tensor:
    """h_text + alpha_nsp * tanh(beta_g) * SA([h_text ; non-spatial tokens])[: L]."""
    return module(h_text, nsp_tokens, alpha_nsp)
