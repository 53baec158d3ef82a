"""Assembly of the conditioned denoiser: backbone UNet, text pathway, one
encoder or embedder per configured modality, and the bookkeeping that staged
training relies on (named parameter groups with per-group frozen flags).

Parameter groups:

    backbone     UNet + text embedder (everything not listed below)
    lsa          all local gated-attention modules (incl. their gates)
    gsa          all global gated-attention modules
    enc_sketch   image-form encoder for the sketch map
    enc_depth    image-form encoder for the depth map
    emb_box      box embedder           emb_keypoint  keypoint embedder
    emb_palette  palette embedder       emb_style     style embedder

The staged-training letters map onto these as I = encoders, S = spatial
embedders + lsa, N = non-spatial embedders + gsa.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn

from .backbone import PAD_TOKEN, ConditionContext, DenoisingUNet, TextEmbedder
from .conditioners import (BoxEmbedder, ImageFormEncoder, KeypointEmbedder,
                           PaletteEmbedder, StyleEmbedder)
from .conditions import ConditionSet
from .config import IMAGE_FORM, NON_SPATIAL, SPATIAL, ModelConfig
from .errors import StateError
from .synth import VOCAB_SIZE

MODALITY_GROUP = {
    "sketch": "enc_sketch", "depth": "enc_depth", "box": "emb_box",
    "keypoint": "emb_keypoint", "palette": "emb_palette", "style": "emb_style",
}
GROUPS_BY_TYPE = {
    "I": ("enc_sketch", "enc_depth"),
    "S": ("emb_box", "emb_keypoint", "lsa"),
    "N": ("emb_palette", "emb_style", "gsa"),
}


class MultimodalUNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = DenoisingUNet(cfg)
        self.text = TextEmbedder(VOCAB_SIZE, cfg.text_len, cfg.token_width)
        self.encoders = nn.ModuleDict()
        self.embedders = nn.ModuleDict()
        for m in cfg.modalities:
            self.add_modality(m)

    def add_modality(self, modality: str) -> None:
        cfg = self.cfg
        if modality in self.encoders or modality in self.embedders:
            raise StateError(f"modality {modality!r} already attached")
        if modality in IMAGE_FORM:
            self.encoders[modality] = ImageFormEncoder(
                1, cfg.image_size, self.backbone.fusion_sites, cfg.encoder_channels)
        elif modality == "box":
            self.embedders[modality] = BoxEmbedder(
                cfg.num_classes, cfg.n_box, cfg.token_width, cfg.mlp_hidden, cfg.n_freq)
        elif modality == "keypoint":
            self.embedders[modality] = KeypointEmbedder(
                cfg.n_person, cfg.n_joint, cfg.token_width, cfg.mlp_hidden, cfg.n_freq)
        elif modality == "palette":
            self.embedders[modality] = PaletteEmbedder(
                cfg.palette_dim, cfg.token_width, cfg.mlp_hidden, cfg.n_freq)
        elif modality == "style":
            self.embedders[modality] = StyleEmbedder(
                cfg.style_dim, cfg.token_width, cfg.mlp_hidden)
        else:
            raise StateError(f"unknown modality {modality!r}")

    @property
    def active_modalities(self) -> list[str]:
        return list(self.encoders.keys()) + list(self.embedders.keys())

    def group_of(self, param_name: str) -> str:
        if ".lsa." in param_name:
            return "lsa"
        if ".gsa." in param_name:
            return "gsa"
        for modality, group in MODALITY_GROUP.items():
            if (param_name.startswith(f"encoders.{modality}.")
                    or param_name.startswith(f"embedders.{modality}.")):
                return group
        return "backbone"

    def groups(self) -> list[str]:
        present = {self.group_of(n) for n, _ in self.named_parameters()}
        order = ["backbone", "lsa", "gsa", "enc_sketch", "enc_depth",
                 "emb_box", "emb_keypoint", "emb_palette", "emb_style"]
        return [g for g in order if g in present]

    def group_parameters(self, group: str):
        return [p for n, p in self.named_parameters() if self.group_of(n) == group]

    def _param(self) -> torch.Tensor:
        return next(self.parameters())

    def embed_conditions(self, conds: list[ConditionSet]) -> ConditionContext:
        """Precompute every conditioning activation for a batch. Null slots take
        their stand-ins: pad-token captions, learned null tokens, zero maps."""
        p = self._param()
        device, dtype = p.device, p.dtype
        B = len(conds)
        cfg = self.cfg

        ids = torch.full((B, cfg.text_len), PAD_TOKEN, dtype=torch.long, device=device)
        for b, c in enumerate(conds):
            if c.caption is not None:
                ids[b] = torch.as_tensor(c.caption, dtype=torch.long, device=device)
        h_text = self.text(ids)

        sp_parts = []
        if "box" in self.embedders:
            sp_parts.append(self.embedders["box"]([c.boxes for c in conds]))
        if "keypoint" in self.embedders:
            sp_parts.append(self.embedders["keypoint"]([c.keypoints for c in conds]))
        sp = torch.cat(sp_parts, dim=1) if sp_parts else None

        nsp_parts = []
        if "palette" in self.embedders:
            nsp_parts.append(self.embedders["palette"]([c.palette for c in conds]))
        if "style" in self.embedders:
            nsp_parts.append(self.embedders["style"]([c.style for c in conds]))
        nsp = torch.cat(nsp_parts, dim=1) if nsp_parts else None

        latents = None
        if self.encoders:
            latents = [[] for _ in range(4)]
            s = cfg.image_size
            for modality, encoder in self.encoders.items():
                maps = [getattr(c, modality) for c in conds]
                if all(m is None for m in maps):
                    # the null stand-in is the same zero map for every sample
                    out = encoder(torch.zeros(1, 1, s, s, device=device, dtype=dtype))
                    out = [o.expand(B, *o.shape[1:]) for o in out]
                else:
                    stack = torch.zeros(B, 1, s, s, device=device, dtype=dtype)
                    for b, m in enumerate(maps):
                        if m is not None:
                            stack[b, 0] = torch.as_tensor(
                                np.asarray(m)[..., 0], device=device, dtype=dtype)
                    out = encoder(stack)
                for k in range(4):
                    latents[k].append(out[k])
        return ConditionContext(h_text=h_text, sp_tokens=sp, nsp_tokens=nsp,
                                image_latents=latents)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, ctx: ConditionContext,
                alphas: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> torch.Tensor:
        return self.backbone(z_t, t, ctx, alphas)


class ModelState:
    """A model plus per-group frozen flags. Freezing is enforced both through
    ``requires_grad`` and by the trainer's optimizer construction."""

    def __init__(self, model: MultimodalUNet):
        self.model = model
        self.frozen: dict[str, bool] = {g: False for g in model.groups()}

    def set_trainable(self, groups: set[str] | list[str]) -> None:
        groups = set(groups)
        unknown = groups - set(self.model.groups())
        if unknown:
            raise StateError(f"unknown parameter groups: {sorted(unknown)}")
        for g in self.model.groups():
            self.frozen[g] = g not in groups
        for name, p in self.model.named_parameters():
            p.requires_grad_(not self.frozen[self.model.group_of(name)])

    def trainable_groups(self) -> list[str]:
        return [g for g in self.model.groups() if not self.frozen.get(g, False)]

    def trainable_parameters(self):
        return [p for p in self.model.parameters() if p.requires_grad]

    def group_fingerprint(self, group: str) -> str:
        """Content hash of one group's parameters (bit-exact comparison)."""
        h = hashlib.sha256()
        for name, p in sorted(self.model.named_parameters()):
            if self.model.group_of(name) == group:
                h.update(name.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def make_model(model_cfg: ModelConfig) -> ModelState:
    return ModelState(MultimodalUNet(model_cfg))
