"""CLIP model adapters: published checkpoints and a tiny deterministic stub.

An adapter exposes the handful of operations the exporter needs: image and
text encoding, penultimate token maps (before the terminal layer norm, class
token still attached), the learned logit scale, and the vision tower for
in-model quantization wrapping.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from .config import ExportConfig
from .fakequant import wrap_linear_layers

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class HfClipAdapter:
    """Published CLIP checkpoints through the transformers implementation.

    Checkpoint download and loading failures are deliberately not caught; they
    surface verbatim to the caller.
    """

    def __init__(self, cfg: ExportConfig):
        from transformers import CLIPModel, CLIPTokenizer

        self.cfg = cfg
        self.model = CLIPModel.from_pretrained(cfg.repo).to(cfg.device).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(cfg.repo)
        self.grid = cfg.grid
        self.image_size = self.model.config.vision_config.image_size
        self.mean, self.std = CLIP_MEAN, CLIP_STD
        if cfg.quant_bits_w is not None:
            wrap_linear_layers(
                self.model.vision_model, cfg.quant_bits_w, cfg.quant_bits_a or cfg.quant_bits_w
            )

    @property
    def logit_scale(self) -> float:
        return float(self.model.logit_scale.exp().item())

    @property
    def vision_tower(self) -> torch.nn.Module:
        return self.model.vision_model

    @torch.no_grad()
    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.model.get_image_features(pixel_values=pixels)

    @torch.no_grad()
    def encode_text(self, prompts) -> torch.Tensor:
        tokens = self.tokenizer(list(prompts), padding=True, return_tensors="pt")
        tokens = {k: v.to(self.cfg.device) for k, v in tokens.items()}
        return self.model.get_text_features(**tokens)

    @torch.no_grad()
    def feature_tokens(self, pixels: torch.Tensor) -> torch.Tensor:
        """Token sequence before the terminal layer norm, class token included."""
        out = self.model.vision_model(pixel_values=pixels)
        return out.last_hidden_state  # post_layernorm only touches the pooled path


class TinyClipAdapter:
    """Deterministic miniature stand-in with the same surface as a real CLIP.

    Patchifies with a strided linear layer, mixes tokens with two linear
    blocks, and derives text embeddings from a seeded hash of the prompt, so
    exports are reproducible without any checkpoint.
    """

    def __init__(self, cfg: ExportConfig, embed_dim: int = 32, image_size: int = 56):
        self.cfg = cfg
        self.grid = cfg.grid
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.mean, self.std = CLIP_MEAN, CLIP_STD
        g_h, g_w = self.grid
        self.patch = (image_size // g_h, image_size // g_w)
        torch.manual_seed(20260810)
        d_in = 3 * self.patch[0] * self.patch[1]
        self._tower = torch.nn.Sequential(
            torch.nn.Linear(d_in, embed_dim),
            torch.nn.GELU(),
            torch.nn.Linear(embed_dim, embed_dim),
        ).eval()
        self._proj = torch.nn.Linear(embed_dim, embed_dim, bias=False).eval()
        self._ln = torch.nn.LayerNorm(embed_dim).eval()
        if cfg.quant_bits_w is not None:
            wrap_linear_layers(self._tower, cfg.quant_bits_w, cfg.quant_bits_a or cfg.quant_bits_w)

    @property
    def logit_scale(self) -> float:
        return 100.0

    @property
    def vision_tower(self) -> torch.nn.Module:
        return self._tower

    def _tokens(self, pixels: torch.Tensor) -> torch.Tensor:
        n = pixels.shape[0]
        g_h, g_w = self.grid
        p_h, p_w = self.patch
        patches = pixels.reshape(n, 3, g_h, p_h, g_w, p_w)
        patches = patches.permute(0, 2, 4, 1, 3, 5).reshape(n, g_h * g_w, -1)
        tokens = self._tower(patches)
        cls = tokens.mean(dim=1, keepdim=True)
        return torch.cat([cls, tokens], dim=1)

    @torch.no_grad()
    def feature_tokens(self, pixels: torch.Tensor) -> torch.Tensor:
        return self._tokens(pixels)

    @torch.no_grad()
    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        tokens = self._tokens(pixels)
        return self._proj(self._ln(tokens[:, 0, :]))

    @torch.no_grad()
    def encode_text(self, prompts) -> torch.Tensor:
        out = []
        for prompt in prompts:
            digest = hashlib.sha256(prompt.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            rng = np.random.Generator(np.random.Philox(seed))
            out.append(rng.normal(size=self.embed_dim))
        return torch.tensor(np.stack(out), dtype=torch.float32)


def make_adapter(cfg: ExportConfig, kind: str = "hf"):
    if kind == "hf":
        return HfClipAdapter(cfg)
    if kind == "tiny":
        return TinyClipAdapter(cfg)
    raise ValueError(f"unknown adapter kind {kind!r}")
