"""Semantic enhancement of the deepest feature level through a sequence layer.

The level-3 map (8*C_e, h, w) is read as h*w tokens of width 8*C_e in
row-major order, projected to the layer width by ``phi``, passed through the
layer, and projected back by ``psi``.
"""
from __future__ import annotations

import hashlib

import torch
from torch import nn

from .errors import ConfigError

PROVENANCES = ("identity-stub", "random-frozen", "random-trainable",
               "pretrained-frozen", "pretrained-trainable")

EMPTY_CHECKSUM = hashlib.sha256(b"").hexdigest()


class SequenceLayer(nn.Module):
    """Shape-preserving (B, N, D) -> (B, N, D) block with a provenance tag."""

    provenance = "identity-stub"

    def __init__(self, width: int, trainable: bool = False):
        super().__init__()
        self.width = width
        self.trainable = trainable

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(self.trainable)
        return self

    def train(self, mode: bool = True):
        # frozen layers stay in inference mode
        return super().train(mode and self.trainable)


class IdentityLayer(SequenceLayer):
    def forward(self, tokens):
        return tokens


class RandomTransformerLayer(SequenceLayer):
    """Randomly initialised pre-norm transformer block (offline stand-in)."""

    def __init__(self, width: int, heads: int = 4, trainable: bool = False, seed: int = 0):
        super().__init__(width, trainable)
        self.provenance = "random-trainable" if trainable else "random-frozen"
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.block = nn.TransformerEncoderLayer(width, heads, dim_feedforward=2 * width, dropout=0.0,
                                                batch_first=True, norm_first=True)
        torch.random.set_rng_state(gen_state)
        self.freeze()

    def forward(self, tokens):
        return self.block(tokens)


class HFDecoderLayer(SequenceLayer):
    """One decoder layer cut from a locally stored Hugging Face causal LM.

    Attention is run bidirectionally; rotary position embeddings come from
    the source model. Nothing is fetched over the network.
    """

    def __init__(self, path: str, layer_index: int = 14, trainable: bool = False):
        from transformers import AutoModelForCausalLM

        model = AutoModelForCausalLM.from_pretrained(path, local_files_only=True, torch_dtype=torch.float32)
        core = model.model
        if not 0 <= layer_index < len(core.layers):
            raise ConfigError(f"layer index {layer_index} outside 0..{len(core.layers) - 1}")
        super().__init__(model.config.hidden_size, trainable)
        self.provenance = "pretrained-trainable" if trainable else "pretrained-frozen"
        self.layer = core.layers[layer_index]
        self.layer.self_attn.is_causal = False
        self.rotary = core.rotary_emb
        self.freeze()

    def forward(self, tokens):
        pos = torch.arange(tokens.shape[1], device=tokens.device).unsqueeze(0).expand(tokens.shape[0], -1)
        cos_sin = self.rotary(tokens, pos)
        out = self.layer(tokens, attention_mask=None, position_ids=pos, position_embeddings=cos_sin)
        return out[0] if isinstance(out, tuple) else out


def build_sequence_layer(provenance: str, width: int, path: str | None = None,
                         layer_index: int = 14, heads: int = 4, seed: int = 0) -> SequenceLayer:
    if provenance == "identity-stub":
        return IdentityLayer(width)
    if provenance in ("random-frozen", "random-trainable"):
        return RandomTransformerLayer(width, heads, trainable=provenance.endswith("trainable"), seed=seed)
    if provenance in ("pretrained-frozen", "pretrained-trainable"):
        if path is None:
            raise ConfigError("pretrained sequence layer needs a local checkpoint path")
        return HFDecoderLayer(path, layer_index, trainable=provenance.endswith("trainable"))
    raise ConfigError(f"unknown sequence-layer provenance {provenance!r}; choose from {PROVENANCES}")


class SemanticEnhancer(nn.Module):
    def __init__(self, channels: int, layer: SequenceLayer, width: int | None = None):
        super().__init__()
        width = layer.width if width is None else width
        if width != layer.width:
            raise ConfigError(f"projection width {width} does not match sequence layer width {layer.width}")
        self.phi = nn.Linear(channels, width)
        self.layer = layer
        self.psi = nn.Linear(width, channels)

    def forward(self, x3):
        B, C, h, w = x3.shape
        tokens = x3.flatten(2).transpose(1, 2)  # (B, h*w, C), row-major over (h, w)
        out = self.psi(self.layer(self.phi(tokens)))
        return out.transpose(1, 2).reshape(B, C, h, w)


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over parameter names, shapes and raw bytes, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        t = p.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def freeze_check(layer: SequenceLayer) -> str:
    return param_checksum(layer)
