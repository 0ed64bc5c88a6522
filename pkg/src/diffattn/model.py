"""Full network: encoder -> (semantic enhancement) -> FFP -> multi-scale diffusion."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from . import decoder as dec
from .encoder import EncoderConfig, build_encoder
from .errors import ConfigError
from .ffp import FeatureFusionPyramid
from .llm import SemanticEnhancer, build_sequence_layer
from .losses import scale_terms
from .schedule import NoiseSchedule, SamplingPlan


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    unet_width: int = 16
    t_dim: int = 128
    reduction: int | None = None
    llm_enabled: bool = True
    llm_provenance: str = "random-frozen"
    llm_width: int = 64
    llm_heads: int = 4
    llm_path: str | None = None
    llm_layer_index: int = 14  # "15th layer", 0-based
    logit_eps: float = 1e-4
    # one-step: losses on the single-step x0 estimate at a random tau.
    # unrolled: losses on the output of the full training DDIM chain.
    train_mode: str = "one-step"
    # divide logit targets by their bound so the diffused signal lies in [-1, 1]
    normalize_latent: bool = True
    # clamp sampled x0 estimates to the target range
    clip_x0: bool = True

    def __post_init__(self):
        if self.train_mode not in ("one-step", "unrolled"):
            raise ConfigError(f"unknown train_mode {self.train_mode!r}")


class DiffAttn(nn.Module):
    def __init__(self, cfg: ModelConfig, encoder: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        C_e = cfg.encoder.C_e
        self.encoder = encoder if encoder is not None else build_encoder(cfg.encoder)
        self.enhancer = None
        if cfg.llm_enabled:
            layer = build_sequence_layer(cfg.llm_provenance, cfg.llm_width, cfg.llm_path,
                                         cfg.llm_layer_index, cfg.llm_heads)
            self.enhancer = SemanticEnhancer(8 * C_e, layer, cfg.llm_width)
        self.ffp = FeatureFusionPyramid(C_e, cfg.reduction)
        self.conditions = dec.ConditionBuilder(C_e, cfg.unet_width)
        self.predictors = nn.ModuleList(
            dec.NoisePredictor(cfg.unet_width, cfg.unet_width, cfg.t_dim) for _ in range(dec.N_SCALES)
        )

    @property
    def latent_scale(self) -> float:
        return dec.logit_bound(self.cfg.logit_eps) if self.cfg.normalize_latent else 1.0

    def fused(self, images):
        levels = list(self.encoder(images))
        if self.enhancer is not None:
            levels[3] = self.enhancer(levels[3])
        return self.ffp(levels)

    def forward_train(self, images, gt_scales, sched: NoiseSchedule, generator=None,
                      plan: SamplingPlan | None = None):
        """Per-scale training outputs, coarse to fine.

        Returns ``{s: dict(pred=..., eps=..., eps_hat=..., tau=...)}`` where
        ``pred`` is the saliency estimate (sigmoid of x0) at scale s.
        """
        fused = self.fused(images)
        latents = dec.draw_latents(gt_scales, sched, generator, self.cfg.logit_eps, self.latent_scale)
        out = {}
        coarser = None
        for s in range(dec.N_SCALES - 1, -1, -1):
            lat = latents[s]
            cond = self.conditions(s, fused, coarser)
            net = self.predictors[s]
            eps_hat = net(lat.noisy, lat.tau, cond)
            if self.cfg.train_mode == "unrolled":
                if plan is None:
                    raise ConfigError("unrolled training needs the training sampling plan")
                x = torch.randn(lat.noisy.shape, generator=generator, dtype=lat.noisy.dtype).to(lat.noisy.device)
                logits = dec.ddim_chain(lambda z, tau: net(z, tau, cond), x, sched, plan)
            else:
                logits = dec.estimate_x0(lat.noisy, eps_hat, lat.tau, sched)
            pred = torch.sigmoid(self.latent_scale * logits)
            out[s] = {"pred": pred, "eps": lat.eps, "eps_hat": eps_hat, "tau": lat.tau}
            coarser = pred
        return out

    def loss_terms(self, outputs, gt_full):
        return {s: scale_terms(o["pred"], gt_full, o["eps"], o["eps_hat"]) for s, o in outputs.items()}

    @torch.no_grad()
    def sample(self, images, sched: NoiseSchedule, plan: SamplingPlan, seed=0, callback=None):
        clip = dec.logit_bound(self.cfg.logit_eps) / self.latent_scale if self.cfg.clip_x0 else None
        return dec.decode_all(self.fused(images), self.conditions, self.predictors, sched, plan, seed, callback,
                              clip, self.latent_scale)
