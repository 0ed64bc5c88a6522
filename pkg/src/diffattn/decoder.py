"""Multi-scale conditional diffusion decoder.

Scale s works at (H / 2**s, W / 2**s). Sampling runs coarse to fine
(s = 3 -> 0); every finer condition adds the upsampled saliency sampled at
the next coarser scale. Diffusion happens in the logit domain of the
saliency map (optionally divided by a constant so targets lie in [-1, 1]),
so the closing sigmoid inverts the forward mapping exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractViolation, DependencyError, NumericFailure, ShapeError
from .schedule import NoiseSchedule, SamplingPlan

N_SCALES = 4


def timestep_embedding(taus, dim: int) -> torch.Tensor:
    """Batched torch twin of :func:`diffattn.schedule.time_embedding`."""
    taus = torch.as_tensor(taus).reshape(-1).to(torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = taus[:, None] * freqs[None, :]
    out = torch.empty(taus.shape[0], dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(args)
    out[:, 1::2] = torch.cos(args)
    return out


def to_logit(s_map, eps: float = 1e-4):
    s_map = s_map.clamp(eps, 1.0 - eps)
    return torch.log(s_map) - torch.log1p(-s_map)


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(t_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, t):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(t)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class NoisePredictor(nn.Module):
    """Two-level U-Net predicting the injected noise of a 1-channel latent.

    The noisy map, the condition and the projected time embedding are
    summed at the input; the time embedding is also added inside every
    residual block.
    """

    def __init__(self, width: int = 16, d_cond: int | None = None, t_dim: int = 128):
        super().__init__()
        d_cond = width if d_cond is None else d_cond
        self.t_dim = t_dim
        self.time_mlp = nn.Sequential(nn.Linear(t_dim, 4 * width), nn.SiLU(), nn.Linear(4 * width, 4 * width))
        te = 4 * width
        self.t_in = nn.Linear(te, width)
        self.in_noisy = nn.Conv2d(1, width, 3, padding=1)
        self.in_cond = nn.Conv2d(d_cond, width, 1)
        self.enc1 = ResBlock(width, width, te)
        self.down1 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.enc2 = ResBlock(2 * width, 2 * width, te)
        self.down2 = nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1)
        self.mid = ResBlock(4 * width, 4 * width, te)
        self.up2 = nn.Conv2d(4 * width, 2 * width, 3, padding=1)
        self.dec2 = ResBlock(4 * width, 2 * width, te)
        self.up1 = nn.Conv2d(2 * width, width, 3, padding=1)
        self.dec1 = ResBlock(2 * width, width, te)
        self.out_norm = nn.GroupNorm(_groups(width), width)
        self.out = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, noisy, taus, cond):
        if noisy.shape[-2:] != cond.shape[-2:]:
            raise ShapeError(f"noisy map {tuple(noisy.shape[-2:])} and condition {tuple(cond.shape[-2:])} differ")
        h, w = noisy.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"latent {h}x{w} must be divisible by 4")
        taus = torch.as_tensor(taus, device=noisy.device).reshape(-1)
        if taus.numel() == 1:
            taus = taus.expand(noisy.shape[0])
        t = self.time_mlp(timestep_embedding(taus, self.t_dim).to(noisy.dtype))
        x = self.in_noisy(noisy) + self.in_cond(cond) + self.t_in(t)[:, :, None, None]
        e1 = self.enc1(x, t)
        e2 = self.enc2(self.down1(e1), t)
        m = self.mid(self.down2(e2), t)
        d2 = self.dec2(torch.cat([self.up2(F.interpolate(m, scale_factor=2, mode="nearest")), e2], 1), t)
        d1 = self.dec1(torch.cat([self.up1(F.interpolate(d2, scale_factor=2, mode="nearest")), e1], 1), t)
        return self.out(F.silu(self.out_norm(d1)))


class ConditionBuilder(nn.Module):
    """Per-scale visual conditions from the fused pyramid.

    Scale s concatenates fused levels s..3, each upsampled by 2**(i + 2 - s)
    to the scale-s grid, then applies a 3x3 conv + ELU. Scales s < 3 add a
    1x1-conv of the next coarser saliency map, upsampled by two.
    """

    def __init__(self, C_e: int, d_cond: int):
        super().__init__()
        self.C_e = C_e
        self.d_cond = d_cond
        # f^s = 3x3 conv after a 1x1 conv over the concatenation; the 1x1 part
        # is split per level and run before upsampling (the two commute)
        self.f_in = nn.ModuleList(
            nn.ModuleList(nn.Conv2d(C_e * 2**i, d_cond, 1, bias=(i == s)) for i in range(s, N_SCALES))
            for s in range(N_SCALES)
        )
        self.f = nn.ModuleList(nn.Conv2d(d_cond, d_cond, 3, padding=1) for _ in range(N_SCALES))
        self.g = nn.ModuleList(nn.Conv2d(1, d_cond, 1) for _ in range(N_SCALES - 1))

    def features(self, s: int, fused):
        H, W = fused[0].shape[-2] * 4, fused[0].shape[-1] * 4
        size = (H // 2**s, W // 2**s)
        mixed = 0
        for i, proj in zip(range(s, N_SCALES), self.f_in[s]):
            x = fused[i]
            want = (self.C_e * 2**i, H // 2 ** (i + 2), W // 2 ** (i + 2))
            if tuple(x.shape[-3:]) != want:
                raise ContractViolation(f"fused level {i}: expected {want}, got {tuple(x.shape[-3:])}")
            mixed = mixed + F.interpolate(proj(x), size=size, mode="bilinear", align_corners=False)
        return F.elu(self.f[s](mixed))

    def concat_width(self, s: int) -> int:
        return sum(self.C_e * 2**i for i in range(s, N_SCALES))

    def forward(self, s: int, fused, coarser=None):
        if s < N_SCALES - 1 and coarser is None:
            raise DependencyError(f"scale {s} needs the saliency map from scale {s + 1}")
        c = self.features(s, fused)
        if s == N_SCALES - 1:
            return c
        if tuple(coarser.shape[-2:]) != (c.shape[-2] // 2, c.shape[-1] // 2):
            raise ContractViolation(
                f"coarser saliency {tuple(coarser.shape[-2:])} is not half of scale-{s} grid {tuple(c.shape[-2:])}"
            )
        refine = F.interpolate(self.g[s](coarser), scale_factor=2, mode="bilinear", align_corners=False)
        return c + refine


def _coef(values, taus, like):
    """Gather schedule entries for a batch of steps, shaped (B, 1, 1, 1)."""
    t = torch.tensor(values, dtype=torch.float64)[torch.as_tensor(taus).reshape(-1).cpu()]
    return t.to(like.dtype).to(like.device).view(-1, 1, 1, 1)


@dataclass
class ScaleLatent:
    scale: int
    target: torch.Tensor  # logit-domain clean map
    tau: torch.Tensor  # (B,) int64
    eps: torch.Tensor
    noisy: torch.Tensor


def draw_latents(gt_scales, sched: NoiseSchedule, generator: torch.Generator | None = None,
                 logit_eps: float = 1e-4, scale: float = 1.0) -> list[ScaleLatent]:
    """Forward-diffuse the per-scale targets at uniformly drawn steps.

    ``gt_scales[s]`` is the (B, 1, H/2^s, W/2^s) ground truth in [0, 1];
    the diffused target is its clamped logit divided by ``scale``.
    """
    out = []
    for s, gt in enumerate(gt_scales):
        B = gt.shape[0]
        # draws come from a CPU generator so they match across devices
        tau = torch.randint(0, sched.T_i, (B,), generator=generator).to(gt.device)
        eps = torch.randn(gt.shape, generator=generator, dtype=gt.dtype).to(gt.device)
        target = to_logit(gt, logit_eps) / scale
        ab = _coef(sched.alpha_bar, tau, gt)
        noisy = ab.sqrt() * target + (1 - ab).sqrt() * eps
        out.append(ScaleLatent(s, target, tau, eps, noisy))
    return out


def estimate_x0(noisy, eps_hat, tau, sched: NoiseSchedule):
    ab = _coef(sched.alpha_bar, tau, noisy)
    return (noisy - (1 - ab).sqrt() * eps_hat) / ab.sqrt()


def ddim_chain(eps_fn, x, sched: NoiseSchedule, plan: SamplingPlan, callback=None, clip: float | None = None):
    """Deterministic DDIM over ``plan.steps``; returns the clean estimate.

    Each listed step costs one ``eps_fn(x, tau)`` call. Between consecutive
    steps the DDIM update is applied; the last step maps straight to x0.
    ``callback(k, tau, x)`` sees the latent entering step k. With ``clip``
    the x0 estimate is clamped to [-clip, clip] and the noise estimate is
    recomputed from the clamped value before the update.
    """
    steps = plan.steps
    for k, tau in enumerate(steps):
        if callback is not None:
            callback(k, tau, x)
        eps_hat = eps_fn(x, tau)
        ab = float(sched.alpha_bar[tau])
        x0 = (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
        if clip is not None:
            x0 = x0.clamp(-clip, clip)
            eps_hat = (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
        if k + 1 < len(steps):
            ab_next = float(sched.alpha_bar[steps[k + 1]])
            x = math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next) * eps_hat
        else:
            x = x0
        if not torch.isfinite(x).all():
            raise NumericFailure(f"non-finite latent after denoising step {k} (tau={tau})")
    return x


def initial_latent(shape, seed: int, dtype=torch.float32, device="cpu"):
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=g, dtype=dtype).to(device)


def logit_bound(logit_eps: float) -> float:
    """Largest magnitude a clamped target can take in the logit domain."""
    return math.log1p(-logit_eps) - math.log(logit_eps)


def sample_scale(cond, net: NoisePredictor, sched: NoiseSchedule, plan: SamplingPlan, seed: int,
                 callback=None, return_logits: bool = False, clip: float | None = None, scale: float = 1.0):
    """Sample one scale from a seeded Gaussian latent; returns probabilities.

    The chain output times ``scale`` is read as logits.
    """
    for tau in plan.steps:
        sched.check_step(tau)
    B, _, h, w = cond.shape
    # every batch item starts from the same seeded draw, so results do not
    # depend on how images are batched
    x = initial_latent((1, 1, h, w), seed, cond.dtype, cond.device).expand(B, -1, -1, -1).clone()
    logits = scale * ddim_chain(lambda z, tau: net(z, tau, cond), x, sched, plan, callback, clip)
    return logits if return_logits else torch.sigmoid(logits)


def scale_seeds(seed) -> tuple[int, ...]:
    """Seeds for scales 3, 2, 1, 0 (in sampling order)."""
    if isinstance(seed, (tuple, list)):
        if len(seed) != N_SCALES:
            raise ValueError(f"need {N_SCALES} per-scale seeds, got {len(seed)}")
        return tuple(int(s) for s in seed)
    return tuple(int(seed) * N_SCALES + k for k in range(N_SCALES))


def decode_all(fused, builder: ConditionBuilder, nets, sched: NoiseSchedule, plan: SamplingPlan, seed,
               callback=None, clip: float | None = None, scale: float = 1.0) -> dict[int, torch.Tensor]:
    """Coarse-to-fine sampling; returns {s: (B, 1, H/2^s, W/2^s)} for s = 3..0."""
    seeds = scale_seeds(seed)
    out = {}
    coarser = None
    for k, s in enumerate(range(N_SCALES - 1, -1, -1)):
        cond = builder(s, fused, coarser)
        cb = None if callback is None else (lambda i, tau, x, s=s: callback(s, i, tau, x))
        coarser = sample_scale(cond, nets[s], sched, plan, seeds[k], cb, clip=clip, scale=scale)
        out[s] = coarser
    return out
