"""Noise schedules, forward diffusion and DDPM/DDIM reverse updates.

Timesteps are 0-based: ``alpha_bar[0] = 1 - beta[0]`` is the least-noised
training step. Schedule arrays are float64; the step functions only pull
Python floats out of them, so they accept numpy arrays and torch tensors
alike and leave the caller's dtype untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StepIndexError


@dataclass(frozen=True)
class NoiseSchedule:
    T_i: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray  # DDPM posterior std; sigma[0] = 0

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar, self.sigma):
            arr.setflags(write=False)

    def check_step(self, tau: int) -> int:
        tau = int(tau)
        if not 0 <= tau < self.T_i:
            raise StepIndexError(f"step {tau} outside schedule range [0, {self.T_i})")
        return tau


@dataclass(frozen=True)
class SamplingPlan:
    T_e: int
    steps: tuple[int, ...]


def make_schedule(T_i: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with running-product alpha_bar."""
    if int(T_i) < 1:
        raise ConfigError(f"T_i must be >= 1, got {T_i}")
    if not 0.0 < beta_start:
        raise ConfigError(f"beta_start must be > 0, got {beta_start}")
    if not beta_start <= beta_end:
        raise ConfigError(f"beta_end ({beta_end}) must be >= beta_start ({beta_start})")
    if not beta_end < 1.0:
        raise ConfigError(f"beta_end must be < 1, got {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T_i), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    var = beta * (1.0 - prev) / (1.0 - alpha_bar)
    return NoiseSchedule(int(T_i), beta, alpha, alpha_bar, np.sqrt(var))


def _check_shape(a, b, what="eps"):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what} shape {tuple(b.shape)} != input shape {tuple(a.shape)}")


def q_sample(x0, tau: int, eps, sched: NoiseSchedule):
    """Draw x_tau ~ q(x_tau | x0) given the Gaussian draw ``eps``."""
    tau = sched.check_step(tau)
    _check_shape(x0, eps)
    ab = float(sched.alpha_bar[tau])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_tau, eps_hat, tau: int, sched: NoiseSchedule):
    tau = sched.check_step(tau)
    ab = float(sched.alpha_bar[tau])
    return (x_tau - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def ddpm_step(x_tau, eps_hat, tau: int, sched: NoiseSchedule, noise):
    """Ancestral step tau -> tau-1: posterior mean plus ``sigma[tau] * noise``."""
    tau = sched.check_step(tau)
    if tau == 0:
        raise StepIndexError("tau = 0 is the final step; there is no further transition")
    a = float(sched.alpha[tau])
    b = float(sched.beta[tau])
    ab = float(sched.alpha_bar[tau])
    mean = (x_tau - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    return mean + float(sched.sigma[tau]) * noise


def ddim_step(x_tau, eps_hat, tau: int, tau_next: int, sched: NoiseSchedule,
              eta: float = 0.0, noise=None):
    """DDIM update tau -> tau_next (< tau).

    With ``eta = 0`` the step is deterministic. ``eta > 0`` scales the DDIM
    sigma and requires ``noise``.
    """
    tau = sched.check_step(tau)
    tau_next = sched.check_step(tau_next)
    if tau_next >= tau:
        raise StepIndexError(f"tau_next ({tau_next}) must be < tau ({tau})")
    ab = float(sched.alpha_bar[tau])
    ab_next = float(sched.alpha_bar[tau_next])
    x0_hat = (x_tau - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if eta == 0.0:
        return math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps_hat
    sig = eta * math.sqrt((1.0 - ab_next) / (1.0 - ab) * (1.0 - ab / ab_next))
    if noise is None:
        raise ValueError("eta > 0 requires a noise draw")
    direction = math.sqrt(max(1.0 - ab_next - sig * sig, 0.0)) * eps_hat
    return math.sqrt(ab_next) * x0_hat + direction + sig * noise


def plan_steps(T_i: int, T_e: int) -> SamplingPlan:
    """Evenly spaced, strictly decreasing subsequence from T_i-1 down to 0."""
    T_i, T_e = int(T_i), int(T_e)
    if T_e < 1:
        raise ConfigError(f"T_e must be >= 1, got {T_e}")
    if T_e > T_i:
        raise ConfigError(f"T_e ({T_e}) cannot exceed T_i ({T_i})")
    if T_e == 1:
        return SamplingPlan(1, (T_i - 1,))
    # spacing (T_i-1)/(T_e-1) >= 1, so rounding keeps entries distinct
    steps = np.rint(np.linspace(T_i - 1, 0, T_e)).astype(int)
    return SamplingPlan(T_e, tuple(int(s) for s in steps))


def time_embedding(tau, dim: int) -> np.ndarray:
    """Sinusoidal embedding; even slots hold sin, odd slots cos."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"time-embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = float(tau) * freqs
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(args)
    out[1::2] = np.cos(args)
    return out
