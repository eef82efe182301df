"""Diffusion guidance: noise schedule, CFG, SDS/DDS cotangents, toy backends.

The denoiser is forward-only: guidance returns the cotangent array that feeds
splat_render.backprop_color (or a latent descent step); nothing differentiates
through the denoiser itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np

from .errors import (
    DenoiserFailure,
    InvalidT,
    InvariantViolation,
    OddDimensions,
    ShapeMismatch,
    SigmaZero,
)

BETA_START = 0.00085
BETA_END = 0.012


@dataclass(frozen=True)
class DiffusionSchedule:
    """Forward-process tables: z_t = alpha_t * x + sigma_t * eps, t in [1, T]."""

    T: int
    alpha_t: np.ndarray
    sigma_t: np.ndarray

    def __post_init__(self):
        a, s = np.asarray(self.alpha_t), np.asarray(self.sigma_t)
        if self.T < 2 or a.shape != (self.T,) or s.shape != (self.T,):
            raise InvalidT(f"bad schedule arrays for T={self.T}")
        if np.max(np.abs(a * a + s * s - 1.0)) > 1e-6:
            raise InvariantViolation("alpha^2 + sigma^2 must equal 1")
        if np.any(np.diff(a) > 0) or np.any(np.diff(s) < 0):
            raise InvariantViolation("alpha must be non-increasing, sigma non-decreasing")

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise InvalidT(f"timestep {t} outside [1, {self.T}]")
        return t

    def alpha(self, t: int) -> float:
        return float(self.alpha_t[self._check_t(t) - 1])

    def sigma(self, t: int) -> float:
        return float(self.sigma_t[self._check_t(t) - 1])

    def to_json(self) -> dict:
        return {"T": self.T,
                "alpha_t": [float(v) for v in self.alpha_t],
                "sigma_t": [float(v) for v in self.sigma_t]}


def make_schedule(T: int) -> DiffusionSchedule:
    """Scaled-linear beta schedule (beta_1=0.00085, beta_T=0.012)."""
    if T < 2:
        raise InvalidT(f"T must be >= 2, got {T}")
    sqrt_betas = np.linspace(np.sqrt(BETA_START), np.sqrt(BETA_END), T)
    betas = sqrt_betas ** 2
    alpha_bar = np.cumprod(1.0 - betas)
    return DiffusionSchedule(T=T, alpha_t=np.sqrt(alpha_bar),
                             sigma_t=np.sqrt(1.0 - alpha_bar))


@dataclass
class DenoiserCondition:
    """Conditioning passed to the denoiser: prompt plus optional depth map."""

    prompt: str
    depth: np.ndarray | None = None
    condition_strength: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.condition_strength <= 2.0:
            raise InvariantViolation("condition_strength outside [0, 2]")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float64)
            if self.depth.min() < 0.0 or self.depth.max() > 1.0:
                raise InvariantViolation("depth map must be in [0, 1]")


@dataclass
class NoisePrediction:
    epsilon_hat: np.ndarray

    def __post_init__(self):
        self.epsilon_hat = np.asarray(self.epsilon_hat, dtype=np.float64)
        if not np.all(np.isfinite(self.epsilon_hat)):
            raise InvariantViolation("non-finite noise prediction")


@dataclass
class GuidanceSample:
    """One (t, eps) draw shared by all denoiser queries of a guidance step."""

    t: int
    epsilon: np.ndarray
    rng_seed: int = 0

    def __post_init__(self):
        if self.t < 1:
            raise InvalidT(f"timestep {self.t} must be >= 1")
        self.epsilon = np.asarray(self.epsilon, dtype=np.float64)


def draw_sample(shape, sched: DiffusionSchedule, rng: np.random.Generator,
                full_range: bool = False, rng_seed: int = 0) -> GuidanceSample:
    """Sample t and eps. Default t-range is [0.02T, 0.98T] to avoid the
    degenerate extremes; full_range=True gives the plain U(1, T)."""
    if full_range:
        t_min, t_max = 1, sched.T
    else:
        t_min = max(1, int(np.ceil(0.02 * sched.T)))
        t_max = max(t_min, int(np.floor(0.98 * sched.T)))
    t = int(rng.integers(t_min, t_max + 1))
    eps = rng.standard_normal(shape)
    return GuidanceSample(t=t, epsilon=eps, rng_seed=rng_seed)


class Denoiser(Protocol):
    """Forward-only noise predictor. `epsilon` carries the true injected noise
    and exists solely for oracle denoisers in tests; real backends ignore it."""

    def predict(self, latent: np.ndarray, t: int, cond: DenoiserCondition,
                unconditional: bool = False,
                epsilon: np.ndarray | None = None) -> NoisePrediction: ...


def _eps(pred) -> np.ndarray:
    return pred.epsilon_hat if isinstance(pred, NoisePrediction) else np.asarray(pred)


def cfg_combine(eps_uncond, eps_cond, omega: float) -> NoisePrediction:
    """Classifier-free guidance: uncond + omega * (cond - uncond)."""
    u, c = _eps(eps_uncond), _eps(eps_cond)
    if u.shape != c.shape:
        raise ShapeMismatch(f"CFG shapes differ: {u.shape} vs {c.shape}")
    if omega == 1.0:
        return NoisePrediction(c.copy())
    if omega == 0.0:
        return NoisePrediction(u.copy())
    return NoisePrediction(u + omega * (c - u))


def _guided_prediction(z: np.ndarray, sample: GuidanceSample, denoiser: Denoiser,
                       cond: DenoiserCondition, omega: float) -> np.ndarray:
    try:
        e_c = denoiser.predict(z, sample.t, cond, unconditional=False,
                               epsilon=sample.epsilon)
        e_u = denoiser.predict(z, sample.t, cond, unconditional=True,
                               epsilon=sample.epsilon)
    except DenoiserFailure:
        raise
    except Exception as e:  # backend-specific faults surface as DenoiserFailure
        raise DenoiserFailure(str(e)) from e
    return cfg_combine(e_u, e_c, omega).epsilon_hat


def sds_grad(x: np.ndarray, sample: GuidanceSample, sched: DiffusionSchedule,
             denoiser: Denoiser, cond: DenoiserCondition, omega: float,
             weight_fn: Callable[[int], float] | None = None) -> np.ndarray:
    """Score-distillation cotangent: w(t) * (eps_hat^omega(z; y; t) - eps).

    w(t) is identically 1 unless weight_fn is given.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvariantViolation("non-finite input to sds_grad")
    if x.shape != sample.epsilon.shape:
        raise ShapeMismatch(f"x {x.shape} vs epsilon {sample.epsilon.shape}")
    a, s = sched.alpha(sample.t), sched.sigma(sample.t)
    z = a * x + s * sample.epsilon
    guided = _guided_prediction(z, sample, denoiser, cond, omega)
    w = 1.0 if weight_fn is None else float(weight_fn(sample.t))
    return w * (guided - sample.epsilon)


def dds_grad(x_tgt: np.ndarray, x_init: np.ndarray, sample: GuidanceSample,
             sched: DiffusionSchedule, denoiser: Denoiser,
             cond_tgt: DenoiserCondition, cond_init: DenoiserCondition,
             omega: float,
             weight_fn: Callable[[int], float] | None = None) -> np.ndarray:
    """Delta-denoising cotangent for the target branch only.

    Both branches are noised with the same (t, eps); the reference branch is
    a constant, so its prediction is subtracted rather than descended.
    """
    x_tgt = np.asarray(x_tgt, dtype=np.float64)
    x_init = np.asarray(x_init, dtype=np.float64)
    if x_tgt.shape != x_init.shape:
        raise ShapeMismatch(f"branch shapes differ: {x_tgt.shape} vs {x_init.shape}")
    if x_tgt.shape != sample.epsilon.shape:
        raise ShapeMismatch(f"x {x_tgt.shape} vs epsilon {sample.epsilon.shape}")
    a, s = sched.alpha(sample.t), sched.sigma(sample.t)
    z_tgt = a * x_tgt + s * sample.epsilon
    z_init = a * x_init + s * sample.epsilon
    g_tgt = _guided_prediction(z_tgt, sample, denoiser, cond_tgt, omega)
    g_init = _guided_prediction(z_init, sample, denoiser, cond_init, omega)
    w = 1.0 if weight_fn is None else float(weight_fn(sample.t))
    return w * (g_tgt - g_init)


def mask_grad(grad: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero a gradient outside a [0,1] mask (broadcast across channels)."""
    grad = np.asarray(grad, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    m = mask[..., None] if grad.ndim == mask.ndim + 1 else mask
    try:
        np.broadcast_shapes(grad.shape, m.shape)
    except ValueError as e:
        raise ShapeMismatch(f"mask {mask.shape} not broadcastable to {grad.shape}") from e
    # where() keeps masked-out entries exactly +0.0 (no signed-zero leakage)
    return np.where(m != 0.0, grad * m, 0.0)


# --- analytic toy denoiser (test oracle for the real model) ---

def toy_denoiser_predict(x_t: np.ndarray, t: int, sched: DiffusionSchedule,
                         mu: np.ndarray, s: float) -> NoisePrediction:
    """Bayes-optimal prediction when the data distribution is N(mu, s^2 I)."""
    if s < 0:
        raise InvariantViolation("toy data std must be >= 0")
    a, sig = sched.alpha(t), sched.sigma(t)
    if sig == 0.0:
        raise SigmaZero(f"sigma_t = 0 at t={t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), x_t.shape)
    x0_hat = (a * s * s * x_t + sig * sig * mu) / (a * a * s * s + sig * sig)
    return NoisePrediction((x_t - a * x0_hat) / sig)


class ToyDenoiser:
    """Prompt-keyed analytic denoiser over Gaussian toy data.

    mu_by_prompt maps prompts to mean latents (or is a callable); the
    unconditional branch uses `uncond_mu` (default: zeros).
    """

    def __init__(self, sched: DiffusionSchedule, mu_by_prompt, s: float = 0.0,
                 uncond_mu=None):
        self.sched = sched
        self.mu_by_prompt = mu_by_prompt
        self.s = float(s)
        self.uncond_mu = uncond_mu

    def _mu(self, cond: DenoiserCondition, unconditional: bool, shape):
        if unconditional:
            base = self.uncond_mu if self.uncond_mu is not None else 0.0
        elif callable(self.mu_by_prompt):
            base = self.mu_by_prompt(cond.prompt)
        else:
            base = self.mu_by_prompt[cond.prompt]
        return np.broadcast_to(np.asarray(base, dtype=np.float64), shape)

    def predict(self, latent, t, cond, unconditional=False, epsilon=None):
        mu = self._mu(cond, unconditional, np.asarray(latent).shape)
        return toy_denoiser_predict(latent, t, self.sched, mu, self.s)


class InertDenoiser:
    """Oracle denoiser that returns the injected noise exactly (eps_hat = eps).

    Only usable where guidance passes the sample's epsilon through; real
    backends never see it.
    """

    def predict(self, latent, t, cond, unconditional=False, epsilon=None):
        if epsilon is None:
            raise DenoiserFailure("InertDenoiser needs the injected epsilon")
        return NoisePrediction(np.array(epsilon, dtype=np.float64, copy=True))


# --- toy latent codec (stand-in for the real autoencoder) ---

class ToyCodec:
    """2x downscale codec: encode = 2x2 block mean, decode = average-preserving
    linear (slope) reconstruction.

    decode places the four pixels of a block at +-1/4-cell offsets along the
    cell's central-difference slopes, so block means are reproduced exactly
    and decode-encode is idempotent on the reachable set.
    """

    downscale = 2

    def encode(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[..., None]
        h, w, c = img.shape
        if h % 2 or w % 2:
            raise OddDimensions(f"image size {h}x{w} not divisible by 2")
        return img.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.ndim == 2:
            z = z[..., None]
        h, w, c = z.shape
        pad_y = np.pad(z, ((1, 1), (0, 0), (0, 0)), mode="edge")
        pad_x = np.pad(z, ((0, 0), (1, 1), (0, 0)), mode="edge")
        gy = 0.5 * (pad_y[2:] - pad_y[:-2])
        gx = 0.5 * (pad_x[:, 2:] - pad_x[:, :-2])
        out = np.empty((2 * h, 2 * w, c))
        for a, oy in ((0, -0.25), (1, 0.25)):
            for b, ox in ((0, -0.25), (1, 0.25)):
                out[a::2, b::2] = z + oy * gy + ox * gx
        return out
