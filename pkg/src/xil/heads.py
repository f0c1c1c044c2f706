"""Policy representations: behavior cloning, DDPM, EDM-style (BESO) diffusion, rectified flow.

All heads share one interface::

    head.loss(model, obs, actions, rng) -> scalar Tensor
    head.sample(model, obs, steps, rng) -> ndarray [b, Ta, Da] in [-1, 1]

``model`` is any object with ``encode(obs) -> ctx``,
``denoise(ctx, x: Tensor, time_value: ndarray[b]) -> Tensor`` and an
``action_shape`` attribute ``(Ta, Da)``. The network only ever sees a scalar
"time value" per sample; each head decides what that scalar is.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

HEADS = ("bc", "ddpm", "beso", "rf")
DEFAULT_STEPS = 4
# Continuous noise levels are stretched before the sinusoidal embedding so its
# highest frequencies resolve them; integer DDPM steps already span 1..1000.
TIME_SCALE = 1000.0


def _dtype():
    return T.get_dtype()


def _sq_norm_mean(diff: Tensor, weight: np.ndarray | None = None) -> Tensor:
    """Batch mean of per-sample squared norms, optionally weighted per sample."""
    per = (diff * diff).sum(axis=(1, 2))
    if weight is not None:
        per = per * weight
    return per.mean()


def bc_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return (diff * diff).mean()


class BCHead:
    name = "bc"

    def loss(self, model, obs, actions, rng=None) -> Tensor:
        ctx = model.encode(obs)
        b = obs.batch_size
        return bc_loss(model.denoise(ctx, Tensor(np.zeros(actions.shape)), np.zeros(b)), actions)

    def sample(self, model, obs, steps: int = 1, rng=None) -> np.ndarray:
        ctx = model.encode(obs)
        b = obs.batch_size
        Ta, Da = model.action_shape
        pred = model.denoise(ctx, Tensor(np.zeros((b, Ta, Da))), np.zeros(b))
        return np.clip(pred.data, -1.0, 1.0)


# ---------------------------------------------------------------------------
# DDPM
# ---------------------------------------------------------------------------

@dataclass
class DDPMSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("DDPM needs at least one step")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        if not np.all((self.betas > 0) & (self.betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative product at 1-based step(s) t."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return self.alpha_bars[t - 1]

    def respaced(self, steps: int) -> np.ndarray:
        """Evenly strided timesteps, ascending, always ending at T."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in [1, {self.T}], got {steps}")
        return np.unique(np.round(np.arange(1, steps + 1) * self.T / steps).astype(np.int64))


def ddpm_forward_diffuse(x0, t, eps, sched: DDPMSchedule) -> np.ndarray:
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps, broadcast over leading batch axis."""
    ab = sched.alpha_bar(t)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(x0) - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


class DDPMHead:
    """Noise-prediction diffusion with ancestral sampling on a respaced schedule."""

    name = "ddpm"

    def __init__(self, schedule: DDPMSchedule | None = None):
        self.schedule = schedule or DDPMSchedule()

    def loss(self, model, obs, actions, rng: np.random.Generator) -> Tensor:
        b = actions.shape[0]
        t = rng.integers(1, self.schedule.T + 1, size=b)
        eps = rng.standard_normal(actions.shape)
        x_t = ddpm_forward_diffuse(actions, t, eps, self.schedule)
        ctx = model.encode(obs)
        eps_hat = model.denoise(ctx, Tensor(x_t), t.astype(np.float64))
        return _sq_norm_mean(eps_hat - eps)

    def sample(self, model, obs, steps: int = DEFAULT_STEPS, rng=None) -> np.ndarray:
        rng = rng if rng is not None else np.random.default_rng()
        sched = self.schedule
        taus = sched.respaced(steps)
        b = obs.batch_size
        Ta, Da = model.action_shape
        ctx = model.encode(obs)
        x = rng.standard_normal((b, Ta, Da)).astype(_dtype())
        for j in range(len(taus) - 1, -1, -1):
            t = int(taus[j])
            ab = sched.alpha_bars[t - 1]
            ab_prev = sched.alpha_bars[taus[j - 1] - 1] if j > 0 else 1.0
            beta = 1.0 - ab / ab_prev
            eps_hat = model.denoise(ctx, Tensor(x), np.full(b, float(t))).data
            x = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
            if j > 0:
                var = (1.0 - ab_prev) / (1.0 - ab) * beta
                x = x + np.sqrt(var) * rng.standard_normal(x.shape)
            x = x.astype(_dtype())
        return np.clip(x, -1.0, 1.0)


# ---------------------------------------------------------------------------
# continuous-time score-based diffusion (EDM preconditioning)
# ---------------------------------------------------------------------------

@dataclass
class SigmaSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2


def karras_sigma_schedule(n: int, sigma_min: float = 0.002, sigma_max: float = 80.0,
                          rho: float = 7.0) -> np.ndarray:
    """n noise levels from sigma_max down to sigma_min, then a terminal 0."""
    if n < 1:
        raise ValueError("need at least one sampling step")
    if n == 1:
        return np.array([sigma_max, 0.0])
    ramp = np.arange(n) / (n - 1)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    sigmas = (hi + ramp * (lo - hi)) ** rho
    return np.append(sigmas, 0.0)


def edm_coefficients(sigma, sigma_data: float = 0.5):
    """(c_skip, c_out, c_in, c_noise) for noise level(s) sigma."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    s2, d2 = sigma ** 2, sigma_data ** 2
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / np.sqrt(s2 + d2)
    c_in = 1.0 / np.sqrt(s2 + d2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def edm_loss_weight(sigma, sigma_data: float = 0.5):
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def edm_precondition(model, ctx, x, sigma, sigma_data: float = 0.5) -> Tensor:
    """D(x; sigma) = c_skip x + c_out F(c_in x, c_noise)."""
    x = T.as_tensor(x)
    c_skip, c_out, c_in, c_noise = edm_coefficients(sigma, sigma_data)
    col = (-1,) + (1,) * (x.ndim - 1)
    b = x.shape[0]
    c_skip, c_out, c_in = (np.broadcast_to(c, (b,)).reshape(col) for c in (c_skip, c_out, c_in))
    c_noise = np.broadcast_to(c_noise, (b,))
    F = model.denoise(ctx, x * c_in, c_noise * TIME_SCALE)
    return x * c_skip + F * c_out


class BESOHead:
    """EDM-preconditioned denoiser; deterministic Euler sampling on the Karras schedule."""

    name = "beso"

    def __init__(self, schedule: SigmaSchedule | None = None):
        self.schedule = schedule or SigmaSchedule()

    def sample_sigma(self, rng: np.random.Generator, n: int) -> np.ndarray:
        s = self.schedule
        sigma = np.exp(rng.normal(s.p_mean, s.p_std, n))
        return np.clip(sigma, s.sigma_min, s.sigma_max)

    def loss(self, model, obs, actions, rng: np.random.Generator) -> Tensor:
        s = self.schedule
        b = actions.shape[0]
        sigma = self.sample_sigma(rng, b)
        noise = rng.standard_normal(actions.shape) * sigma[:, None, None]
        ctx = model.encode(obs)
        D = edm_precondition(model, ctx, Tensor(actions + noise), sigma, s.sigma_data)
        return _sq_norm_mean(D - actions, edm_loss_weight(sigma, s.sigma_data))

    def sample(self, model, obs, steps: int = DEFAULT_STEPS, rng=None) -> np.ndarray:
        rng = rng if rng is not None else np.random.default_rng()
        s = self.schedule
        sigmas = karras_sigma_schedule(steps, s.sigma_min, s.sigma_max, s.rho)
        b = obs.batch_size
        Ta, Da = model.action_shape
        ctx = model.encode(obs)
        x = (rng.standard_normal((b, Ta, Da)) * sigmas[0]).astype(_dtype())
        for sig, sig_next in zip(sigmas[:-1], sigmas[1:]):
            D = edm_precondition(model, ctx, Tensor(x), np.full(b, sig), s.sigma_data).data
            x = (x + (sig_next - sig) * (x - D) / sig).astype(_dtype())
        return np.clip(x, -1.0, 1.0)


# ---------------------------------------------------------------------------
# rectified flow
# ---------------------------------------------------------------------------

def rf_interpolate(x0, x1, t):
    """Point on the straight path from noise x0 (t=0) to data x1 (t=1), and its velocity."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    tt = t.reshape(t.shape + (1,) * (np.ndim(x1) - t.ndim))
    return tt * x1 + (1.0 - tt) * x0, x1 - x0


class RFHead:
    """Flow matching on linear interpolants; Euler integration from t=0 to 1."""

    name = "rf"

    def loss(self, model, obs, actions, rng: np.random.Generator) -> Tensor:
        b = actions.shape[0]
        t = rng.uniform(0.0, 1.0, b)
        x0 = rng.standard_normal(actions.shape)
        x_t, v_star = rf_interpolate(x0, actions, t)
        ctx = model.encode(obs)
        v_hat = model.denoise(ctx, Tensor(x_t), t * TIME_SCALE)
        return _sq_norm_mean(v_hat - v_star)

    def sample(self, model, obs, steps: int = DEFAULT_STEPS, rng=None) -> np.ndarray:
        if steps < 1:
            raise ValueError("need at least one sampling step")
        rng = rng if rng is not None else np.random.default_rng()
        b = obs.batch_size
        Ta, Da = model.action_shape
        ctx = model.encode(obs)
        x = rng.standard_normal((b, Ta, Da)).astype(_dtype())
        dt = 1.0 / steps
        for i in range(steps):
            v = model.denoise(ctx, Tensor(x), np.full(b, i * dt * TIME_SCALE)).data
            x = (x + dt * v).astype(_dtype())
        return np.clip(x, -1.0, 1.0)


def make_head(name: str, **kwargs):
    name = name.lower()
    if name == "bc":
        return BCHead()
    if name == "ddpm":
        return DDPMHead(**kwargs)
    if name == "beso":
        return BESOHead(**kwargs)
    if name in ("rf", "fm"):
        return RFHead()
    raise ValueError(f"unknown policy head {name!r}; valid options: {{{', '.join(HEADS)}}}")
