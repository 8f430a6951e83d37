"""Closed-form Gaussian diffusion: schedule, forward noising, posterior, sampling.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``gamma(0) == 1``.
``alpha_t`` is the per-step signal retention, ``gamma_t`` its running product.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .nn import Tensor, no_grad


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    gamma: np.ndarray
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def gamma_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.gamma[t - 1])

    def _check_t(self, t):
        if not 1 <= int(t) <= self.T:
            raise ContractError(f"timestep {t} outside [1, {self.T}]")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(d.get("kind", "linear"), int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))

    def hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode())
        h.update(self.gamma.astype("<f8").tobytes())
        return h.hexdigest()[:16]


def make_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}; only 'linear' is supported")
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    gamma = np.cumprod(alpha)
    return NoiseSchedule(T, alpha, gamma, kind, float(beta_start), float(beta_end))


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def q_sample(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(gamma_t) * x0 + sqrt(1 - gamma_t) * eps."""
    x0, eps = _arr(x0), _arr(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"q_sample: x0 shape {x0.shape} != eps shape {eps.shape}")
    g = sched.gamma_at(t)
    return (np.sqrt(g) * x0 + np.sqrt(1.0 - g) * eps).astype(x0.dtype, copy=False)


def posterior_coefficients(t: int, sched: NoiseSchedule) -> tuple[float, float, float]:
    """(coef on x0, coef on x_t, variance) of q(x_{t-1} | x_t, x_0)."""
    a = sched.alpha_at(t)
    g = sched.gamma_at(t)
    g_prev = sched.gamma_at(t - 1)
    c0 = np.sqrt(g_prev) * (1.0 - a) / (1.0 - g)
    ct = np.sqrt(a) * (1.0 - g_prev) / (1.0 - g)
    var = (1.0 - g_prev) * (1.0 - a) / (1.0 - g)
    return float(c0), float(ct), float(var)


@dataclass
class PosteriorParams:
    mean: np.ndarray
    variance: float


def posterior_params(x0, xt, t: int, sched: NoiseSchedule) -> PosteriorParams:
    c0, ct, var = posterior_coefficients(t, sched)
    return PosteriorParams(c0 * _arr(x0) + ct * _arr(xt), var)


def training_step_target(x0, sched: NoiseSchedule, rng: np.random.Generator):
    """Draw per-example t ~ U{1..T} and eps ~ N(0, I); return (xt, t, eps).

    ``x0`` is a batch (N, ...); ``t`` has shape (N,).
    """
    x0 = _arr(x0)
    n = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    g = sched.gamma[t - 1].reshape((n,) + (1,) * (x0.ndim - 1))
    xt = (np.sqrt(g) * x0 + np.sqrt(1.0 - g) * eps).astype(x0.dtype)
    return xt, t, eps


def p_sample_step(xt, t: int, model, z, sched: NoiseSchedule) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}.

    ``model(xt, t_vec)`` returns the predicted noise.  The injected noise is
    scaled by the posterior standard deviation and dropped at t == 1.
    """
    if t < 1:
        raise ContractError(f"p_sample_step needs t >= 1, got {t}")
    xt = _arr(xt)
    a = sched.alpha_at(t)
    g = sched.gamma_at(t)
    eps_hat = _arr(model(xt, np.full(xt.shape[0], t)))
    mean = (xt - (1.0 - a) / np.sqrt(1.0 - g) * eps_hat) / np.sqrt(a)
    if t == 1:
        return mean.astype(xt.dtype, copy=False)
    _, _, var = posterior_coefficients(t, sched)
    return (mean + np.sqrt(var) * _arr(z)).astype(xt.dtype, copy=False)


def model_eps_fn(model):
    """Adapt a denoiser module to the ``f(xt, t) -> ndarray`` form used by sampling."""
    def f(xt, t):
        with no_grad():
            return model(Tensor(xt), t).data
    return f


def sample(model, shape, sched: NoiseSchedule, rng: np.random.Generator, clip: bool = True,
           progress=None) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    ``model`` is either a denoiser module or a plain ``f(xt, t)`` callable.
    With ``clip`` the result is clamped to the [-1, 1] image range.
    """
    f = model if not hasattr(model, "named_parameters") else model_eps_fn(model)
    x = rng.standard_normal(shape).astype(np.float32)
    for t in range(sched.T, 0, -1):
        z = rng.standard_normal(shape).astype(np.float32) if t > 1 else np.zeros(shape, np.float32)
        x = p_sample_step(x, t, f, z, sched)
        if progress is not None:
            progress(t)
    return np.clip(x, -1.0, 1.0) if clip else x
