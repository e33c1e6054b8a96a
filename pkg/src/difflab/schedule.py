"""Noise schedules and closed-form diffusion scalars.

Timesteps run ``1..T``.  Arrays are stored with a sentinel at index 0
(``alpha_bar[0] == 1``, ``beta[0] == 0``) so ``alpha_bar[t]`` can be indexed
directly with the timestep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ScheduleError",
    "Schedule",
    "PosteriorCoeffs",
    "make_linear",
    "make_cosine",
    "make_schedule",
    "forward_sample",
    "posterior_coefficients",
]


class ScheduleError(ValueError):
    """Invalid schedule configuration."""


@dataclass(frozen=True)
class PosteriorCoeffs:
    coef_x0: float
    coef_xt: float


@dataclass(frozen=True, eq=False)
class Schedule:
    """Per-timestep scalars for a discrete diffusion process."""

    T: int
    beta: np.ndarray
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T + 1,):
            raise ScheduleError(f"beta must have length T+1={self.T + 1} (index 0 is a sentinel)")
        if np.any(beta[1:] <= 0) or np.any(beta[1:] >= 1):
            raise ScheduleError("every beta_t must lie in (0, 1)")
        beta = beta.copy()
        beta[0] = 0.0
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma2 = np.zeros_like(beta)
        coef_x0 = np.zeros_like(beta)
        coef_xt = np.zeros_like(beta)
        denom = 1.0 - alpha_bar[1:]
        sigma2[1:] = beta[1:] * (1.0 - prev[1:]) / denom
        coef_x0[1:] = np.sqrt(prev[1:]) * beta[1:] / denom
        coef_xt[1:] = np.sqrt(alpha[1:]) * (1.0 - prev[1:]) / denom
        # alpha_bar_0 = 1 makes t=1 exact; 1 - (1 - beta_1) != beta_1 in floating point
        coef_x0[1] = 1.0
        for name, arr in [("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar),
                          ("sigma2", sigma2), ("coef_x0", coef_x0), ("coef_xt", coef_xt)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    sigma2: np.ndarray = field(init=False, repr=False)
    coef_x0: np.ndarray = field(init=False, repr=False)
    coef_xt: np.ndarray = field(init=False, repr=False)

    def check_t(self, t) -> None:
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise IndexError(f"timestep out of range [1, {self.T}]: {t}")

    def sqrt_alpha_bar(self, t) -> np.ndarray:
        return np.sqrt(self.alpha_bar[t])

    def sqrt_one_minus_alpha_bar(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar[t])

    def manifest(self) -> dict:
        return {
            "kind": self.kind,
            "params": dict(self.params),
            "T": self.T,
            "beta": self.beta[1:].tolist(),
            "alpha_bar": self.alpha_bar[1:].tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.manifest(), sort_keys=True)

    @classmethod
    def from_manifest(cls, doc: dict) -> "Schedule":
        beta = np.concatenate([[0.0], np.asarray(doc["beta"], dtype=np.float64)])
        if len(beta) != doc["T"] + 1:
            raise ScheduleError("manifest beta length does not match T")
        return cls(T=int(doc["T"]), beta=beta, kind=doc.get("kind", "custom"),
                   params=dict(doc.get("params", {})))

    @classmethod
    def from_json(cls, text: str) -> "Schedule":
        return cls.from_manifest(json.loads(text))


def make_linear(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    return Schedule(T=T, beta=beta, kind="linear",
                    params={"beta_start": beta_start, "beta_end": beta_end})


def cosine_alpha_bar(T: int, s: float = 0.008) -> np.ndarray:
    """Unclipped ``alpha_bar_t = f(t)/f(0)`` for ``t = 0..T``."""
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    return f / f[0]


def make_cosine(T: int = 1000, s: float = 0.008, max_beta: float = 0.999) -> Schedule:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    ab = cosine_alpha_bar(T, s)
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    return Schedule(T=T, beta=beta, kind="cosine", params={"s": s, "max_beta": max_beta})


def make_schedule(kind: str, T: int, **kwargs) -> Schedule:
    if kind == "linear":
        return make_linear(T, **kwargs)
    if kind == "cosine":
        return make_cosine(T, **kwargs)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def _col(values: np.ndarray, x: np.ndarray) -> np.ndarray:
    # per-sample scalars -> column for (batch, d) arrays
    values = np.asarray(values)
    if values.ndim == 0 or x.ndim == 1:
        return values
    return values.reshape(-1, *([1] * (x.ndim - 1)))


def forward_sample(s: Schedule, x0, t, eps) -> np.ndarray:
    """Corrupt ``x0`` to timestep ``t``: ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` may be a scalar or one timestep per row.  ``t == 0`` is accepted and
    returns ``x0`` (clean data).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > s.T):
        raise IndexError(f"timestep out of range [0, {s.T}]")
    ab = s.alpha_bar[t]
    return _col(np.sqrt(ab), x0) * x0 + _col(np.sqrt(1.0 - ab), x0) * eps


def posterior_coefficients(s: Schedule, t: int) -> PosteriorCoeffs:
    """Weights of ``x0`` and ``x_t`` in the mean of ``q(x_{t-1} | x_t, x0)``."""
    s.check_t(t)
    return PosteriorCoeffs(float(s.coef_x0[t]), float(s.coef_xt[t]))


def posterior_mean(s: Schedule, x0_hat, x_t, t) -> np.ndarray:
    t = np.asarray(t)
    s.check_t(t)
    return _col(s.coef_x0[t], x_t) * x0_hat + _col(s.coef_xt[t], x_t) * x_t
