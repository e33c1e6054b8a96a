"""Timestep samplers: uniform, weighted, loss-adaptive and slot-stratified.

Samplers only ever consume the generator they are handed; the trainer gives
them the ``"timesteps"`` substream so the noise stream is unaffected by the
choice of sampler.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SamplerError",
    "SamplerSpec",
    "TimestepSampler",
    "sample_timesteps",
    "refresh_adaptive",
    "late_heavy_weights",
    "load_weights_csv",
    "tv_distance",
]

log = logging.getLogger(__name__)

KINDS = ("uniform", "weighted", "loss_adaptive", "slot_stratified")


class SamplerError(ValueError):
    pass


@dataclass
class SamplerSpec:
    """Sampler configuration.

    ``weights`` are indexed by timestep minus one (length ``T``).
    ``partition`` is a list of inclusive ``(lo, hi)`` ranges.
    """

    kind: str = "uniform"
    weights: np.ndarray | None = None
    partition: list[tuple[int, int]] | None = None
    adapt_period: int = 1000
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SamplerError(f"unknown sampler kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "weighted":
            if self.weights is None:
                raise SamplerError("weighted sampler needs weights")
            self.weights = _normalize(self.weights)
        if self.kind == "slot_stratified":
            if not self.partition:
                raise SamplerError("slot_stratified sampler needs a partition")
            self.partition = [(int(lo), int(hi)) for lo, hi in self.partition]
            for lo, hi in self.partition:
                if hi < lo:
                    raise SamplerError(f"empty slot [{lo}, {hi}]")
        if self.kind == "loss_adaptive" and self.adapt_period < 1:
            raise SamplerError("adapt_period must be >= 1")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "adapt_period": self.adapt_period, "gamma": self.gamma}
        if self.weights is not None:
            d["weights"] = [float(w) for w in self.weights]
        if self.partition is not None:
            d["partition"] = [list(b) for b in self.partition]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerSpec":
        d = dict(d)
        if d.get("weights") is not None:
            d["weights"] = np.asarray(d["weights"], dtype=np.float64)
        if d.get("partition") is not None:
            d["partition"] = [tuple(b) for b in d["partition"]]
        return cls(**d)


def _normalize(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise SamplerError("weights must be a finite nonnegative vector")
    total = w.sum()
    if total <= 0:
        raise SamplerError("weights sum to zero")
    return w / total


def late_heavy_weights(T: int) -> np.ndarray:
    """Linear ramp putting the most mass near t = T."""
    return _normalize(np.arange(1, T + 1, dtype=np.float64))


def load_weights_csv(path, T: int) -> np.ndarray:
    """Read a ``t,weight`` table; timesteps not listed get weight zero."""
    w = np.zeros(T)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            t = int(row["t"])
            if not 1 <= t <= T:
                raise SamplerError(f"timestep {t} outside [1, {T}] in {path}")
            w[t - 1] = float(row["weight"])
    return _normalize(w)


def refresh_adaptive(spec: SamplerSpec, means, gamma: float | None = None) -> SamplerSpec:
    """Loss-adaptive weights ``~ mean_loss_t ** gamma``.

    ``means`` is a per-timestep mean loss array (or anything with a ``mean``
    attribute, e.g. a loss profile).  An all-zero profile falls back to
    uniform weights.
    """
    if hasattr(means, "mean") and not isinstance(means, np.ndarray):
        means = means.mean
    means = np.asarray(means, dtype=np.float64)
    g = spec.gamma if gamma is None else gamma
    if np.any(means < 0) or not np.all(np.isfinite(means)):
        raise SamplerError("profile means must be finite and nonnegative")
    if not np.any(means > 0):
        log.warning("all-zero loss profile; falling back to uniform timestep weights")
        w = np.full(means.shape, 1.0 / means.size)
    elif g == 0:
        w = np.full(means.shape, 1.0 / means.size)
    else:
        w = _normalize(means**g)
    return SamplerSpec(kind="loss_adaptive", weights=w, adapt_period=spec.adapt_period, gamma=g)


class TimestepSampler:
    """Stateful sampler: holds the slot cursor and the adaptive weights."""

    def __init__(self, spec: SamplerSpec, T: int):
        self.spec = spec
        self.T = T
        self.cursor = 0
        self.weights: np.ndarray | None = None
        if spec.kind == "weighted":
            if len(spec.weights) != T:
                raise SamplerError(f"weights have length {len(spec.weights)}, expected T={T}")
            self.weights = spec.weights
        elif spec.kind == "loss_adaptive":
            self.weights = spec.weights if spec.weights is not None else np.full(T, 1.0 / T)
        elif spec.kind == "slot_stratified":
            bounds = spec.partition
            if bounds[0][0] != 1 or bounds[-1][1] != T or any(
                    b[0] != a[1] + 1 for a, b in zip(bounds, bounds[1:])):
                raise SamplerError("partition must cover [1, T] contiguously")
        # running per-t loss statistics feeding the adaptive refresh
        self._loss_sum = np.zeros(T)
        self._loss_count = np.zeros(T)
        self._calls = 0

    @property
    def n_slots(self) -> int:
        return len(self.spec.partition or ())

    def target_distribution(self, restrict: tuple[int, int] | None = None) -> np.ndarray:
        """Marginal probability of each timestep for the iid kinds."""
        if self.spec.kind == "uniform":
            p = np.full(self.T, 1.0 / self.T)
        elif self.spec.kind in ("weighted", "loss_adaptive"):
            p = self.weights
        else:
            raise SamplerError("slot_stratified draws are not iid")
        if restrict is not None:
            lo, hi = restrict
            p = p.copy()
            p[: lo - 1] = 0.0
            p[hi:] = 0.0
            if p.sum() <= 0:
                raise SamplerError(f"no sampling mass inside range [{lo}, {hi}]")
            p = p / p.sum()
        return p

    def sample(self, batch: int, gen: np.random.Generator,
               restrict: tuple[int, int] | None = None) -> np.ndarray:
        """Draw ``batch`` timesteps in ``[1, T]``.

        With ``restrict`` the iid kinds draw from their distribution
        conditioned on the range; the stratified kind stratifies over the
        slots clipped to the range.
        """
        if batch < 1:
            raise SamplerError("batch must be >= 1")
        if restrict is not None:
            lo, hi = restrict
            if not 1 <= lo <= hi <= self.T:
                raise SamplerError(f"restrict range [{lo}, {hi}] outside [1, {self.T}]")
        self._calls += 1
        kind = self.spec.kind
        if kind == "slot_stratified":
            return self._stratified(batch, gen, restrict)
        if kind == "uniform":
            lo, hi = restrict if restrict is not None else (1, self.T)
            return gen.integers(lo, hi + 1, size=batch)
        p = self.target_distribution(restrict)
        return 1 + _categorical(gen, p, batch)

    def _stratified(self, batch, gen, restrict):
        bounds = self.spec.partition
        if restrict is not None:
            # clip the partition to the range; slots outside it drop out
            lo, hi = restrict
            bounds = [(max(a, lo), min(b, hi)) for a, b in bounds if b >= lo and a <= hi]
        return self._stratified_once(batch, gen, bounds)

    def _stratified_once(self, batch, gen, bounds) -> np.ndarray:
        n = len(bounds)
        k, r = divmod(batch, n)
        slots = np.repeat(np.arange(n), k)
        if r:
            extra = (self.cursor + np.arange(r)) % n
            self.cursor = int((self.cursor + r) % n)
            slots = np.concatenate([slots, extra])
        lo = np.array([b[0] for b in bounds])[slots]
        hi = np.array([b[1] for b in bounds])[slots]
        return lo + np.floor(gen.random(slots.size) * (hi - lo + 1)).astype(np.int64)

    # -- loss-adaptive bookkeeping ------------------------------------

    def observe(self, t, losses) -> None:
        """Record per-sample losses seen during training."""
        np.add.at(self._loss_sum, np.asarray(t) - 1, np.asarray(losses, dtype=np.float64))
        np.add.at(self._loss_count, np.asarray(t) - 1, 1.0)

    def running_means(self) -> np.ndarray:
        seen = self._loss_count > 0
        means = np.zeros(self.T)
        means[seen] = self._loss_sum[seen] / self._loss_count[seen]
        if seen.any():
            means[~seen] = means[seen].mean()
        return means

    def maybe_refresh(self, step: int) -> bool:
        if self.spec.kind != "loss_adaptive" or step % self.spec.adapt_period:
            return False
        self.spec = refresh_adaptive(self.spec, self.running_means())
        self.weights = self.spec.weights
        return True

    def get_state(self) -> dict:
        return {
            "cursor": self.cursor,
            "weights": None if self.weights is None else [float(w) for w in self.weights],
            "loss_sum": [float(v) for v in self._loss_sum],
            "loss_count": [float(v) for v in self._loss_count],
        }

    def set_state(self, state: dict) -> None:
        self.cursor = int(state["cursor"])
        if state.get("weights") is not None:
            self.weights = np.asarray(state["weights"], dtype=np.float64)
            if self.spec.kind == "loss_adaptive":
                self.spec.weights = self.weights
        self._loss_sum = np.asarray(state["loss_sum"], dtype=np.float64)
        self._loss_count = np.asarray(state["loss_count"], dtype=np.float64)


def _categorical(gen: np.random.Generator, p: np.ndarray, size: int) -> np.ndarray:
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, gen.random(size), side="right")
    return np.minimum(idx, p.size - 1)


def sample_timesteps(sampler: TimestepSampler, batch: int, gen: np.random.Generator,
                     restrict: tuple[int, int] | None = None) -> np.ndarray:
    return sampler.sample(batch, gen, restrict)


def tv_distance(samples, p: np.ndarray) -> float:
    """Total-variation distance between empirical timestep frequencies and ``p``."""
    counts = np.bincount(np.asarray(samples) - 1, minlength=p.size).astype(np.float64)
    return 0.5 * float(np.abs(counts / counts.sum() - p).sum())
