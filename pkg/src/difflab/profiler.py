"""Per-timestep loss profiles and the equal-cumulative-loss slot partition."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from difflab.predictor import PredictionType, make_target, parse_pred_type, recover_x0
from difflab.schedule import Schedule, forward_sample

__all__ = [
    "ProfileError",
    "NonFiniteProfileError",
    "LossProfile",
    "SlotPartition",
    "ProfileDiff",
    "ERROR_SPACES",
    "profile",
    "compute_slots",
    "diff_profiles",
    "MIN_SAMPLES",
]

MIN_SAMPLES = 256
ERROR_SPACES = ("target", "x0")
PROFILE_HEADER = ["t", "mean", "stderr", "count"]


class ProfileError(ValueError):
    pass


class NonFiniteProfileError(ProfileError, FloatingPointError):
    """The model produced NaN or inf while being profiled."""


@dataclass
class LossProfile:
    """Mean squared error (summed over data dimensions) for each timestep.

    Arrays are indexed by ``t - 1``.
    """

    pred_type: PredictionType
    error_space: str
    mean: np.ndarray
    stderr: np.ndarray
    count: np.ndarray
    model_id: str = ""
    dataset_id: str = ""

    def __post_init__(self):
        self.pred_type = parse_pred_type(self.pred_type)
        if self.error_space not in ERROR_SPACES:
            raise ProfileError(f"error_space must be one of {ERROR_SPACES}")
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.stderr = np.asarray(self.stderr, dtype=np.float64)
        self.count = np.asarray(self.count, dtype=np.int64)
        if not (self.mean.shape == self.stderr.shape == self.count.shape):
            raise ProfileError("mean, stderr and count must have the same length")
        if np.any(self.mean < 0):
            raise ProfileError("profile means must be nonnegative")

    @property
    def T(self) -> int:
        return self.mean.size

    @classmethod
    def from_means(cls, means, pred_type=PredictionType.A, error_space="target",
                   count: int = MIN_SAMPLES) -> "LossProfile":
        means = np.asarray(means, dtype=np.float64)
        return cls(pred_type, error_space, means, np.zeros_like(means),
                   np.full(means.shape, count))

    def usable(self, min_samples: int = MIN_SAMPLES) -> bool:
        return bool(np.all(self.count >= min_samples))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PROFILE_HEADER)
            for i in range(self.T):
                w.writerow([i + 1, repr(float(self.mean[i])), repr(float(self.stderr[i])),
                            int(self.count[i])])

    @classmethod
    def from_csv(cls, path, pred_type=PredictionType.A, error_space="target") -> "LossProfile":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != PROFILE_HEADER:
                raise ProfileError(f"unexpected profile header {header}")
            rows = [r for r in reader if r]
        ts = [int(r[0]) for r in rows]
        if ts != list(range(1, len(rows) + 1)):
            raise ProfileError("profile rows must list t = 1..T in order")
        return cls(pred_type, error_space,
                   np.array([float(r[1]) for r in rows]),
                   np.array([float(r[2]) for r in rows]),
                   np.array([int(r[3]) for r in rows]))


@dataclass(frozen=True)
class SlotPartition:
    bounds: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple((int(lo), int(hi)) for lo, hi in self.bounds))
        if not self.bounds or self.bounds[0][0] != 1:
            raise ProfileError("partition must start at t = 1")
        for lo, hi in self.bounds:
            if hi < lo:
                raise ProfileError(f"empty slot [{lo}, {hi}]")
        for (_, a_hi), (b_lo, _) in zip(self.bounds, self.bounds[1:]):
            if b_lo != a_hi + 1:
                raise ProfileError("slots must be contiguous and non-overlapping")

    @property
    def n_slots(self) -> int:
        return len(self.bounds)

    @property
    def T(self) -> int:
        return self.bounds[-1][1]

    @property
    def widths(self) -> list[int]:
        return [hi - lo + 1 for lo, hi in self.bounds]

    def slot_of(self, t: int) -> int:
        for i, (lo, hi) in enumerate(self.bounds):
            if lo <= t <= hi:
                return i
        raise IndexError(t)

    def to_json(self) -> str:
        return json.dumps({"n_slots": self.n_slots, "bounds": [list(b) for b in self.bounds]})

    @classmethod
    def from_json(cls, text: str) -> "SlotPartition":
        doc = json.loads(text)
        part = cls(tuple(tuple(b) for b in doc["bounds"]))
        if doc.get("n_slots", part.n_slots) != part.n_slots:
            raise ProfileError("n_slots does not match the number of bounds")
        return part


def profile(model, data: np.ndarray, schedule: Schedule, pred_type, error_space: str = "target",
            n_per_t: int = MIN_SAMPLES, gen: np.random.Generator | None = None,
            model_id: str = "", dataset_id: str = "") -> LossProfile:
    """Measure the per-timestep squared error of one head of ``model``.

    ``model`` needs a ``predict(x_t, t) -> {PredictionType: array}`` method.
    Every timestep gets ``n_per_t`` fresh ``(x0, eps)`` pairs drawn from
    ``gen``; the error is ``||target - pred||^2`` in the head's own target
    space or ``||x0 - x0_hat||^2`` in data space.
    """
    if n_per_t < 1:
        raise ProfileError("n_per_t must be >= 1")
    if error_space not in ERROR_SPACES:
        raise ProfileError(f"error_space must be one of {ERROR_SPACES}")
    pt = parse_pred_type(pred_type)
    if gen is None:
        gen = np.random.default_rng(0)
    T, d = schedule.T, data.shape[1]
    means = np.zeros(T)
    stderr = np.zeros(T)
    # bounded memory: a block of timesteps at a time, drawn in t order
    block = max(1, 65536 // n_per_t)
    for start in range(1, T + 1, block):
        ts = np.arange(start, min(start + block, T + 1))
        idx = gen.integers(0, data.shape[0], size=(ts.size, n_per_t))
        eps = gen.standard_normal((ts.size, n_per_t, d))
        x0 = data[idx].reshape(-1, d)
        eps = eps.reshape(-1, d)
        t_rows = np.repeat(ts, n_per_t)
        x_t = forward_sample(schedule, x0, t_rows, eps)
        pred = model.predict(x_t, t_rows)[pt]
        if not np.all(np.isfinite(pred)):
            bad = int(t_rows[np.argwhere(~np.isfinite(pred))[0, 0]])
            raise NonFiniteProfileError(f"non-finite model output at t={bad}")
        if error_space == "target":
            err = ((pred - make_target(pt, schedule, t_rows, x0, eps)) ** 2).sum(axis=1)
        else:
            err = ((recover_x0(pt, schedule, t_rows, x_t, pred) - x0) ** 2).sum(axis=1)
        err = err.reshape(ts.size, n_per_t)
        means[ts - 1] = err.mean(axis=1)
        if n_per_t > 1:
            stderr[ts - 1] = err.std(axis=1, ddof=1) / np.sqrt(n_per_t)
    return LossProfile(pt, error_space, means, stderr, np.full(T, n_per_t),
                       model_id=model_id, dataset_id=dataset_id)


def compute_slots(p: LossProfile, n_slots: int, min_samples: int = MIN_SAMPLES,
                  rtol: float = 1e-12) -> SlotPartition:
    """Split ``[1, T]`` into ``n_slots`` ranges carrying equal total loss.

    Slot ``k`` ends at the first timestep where the running sum of means
    reaches ``k * total / n_slots``; the last slot takes the remainder.  A
    boundary is pushed forward when an earlier one already used that
    timestep, and pulled back when later slots would otherwise be empty.
    """
    if not p.usable(min_samples):
        raise ProfileError(f"profile has timesteps with fewer than {min_samples} samples")
    T = p.T
    if n_slots < 1 or n_slots > T:
        raise ProfileError(f"n_slots must be in [1, T={T}]")
    if n_slots > int(np.count_nonzero(p.mean > 0)):
        raise ProfileError("more slots than timesteps with nonzero loss")
    cum = np.cumsum(p.mean)
    total = cum[-1]
    tol = rtol * total
    ends = []
    prev = 0
    for k in range(1, n_slots):
        crossing = int(np.searchsorted(cum, k * total / n_slots - tol, side="left")) + 1
        end = min(max(crossing, prev + 1), T - (n_slots - k))
        ends.append(end)
        prev = end
    ends.append(T)
    starts = [1] + [e + 1 for e in ends[:-1]]
    return SlotPartition(tuple(zip(starts, ends)))


@dataclass
class ProfileDiff:
    """``after - before`` per timestep, with optional per-slot summaries."""

    delta: np.ndarray
    slot_mean: list[float] = field(default_factory=list)
    slot_stderr: list[float] = field(default_factory=list)
    partition: SlotPartition | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "delta", "slot"])
            for i, dv in enumerate(self.delta):
                slot = "" if self.partition is None else self.partition.slot_of(i + 1) + 1
                w.writerow([i + 1, repr(float(dv)), slot])


def diff_profiles(a: LossProfile, b: LossProfile, partition: SlotPartition | None = None) -> ProfileDiff:
    if a.T != b.T or a.pred_type != b.pred_type or a.error_space != b.error_space:
        raise ProfileError("profiles differ in T, prediction type or error space")
    delta = b.mean - a.mean
    out = ProfileDiff(delta=delta, partition=partition)
    if partition is not None:
        if partition.T != a.T:
            raise ProfileError("partition does not cover the profile's timesteps")
        for lo, hi in partition.bounds:
            seg = delta[lo - 1:hi]
            out.slot_mean.append(float(seg.mean()))
            out.slot_stderr.append(float(seg.std(ddof=1) / np.sqrt(seg.size)) if seg.size > 1 else 0.0)
    return out
