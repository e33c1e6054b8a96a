"""Ancestral reverse sampling, the x0-replacement ablation and sample metrics.

The reverse chain runs t = T..1. At each step the model's prediction is
turned into an x0 estimate, clamped to a box around the data, optionally
replaced by a known clean sample, and fed through the posterior mean.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .predictor import PredictionType, parse_pred_type, recover_x0, mixed_select_rows
from .schedule import Schedule, forward_sample, posterior_coefficients

log = logging.getLogger(__name__)

# x0 estimates are clipped to [-B, B] with B = CLAMP_FACTOR * data max-norm
CLAMP_FACTOR = 1.5
SAMPLES_HEADER = ["x", "y"]
ABLATION_HEADER = ["range_lo", "range_hi", "trials", "mean_mse", "stderr"]


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class AblationSpec:
    """Replace x0 estimates by ``oracle_x0`` for t inside ``range``.

    ``range=None`` is the empty range (no replacement).
    """

    range: tuple[int, int] | None = None
    oracle_x0: np.ndarray | None = None

    def __post_init__(self):
        if self.range is not None:
            lo, hi = (int(v) for v in self.range)
            if lo > hi:
                raise InferenceError(f"ablation range [{lo}, {hi}] has lo > hi")
            if self.oracle_x0 is None:
                raise InferenceError("ablation range given without an oracle x0")
            object.__setattr__(self, "range", (lo, hi))

    def check(self, T: int) -> None:
        if self.range is not None and not (1 <= self.range[0] and self.range[1] <= T):
            raise InferenceError(f"ablation range {list(self.range)} outside [1, {T}]")

    def active(self, t: int) -> bool:
        return self.range is not None and self.range[0] <= t <= self.range[1]


NO_ABLATION = AblationSpec()


@dataclass
class StepRecord:
    t: int
    x_t: np.ndarray
    x0_hat: np.ndarray
    replaced: bool


@dataclass
class Trajectory:
    x_T: np.ndarray
    steps: list[StepRecord] = field(default_factory=list)
    x0: np.ndarray | None = None

    def to_json(self) -> str:
        return json.dumps({
            "x_T": self.x_T.tolist(),
            "steps": [{"t": r.t, "x_t": r.x_t.tolist(), "x0_hat": r.x0_hat.tolist(),
                       "replaced": r.replaced} for r in self.steps],
            "x0": None if self.x0 is None else self.x0.tolist(),
        })


@dataclass
class ClampMonitor:
    """Counts trajectory steps (one row at one t) where the x0 clamp changed a value.

    ``by_t`` maps t to the number of clamped rows at that step.
    """

    steps: int = 0
    active: int = 0
    by_t: dict = field(default_factory=dict)

    @property
    def active_fraction(self) -> float:
        return self.active / self.steps if self.steps else 0.0


def head_table(counts, heads) -> np.ndarray:
    """Per-timestep head for mixed inference: the head selected most often in training.

    ``counts`` is the (T, 3) selection table. Ties, including timesteps never
    seen, follow the training priority; heads the model lacks never win.
    """
    counts = np.asarray(counts, dtype=np.float64)
    have = np.zeros(3, dtype=bool)
    have[[int(h) for h in heads]] = True
    # missing heads score above every real head (real scores are <= 0)
    score = np.where(have, -counts, 1.0)
    return mixed_select_rows(score)


def _resolve_head(model, pt, t: int, table) -> PredictionType:
    if isinstance(pt, str) and pt.lower() == "mixed":
        if table is None:
            raise InferenceError("mixed inference needs a head table from training")
        return PredictionType(int(table[t - 1]))
    pt = parse_pred_type(pt)
    if pt not in model.heads:
        raise InferenceError(f"model has no {pt.letter} head")
    return pt


def reverse_step(model, s: Schedule, pt, x_t, t: int, gen: np.random.Generator,
                 ab: AblationSpec = NO_ABLATION, table=None, bound: float = CLAMP_FACTOR,
                 monitor: ClampMonitor | None = None):
    """One ancestral step from ``x_t`` to ``x_{t-1}``.

    Returns ``(x_prev, x0_hat, replaced)``. When the step is replaced the
    model is not evaluated at all.
    """
    s.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    replaced = ab.active(t)
    if replaced:
        x0_hat = np.broadcast_to(np.asarray(ab.oracle_x0, dtype=np.float64), x_t.shape).copy()
    else:
        head = _resolve_head(model, pt, t, table)
        y = model.predict(x_t, np.full(x_t.shape[0], t))[head]
        x0_hat = recover_x0(head, s, t, x_t, y)
        clipped = np.clip(x0_hat, -bound, bound)
        rows = int(np.any(clipped != x0_hat, axis=-1).sum())
        if monitor is not None:
            monitor.steps += x_t.shape[0]
        if rows:
            log.debug("x0 clamp active at t=%d on %d rows", t, rows)
            if monitor is not None:
                monitor.active += rows
                monitor.by_t[t] = rows
            x0_hat = clipped
    c = posterior_coefficients(s, t)
    mean = c.coef_x0 * x0_hat + c.coef_xt * x_t
    if t == 1:
        return mean, x0_hat, replaced
    z = gen.standard_normal(x_t.shape)
    return mean + np.sqrt(s.sigma2[t]) * z, x0_hat, replaced


def run_chain(model, s: Schedule, pt, x_T, gen: np.random.Generator, ab: AblationSpec = NO_ABLATION,
              table=None, bound: float = CLAMP_FACTOR, monitor: ClampMonitor | None = None,
              record: bool = False):
    """Denoise ``x_T`` down to an x0 estimate. Returns ``(x0, trajectory or None)``."""
    ab.check(s.T)
    x = np.asarray(x_T, dtype=np.float64)
    traj = Trajectory(x.copy()) if record else None
    for t in range(s.T, 0, -1):
        x_prev, x0_hat, replaced = reverse_step(model, s, pt, x, t, gen, ab, table, bound, monitor)
        if record:
            traj.steps.append(StepRecord(t, x.copy(), x0_hat, replaced))
        x = x_prev
    if record:
        traj.x0 = x.copy()
    return x, traj


def generate(model, s: Schedule, pt, n: int, gen: np.random.Generator, table=None,
             bound: float = CLAMP_FACTOR, monitor: ClampMonitor | None = None) -> np.ndarray:
    """Draw ``n`` samples by running the reverse chain from pure noise."""
    dim = model.config.data_dim
    if n == 0:
        return np.empty((0, dim))
    if n < 0:
        raise InferenceError("n must be >= 0")
    x_T = gen.standard_normal((n, dim))
    x0, _ = run_chain(model, s, pt, x_T, gen, table=table, bound=bound, monitor=monitor)
    if monitor is not None and monitor.active:
        log.info("x0 clamp was active in %d of %d trajectory steps", monitor.active, monitor.steps)
    return x0


@dataclass
class AblationResult:
    ranges: list[tuple[int, int] | None]
    per_trial: np.ndarray  # (n_ranges, trials)

    @property
    def mean(self) -> np.ndarray:
        return self.per_trial.mean(axis=1)

    @property
    def stderr(self) -> np.ndarray:
        k = self.per_trial.shape[1]
        if k < 2:
            return np.zeros(len(self.ranges))
        return self.per_trial.std(axis=1, ddof=1) / np.sqrt(k)

    def paired_diff(self, i: int, j: int) -> tuple[float, float]:
        """Mean and standard error of per-trial MSE(i) - MSE(j); trials share noise."""
        d = self.per_trial[i] - self.per_trial[j]
        se = d.std(ddof=1) / np.sqrt(d.size) if d.size > 1 else 0.0
        return float(d.mean()), float(se)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_HEADER)
            for r, m, se in zip(self.ranges, self.mean, self.stderr):
                lo, hi = ("", "") if r is None else r
                w.writerow([lo, hi, self.per_trial.shape[1], repr(float(m)), repr(float(se))])


def ablate_reconstruction(model, s: Schedule, pt, x0_star, ranges, trials: int, seed: int,
                          table=None, bound: float = CLAMP_FACTOR) -> AblationResult:
    """Corrupt ``x0_star`` to t=T, denoise with x0 replaced inside each range, score the MSE.

    Every range sees the same forward noise and the same reverse noise
    (common random numbers), so differences between ranges come from the
    replacement alone. ``x0_star`` holds one clean point per row; each trial
    reconstructs all of them and scores their mean squared error.
    """
    x0_star = np.atleast_2d(np.asarray(x0_star, dtype=np.float64))
    if trials < 1:
        raise InferenceError("trials must be >= 1")
    ranges = [None if r is None or len(r) == 0 else (int(r[0]), int(r[1])) for r in ranges]
    m = x0_star.shape[0]
    oracle = np.tile(x0_star, (trials, 1))
    per_trial = np.zeros((len(ranges), trials))
    for i, r in enumerate(ranges):
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0xAB1A7E,))))
        eps = gen.standard_normal(oracle.shape)
        x_T = forward_sample(s, oracle, s.T, eps)
        ab = AblationSpec(r, oracle) if r is not None else NO_ABLATION
        x0, _ = run_chain(model, s, pt, x_T, gen, ab, table, bound)
        err = ((x0 - oracle) ** 2).mean(axis=1).reshape(trials, m)
        per_trial[i] = err.mean(axis=1)
    return AblationResult(ranges, per_trial)


def _mean_dist(a: np.ndarray, b: np.ndarray, chunk: int) -> float:
    total = 0.0
    for i in range(0, a.shape[0], chunk):
        total += cdist(a[i:i + chunk], b).sum()
    return total / (a.shape[0] * b.shape[0])


def energy_distance(a, b, chunk: int = 1024) -> float:
    """Energy distance 2E|A-B| - E|A-A'| - E|B-B'| between two empirical sets (V-statistic)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InferenceError("energy distance needs two nonempty sets")
    d = 2 * _mean_dist(a, b, chunk) - _mean_dist(a, a, chunk) - _mean_dist(b, b, chunk)
    # the V-statistic is a squared norm; only rounding can push it below zero
    return max(d, 0.0)


def write_samples_csv(samples: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLES_HEADER)
        for row in np.asarray(samples):
            w.writerow([repr(float(v)) for v in row])
