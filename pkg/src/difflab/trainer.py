"""Training loop: single-head and mixed (min-loss head) objectives, restricted
timestep fine-tuning, metrics, profile snapshots and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from difflab import datasets
from difflab import tensorcore as tc
from difflab.model import DenoiserModel, ModelConfig, NumericError, config_hash, decode_array, encode_array
from difflab.predictor import (
    AmplificationWarning,
    PredictionType,
    make_target,
    mixed_select,
    mixed_select_rows,
    parse_pred_type,
    recover_x0,
)
from difflab.profiler import LossProfile, profile
from difflab.schedule import Schedule, forward_sample, make_schedule
from difflab.tsampler import SamplerSpec, TimestepSampler

__all__ = [
    "ConfigError",
    "TrainingError",
    "TrainConfig",
    "StepReport",
    "Adam",
    "optimizer_step",
    "Trainer",
    "TrainResult",
    "train",
    "METRICS_HEADER",
    "CHECKPOINT_FORMAT",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "difflab.checkpoint"
CHECKPOINT_VERSION = 1
METRICS_HEADER = [
    "step", "t_min", "t_max", "loss", "loss_d", "loss_v", "loss_a",
    "selected_frac_d", "selected_frac_v", "selected_frac_a", "grad_norm", "ms_per_step",
]
MODES = ("d", "v", "a", "mixed")


class ConfigError(ValueError):
    pass


class TrainingError(FloatingPointError):
    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message if last_checkpoint is None
                         else f"{message} (last good checkpoint: {last_checkpoint})")
        self.last_checkpoint = last_checkpoint


_CONFIG_KEYS = {
    "mode", "sampler", "batch", "steps", "lr", "lr_schedule", "lr_final_frac", "restrict_range",
    "seed", "checkpoint_every", "profile_every", "profile_n_per_t", "dataset", "schedule", "model",
    "selection", "selection_space", "mixed_objective", "record_timing",
}


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    ``mode`` is one of ``d``, ``v``, ``a`` (single head) or ``mixed``.
    ``schedule`` holds keyword arguments for :func:`make_schedule`;
    ``model`` holds :class:`ModelConfig` fields other than ``heads`` and ``T``.
    """

    mode: str = "a"
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    batch: int = 128
    steps: int = 20_000
    lr: float = 1e-3
    lr_schedule: str = "constant"
    lr_final_frac: float = 0.0
    restrict_range: tuple[int, int] | None = None
    seed: int = 0
    checkpoint_every: int = 0
    profile_every: int = 0
    profile_n_per_t: int = 256
    dataset: datasets.DatasetSpec = field(default_factory=datasets.DatasetSpec)
    schedule: dict = field(default_factory=lambda: {"kind": "linear", "T": 1000})
    model: dict = field(default_factory=dict)
    selection: str = "per_sample"
    selection_space: str = "x0"
    mixed_objective: str = "selected"
    record_timing: bool = False

    def __post_init__(self):
        self.mode = str(self.mode).lower()
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")
        if self.selection not in ("per_sample", "per_batch"):
            raise ConfigError("selection must be 'per_sample' or 'per_batch'")
        if self.selection_space not in ("x0", "raw"):
            raise ConfigError("selection_space must be 'x0' or 'raw'")
        if self.mixed_objective not in ("selected", "normalized_sum"):
            raise ConfigError("mixed_objective must be 'selected' or 'normalized_sum'")
        if isinstance(self.sampler, dict):
            self.sampler = SamplerSpec.from_dict(self.sampler)
        if isinstance(self.dataset, dict):
            self.dataset = datasets.DatasetSpec(**self.dataset)
        if self.restrict_range is not None:
            lo, hi = (int(v) for v in self.restrict_range)
            if not 1 <= lo <= hi <= self.T:
                raise ConfigError(f"restrict_range [{lo}, {hi}] is not inside [1, {self.T}]")
            self.restrict_range = (lo, hi)
        bad = set(self.model) - {"data_dim", "time_embed_dim", "hidden", "zero_heads"}
        if bad:
            raise ConfigError(f"unknown model keys: {sorted(bad)}")

    @property
    def T(self) -> int:
        return int(self.schedule["T"])

    @property
    def heads(self) -> tuple[str, ...]:
        return ("d", "v", "a") if self.mode == "mixed" else (self.mode,)

    def model_config(self) -> ModelConfig:
        return ModelConfig(heads=self.heads, T=self.T, **self.model)

    def make_schedule(self) -> Schedule:
        kw = dict(self.schedule)
        return make_schedule(kw.pop("kind"), int(kw.pop("T")), **kw)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "sampler": self.sampler.to_dict(),
            "batch": self.batch,
            "steps": self.steps,
            "lr": self.lr,
            "lr_schedule": self.lr_schedule,
            "lr_final_frac": self.lr_final_frac,
            "restrict_range": None if self.restrict_range is None else list(self.restrict_range),
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "profile_every": self.profile_every,
            "profile_n_per_t": self.profile_n_per_t,
            "dataset": self.dataset.to_dict(),
            "schedule": dict(self.schedule),
            "model": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.model.items()},
            "selection": self.selection,
            "selection_space": self.selection_space,
            "mixed_objective": self.mixed_objective,
            "record_timing": self.record_timing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("restrict_range") is not None:
            d["restrict_range"] = tuple(d["restrict_range"])
        if "model" in d and "hidden" in d["model"]:
            d["model"] = {**d["model"], "hidden": tuple(d["model"]["hidden"])}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class StepReport:
    step: int
    t: np.ndarray
    head_losses: dict[PredictionType, float]
    loss: float
    selection_losses: np.ndarray | None = None
    selected: np.ndarray | None = None
    grad_norm: float = 0.0
    ms: float = 0.0
    amplified: bool = False
    head_output_grads: dict[PredictionType, np.ndarray] = field(default_factory=dict)

    def selected_frac(self, pt: PredictionType) -> float:
        if self.selected is None:
            return float("nan")
        return float(np.mean(self.selected == int(pt)))


class Adam:
    """Adam with betas (0.9, 0.999) and eps 1e-8 over a dict of parameters."""

    def __init__(self, params: dict[str, tc.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad)
                 for k, p in self.params.items()}
        state = {"t": self.t, "m": self.m, "v": self.v}
        new, state = optimizer_step({k: p.data for k, p in self.params.items()}, grads, lr, state,
                                    self.beta1, self.beta2, self.eps)
        for k, p in self.params.items():
            p.data = new[k]
        self.t, self.m, self.v = state["t"], state["m"], state["v"]

    def state_dict(self) -> dict:
        return {"t": self.t,
                "m": {k: encode_array(v) for k, v in sorted(self.m.items())},
                "v": {k: encode_array(v) for k, v in sorted(self.v.items())}}

    def load_state_dict(self, doc: dict) -> None:
        self.t = int(doc["t"])
        self.m = {k: decode_array(v) for k, v in doc["m"].items()}
        self.v = {k: decode_array(v) for k, v in doc["v"].items()}


def optimizer_step(params: dict, grads: dict, lr: float, state: dict,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update; returns ``(new_params, new_state)`` without mutating inputs."""
    t = state["t"] + 1
    m, v, out = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        m[k] = beta1 * state["m"][k] + (1.0 - beta1) * g
        v[k] = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        out[k] = p - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + eps)
    return out, {"t": t, "m": m, "v": v}


class Trainer:
    """Owns the model, optimizer, sampler and RNG substreams for one run."""

    def __init__(self, cfg: TrainConfig, model: DenoiserModel | None = None):
        self.cfg = cfg
        self.schedule = cfg.make_schedule()
        self.data = datasets.generate(cfg.dataset)
        self.rng = tc.Rng(cfg.seed)
        if model is None:
            model = DenoiserModel(cfg.model_config(), init_rng=self.rng.stream("init"))
        elif set(model.heads) != {parse_pred_type(h) for h in cfg.heads}:
            raise ConfigError(f"model heads {[h.letter for h in model.heads]} do not fit mode {cfg.mode!r}")
        self.model = model
        self.optimizer = Adam(model.params)
        self.sampler = TimestepSampler(cfg.sampler, self.schedule.T)
        self.step_count = 0
        # per-timestep count of how often each head (d, v, a) carried the loss
        self.selection_counts = np.zeros((self.schedule.T, 3), dtype=np.int64)
        self.last_checkpoint: str | None = None

    @property
    def heads(self) -> tuple[PredictionType, ...]:
        return self.model.heads

    def lr_at(self, step: int) -> float:
        cfg = self.cfg
        if cfg.lr_schedule == "constant" or cfg.steps <= 1:
            return cfg.lr
        frac = min(step, cfg.steps) / cfg.steps
        lo = cfg.lr * cfg.lr_final_frac
        return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))

    def draw_batch(self):
        cfg = self.cfg
        t = self.sampler.sample(cfg.batch, self.rng.stream("timesteps"), cfg.restrict_range)
        idx = self.rng.stream("data").integers(0, self.data.shape[0], size=cfg.batch)
        x0 = self.data[idx]
        eps = self.rng.stream("noise").standard_normal(x0.shape)
        return t, x0, eps

    def step(self) -> StepReport:
        """Draw a batch, compute head losses, backprop and apply one Adam update."""
        start = time.perf_counter()
        cfg, s, model = self.cfg, self.schedule, self.model
        t, x0, eps = self.draw_batch()
        x_t = forward_sample(s, x0, t, eps)
        model.zero_grad()
        try:
            out = model.forward(x_t, t)
        except NumericError as exc:
            raise TrainingError(f"step {self.step_count + 1}: {exc}", self.last_checkpoint) from exc
        targets = {pt: make_target(pt, s, t, x0, eps) for pt in self.heads}
        raw = {pt: ((out[pt].data - targets[pt]) ** 2).mean(axis=1) for pt in self.heads}
        head_losses = {pt: float(raw[pt].mean()) for pt in self.heads}
        amplified = False

        if cfg.mode != "mixed":
            pt = parse_pred_type(cfg.mode)
            loss = tc.mse(out[pt], targets[pt])
            selected = np.full(t.shape, int(pt))
            sel_losses = None
            reported = head_losses[pt]
            per_sample = raw[pt]
        else:
            sel_losses = np.zeros((t.size, 3))
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", AmplificationWarning)
                for pt in PredictionType:
                    if cfg.selection_space == "x0":
                        x0_hat = recover_x0(pt, s, t, x_t, out[pt].data)
                        sel_losses[:, pt] = ((x0_hat - x0) ** 2).mean(axis=1)
                    else:
                        sel_losses[:, pt] = raw[pt]
            amplified = any(issubclass(w.category, AmplificationWarning) for w in caught)
            if cfg.selection == "per_sample":
                selected = mixed_select_rows(sel_losses)
            else:
                selected = np.full(t.shape, int(mixed_select(sel_losses.mean(axis=0))))
            per_sample = sel_losses[np.arange(t.size), selected]
            reported = float(per_sample.mean())
            if cfg.mixed_objective == "selected":
                terms = [tc.mse(out[pt], targets[pt], weight=(selected == int(pt)).astype(float)[:, None])
                         for pt in PredictionType]
            else:
                terms = [tc.scale(tc.mse(out[pt], targets[pt]), 1.0 / max(head_losses[pt], 1e-300))
                         for pt in PredictionType]
            loss = terms[0]
            for term in terms[1:]:
                loss = tc.add(loss, term)

        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at step {self.step_count + 1}", self.last_checkpoint)
        loss.backward(retain=list(out.values()))
        grad_norm = math.sqrt(sum(float((p.grad**2).sum()) for p in model.params.values()
                                  if p.grad is not None))
        head_grads = {pt: (np.zeros_like(out[pt].data) if out[pt].grad is None else out[pt].grad)
                      for pt in self.heads}
        self.optimizer.step(self.lr_at(self.step_count))
        self.step_count += 1
        np.add.at(self.selection_counts, (t - 1, selected), 1)
        self.sampler.observe(t, per_sample)
        self.sampler.maybe_refresh(self.step_count)
        return StepReport(
            step=self.step_count, t=t, head_losses=head_losses, loss=reported,
            selection_losses=sel_losses, selected=selected, grad_norm=grad_norm,
            ms=(time.perf_counter() - start) * 1e3, amplified=amplified,
            head_output_grads=head_grads,
        )

    def metrics_row(self, r: StepReport) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        row = [str(r.step), str(int(r.t.min())), str(int(r.t.max())), fmt(r.loss)]
        row += [fmt(r.head_losses.get(pt)) for pt in PredictionType]
        row += [fmt(r.selected_frac(pt)) for pt in PredictionType]
        row += [fmt(r.grad_norm), fmt(r.ms) if self.cfg.record_timing else ""]
        return row

    def profile(self, pred_type=None, error_space: str = "target", n_per_t: int | None = None,
                seed: int | None = None) -> LossProfile:
        pt = parse_pred_type(pred_type) if pred_type is not None else self.heads[-1]
        gen = tc.Rng(self.cfg.seed if seed is None else seed).stream("profile")
        return profile(self.model, self.data, self.schedule, pt, error_space,
                       n_per_t or self.cfg.profile_n_per_t, gen,
                       model_id=self.model.arch_hash()[:12], dataset_id=self.cfg.dataset.id)

    # -- checkpoints ---------------------------------------------------

    def checkpoint(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "arch_hash": self.model.arch_hash(),
            "model": self.model.config.to_dict(),
            "params": self.model.encode_params(),
            "schedule": self.schedule.manifest(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.get_state(),
            "sampler": self.sampler.get_state(),
            "step": self.step_count,
            "selection_counts": self.selection_counts.tolist(),
        }

    def save(self, path) -> str:
        path = str(path)
        Path(path).write_text(json.dumps(self.checkpoint(), sort_keys=True), encoding="utf-8")
        self.last_checkpoint = path
        return path

    @classmethod
    def resume(cls, doc: dict) -> "Trainer":
        """Rebuild a trainer that continues bit-identically from ``doc``."""
        cfg = TrainConfig.from_dict(doc["config"])
        if cfg.hash() != doc["config_hash"]:
            raise ConfigError("checkpoint config hash does not match its config")
        tr = cls(cfg, model=model_from_checkpoint(doc))
        tr.optimizer.load_state_dict(doc["optimizer"])
        tr.rng = tc.Rng.from_state(doc["rng"])
        tr.sampler.set_state(doc["sampler"])
        tr.step_count = int(doc["step"])
        tr.selection_counts = np.asarray(doc["selection_counts"], dtype=np.int64)
        return tr

    @classmethod
    def finetune_from(cls, doc: dict, cfg: TrainConfig, keep_optimizer: bool = True) -> "Trainer":
        """New run from checkpointed weights under a different config."""
        model = model_from_checkpoint(doc)
        if model.config != cfg.model_config():
            raise ConfigError("fine-tune config describes a different architecture than the checkpoint")
        tr = cls(cfg, model=model)
        if keep_optimizer:
            tr.optimizer.load_state_dict(doc["optimizer"])
        tr.selection_counts = np.asarray(doc["selection_counts"], dtype=np.int64)
        return tr


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    return doc


def model_from_checkpoint(doc: dict) -> DenoiserModel:
    mc = ModelConfig.from_dict(doc["model"])
    model = DenoiserModel.from_encoded(mc, doc["params"])
    if model.arch_hash() != doc["arch_hash"]:
        raise ConfigError("checkpoint architecture hash mismatch")
    return model


@dataclass
class TrainResult:
    trainer: Trainer
    checkpoint: str | None
    metrics_path: str | None
    reports: list[StepReport]
    profiles: dict[int, LossProfile]


def train(cfg: TrainConfig, outdir=None, trainer: Trainer | None = None,
          keep_reports: bool = False) -> TrainResult:
    """Run ``cfg.steps`` steps, writing metrics, profiles and checkpoints to ``outdir``.

    With ``outdir=None`` nothing is written.  The metrics CSV is a pure
    function of the config unless ``record_timing`` is set.
    """
    tr = trainer or Trainer(cfg)
    out = None if outdir is None else Path(outdir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
    reports: list[StepReport] = []
    profiles: dict[int, LossProfile] = {}
    fh = writer = None
    metrics_path = None
    if out is not None:
        metrics_path = str(out / "metrics.csv")
        fh = open(metrics_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    try:
        for _ in range(cfg.steps):
            r = tr.step()
            if keep_reports:
                reports.append(r)
            if writer is not None:
                writer.writerow(tr.metrics_row(r))
            if cfg.profile_every and tr.step_count % cfg.profile_every == 0:
                prof = tr.profile()
                profiles[tr.step_count] = prof
                if out is not None:
                    (out / "profiles").mkdir(exist_ok=True)
                    prof.to_csv(out / "profiles" / f"profile_{tr.step_count:07d}.csv")
            if out is not None and cfg.checkpoint_every and tr.step_count % cfg.checkpoint_every == 0:
                tr.save(out / "checkpoints" / f"checkpoint_{tr.step_count:07d}.json")
    finally:
        if fh is not None:
            fh.close()
    ckpt = None
    if out is not None:
        ckpt = tr.save(out / "checkpoint.json")
        if cfg.mode == "mixed":
            write_selection_table(tr.selection_counts, out / "selection_counts.csv")
    return TrainResult(tr, ckpt, metrics_path, reports, profiles)


def write_selection_table(counts: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "count_d", "count_v", "count_a"])
        for i, row in enumerate(counts):
            w.writerow([i + 1, *(int(c) for c in row)])
