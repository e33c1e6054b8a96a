"""Command line entry point: one subcommand per experiment, CSV/JSON outputs plus manifests.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
Relative output paths resolve against ``$DIFFLAB_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensorcore as tc
from .datasets import DatasetError, DatasetSpec, generate as generate_data
from .inference import (
    ClampMonitor,
    InferenceError,
    ablate_reconstruction,
    energy_distance,
    generate,
    head_table,
    write_samples_csv,
)
from .model import ModelError, NumericError
from .predictor import MixedSelectionError, parse_pred_type
from .profiler import (
    LossProfile,
    NonFiniteProfileError,
    ProfileError,
    SlotPartition,
    compute_slots,
    diff_profiles,
)
from .schedule import Schedule, ScheduleError, make_schedule
from .tsampler import SamplerError
from .trainer import (
    ConfigError,
    TrainConfig,
    Trainer,
    TrainingError,
    load_checkpoint,
    model_from_checkpoint,
    train,
)

log = logging.getLogger("difflab")

SCHEMA_VERSION = 1
CSV_SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "DIFFLAB_OUTPUT_ROOT"
EXPERIMENT_KEYS = {"schema_version", "outdir", "train"}
COEFF_HEADER = ["t", "beta", "alpha_bar", "coef_x0", "coef_xt", "sigma2"]
SLOT_SUMMARY_HEADER = ["slot", "lo", "hi", "mean_delta_target", "stderr_target",
                       "mean_delta_x0", "stderr_x0"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# -- paths, hashing, manifests -----------------------------------------

def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def input_path(p, what: str) -> Path:
    p = Path(p)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def git_blob_hash(path) -> str:
    """Content hash computed the way git hashes a blob."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(path: Path, command: str, args: dict, inputs: list, outputs: list,
                   seeds: dict | None = None) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "command": command,
        "args": args,
        "seeds": seeds or {},
        "inputs": {str(p): git_blob_hash(p) for p in inputs},
        "outputs": {str(p): git_blob_hash(p) for p in outputs},
        "versions": {"difflab": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def manifest_for(artifact: Path) -> Path:
    return artifact.with_name(artifact.name + ".manifest.json")


def _ensure_parent(p: Path) -> Path:
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# -- experiment configs ------------------------------------------------

def load_experiment(path) -> tuple[TrainConfig, Path]:
    """Read an experiment JSON: ``{"schema_version": 1, "outdir": ..., "train": {...}}``."""
    p = input_path(path, "config")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError("config must be a JSON object")
    unknown = set(doc) - EXPERIMENT_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise CliError(f"config schema_version must be {SCHEMA_VERSION}")
    cfg = TrainConfig.from_dict(doc.get("train", {}))
    outdir = doc.get("outdir") or str(Path("runs") / p.stem)
    return cfg, output_path(outdir)


def _parse_range(text: str) -> tuple[int, int] | None:
    text = text.strip()
    if text.lower() in ("", "none", "empty"):
        return None
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError as exc:
        raise CliError(f"bad range {text!r}; expected lo:hi") from exc
    return lo, hi


def _model_head(doc: dict, requested: str | None):
    heads = doc["model"]["heads"]
    if requested in (None, "auto"):
        return "mixed" if len(heads) == 3 and doc["config"]["mode"] == "mixed" else heads[-1]
    if requested == "mixed":
        return "mixed"
    return parse_pred_type(requested)


def _data_for(doc: dict, seed_offset: int = 0, n: int | None = None) -> np.ndarray:
    spec = dict(doc["config"]["dataset"])
    spec["seed"] = int(spec["seed"]) + seed_offset
    if n is not None:
        spec["n"] = n
    return generate_data(DatasetSpec(**spec))


# -- subcommands -------------------------------------------------------

def cmd_train(a) -> int:
    cfg, outdir = load_experiment(a.config)
    if a.outdir:
        outdir = output_path(a.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    res = train(cfg, outdir)
    sched = outdir / "schedule.json"
    sched.write_text(res.trainer.schedule.to_json(), encoding="utf-8")
    outputs = [Path(res.metrics_path), Path(res.checkpoint), sched]
    write_manifest(outdir / "manifest.json", "train", {"config": str(a.config), "train": cfg.to_dict()},
                   [Path(a.config)], outputs, {"seed": cfg.seed})
    print(f"trained {cfg.steps} steps -> {res.checkpoint}")
    return EXIT_OK


def cmd_profile(a) -> int:
    ck = input_path(a.checkpoint, "checkpoint")
    doc = load_checkpoint(ck)
    tr = Trainer.resume(doc)
    pt = parse_pred_type(a.pred_type) if a.pred_type else tr.heads[-1]
    prof = tr.profile(pt, a.space, a.n_per_t, seed=a.seed)
    out = _ensure_parent(output_path(a.out))
    prof.to_csv(out)
    write_manifest(manifest_for(out), "profile",
                   {"pred_type": pt.letter, "space": a.space, "n_per_t": a.n_per_t},
                   [ck], [out], {"profile_seed": a.seed})
    print(f"profile ({pt.letter}, {a.space}) -> {out}")
    return EXIT_OK


def cmd_slots(a) -> int:
    src = input_path(a.profile, "profile")
    part = compute_slots(LossProfile.from_csv(src), a.n_slots, min_samples=a.min_samples)
    out = _ensure_parent(output_path(a.out))
    out.write_text(part.to_json() + "\n", encoding="utf-8")
    write_manifest(manifest_for(out), "slots", {"n_slots": a.n_slots, "min_samples": a.min_samples},
                   [src], [out])
    print(f"{part.n_slots} slots, widths {part.widths} -> {out}")
    return EXIT_OK


def _write_slot_summary(path: Path, part: SlotPartition, d_target, d_x0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SLOT_SUMMARY_HEADER)
        for k, (lo, hi) in enumerate(part.bounds):
            w.writerow([k + 1, lo, hi, repr(d_target.slot_mean[k]), repr(d_target.slot_stderr[k]),
                        repr(d_x0.slot_mean[k]), repr(d_x0.slot_stderr[k])])


def cmd_finetune(a) -> int:
    ck = input_path(a.checkpoint, "checkpoint")
    doc = load_checkpoint(ck)
    inputs = [ck]
    part = None
    if a.partition:
        pfile = input_path(a.partition, "partition")
        part = SlotPartition.from_json(pfile.read_text(encoding="utf-8"))
        inputs.append(pfile)
    if a.range:
        rng_ = _parse_range(a.range)
        if rng_ is None:
            raise CliError("--range must be a nonempty lo:hi")
    elif a.slot is not None:
        if part is None:
            raise CliError("--slot needs --partition")
        if not 1 <= a.slot <= part.n_slots:
            raise CliError(f"--slot must be in 1..{part.n_slots}")
        rng_ = part.bounds[a.slot - 1]
    else:
        raise CliError("give --range lo:hi or --slot k with --partition")

    base_cfg = doc["config"]
    cfg = TrainConfig.from_dict({
        **base_cfg, "steps": a.steps, "restrict_range": list(rng_),
        "lr": base_cfg["lr"] if a.lr is None else a.lr,
        "seed": base_cfg["seed"] + 1 if a.seed is None else a.seed,
        "checkpoint_every": 0, "profile_every": 0,
    })
    base = Trainer.resume(doc)
    pt = base.heads[-1]
    before = {sp: base.profile(pt, sp, a.n_per_t, seed=a.profile_seed) for sp in ("target", "x0")}
    tr = Trainer.finetune_from(doc, cfg, keep_optimizer=not a.fresh_optimizer)
    outdir = output_path(a.outdir)
    res = train(cfg, outdir, trainer=tr)
    after = {sp: tr.profile(pt, sp, a.n_per_t, seed=a.profile_seed) for sp in ("target", "x0")}
    outputs = [Path(res.metrics_path), Path(res.checkpoint)]
    diffs = {}
    for sp in ("target", "x0"):
        before[sp].to_csv(outdir / f"profile_before_{sp}.csv")
        after[sp].to_csv(outdir / f"profile_after_{sp}.csv")
        diffs[sp] = diff_profiles(before[sp], after[sp], part)
        diffs[sp].to_csv(outdir / f"diff_{sp}.csv")
        outputs += [outdir / f"profile_before_{sp}.csv", outdir / f"profile_after_{sp}.csv",
                    outdir / f"diff_{sp}.csv"]
    if part is not None:
        _write_slot_summary(outdir / "slot_summary.csv", part, diffs["target"], diffs["x0"])
        outputs.append(outdir / "slot_summary.csv")
    write_manifest(outdir / "manifest.json", "finetune",
                   {"range": list(rng_), "n_per_t": a.n_per_t, "fresh_optimizer": a.fresh_optimizer,
                    "train": cfg.to_dict()},
                   inputs, outputs, {"seed": cfg.seed, "profile_seed": a.profile_seed})
    print(f"fine-tuned {a.steps} steps on t in {list(rng_)} -> {res.checkpoint}")
    return EXIT_OK


def cmd_ablate(a) -> int:
    ck = input_path(a.checkpoint, "checkpoint")
    doc = load_checkpoint(ck)
    model = model_from_checkpoint(doc)
    s = Schedule.from_manifest(doc["schedule"])
    pt = _model_head(doc, a.pred_type)
    table = head_table(doc["selection_counts"], model.heads) if pt == "mixed" else None
    ranges = [_parse_range(r) for r in a.ranges.split(",")]
    x0 = _data_for(doc, seed_offset=a.seed + 1, n=a.n_points)
    res = ablate_reconstruction(model, s, pt, x0, ranges, a.trials, a.seed, table=table)
    out = _ensure_parent(output_path(a.out))
    res.to_csv(out)
    write_manifest(manifest_for(out), "ablate",
                   {"ranges": a.ranges, "trials": a.trials, "n_points": a.n_points,
                    "pred_type": pt if isinstance(pt, str) else pt.letter},
                   [ck], [out], {"seed": a.seed})
    for r, m, se in zip(ranges, res.mean, res.stderr):
        print(f"{'none' if r is None else f'{r[0]}:{r[1]}':>10}  mse {m:.6g} +- {se:.2g}")
    return EXIT_OK


def _schedule_from_file(path: Path) -> Schedule:
    doc = json.loads(path.read_text(encoding="utf-8"))
    if "beta" not in doc and "schedule" in doc:
        doc = doc["schedule"]  # a checkpoint carries its schedule manifest
    return Schedule.from_manifest(doc)


def cmd_coeffs(a) -> int:
    inputs = []
    if a.schedule:
        src = input_path(a.schedule, "schedule manifest")
        s = _schedule_from_file(src)
        inputs.append(src)
    else:
        s = make_schedule(a.kind, a.T)
    out = _ensure_parent(output_path(a.out))
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COEFF_HEADER)
        for t in range(1, s.T + 1):
            w.writerow([t] + [repr(float(v)) for v in (s.beta[t], s.alpha_bar[t], s.coef_x0[t],
                                                         s.coef_xt[t], s.sigma2[t])])
    write_manifest(manifest_for(out), "coeffs", {"kind": s.kind, "T": s.T, "params": s.params},
                   inputs, [out])
    print(f"coefficients for {s.kind} T={s.T} -> {out}")
    return EXIT_OK


def cmd_sample(a) -> int:
    ck = input_path(a.checkpoint, "checkpoint")
    doc = load_checkpoint(ck)
    model = model_from_checkpoint(doc)
    s = Schedule.from_manifest(doc["schedule"])
    pt = _model_head(doc, a.sampler_head)
    table = head_table(doc["selection_counts"], model.heads) if pt == "mixed" else None
    mon = ClampMonitor()
    gen = tc.Rng(a.seed).stream("sample")
    x = generate(model, s, pt, a.n, gen, table=table, monitor=mon)
    out = _ensure_parent(output_path(a.out))
    write_samples_csv(x, out)
    report = {"n": a.n, "head": pt if isinstance(pt, str) else pt.letter,
              "clamp_active_steps": mon.active, "clamp_total_steps": mon.steps,
              "clamp_active_fraction": mon.active_fraction}
    if a.n > 0:
        ref = _data_for(doc, seed_offset=a.seed + 1, n=max(a.n, 2))
        noise = tc.Rng(a.seed).stream("reference_noise").standard_normal(x.shape)
        report["energy_distance"] = energy_distance(x, ref)
        report["energy_distance_noise_baseline"] = energy_distance(noise, ref)
    rep = out.with_name(out.stem + "_report.json")
    rep.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(manifest_for(out), "sample", {"n": a.n, "head": report["head"]},
                   [ck], [out, rep], {"seed": a.seed})
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# -- argument parsing --------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="difflab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("train", help="train a model from an experiment config")
    q.add_argument("config")
    q.add_argument("--outdir", help="override the config's outdir")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("profile", help="per-timestep loss profile of a checkpoint")
    q.add_argument("checkpoint")
    q.add_argument("--pred-type", help="head to profile (default: the model's head)")
    q.add_argument("--space", choices=["target", "x0"], default="target")
    q.add_argument("--n-per-t", type=int, default=256)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="profile.csv")
    q.set_defaults(func=cmd_profile)

    q = sub.add_parser("slots", help="equal-loss slot partition of a profile CSV")
    q.add_argument("profile")
    q.add_argument("--n-slots", type=int, default=10)
    q.add_argument("--min-samples", type=int, default=256)
    q.add_argument("--out", default="slots.json")
    q.set_defaults(func=cmd_slots)

    q = sub.add_parser("finetune", help="continue training on a restricted timestep range")
    q.add_argument("checkpoint")
    q.add_argument("--range", help="lo:hi")
    q.add_argument("--slot", type=int, help="1-based slot index in --partition")
    q.add_argument("--partition", help="slot partition JSON")
    q.add_argument("--steps", type=int, default=5000)
    q.add_argument("--lr", type=float)
    q.add_argument("--seed", type=int)
    q.add_argument("--fresh-optimizer", action="store_true", help="reset Adam moments")
    q.add_argument("--n-per-t", type=int, default=256)
    q.add_argument("--profile-seed", type=int, default=123)
    q.add_argument("--outdir", default="finetune")
    q.set_defaults(func=cmd_finetune)

    q = sub.add_parser("ablate", help="x0-replacement reconstruction ablation")
    q.add_argument("checkpoint")
    q.add_argument("--ranges", default="none,1:10,1:500,500:1000",
                   help="comma list of lo:hi ranges; 'none' is the empty range")
    q.add_argument("--trials", type=int, default=20)
    q.add_argument("--n-points", type=int, default=50)
    q.add_argument("--pred-type", help="head, 'mixed' or 'auto' (default)")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="ablation.csv")
    q.set_defaults(func=cmd_ablate)

    q = sub.add_parser("coeffs", help="per-timestep posterior coefficients")
    q.add_argument("schedule", nargs="?", help="schedule manifest or checkpoint JSON")
    q.add_argument("--kind", choices=["linear", "cosine"], default="linear")
    q.add_argument("--T", type=int, default=1000)
    q.add_argument("--out", default="coeffs.csv")
    q.set_defaults(func=cmd_coeffs)

    q = sub.add_parser("sample", help="generate samples and report energy distance")
    q.add_argument("checkpoint")
    q.add_argument("--n", type=int, default=2000)
    q.add_argument("--sampler-head", default="auto", help="d, v, a, mixed or auto")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="samples.csv")
    q.set_defaults(func=cmd_sample)
    return p


CONFIG_ERRORS = (CliError, ConfigError, ScheduleError, SamplerError, ProfileError, InferenceError,
                 DatasetError, ModelError, KeyError, ValueError)
NUMERIC_ERRORS = (TrainingError, NumericError, MixedSelectionError, NonFiniteProfileError, tc.NonFiniteError,
                  FloatingPointError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
