"""Command-line entry point: ``ecg-stress <command> ...``.

Commands: synth, import, preprocess, train, finetune, loso, gradcheck.

Model and training settings start from the full-size defaults, optionally
replaced by a named preset, then a ``key=value`` config file with dotted
keys (``model.d_model=32``, ``train.lr0=1e-3``), then ``--set`` flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import dsp, gradcheck, ingest
from .autograd import Rng
from .errors import ConfigError, DataError, EcgStressError, LeakageError, NumericError
from .ingest import WindowSet
from .model import ModelConfig, ModelParams, init_params
from .training import TrainConfig, loss_curve_text, run_loso, train

logger = logging.getLogger("ecg_stress")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_LEAKAGE = 5

THREADS_ENV = "ECG_STRESS_THREADS"

MODEL_PRESETS = {"full": ModelConfig.full, "reduced": ModelConfig.reduced}
TRAIN_PRESETS = {"full": TrainConfig.full, "synthetic": TrainConfig.synthetic}


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    output_dir: Path | None = None
    paths: dict[str, Path] = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.dataset not in ("wesad", "swell", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        for name, path in self.paths.items():
            if not Path(path).exists():
                raise ConfigError(f"{name} path does not exist: {path}")
        self.model.validate()
        return self

    def lines(self) -> list[str]:
        out = [f"dataset={self.dataset}", f"seed={self.seed}"]
        out += [f"model.{k}={v}" for k, v in _flatten(dataclasses.asdict(self.model)).items()]
        out += [f"train.{k}={v}" for k, v in _flatten(dataclasses.asdict(self.train)).items()]
        return out


def _flatten(d: dict, prefix: str = "") -> dict[str, str]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        elif isinstance(v, (tuple, list)):
            out[prefix + k] = ",".join(repr(x) for x in v)
        else:
            out[prefix + k] = repr(v) if isinstance(v, float) else str(v)
    return out


def _coerce(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            kind = type(current[0]) if current else float
            return tuple(kind(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(current).__name__}") from exc
    return raw


def _apply(obj, path: list[str], raw: str, key: str):
    """Return a copy of dataclass ``obj`` with the dotted field replaced."""
    names = {f.name for f in dataclasses.fields(obj)}
    if path[0] not in names:
        raise ConfigError(f"unknown setting {key!r}")
    current = getattr(obj, path[0])
    if len(path) > 1:
        if not dataclasses.is_dataclass(current):
            raise ConfigError(f"unknown setting {key!r}")
        value = _apply(current, path[1:], raw, key)
    else:
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{key} needs a sub-field, e.g. {key}.{dataclasses.fields(current)[0].name}")
        value = _coerce(raw, current, key)
    try:
        return dataclasses.replace(obj, **{path[0]: value})
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_assignments(lines: list[str]) -> list[tuple[str, str]]:
    out = []
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip()))
    return out


def build_run_config(args) -> RunConfig:
    model = MODEL_PRESETS[getattr(args, "model_preset", "full")]()
    train_cfg = TRAIN_PRESETS[getattr(args, "train_preset", "full")]()
    run = RunConfig(model=model, train=train_cfg)
    assignments = []
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        assignments += parse_assignments(path.read_text().splitlines())
    assignments += parse_assignments(getattr(args, "set", None) or [])
    for key, value in assignments:
        head, *rest = key.split(".")
        if head == "model" and rest:
            run.model = _apply(run.model, rest, value, key)
        elif head == "train" and rest:
            run.train = _apply(run.train, rest, value, key)
        elif key == "dataset":
            run.dataset = value
        elif key == "seed":
            run.seed = int(_coerce(value, 0, key))
        else:
            raise ConfigError(f"unknown setting {key!r}")
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    if getattr(args, "dataset", None):
        run.dataset = args.dataset
    run.train = dataclasses.replace(run.train, seed=run.seed)
    return run.validate()


def run_directory(args, run: RunConfig) -> Path:
    if getattr(args, "run_dir", None):
        path = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path(args.out_root) / f"{stamp}_seed{run.seed}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.txt").write_text("\n".join(run.lines()) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = ingest.synthetic_cohort(args.subjects, args.duration, args.fs, args.block, args.seed)
    for record in records:
        ingest.write_canonical(record, out / f"{record.subject_id}.ecgr")
    print(f"wrote {len(records)} synthetic records to {out}")
    return EXIT_OK


def cmd_import(args) -> int:
    src = Path(args.src)
    if not src.is_dir():
        raise ConfigError(f"source directory not found: {src}")
    importer = {"wesad": ingest.import_wesad, "swell": ingest.import_swell}[args.dataset]
    records, report = importer(src)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for record in records:
        ingest.write_canonical(record, out / f"{record.subject_id}.ecgr")
    (out / "import_report.txt").write_text(report.to_text())
    print(f"imported {len(records)} {args.dataset} records, {len(report.failures)} failures")
    return EXIT_OK if records else EXIT_DATA


def cmd_preprocess(args) -> int:
    records = ingest.read_canonical_dir(args.input)
    if not records:
        raise DataError(f"no .ecgr records in {args.input}")
    parts, skipped = [], {}
    for record in records:
        try:
            parts.append(dsp.preprocess_record(record, args.target_hz, args.window_s, args.step_s))
        except DataError as exc:
            logger.warning("skipping %s: %s", record.subject_id, exc)
            skipped[record.subject_id] = str(exc)
    windows = WindowSet.concat(parts, args.target_hz)
    if len(windows) == 0:
        raise DataError("preprocessing produced no windows")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    windows.save(out)
    manifest = {
        "fs_hz": args.target_hz,
        "window_len": windows.window_len,
        "window_s": args.window_s,
        "step_s": args.step_s,
        "total_windows": len(windows),
        "subjects": windows.class_counts(),
        "skipped": skipped,
    }
    manifest_path = out.with_suffix(".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{len(windows)} windows from {len(parts)} subjects -> {out}")
    return EXIT_OK


def _load_windows(path) -> WindowSet:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"window archive not found: {path}")
    return WindowSet.load(path)


def cmd_train(args) -> int:
    run = build_run_config(args)
    data = _load_windows(args.windows)
    if args.subjects:
        data = data.for_subjects(args.subjects.split(","))
    out = run_directory(args, run)
    params = init_params(run.model, Rng(run.seed).spawn(0))
    losses = train(params, data, run.train, args.mode, Rng(run.seed).spawn(1))
    params.save(out / "model.ckpt")
    (out / "loss_curve.txt").write_text(loss_curve_text(losses))
    print(f"trained {args.mode} for {len(losses)} epochs, final loss {losses[-1]:.6f} -> {out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    run = build_run_config(args)
    params = ModelParams.load(args.checkpoint)
    data = _load_windows(args.windows)
    if args.subjects:
        data = data.for_subjects(args.subjects.split(","))
    out = run_directory(args, run)
    losses = train(params, data, run.train, "finetune", Rng(run.seed).spawn(2))
    params.save(out / "model.ckpt")
    (out / "loss_curve.txt").write_text(loss_curve_text(losses, run.train.loso_pretrain_epochs))
    print(f"fine-tuned for {len(losses)} epochs -> {out}")
    return EXIT_OK


def cmd_loso(args) -> int:
    run = build_run_config(args)
    data = _load_windows(args.windows)
    if data.window_len != run.model.window_len:
        raise ConfigError(
            f"archive windows have {data.window_len} samples but model.window_len={run.model.window_len}"
        )
    out = run_directory(args, run)
    fractions = (0.0,) + tuple(run.train.finetune_fracs)
    result = run_loso(data, run.model, run.train, fractions)
    result.write(out, run.dataset)
    print(result.table(run.dataset), end="")
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(include_model=not args.skip_model)
    for r in results:
        print(r.line())
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}")
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file with dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--model-preset", choices=sorted(MODEL_PRESETS), default="full")
    p.add_argument("--train-preset", choices=sorted(TRAIN_PRESETS), default="full")
    p.add_argument("--dataset", choices=["wesad", "swell", "synthetic"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out-root", default="runs", help="parent of timestamped run directories")
    p.add_argument("--run-dir", help="write into this directory instead of a timestamped one")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecg-stress", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort of .ecgr records")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--duration", type=float, default=240.0)
    p.add_argument("--block", type=float, default=60.0, help="seconds per rest/stress block")
    p.add_argument("--fs", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", help="convert a published dataset to .ecgr records")
    p.add_argument("--dataset", choices=["wesad", "swell"], required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("preprocess", help="filter, resample, normalise and window records")
    p.add_argument("--in", dest="input", required=True, help="directory of .ecgr files")
    p.add_argument("--out", required=True, help="window archive (.npz)")
    p.add_argument("--target-hz", type=int, default=dsp.TARGET_FS)
    p.add_argument("--window-s", type=float, default=dsp.WINDOW_S)
    p.add_argument("--step-s", type=float, default=dsp.STEP_S)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a window archive")
    p.add_argument("--windows", required=True)
    p.add_argument("--mode", choices=["plain", "loso_pretrain"], default="plain")
    p.add_argument("--subjects", help="comma-separated subset of subjects to train on")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training a checkpoint on calibration windows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--windows", required=True)
    p.add_argument("--subjects", help="comma-separated subset of subjects to fine-tune on")
    _add_run_options(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("loso", help="leave-one-subject-out evaluation with fine-tuning sweeps")
    p.add_argument("--windows", required=True)
    _add_run_options(p)
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the model")
    p.add_argument("--skip-model", action="store_true", help="only check the primitives")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _limit_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    from threadpoolctl import threadpool_limits

    try:
        return threadpool_limits(int(raw))
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        _limit_threads()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LeakageError as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EcgStressError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
