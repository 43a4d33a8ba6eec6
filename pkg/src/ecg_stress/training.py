"""Optimisation, leave-one-subject-out evaluation and fine-tuning calibration."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autograd as ag
from .autograd import Rng, Tensor
from .errors import DataError, LeakageError, NumericError
from .ingest import WindowSet
from .model import ModelConfig, ModelParams, forward, init_params, predict_proba

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
THRESHOLD = 0.5


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    decay: float = 0.985
    epochs: int = 70
    batch: int = 256
    loso_pretrain_epochs: int = 40
    finetune_epochs: int = 30
    finetune_fracs: tuple[float, ...] = (0.01, 0.05, 0.10)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "batch", "loso_pretrain_epochs", "finetune_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(not 0 < f < 1 for f in self.finetune_fracs):
            raise ValueError(f"fine-tune fractions must lie in (0, 1): {self.finetune_fracs}")

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def synthetic(cls, **overrides) -> "TrainConfig":
        """Default schedule with a step size and batch suited to ~10^3 windows.

        At batch 256 a desk-scale set gives only a few updates per epoch.
        """
        return cls(**{"lr0": 1e-3, "batch": 32, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "finetune_fracs" in d:
            d["finetune_fracs"] = tuple(d["finetune_fracs"])
        return cls(**d)


# ---------------------------------------------------------------------------
# loss, weights, optimiser
# ---------------------------------------------------------------------------


def weighted_bce(p: Tensor, y, w_pos: float = 1.0, w_neg: float = 1.0) -> Tensor:
    """Batch mean of ``-[w_pos*y*log p + w_neg*(1-y)*log(1-p)]``."""
    if not np.all(np.isfinite(p.data)) or np.any(p.data < 0) or np.any(p.data > 1):
        bad = p.data[~((p.data >= 0) & (p.data <= 1))]
        raise NumericError(f"{bad.size} probabilities outside [0, 1], e.g. {bad[:3].tolist()}")
    y = np.asarray(y, dtype=np.float64)
    log_p = p.clamp(LOG_CLAMP, 1.0).log()
    log_q = (1.0 - p).clamp(LOG_CLAMP, 1.0).log()
    per_sample = Tensor(w_pos * y) * log_p + Tensor(w_neg * (1.0 - y)) * log_q
    return -per_sample.mean()


def class_weights(labels) -> tuple[float, float]:
    """Inverse-frequency weights ``N/(2*N_class)``; (1, 1) when balanced."""
    labels = np.asarray(labels)
    n, n_pos = labels.size, int((labels == 1).sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"training labels contain a single class ({n_pos} stress / {n_neg} non-stress)")
    return n / (2 * n_pos), n / (2 * n_neg)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """One bias-corrected Adam update in place; returns False if it was skipped."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning("non-finite gradient in %s; Adam step %d skipped", name, state.t + 1)
            return False
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != tensor.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {tensor.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


def lr_schedule(epoch: int, lr0: float = 1e-4, decay: float = 0.985) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * decay**epoch


# ---------------------------------------------------------------------------
# provenance
# ---------------------------------------------------------------------------


class ProvenanceAudit:
    """Records the tag of every window that reached a parameter update."""

    def __init__(self):
        self.trained: set[str] = set()
        self.batches = 0

    def record(self, tags) -> None:
        self.trained.update(tags.tolist() if isinstance(tags, np.ndarray) else tags)
        self.batches += 1

    def assert_unseen(self, tags) -> None:
        leaked = self.trained.intersection(tags.tolist() if isinstance(tags, np.ndarray) else tags)
        if leaked:
            raise LeakageError(f"{len(leaked)} evaluation windows were used for training, e.g. {sorted(leaked)[:3]}")


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

MODES = ("plain", "loso_pretrain", "finetune")


def _epochs_for(mode: str, config: TrainConfig) -> tuple[int, int]:
    """(number of epochs, first epoch index for the lr schedule)."""
    if mode == "plain":
        return config.epochs, 0
    if mode == "loso_pretrain":
        return config.loso_pretrain_epochs, 0
    if mode == "finetune":
        return config.finetune_epochs, config.loso_pretrain_epochs
    raise ValueError(f"unknown training mode {mode!r}; expected one of {MODES}")


def train(
    params: ModelParams,
    data: WindowSet,
    config: TrainConfig,
    mode: str = "plain",
    rng: Rng | None = None,
    audit: ProvenanceAudit | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Train ``params`` in place; returns the mean loss of every epoch."""
    n_epochs, first_epoch = _epochs_for(mode, config)
    if len(data) == 0:
        raise DataError("no training windows")
    if data.window_len != params.config.window_len:
        raise DataError(f"windows have {data.window_len} samples, model expects {params.config.window_len}")
    w_pos, w_neg = class_weights(data.labels)
    rng = rng if rng is not None else Rng(config.seed)
    state = AdamState()
    tags = data.tags if audit is not None else None
    labels = data.labels.astype(np.float64)
    losses = []
    n = len(data)
    for epoch in range(n_epochs):
        lr = lr_schedule(first_epoch + epoch, config.lr0, config.decay)
        epoch_rng = rng.spawn(epoch)
        order = epoch_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch)):
            idx = order[start : start + config.batch]
            params.zero_grad()
            probs = forward(params, data.windows[idx][:, None, :], epoch_rng, training=True)
            try:
                loss = weighted_bce(probs, labels[idx], w_pos, w_neg)
            except NumericError as exc:
                raise NumericError(f"epoch {first_epoch + epoch}, batch {b}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {first_epoch + epoch}, batch {b}")
            ag.backward(loss)
            if audit is not None:
                audit.record(tags[idx])
            adam_step(
                params.tensors,
                {k: t.grad for k, t in params.items()},
                state,
                lr,
                config.beta1,
                config.beta2,
                config.eps,
            )
            total += value * len(idx)
        losses.append(total / n)
        if on_epoch is not None:
            on_epoch(first_epoch + epoch, losses[-1])
        logger.debug("%s epoch %d lr=%.3e loss=%.6f", mode, first_epoch + epoch, lr, losses[-1])
    return losses


def finetune(
    params: ModelParams,
    calibration: WindowSet,
    config: TrainConfig,
    rng: Rng | None = None,
    audit: ProvenanceAudit | None = None,
) -> list[float]:
    """Continue training every layer on a subject's calibration windows."""
    if len(calibration) == 0:
        raise DataError("fine-tuning needs a non-empty calibration set")
    return train(params, calibration, config, "finetune", rng, audit)


# ---------------------------------------------------------------------------
# folds and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train_subjects: tuple[str, ...]
    test_subject: str


def loso_folds(data: WindowSet) -> list[Fold]:
    subjects = data.subjects()
    if len(subjects) < 2:
        raise DataError(f"leave-one-subject-out needs at least 2 subjects, got {subjects}")
    return [Fold(tuple(s for s in subjects if s != test), test) for test in subjects]


def finetune_split(data: WindowSet, frac: float, rng: Rng) -> tuple[WindowSet, WindowSet]:
    """Stratified random calibration sample of ``ceil(frac*n)`` windows; the rest is for evaluation."""
    if not 0 < frac < 1:
        raise ValueError(f"calibration fraction must lie in (0, 1), got {frac}")
    n = len(data)
    n_cal = math.ceil(round(frac * n, 9))
    if n_cal >= n:
        raise DataError(f"calibrating on {n_cal} of {n} windows leaves nothing to evaluate")
    pos = np.flatnonzero(data.labels == 1)
    neg = np.flatnonzero(data.labels == 0)
    if len(pos) and len(neg):
        if n_cal < 2:
            raise DataError(
                f"a {n_cal}-window calibration set cannot contain both classes; increase the fraction"
            )
        n_pos = int(round(n_cal * len(pos) / n))
        n_pos = min(max(n_pos, 1), len(pos), n_cal - 1)
        n_pos = max(n_pos, n_cal - len(neg))
    else:
        n_pos = n_cal if len(pos) else 0
    cal = np.concatenate([rng.choice(pos, n_pos), rng.choice(neg, n_cal - n_pos)]) if n_cal else np.array([], int)
    cal = np.sort(cal.astype(np.int64))
    rest = np.setdiff1d(np.arange(n), cal)
    return data.take(cal), data.take(rest)


# ---------------------------------------------------------------------------
# metrics and reports
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    subject_id: str
    tp: int
    fp: int
    tn: int
    fn: int
    tags: list[str] = field(default_factory=list, repr=False)
    labels: list[int] = field(default_factory=list, repr=False)
    probs: list[float] = field(default_factory=list, repr=False)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def line(self) -> str:
        return (
            f"subject={self.subject_id} tp={self.tp} fp={self.fp} tn={self.tn} fn={self.fn} "
            f"accuracy={self.accuracy!r} f1={self.f1!r}"
        )


def confusion(labels, probs, subject_id: str = "") -> FoldResult:
    labels = np.asarray(labels).astype(int)
    pred = (np.asarray(probs) >= THRESHOLD).astype(int)
    return FoldResult(
        subject_id,
        tp=int(((pred == 1) & (labels == 1)).sum()),
        fp=int(((pred == 1) & (labels == 0)).sum()),
        tn=int(((pred == 0) & (labels == 0)).sum()),
        fn=int(((pred == 0) & (labels == 1)).sum()),
    )


def evaluate(params: ModelParams, data: WindowSet, audit: ProvenanceAudit | None = None) -> FoldResult:
    """Confusion counts at threshold 0.5 with stress as the positive class."""
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty window set")
    tags = data.tags
    if audit is not None:
        audit.assert_unseen(tags)
    subjects = data.subjects()
    probs = predict_proba(params, data.windows)
    result = confusion(data.labels, probs, subjects[0] if len(subjects) == 1 else "+".join(subjects))
    result.tags = tags.tolist()
    result.labels = data.labels.astype(int).tolist()
    result.probs = probs.tolist()
    return result


@dataclass
class EvalReport:
    label: str
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return float(np.mean([f.accuracy for f in self.folds]))

    @property
    def f1(self) -> float:
        return float(np.mean([f.f1 for f in self.folds]))

    def pooled(self) -> FoldResult:
        return FoldResult(
            "pooled",
            sum(f.tp for f in self.folds),
            sum(f.fp for f in self.folds),
            sum(f.tn for f in self.folds),
            sum(f.fn for f in self.folds),
        )

    def cell(self) -> str:
        """``Acc (F1)`` in percent, the layout of the fine-tuning table."""
        return f"{100 * self.accuracy:.1f} ({100 * self.f1:.1f})"

    def to_text(self) -> str:
        return "".join(f.line() + "\n" for f in self.folds)

    def summary(self) -> dict:
        pooled = self.pooled()
        return {
            "label": self.label,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "pooled_accuracy": pooled.accuracy if pooled.total else None,
            "pooled_f1": pooled.f1 if pooled.total else None,
            "folds": [
                {"subject": f.subject_id, "tp": f.tp, "fp": f.fp, "tn": f.tn, "fn": f.fn,
                 "accuracy": f.accuracy, "f1": f.f1}
                for f in self.folds
            ],
        }

    def predictions_text(self) -> str:
        lines = ["tag\tlabel\tprob"]
        for f in self.folds:
            lines += [f"{t}\t{y}\t{p!r}" for t, y, p in zip(f.tags, f.labels, f.probs)]
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.txt").write_text(self.to_text())
        (directory / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        (directory / "predictions.tsv").write_text(self.predictions_text())


def read_report(path: str | Path) -> list[dict]:
    """Parse ``report.txt`` back into per-fold dicts."""
    rows = []
    for line in Path(path).read_text().splitlines():
        row = dict(part.split("=", 1) for part in line.split())
        for key in ("tp", "fp", "tn", "fn"):
            row[key] = int(row[key])
        for key in ("accuracy", "f1"):
            row[key] = float(row[key])
        rows.append(row)
    return rows


def loss_curve_text(losses: list[float], first_epoch: int = 0) -> str:
    return "".join(f"{first_epoch + i} {loss!r}\n" for i, loss in enumerate(losses))


# ---------------------------------------------------------------------------
# leave-one-subject-out driver
# ---------------------------------------------------------------------------


def fraction_label(frac: float) -> str:
    return "no_tuning" if frac == 0 else f"ft_{round(100 * frac):g}pct"


@dataclass
class LosoResult:
    reports: dict[float, EvalReport]
    loss_curves: dict[str, list[float]]
    audits: dict[str, ProvenanceAudit] = field(repr=False, default_factory=dict)
    # schedule epoch of each curve's first entry (fine-tuning continues the pretrain count)
    first_epochs: dict[str, int] = field(default_factory=dict)

    def table(self, dataset: str = "") -> str:
        fracs = sorted(self.reports)
        header = "Dataset\t" + "\t".join(
            "No Tuning" if f == 0 else f"{round(100 * f):g}%" for f in fracs
        )
        row = f"{dataset}\t" + "\t".join(self.reports[f].cell() for f in fracs)
        return header + "\n" + row + "\n"

    def write(self, directory: str | Path, dataset: str = "") -> None:
        directory = Path(directory)
        for frac, report in self.reports.items():
            report.write(directory / fraction_label(frac))
        curves = directory / "loss_curves"
        curves.mkdir(parents=True, exist_ok=True)
        for name, losses in self.loss_curves.items():
            (curves / f"{name}.txt").write_text(loss_curve_text(losses, self.first_epochs.get(name, 0)))
        (directory / "table.tsv").write_text(self.table(dataset))


def run_loso(
    data: WindowSet,
    model_config: ModelConfig,
    train_config: TrainConfig,
    fractions: tuple[float, ...] | None = None,
    subjects: list[str] | None = None,
) -> LosoResult:
    """LOSO without tuning plus one fine-tuned variant per calibration fraction.

    No tuning trains for ``epochs``; fine-tuned variants pretrain for
    ``loso_pretrain_epochs`` and then calibrate for ``finetune_epochs`` on a
    stratified sample of the held-out subject, evaluating on the remainder.
    """
    fractions = (0.0,) + tuple(train_config.finetune_fracs) if fractions is None else tuple(fractions)
    master = Rng(train_config.seed)
    reports = {f: EvalReport(fraction_label(f)) for f in fractions}
    curves: dict[str, list[float]] = {}
    first_epochs: dict[str, int] = {}
    audits: dict[str, ProvenanceAudit] = {}
    folds = loso_folds(data)
    for index, fold in enumerate(folds):
        if subjects is not None and fold.test_subject not in subjects:
            continue
        fold_rng = master.spawn(index)
        train_set = data.for_subjects(fold.train_subjects)
        test_set = data.for_subjects([fold.test_subject])
        initial = init_params(model_config, fold_rng.spawn(0))
        logger.info("fold %d/%d: test subject %s", index + 1, len(folds), fold.test_subject)

        if 0.0 in reports:
            params = initial.copy()
            audit = audits[f"{fold.test_subject}/no_tuning"] = ProvenanceAudit()
            curves[f"{fold.test_subject}_plain"] = train(params, train_set, train_config, "plain", fold_rng.spawn(1), audit)
            reports[0.0].folds.append(evaluate(params, test_set, audit))

        tuned = [f for f in fractions if f > 0]
        if not tuned:
            continue
        pretrained = initial.copy()
        pre_audit = ProvenanceAudit()
        curves[f"{fold.test_subject}_pretrain"] = train(
            pretrained, train_set, train_config, "loso_pretrain", fold_rng.spawn(2), pre_audit
        )
        for k, frac in enumerate(tuned):
            calibration, held_out = finetune_split(test_set, frac, fold_rng.spawn(10 + k))
            params = pretrained.copy()
            audit = ProvenanceAudit()
            audit.trained |= pre_audit.trained
            audit.batches = pre_audit.batches
            name = fraction_label(frac)
            audits[f"{fold.test_subject}/{name}"] = audit
            first_epochs[f"{fold.test_subject}_{name}"] = train_config.loso_pretrain_epochs
            curves[f"{fold.test_subject}_{name}"] = finetune(
                params, calibration, train_config, fold_rng.spawn(20 + k), audit
            )
            reports[frac].folds.append(evaluate(params, held_out, audit))
    return LosoResult(reports, curves, audits, first_epochs)
