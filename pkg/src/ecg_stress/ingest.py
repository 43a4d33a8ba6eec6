"""ECG records: dataset importers, label binarisation, canonical files, synthesis.

The core pipeline only ever sees :class:`EcgRecord` objects (usually read
from canonical ``.ecgr`` files). Dataset-specific container formats are
handled by the thin ``import_*`` adapters below.

Canonical ``.ecgr`` layout, all little-endian::

    b"ECGR" | version u16 | fs u32 | n u64 | id_len u16 | subject id (UTF-8)
    | ds_len u16 | dataset name (UTF-8) | n x float64 samples | n x int8 codes
"""

from __future__ import annotations

import io
import logging
import math
import pickle
import re
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Rng
from .errors import DataError, FormatError

logger = logging.getLogger(__name__)

ECGR_MAGIC = b"ECGR"
ECGR_VERSION = 1

DATASET_FS = {"wesad": 700, "swell": 2048}
ALLOWED_FS = (256, 700, 2048)

# WESAD chest-device label codes as published with the dataset.
WESAD_CODES = {
    0: "transient",
    1: "neutral",
    2: "stress",
    3: "amusement",
    4: "meditation",
    5: "ignore",
    6: "ignore",
    7: "ignore",
}
WESAD_BINARY = {1: 0, 3: 0, 2: 1}
WESAD_SUBJECTS = [f"S{i}" for i in range(2, 18) if i != 12]

# SWELL-KW working conditions; relax blocks are not part of either class.
SWELL_CODES = {0: "relax", 1: "neutral", 2: "time pressure", 3: "interruptions"}
SWELL_BINARY = {1: 0, 2: 1, 3: 1}
SWELL_LETTERS = {"N": 1, "T": 2, "I": 3, "R": 0}
SWELL_SUBJECTS = [f"p{i}" for i in range(1, 26)]

SYNTHETIC_CODES = {0: "non-stress", 1: "stress"}
SYNTHETIC_BINARY = {0: 0, 1: 1}

_BINARY_MAPS = {
    "wesad": (WESAD_CODES, WESAD_BINARY),
    "swell": (SWELL_CODES, SWELL_BINARY),
    "synthetic": (SYNTHETIC_CODES, SYNTHETIC_BINARY),
}

MASKED = -1


@dataclass
class EcgRecord:
    subject_id: str
    fs_hz: int
    samples: np.ndarray
    condition: np.ndarray
    dataset: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.condition = np.asarray(self.condition, dtype=np.int8)
        if self.samples.shape != self.condition.shape or self.samples.ndim != 1:
            raise DataError(
                f"{self.subject_id}: {self.samples.shape} samples vs {self.condition.shape} condition codes"
            )
        if self.fs_hz not in ALLOWED_FS:
            raise DataError(f"{self.subject_id}: sampling rate {self.fs_hz} Hz not in {ALLOWED_FS}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.fs_hz

    def __eq__(self, other) -> bool:
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.fs_hz == other.fs_hz
            and self.dataset == other.dataset
            and self.samples.tobytes() == other.samples.tobytes()
            and np.array_equal(self.condition, other.condition)
        )


@dataclass
class WindowSet:
    """Segmented, normalised windows with binary labels and provenance.

    ``offsets`` hold each window's start sample in its subject's resampled
    signal; ``(subject_id, offset)`` is the window's provenance tag.
    """

    windows: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    fs_hz: int
    offsets: np.ndarray = None

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        if self.windows.ndim == 1 and self.windows.size == 0:
            self.windows = self.windows.reshape(0, 0)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.subject_ids = np.asarray(self.subject_ids, dtype=str)
        if self.offsets is None:
            self.offsets = np.arange(len(self.labels), dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        n = len(self.windows)
        if not (n == len(self.labels) == len(self.subject_ids) == len(self.offsets)):
            raise DataError("windows, labels, subject_ids and offsets disagree in length")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise DataError("window labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def window_len(self) -> int:
        return self.windows.shape[1] if self.windows.ndim == 2 else 0

    @property
    def tags(self) -> np.ndarray:
        return np.char.add(np.char.add(self.subject_ids, "@"), self.offsets.astype(str))

    def subjects(self) -> list[str]:
        return sorted(set(self.subject_ids.tolist()))

    def take(self, index) -> "WindowSet":
        index = np.asarray(index)
        return WindowSet(
            self.windows[index], self.labels[index], self.subject_ids[index], self.fs_hz, self.offsets[index]
        )

    def for_subjects(self, subjects) -> "WindowSet":
        return self.take(np.flatnonzero(np.isin(self.subject_ids, list(subjects))))

    @classmethod
    def concat(cls, parts: list["WindowSet"], fs_hz: int | None = None) -> "WindowSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls(np.zeros((0, 0)), [], [], fs_hz or 0, [])
        return cls(
            np.concatenate([p.windows for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.subject_ids for p in parts]),
            parts[0].fs_hz,
            np.concatenate([p.offsets for p in parts]),
        )

    def class_counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for s in self.subjects():
            lab = self.labels[self.subject_ids == s]
            out[s] = {"windows": int(lab.size), "stress": int(lab.sum()), "non_stress": int(lab.size - lab.sum())}
        return out

    # -- archive ---------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        """Write an ``.npz`` archive whose bytes depend only on the contents."""
        arrays = {
            "windows": self.windows,
            "labels": self.labels,
            "subject_ids": self.subject_ids,
            "offsets": self.offsets,
            "fs_hz": np.array(self.fs_hz, dtype=np.int64),
        }
        write_npz(path, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "WindowSet":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["windows"], z["labels"], z["subject_ids"], int(z["fs_hz"]), z["offsets"])


def write_npz(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Like ``np.savez`` but with fixed zip timestamps, so reruns are byte-identical."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED, allowZip64=True) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def binarize_labels(codes, dataset: str) -> np.ndarray:
    """Map dataset-native condition codes to 1 (stress), 0 (non-stress) or -1 (excluded)."""
    if dataset not in _BINARY_MAPS:
        raise DataError(f"unknown dataset {dataset!r}")
    documented, binary = _BINARY_MAPS[dataset]
    codes = np.asarray(codes)
    unknown = sorted(set(np.unique(codes).tolist()) - set(documented))
    if unknown:
        raise DataError(f"unknown {dataset} condition code(s): {unknown}")
    lut = np.full(max(documented) + 1, MASKED, dtype=np.int8)
    for code, label in binary.items():
        lut[code] = label
    return lut[codes.astype(np.int64)]


# ---------------------------------------------------------------------------
# canonical file format
# ---------------------------------------------------------------------------


def encode_record(record: EcgRecord) -> bytes:
    if len(record.samples) == 0:
        raise DataError(f"{record.subject_id}: refusing to write a record with no samples")
    if len(record.samples) != len(record.condition):
        raise FormatError(f"{record.subject_id}: samples/condition length mismatch")
    sid = record.subject_id.encode("utf-8")
    ds = record.dataset.encode("utf-8")
    header = ECGR_MAGIC + struct.pack("<HIQ", ECGR_VERSION, record.fs_hz, len(record.samples))
    header += struct.pack("<H", len(sid)) + sid + struct.pack("<H", len(ds)) + ds
    return (
        header
        + record.samples.astype("<f8", copy=False).tobytes()
        + record.condition.astype("i1", copy=False).tobytes()
    )


def decode_record(buf: bytes) -> EcgRecord:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated record: needed {n} bytes, {len(buf) - pos} available", pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != ECGR_MAGIC:
        raise FormatError("bad magic, not an .ecgr file", 0)
    version, fs, n = struct.unpack("<HIQ", take(14))
    if version != ECGR_VERSION:
        raise FormatError(f"unsupported .ecgr version {version}", 4)
    (id_len,) = struct.unpack("<H", take(2))
    subject = take(id_len).decode("utf-8")
    (ds_len,) = struct.unpack("<H", take(2))
    dataset = take(ds_len).decode("utf-8")
    payload_at = pos
    if len(buf) - pos != 9 * n:
        raise FormatError(
            f"payload is {len(buf) - pos} bytes but n={n} needs {9 * n} (samples and condition lengths disagree)",
            payload_at,
        )
    samples = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64)
    condition = np.frombuffer(take(n), dtype="i1").astype(np.int8)
    return EcgRecord(subject, fs, samples, condition, dataset)


def write_canonical(record: EcgRecord, path: str | Path) -> None:
    Path(path).write_bytes(encode_record(record))


def read_canonical(path: str | Path) -> EcgRecord:
    return decode_record(Path(path).read_bytes())


def read_canonical_dir(path: str | Path) -> list[EcgRecord]:
    return [read_canonical(p) for p in sorted(Path(path).glob("*.ecgr"))]


# ---------------------------------------------------------------------------
# dataset adapters
# ---------------------------------------------------------------------------


@dataclass
class ImportReport:
    dataset: str
    imported: list[str] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"dataset {self.dataset}"]
        lines += [f"ok {s}" for s in self.imported]
        lines += [f"failed {s} {reason}" for s, reason in self.failures]
        return "\n".join(lines) + "\n"


def check_dataset_fs(record: EcgRecord) -> EcgRecord:
    expected = DATASET_FS.get(record.dataset)
    if expected is not None and record.fs_hz != expected:
        raise DataError(
            f"{record.subject_id}: {record.dataset} ECG must be sampled at {expected} Hz, got {record.fs_hz}"
        )
    return record


def import_wesad(source: str | Path) -> tuple[list[EcgRecord], ImportReport]:
    """Read ``<source>/S<k>/S<k>.pkl`` chest ECG and labels for every subject."""
    source = Path(source)
    report = ImportReport("wesad")
    records = []
    for subject in WESAD_SUBJECTS:
        path = source / subject / f"{subject}.pkl"
        try:
            with open(path, "rb") as f:
                # published files are python-2 pickles
                data = pickle.load(f, encoding="latin1")
            ecg = np.asarray(data["signal"]["chest"]["ECG"], dtype=np.float64).reshape(-1)
            labels = np.asarray(data["label"]).reshape(-1)
            fs = int(data.get("fs", DATASET_FS["wesad"])) if isinstance(data, dict) else DATASET_FS["wesad"]
            record = check_dataset_fs(EcgRecord(subject, fs, ecg, labels.astype(np.int8), "wesad"))
        except FileNotFoundError:
            report.failures.append((subject, f"missing {path}"))
            continue
        except (KeyError, TypeError, ValueError, pickle.UnpicklingError, DataError) as exc:
            report.failures.append((subject, f"unreadable {path}: {exc}"))
            continue
        records.append(record)
        report.imported.append(subject)
    return records, report


_SWELL_FILE = re.compile(r"^(p\d+)_([NTIR])\.(csv|txt|npy)$", re.IGNORECASE)


def _read_column(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        return np.load(path, allow_pickle=False).astype(np.float64).reshape(-1)
    with open(path) as f:
        first = f.readline()
    skip = 0 if re.match(r"^\s*[-+0-9.eE]+\s*([,;\t ]|$)", first) else 1
    arr = np.loadtxt(path, delimiter="," if "," in first else None, skiprows=skip, ndmin=2)
    return arr[:, 0].astype(np.float64)


def import_swell(source: str | Path) -> tuple[list[EcgRecord], ImportReport]:
    """Read per-condition ECG exports named ``p<N>_<C>.{csv,txt,npy}``.

    ``C`` is the SWELL-KW condition letter (N neutral, T time pressure,
    I interruptions, R relax); blocks are concatenated in N, T, I, R order.
    """
    source = Path(source)
    report = ImportReport("swell")
    found: dict[str, dict[str, Path]] = {}
    for path in sorted(source.rglob("*")):
        m = _SWELL_FILE.match(path.name)
        if m:
            found.setdefault(m.group(1).lower(), {})[m.group(2).upper()] = path
    records = []
    for subject in SWELL_SUBJECTS:
        blocks = found.get(subject)
        if not blocks:
            report.failures.append((subject, f"no p{subject[1:]}_<condition> files under {source}"))
            continue
        try:
            samples, codes = [], []
            for letter in "NTIR":
                if letter in blocks:
                    sig = _read_column(blocks[letter])
                    samples.append(sig)
                    codes.append(np.full(sig.size, SWELL_LETTERS[letter], dtype=np.int8))
            record = EcgRecord(subject, DATASET_FS["swell"], np.concatenate(samples), np.concatenate(codes), "swell")
        except (OSError, ValueError) as exc:
            report.failures.append((subject, f"unreadable: {exc}"))
            continue
        records.append(check_dataset_fs(record))
        report.imported.append(subject)
    return records, report


# ---------------------------------------------------------------------------
# synthetic ECG
# ---------------------------------------------------------------------------

# (offset s relative to R peak, amplitude, width s) of the P, Q, R, S, T bumps
_BEAT_SHAPE = (
    (-0.16, 0.12, 0.025),
    (-0.025, -0.10, 0.010),
    (0.0, 1.00, 0.012),
    (0.025, -0.20, 0.010),
    (0.28, 0.25, 0.050),
)


def synth_ecg(
    subject_seed: int,
    duration_s: float,
    fs: int = 256,
    schedule: list[tuple[str, float]] | None = None,
    hr_rest: float | None = None,
    hr_stress: float | None = None,
) -> EcgRecord:
    """ECG-like trace whose stress segments have a faster, steadier heart rate.

    ``schedule`` is a list of ``("non-stress" | "stress", seconds)`` blocks
    summing to ``duration_s``; the default is half of each.
    """
    if duration_s < 60:
        raise ValueError(f"synthetic records need at least 60 s, got {duration_s}")
    if schedule is None:
        schedule = [("non-stress", duration_s / 2), ("stress", duration_s / 2)]
    if not math.isclose(sum(s for _, s in schedule), duration_s):
        raise ValueError("schedule durations must add up to duration_s")

    rng = Rng(subject_seed)
    n = int(round(duration_s * fs))
    condition = np.zeros(n, dtype=np.int8)
    start = 0.0
    for name, seconds in schedule:
        if name not in ("non-stress", "stress"):
            raise ValueError(f"unknown schedule condition {name!r}")
        lo, hi = int(round(start * fs)), int(round((start + seconds) * fs))
        condition[lo:hi] = 1 if name == "stress" else 0
        start += seconds

    trait = rng.uniform(-1.0, 1.0, 6)
    rate = {
        0: hr_rest if hr_rest is not None else 65.0 + 4.0 * trait[0],
        1: hr_stress if hr_stress is not None else 90.0 + 4.0 * trait[1],
    }
    rr_jitter = {0: 0.06, 1: 0.02}
    amplitude = 1.0 + 0.2 * trait[2]
    wander_amp = 0.1 + 0.05 * trait[3]
    wander_hz = 0.25 + 0.1 * trait[4]

    t = np.arange(n) / fs
    x = wander_amp * np.sin(2 * np.pi * wander_hz * t + np.pi * trait[5])
    beat = 0.3 * rng.uniform(0.0, 1.0, 1)[0]
    half = int(0.5 * fs)
    while beat < duration_s:
        idx = int(beat * fs)
        lo, hi = max(idx - half, 0), min(idx + half, n)
        local = t[lo:hi] - beat
        for offset, amp, width in _BEAT_SHAPE:
            x[lo:hi] += amplitude * amp * np.exp(-0.5 * ((local - offset) / width) ** 2)
        state = int(condition[min(idx, n - 1)])
        rr = 60.0 / rate[state] + rr_jitter[state] * rng.normal()
        beat += max(rr, 0.3)
    x += 0.02 * rng.normal(shape=n)
    return EcgRecord(f"synth{subject_seed:02d}", fs, x, condition, "synthetic")


def synthetic_cohort(
    n_subjects: int = 4,
    duration_s: float = 240,
    fs: int = 256,
    block_s: float = 60,
    seed: int = 0,
) -> list[EcgRecord]:
    """Subjects with alternating rest/stress blocks and staggered baseline heart rates.

    Resting rates are spread over 60-78 bpm with stress 24 bpm higher, so one
    subject's stress rate can sit close to another's resting rate; that
    inter-subject shift is what per-subject calibration has to correct.
    """
    n_blocks = int(round(duration_s / block_s))
    schedule = [("non-stress" if b % 2 == 0 else "stress", block_s) for b in range(n_blocks)]
    span = np.linspace(60.0, 78.0, n_subjects) if n_subjects > 1 else np.array([69.0])
    return [
        synth_ecg(seed + k, duration_s, fs, schedule, hr_rest=float(rest), hr_stress=float(rest) + 24.0)
        for k, rest in enumerate(span)
    ]
