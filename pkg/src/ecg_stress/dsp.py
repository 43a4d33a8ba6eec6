"""ECG conditioning: high-pass filtering, resampling, z-scoring and windowing.

The fixed order is filter (native rate) -> resample -> per-subject z-score
-> sliding windows; :func:`preprocess_record` runs the whole chain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

from .errors import DataError
from .ingest import MASKED, EcgRecord, WindowSet, binarize_labels

logger = logging.getLogger(__name__)

TARGET_FS = 256
WINDOW_S = 30
STEP_S = 1
KAISER_BETA = 8.6
TAPS_PER_PHASE = 64


@dataclass(frozen=True)
class FilterSpec:
    sample_rate_hz: float
    order: int = 5
    cutoff_hz: float = 0.5
    kind: str = "highpass"

    def __post_init__(self):
        if self.kind != "highpass":
            raise ValueError(f"only high-pass filters are supported, got {self.kind!r}")
        if self.order < 1:
            raise ValueError(f"filter order must be >= 1, got {self.order}")
        if not 0 < self.cutoff_hz < self.sample_rate_hz / 2:
            raise ValueError(
                f"cutoff {self.cutoff_hz} Hz must lie strictly between 0 and Nyquist "
                f"({self.sample_rate_hz / 2} Hz)"
            )


@dataclass(frozen=True)
class Sos:
    """Cascade of biquads, one row ``(b0, b1, b2, 1, a1, a2)`` per section."""

    sections: np.ndarray

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(row[3:]) for row in self.sections])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def response(self, freqs_hz, fs: float) -> np.ndarray:
        """Complex frequency response at the given frequencies."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs)
        h = np.ones_like(z)
        for b0, b1, b2, a0, a1, a2 in self.sections:
            h *= (b0 + b1 / z + b2 / z**2) / (a0 + a1 / z + a2 / z**2)
        return h


def design_butterworth_highpass(spec: FilterSpec) -> Sos:
    """Digital Butterworth high-pass via the bilinear transform with prewarping."""
    n, fs = spec.order, float(spec.sample_rate_hz)
    warped = 2 * fs * math.tan(math.pi * spec.cutoff_hz / fs)
    # left-half-plane poles of the unit-cutoff low-pass prototype
    proto = np.exp(1j * np.pi * (2 * np.arange(n) + n + 1) / (2 * n))
    analog = warped / proto  # low-pass -> high-pass; all zeros move to s = 0
    digital = (2 * fs + analog) / (2 * fs - analog)

    sections = []
    for p in digital:
        if p.imag > 1e-14:
            a = [1.0, -2.0 * p.real, abs(p) ** 2]
            b = [1.0, -2.0, 1.0]
        elif abs(p.imag) <= 1e-14:
            a = [1.0, -p.real, 0.0]
            b = [1.0, -1.0, 0.0]
        else:
            continue
        # unit gain at Nyquist, where the analog high-pass is flat
        gain = abs(sum(b[k] * (-1) ** k for k in range(3)) / sum(a[k] * (-1) ** k for k in range(3)))
        sections.append([c / gain for c in b] + a)
    sections.sort(key=lambda row: row[5])  # most resonant section last
    return Sos(np.array(sections, dtype=np.float64))


def butterworth_highpass_magnitude(freqs_hz, fs: float, order: int, cutoff_hz: float) -> np.ndarray:
    """Closed-form |H| of the prewarped digital Butterworth high-pass."""
    w = np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs
    ratio = math.tan(math.pi * cutoff_hz / fs) / np.tan(w)
    return 1.0 / np.sqrt(1.0 + ratio ** (2 * order))


def filter_forward(sos: Sos, x) -> np.ndarray:
    """Causal single pass through the cascade, zero initial state."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot filter an empty signal")
    return sps.sosfilt(sos.sections, x)


def kaiser_sinc(up: int, down: int, taps_per_phase: int = TAPS_PER_PHASE, beta: float = KAISER_BETA) -> np.ndarray:
    """Anti-aliasing low-pass for an up/down resampler, unit DC gain.

    Cutoff is the tighter of the two Nyquist limits; the length gives each
    of the ``up`` polyphase branches ``taps_per_phase`` taps (plus one centre tap).
    """
    length = taps_per_phase * up + 1
    cutoff = 1.0 / max(up, down)  # fraction of the upsampled Nyquist
    n = np.arange(length) - (length - 1) / 2
    h = cutoff * np.sinc(cutoff * n) * np.kaiser(length, beta)
    return h / h.sum()


def resample(x, from_hz: int, to_hz: int) -> np.ndarray:
    """Rational polyphase downsampling by ``L/M = to_hz/from_hz`` in lowest terms."""
    if to_hz <= 0 or from_hz <= 0:
        raise ValueError("sampling rates must be positive")
    if to_hz > from_hz:
        raise NotImplementedError(f"upsampling {from_hz} -> {to_hz} Hz is unsupported")
    x = np.asarray(x, dtype=np.float64)
    g = math.gcd(from_hz, to_hz)
    up, down = to_hz // g, from_hz // g
    if up == down:
        return x.copy()
    return sps.resample_poly(x, up, down, window=kaiser_sinc(up, down))


def resample_labels(codes, from_hz: int, to_hz: int) -> np.ndarray:
    """Nearest-preceding-sample pick of per-sample codes onto the new rate."""
    codes = np.asarray(codes)
    g = math.gcd(from_hz, to_hz)
    up, down = to_hz // g, from_hz // g
    n_out = -(-len(codes) * up // down)
    idx = np.minimum(np.arange(n_out) * down // up, len(codes) - 1)
    return codes[idx]


def zscore_per_subject(x, subject: str = "<unknown>") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise DataError(f"subject {subject}: need at least 2 samples to z-score")
    std = x.std()
    if not std > 0:
        raise DataError(f"subject {subject}: signal has zero variance")
    return (x - x.mean()) / std


def window_count(n: int, win: int, step: int) -> int:
    return 0 if n < win else (n - win) // step + 1


def segment_windows(
    x,
    labels,
    fs: int,
    win_s: float = WINDOW_S,
    step_s: float = STEP_S,
    subject_id: str = "",
) -> WindowSet:
    """Sliding windows with majority labels (ties count as stress).

    ``labels`` are per-sample 0/1 with -1 marking excluded samples; any
    window touching an excluded sample is dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise DataError(f"{subject_id}: {len(labels)} labels for {len(x)} samples")
    win, step = int(round(win_s * fs)), int(round(step_s * fs))
    if win <= 0 or step <= 0:
        raise ValueError("window and step must be positive")
    if len(x) < win:
        logger.warning("%s: %d samples is shorter than one %d-sample window; skipped", subject_id, len(x), win)
        return WindowSet(np.zeros((0, win)), [], [], fs, [])

    offsets = np.arange(window_count(len(x), win, step), dtype=np.int64) * step
    # prefix sums give per-window counts without materialising label windows
    stress = np.concatenate([[0], np.cumsum(labels == 1)])
    masked = np.concatenate([[0], np.cumsum(labels == MASKED)])
    n_stress = stress[offsets + win] - stress[offsets]
    keep = masked[offsets + win] == masked[offsets]
    offsets, n_stress = offsets[keep], n_stress[keep]
    window_labels = (2 * n_stress >= win).astype(np.int8)
    windows = sliding_window_view(x, win)[offsets]
    return WindowSet(windows, window_labels, np.full(len(offsets), subject_id), fs, offsets)


def preprocess_record(
    record: EcgRecord,
    target_hz: int = TARGET_FS,
    win_s: float = WINDOW_S,
    step_s: float = STEP_S,
    filter_order: int = 5,
    cutoff_hz: float = 0.5,
) -> WindowSet:
    """Filter at the native rate, resample, z-score and segment one subject."""
    sos = design_butterworth_highpass(FilterSpec(record.fs_hz, filter_order, cutoff_hz))
    filtered = filter_forward(sos, record.samples)
    signal = resample(filtered, record.fs_hz, target_hz)
    normalized = zscore_per_subject(signal, record.subject_id)
    binary = binarize_labels(record.condition, record.dataset)
    labels = resample_labels(binary, record.fs_hz, target_hz)
    return segment_windows(normalized, labels, target_hz, win_s, step_s, record.subject_id)
