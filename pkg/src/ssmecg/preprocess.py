"""Resampling, smoothing, high-pass filtering, subject z-scoring, windowing and R-peaks."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

logger = logging.getLogger(__name__)

HR_MIN_BPM = 40.0
HR_MAX_BPM = 210.0
N_HR_BINS = 17


class DegenerateSignalError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    target_rate_hz: float = 100.0
    smoothing_kernel_len: int = 5
    highpass_cutoff_hz: float = 0.5
    highpass_order: int = 5
    window_seconds: float = 10.0
    pretrain_source_seconds: float = 15.0

    def __post_init__(self):
        if not self.target_rate_hz > 2 * self.highpass_cutoff_hz:
            raise ValueError("target_rate_hz must exceed twice the high-pass cutoff")
        if self.smoothing_kernel_len < 1 or self.smoothing_kernel_len % 2 == 0:
            raise ValueError("smoothing_kernel_len must be odd and >= 1")

    @property
    def window_len(self) -> int:
        return int(round(self.window_seconds * self.target_rate_hz))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Window:
    values: np.ndarray
    subject_id: str
    record_id: str
    start_offset_samples: int
    labels: dict = field(default_factory=dict)


def resample(samples, from_hz: float, to_hz: float) -> np.ndarray:
    """Downsample with a Kaiser-windowed sinc low-pass, then linear interpolation.

    Output length is ``round(len * to_hz / from_hz)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if from_hz <= 0 or to_hz <= 0:
        raise ValueError("sampling rates must be positive")
    if from_hz < to_hz:
        raise ValueError(f"upsampling from {from_hz} Hz to {to_hz} Hz is not supported")
    if from_hz == to_hz:
        return x.copy()
    ratio = from_hz / to_hz
    half = max(15, int(np.ceil(8 * ratio)))
    taps = signal.firwin(2 * half + 1, cutoff=0.45 * to_hz, window=("kaiser", 8.0), fs=from_hz)
    padded = np.pad(x, half, mode="edge")
    smooth = np.convolve(padded, taps, mode="valid")
    n_out = int(round(len(x) * to_hz / from_hz))
    t_out = np.arange(n_out) * (from_hz / to_hz)
    return np.interp(t_out, np.arange(len(x)), smooth)


def moving_average(samples, kernel_len: int) -> np.ndarray:
    """Centered moving average whose window shrinks at the edges."""
    x = np.asarray(samples, dtype=np.float64)
    if kernel_len < 1 or kernel_len % 2 == 0:
        raise ValueError(f"kernel_len must be odd and positive, got {kernel_len}")
    if kernel_len > len(x):
        raise ValueError(f"kernel_len {kernel_len} exceeds signal length {len(x)}")
    half = kernel_len // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(len(x))
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, len(x))
    return (csum[hi] - csum[lo]) / (hi - lo)


def highpass(samples, cutoff_hz: float = 0.5, order: int = 5, rate_hz: float = 100.0) -> np.ndarray:
    """Zero-phase Butterworth high-pass (forward-backward)."""
    if not 0 < cutoff_hz < rate_hz / 2:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {rate_hz / 2}) Hz")
    x = np.asarray(samples, dtype=np.float64)
    sos = signal.butter(order, cutoff_hz, btype="highpass", fs=rate_hz, output="sos")
    return signal.sosfiltfilt(sos, x)


def clean(samples, rate_hz: float, config: PreprocessConfig | None = None) -> np.ndarray:
    """Per-record part of the chain: resample, smooth, high-pass."""
    config = config or PreprocessConfig()
    x = resample(samples, rate_hz, config.target_rate_hz)
    x = moving_average(x, config.smoothing_kernel_len)
    return highpass(x, config.highpass_cutoff_hz, config.highpass_order, config.target_rate_hz)


def zscore_subject(groups: dict[str, list]) -> dict[str, list[np.ndarray]]:
    """Normalise each subject's signals with the subject's pooled mean and std.

    Args:
        groups: subject id -> list of 1-D signals.

    Returns:
        Same structure with normalised float64 arrays.
    """
    out = {}
    for subject, signals in groups.items():
        arrays = [np.asarray(s, dtype=np.float64) for s in signals]
        pooled = np.concatenate(arrays)
        mean = pooled.mean()
        std = pooled.std()
        if std <= 1e-8:
            raise DegenerateSignalError(f"subject {subject!r} has near-zero signal variance")
        out[subject] = [(a - mean) / std for a in arrays]
    return out


def segment(samples, window_len: int = 1000, mode: str = "fixed", seed=None,
            subject_id: str = "", record_id: str = "", labels: dict | None = None) -> list[Window]:
    x = np.asarray(samples)
    if len(x) < window_len:
        raise ValueError(f"signal of length {len(x)} is shorter than window_len {window_len}")
    labels = dict(labels or {})
    if mode == "fixed":
        starts = range(0, (len(x) // window_len) * window_len, window_len)
    elif mode == "random_offset":
        starts = [int(np.random.default_rng(seed).integers(0, len(x) - window_len + 1))]
    else:
        raise ValueError(f"unknown segmentation mode {mode!r}")
    return [
        Window(x[s:s + window_len].copy(), subject_id, record_id, int(s), dict(labels))
        for s in starts
    ]


def detect_r_peaks(samples, rate_hz: float = 100.0) -> np.ndarray:
    """R-peak indices via a band-pass / derivative / square / integrate detector.

    Candidate QRS energy peaks are accepted with the running signal and noise
    level estimates of the Pan-Tompkins scheme, then snapped to the largest
    deviation from the median in the raw signal nearby.
    """
    x = np.asarray(samples, dtype=np.float64)
    if rate_hz < 50:
        raise ValueError("rate_hz must be >= 50")
    if len(x) < 2 * rate_hz:
        raise ValueError("need at least 2 s of signal")
    if np.ptp(x) < 1e-12:
        return np.array([], dtype=int)

    nyq = rate_hz / 2
    sos = signal.butter(2, [5.0, min(15.0, 0.9 * nyq)], btype="bandpass", fs=rate_hz, output="sos")
    band = signal.sosfiltfilt(sos, x)
    deriv = np.gradient(band)
    win = max(1, int(round(0.15 * rate_hz)))
    energy = np.convolve(deriv ** 2, np.ones(win) / win, mode="same")
    if energy.max() <= 1e-12:
        return np.array([], dtype=int)

    refractory = int(np.ceil(0.2 * rate_hz))
    cand, _ = signal.find_peaks(energy, distance=refractory)
    if len(cand) == 0:
        return np.array([], dtype=int)

    first = energy[: int(2 * rate_hz)]
    spk = 0.25 * first.max()
    npk = 0.5 * first.mean()
    accepted = []
    for c in cand:
        level = energy[c]
        if level > npk + 0.25 * (spk - npk):
            accepted.append(c)
            spk = 0.125 * level + 0.875 * spk
        else:
            npk = 0.125 * level + 0.875 * npk

    dev = np.abs(x - np.median(x))
    search = max(1, int(round(0.1 * rate_hz)))
    peaks: list[int] = []
    for c in accepted:
        lo, hi = max(0, c - search), min(len(x), c + search + 1)
        p = lo + int(np.argmax(dev[lo:hi]))
        if peaks and p - peaks[-1] < refractory:
            if dev[p] > dev[peaks[-1]]:
                peaks[-1] = p
            continue
        peaks.append(p)
    return np.asarray(peaks, dtype=int)


def heart_rate_bpm(peaks, rate_hz: float) -> float:
    peaks = np.asarray(peaks)
    if len(peaks) < 2:
        raise ValueError("heart rate needs at least 2 peaks")
    return float(60.0 / np.mean(np.diff(peaks) / rate_hz))


def hr_bin(hr_bpm: float) -> int:
    """10-bpm bin over [40, 210]; 210 itself falls in the top bin."""
    if not HR_MIN_BPM <= hr_bpm <= HR_MAX_BPM:
        raise ValueError(f"heart rate {hr_bpm} outside [{HR_MIN_BPM}, {HR_MAX_BPM}] bpm")
    return min(int((hr_bpm - HR_MIN_BPM) // 10), N_HR_BINS - 1)


def preprocess_records(records, config: PreprocessConfig | None = None,
                       window_mode: str = "fixed", seed=None) -> list[Window]:
    """Full chain over a list of :class:`~ssmecg.signal_io.EcgRecord`.

    Records whose cleaned signal is shorter than one window are skipped with a
    log message.
    """
    config = config or PreprocessConfig()
    cleaned = {}
    by_subject: dict[str, list] = {}
    for rec in records:
        x = clean(rec.samples, rec.sampling_rate_hz, config)
        cleaned[rec.record_id] = x
        by_subject.setdefault(rec.subject_id, []).append(rec.record_id)
    normed = zscore_subject({s: [cleaned[r] for r in ids] for s, ids in by_subject.items()})
    for s, ids in by_subject.items():
        for rid, arr in zip(ids, normed[s]):
            cleaned[rid] = arr

    rng = np.random.default_rng(seed)
    windows = []
    for rec in records:
        x = cleaned[rec.record_id]
        if len(x) < config.window_len:
            logger.info("skipping %s: %d samples < window %d", rec.record_id, len(x), config.window_len)
            continue
        windows.extend(segment(x, config.window_len, window_mode, rng,
                               subject_id=rec.subject_id, record_id=rec.record_id,
                               labels=rec.labels))
    return windows


def save_windows(windows: list[Window], directory) -> None:
    """Write ``windows.f32le`` (row-major) and ``windows.index.jsonl``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if windows:
        data = np.stack([w.values for w in windows]).astype("<f4")
    else:
        data = np.zeros((0, 0), dtype="<f4")
    data.tofile(directory / "windows.f32le")
    with open(directory / "windows.index.jsonl", "w") as fh:
        for row, w in enumerate(windows):
            fh.write(json.dumps({
                "row": row,
                "record_id": w.record_id,
                "subject_id": w.subject_id,
                "start_offset_samples": w.start_offset_samples,
                "window_len": len(w.values),
                "labels": w.labels,
            }, sort_keys=True) + "\n")


def load_windows(directory) -> list[Window]:
    directory = Path(directory)
    index = [json.loads(line) for line in open(directory / "windows.index.jsonl") if line.strip()]
    if not index:
        return []
    window_len = index[0]["window_len"]
    data = np.fromfile(directory / "windows.f32le", dtype="<f4").reshape(len(index), window_len)
    return [
        Window(data[e["row"]].copy(), e["subject_id"], e["record_id"],
               e["start_offset_samples"], e.get("labels") or {})
        for e in index
    ]
