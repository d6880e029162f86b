"""Synthetic single-lead ECG with known beat positions, heart rate and class labels.

Used as the ground-truth corpus for tests and desk-scale experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal_io import DatasetManifest, EcgRecord

# (offset from R in s at RR = 1 s, amplitude, width in s)
_WAVES = {
    "P": (-0.20, 0.15, 0.025),
    "Q": (-0.035, -0.12, 0.010),
    "R": (0.0, 1.0, 0.012),
    "S": (0.035, -0.25, 0.012),
    "T": (0.28, 0.30, 0.045),
}

DEFAULT_HR_RANGES = {0: (55.0, 75.0), 1: (95.0, 130.0)}


@dataclass
class Morphology:
    """Per-subject scaling of the template waves."""

    amplitude: dict
    width: dict
    gain: float = 1.0

    @classmethod
    def default(cls) -> "Morphology":
        return cls({k: 1.0 for k in _WAVES}, {k: 1.0 for k in _WAVES})

    @classmethod
    def random(cls, rng: np.random.Generator, spread: float = 0.2) -> "Morphology":
        amp = {k: float(np.clip(1 + spread * rng.standard_normal(), 0.3, 2.0)) for k in _WAVES}
        wid = {k: float(np.clip(1 + 0.5 * spread * rng.standard_normal(), 0.6, 1.6)) for k in _WAVES}
        return cls(amp, wid, gain=float(np.exp(0.3 * rng.standard_normal())))


def beat_times(hr_bpm: float, duration_s: float, rng: np.random.Generator,
               rr_jitter: float = 0.02) -> np.ndarray:
    """R-peak times for a beat train at ``hr_bpm`` with multiplicative RR jitter."""
    rr = 60.0 / hr_bpm
    t = rng.uniform(0.1, rr)
    out = []
    while t < duration_s - 0.1:
        out.append(t)
        t += rr * (1 + rr_jitter * rng.standard_normal())
    return np.asarray(out)


def render_ecg(beats: np.ndarray, duration_s: float, rate_hz: float,
               morphology: Morphology | None = None, hr_bpm: float | None = None) -> np.ndarray:
    """Sum of Gaussian P-QRS-T waves centred on each beat time.

    The P and T offsets scale with the square root of the RR interval.
    """
    morphology = morphology or Morphology.default()
    n = int(round(duration_s * rate_hz))
    t = np.arange(n) / rate_hz
    x = np.zeros(n)
    rr = 60.0 / hr_bpm if hr_bpm else (np.median(np.diff(beats)) if len(beats) > 1 else 1.0)
    stretch = np.sqrt(rr)
    for name, (offset, amp, width) in _WAVES.items():
        off = offset * stretch if name in ("P", "T") else offset
        a = amp * morphology.amplitude[name]
        w = width * morphology.width[name]
        for b in beats:
            c = b + off
            lo, hi = int(max(0, (c - 5 * w) * rate_hz)), int(min(n, (c + 5 * w) * rate_hz + 2))
            x[lo:hi] += a * np.exp(-0.5 * ((t[lo:hi] - c) / w) ** 2)
    return morphology.gain * x


def synth_record(hr_bpm: float, duration_s: float = 15.0, rate_hz: float = 100.0,
                 rng: np.random.Generator | None = None, morphology: Morphology | None = None,
                 noise_std: float = 0.03, wander_amp: float = 0.1, rr_jitter: float = 0.02):
    """One noisy ECG-like series plus the true R-peak sample indices."""
    rng = np.random.default_rng() if rng is None else rng
    beats = beat_times(hr_bpm, duration_s, rng, rr_jitter)
    x = render_ecg(beats, duration_s, rate_hz, morphology, hr_bpm)
    t = np.arange(len(x)) / rate_hz
    x += wander_amp * np.sin(2 * np.pi * rng.uniform(0.1, 0.3) * t + rng.uniform(0, 2 * np.pi))
    x += noise_std * rng.standard_normal(len(x))
    return x, np.round(beats * rate_hz).astype(int)


def synth_corpus(n_subjects: int, windows_per_subject: int, seed: int = 0,
                 rate_hz: float = 100.0, duration_s: float = 15.0,
                 hr_ranges: dict | None = None, noise_std: float = 0.03,
                 name: str = "synthetic") -> DatasetManifest:
    """Subjects x records of labelled synthetic ECG.

    Each record draws a class uniformly, a heart rate uniformly from that
    class's range, and renders with the subject's morphology. Labels are
    ``stress`` (class index) and ``hr`` (the generator's rate in bpm).
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    hr_ranges = hr_ranges or DEFAULT_HR_RANGES
    classes = sorted(hr_ranges)
    rng = np.random.default_rng(seed)
    records = []
    for s in range(n_subjects):
        morph = Morphology.random(rng)
        for w in range(windows_per_subject):
            label = int(classes[rng.integers(len(classes))])
            lo, hi = hr_ranges[label]
            hr = float(rng.uniform(lo, hi))
            x, _ = synth_record(hr, duration_s, rate_hz, rng, morph, noise_std=noise_std)
            records.append(EcgRecord(
                record_id=f"s{s:03d}_w{w:04d}",
                subject_id=f"s{s:03d}",
                sampling_rate_hz=rate_hz,
                samples=x,
                labels={"stress": label, "hr": round(hr, 4)},
                session_tag=f"day{w // 10}",
            ))
    schema = {
        "stress": {"kind": "classification", "cardinality": len(classes)},
        "hr": {"kind": "regression", "range": [min(r[0] for r in hr_ranges.values()),
                                                max(r[1] for r in hr_ranges.values())]},
    }
    return DatasetManifest(name, records, schema)
