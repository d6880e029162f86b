"""ECG transforms and the random composer that builds pretext training pairs.

Every transform takes and returns a 1-D window of unchanged length. Random
ones accept ``seed`` as anything :func:`numpy.random.default_rng` accepts,
including an existing ``Generator``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal

from .preprocess import detect_r_peaks

logger = logging.getLogger(__name__)


class TransformKind(enum.IntEnum):
    MASK = 0
    CROP = 1
    NOISE = 2
    PERMUTE = 3
    TIME_WARP = 4
    SCALE = 5
    INVERT_TIME = 6
    NEGATE = 7


ORIGINAL_INDEX = 8
N_LABELS = 9
MAX_TRANSFORMS = 4


@dataclass
class MaskResult:
    values: np.ndarray
    masked: np.ndarray  # boolean, True where zeroed
    mode: str


def _random_patches(n: int, n_mask: int, patch_len: int, rng) -> np.ndarray:
    masked = np.zeros(n, dtype=bool)
    if n_mask == 0:
        return masked
    n_patches = int(np.ceil(n_mask / patch_len))
    sizes = np.full(n_patches, n_mask // n_patches)
    sizes[: n_mask % n_patches] += 1
    gaps = rng.multinomial(n - n_mask, np.full(n_patches + 1, 1.0 / (n_patches + 1)))
    pos = 0
    for size, gap in zip(sizes, gaps):
        pos += gap
        masked[pos:pos + size] = True
        pos += size
    return masked


def mask(values, mode: str = "random", ratio: float = 0.1, rate_hz: float = 100.0,
         seed=None, patch_seconds: float = 0.5) -> MaskResult:
    """Zero random patches, or the QRS / PR intervals around detected R-peaks.

    ``random`` zeroes exactly ``floor(ratio * len)`` samples. The interval
    modes pick ``ceil(ratio * n_peaks)`` peaks and zero +/-60 ms around each
    (QRS) or 200 to 40 ms before each (PR). With no detectable peaks they fall
    back to ``random`` and say so in ``MaskResult.mode``.
    """
    x = np.asarray(values, dtype=np.float64)
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    n = len(x)
    used = mode
    masked = np.zeros(n, dtype=bool)
    if mode in ("qrs_interval", "pr_interval"):
        peaks = detect_r_peaks(x, rate_hz) if n >= 2 * rate_hz else np.array([], dtype=int)
        if len(peaks) == 0:
            logger.debug("no R-peaks found; %s masking falls back to random", mode)
            used = "random (fallback)"
        else:
            chosen = rng.choice(peaks, size=int(np.ceil(ratio * len(peaks))), replace=False)
            if mode == "qrs_interval":
                lo_off, hi_off = -int(round(0.06 * rate_hz)), int(round(0.06 * rate_hz))
            else:
                lo_off, hi_off = -int(round(0.2 * rate_hz)), -int(round(0.04 * rate_hz))
            for p in chosen:
                masked[max(0, p + lo_off):max(0, min(n, p + hi_off + 1))] = True
    elif mode != "random":
        raise ValueError(f"unknown mask mode {mode!r}")
    if used != mode or mode == "random":
        patch = max(1, int(round(patch_seconds * rate_hz)))
        masked = _random_patches(n, int(np.floor(ratio * n)), patch, rng)
    out = x.copy()
    out[masked] = 0.0
    return MaskResult(out, masked, used)


def crop(values, length: int, seed=None) -> np.ndarray:
    """``s[r:r+length]`` at a uniform offset, zero-padded back to full length."""
    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    if not 0 < length <= n:
        raise ValueError(f"crop length must be in (0, {n}], got {length}")
    r = int(np.random.default_rng(seed).integers(0, n - length + 1))
    out = np.zeros(n)
    out[:length] = x[r:r + length]
    return out


def add_noise(values, kind: str = "white", snr_db: float = 10.0, seed=None,
              rate_hz: float = 100.0, wander_cutoff_hz: float = 0.5) -> np.ndarray:
    """Additive white noise or low-frequency wander at an exact SNR.

    The noise draw is rescaled so ``10 log10(P_signal / P_noise)`` equals
    ``snr_db`` for the realised noise vector.
    """
    x = np.asarray(values, dtype=np.float64)
    p_signal = np.mean(x ** 2)
    if p_signal == 0:
        raise ValueError("SNR is undefined for an all-zero signal")
    rng = np.random.default_rng(seed)
    if kind == "white":
        noise = rng.standard_normal(len(x))
    elif kind == "wander":
        walk = np.cumsum(rng.standard_normal(len(x)))
        sos = signal.butter(4, wander_cutoff_hz, btype="lowpass", fs=rate_hz, output="sos")
        noise = signal.sosfiltfilt(sos, walk - walk.mean())
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    noise = noise - noise.mean()
    p_noise = np.mean(noise ** 2)
    if p_noise == 0:
        return x.copy()
    noise *= np.sqrt(p_signal / (10 ** (snr_db / 10)) / p_noise)
    return x + noise


def permutation_segments(n: int, m: int, rng, min_fraction: float = 0.1) -> np.ndarray:
    """Segment lengths for ``m`` pieces, each at least ``min_fraction * n``."""
    min_len = int(np.ceil(min_fraction * n))
    free = n - m * min_len
    if free < 0:
        raise ValueError(f"{m} segments of >= {min_len} samples do not fit in {n}")
    return min_len + rng.multinomial(free, np.full(m, 1.0 / m))


def permute(values, m: int, seed=None) -> np.ndarray:
    """Cut into ``m`` segments (each >= 10% of the length) and shuffle them."""
    x = np.asarray(values, dtype=np.float64)
    if not 1 <= m <= 10:
        raise ValueError(f"m must be in [1, 10], got {m}")
    if m == 1:
        return x.copy()
    rng = np.random.default_rng(seed)
    bounds = np.concatenate([[0], np.cumsum(permutation_segments(len(x), m, rng))])
    pieces = [x[bounds[i]:bounds[i + 1]] for i in range(m)]
    return np.concatenate([pieces[i] for i in rng.permutation(m)])


def stretch(segment, factor: float) -> np.ndarray:
    """Linear interpolation of ``segment`` onto ``round(len * factor)`` points."""
    n = len(segment)
    new_len = max(1, int(round(n * factor)))
    if new_len == n:
        return np.asarray(segment, dtype=np.float64).copy()
    return np.interp(np.linspace(0, n - 1, new_len), np.arange(n), segment)


def time_warp(values, n_segments: int = 3, factor_range=(0.8, 1.25), seed=None) -> np.ndarray:
    """Stretch or squeeze a random non-empty subset of equal segments.

    The concatenation is cropped when longer than the input and zero-padded
    when shorter.
    """
    x = np.asarray(values, dtype=np.float64)
    lo, hi = factor_range
    if not 0.5 <= lo <= hi <= 2.0:
        raise ValueError(f"factor_range must lie within [0.5, 2.0], got {factor_range}")
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    rng = np.random.default_rng(seed)
    pieces = np.array_split(x, n_segments)
    chosen = rng.random(n_segments) < 0.5
    if not chosen.any():
        chosen[rng.integers(n_segments)] = True
    out = []
    for piece, warp in zip(pieces, chosen):
        out.append(stretch(piece, rng.uniform(lo, hi)) if warp else piece)
    y = np.concatenate(out)[: len(x)]
    return np.pad(y, (0, len(x) - len(y)))


def scale(values, alpha: float) -> np.ndarray:
    if not 0 < alpha < 5:
        raise ValueError(f"alpha must be in (0, 5), got {alpha}")
    return alpha * np.asarray(values, dtype=np.float64)


def invert_time(values) -> np.ndarray:
    """Temporal reversal, ``s'[n] = s[N - n]``."""
    return np.asarray(values, dtype=np.float64)[::-1].copy()


def negate(values) -> np.ndarray:
    """Amplitude negation, ``s'[n] = -s[n]``."""
    return -np.asarray(values, dtype=np.float64)


@dataclass
class AugmentConfig:
    """Selection probability and parameter ranges for :func:`compose`.

    ``scale_range`` bounds the amplification factor; half of the draws use
    its reciprocal so the window is attenuated instead.
    """

    p: float = 0.3
    mask_ratio_range: tuple = (0.1, 0.3)
    mask_modes: tuple = ("random", "qrs_interval", "pr_interval")
    crop_fraction_range: tuple = (0.5, 0.9)
    snr_db_range: tuple = (0.0, 15.0)
    noise_kinds: tuple = ("white", "wander")
    permute_m_range: tuple = (3, 10)
    warp_segments: int = 3
    warp_factor_range: tuple = (0.8, 1.25)
    scale_range: tuple = (1.5, 4.0)
    rate_hz: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi < 5:
            raise ValueError(f"scale_range must lie in (0, 5), got {self.scale_range}")
        if not 1 <= self.permute_m_range[0] <= self.permute_m_range[1] <= 10:
            raise ValueError("permute_m_range must lie in [1, 10]")
        for key in ("mask_ratio_range", "crop_fraction_range", "snr_db_range",
                    "permute_m_range", "warp_factor_range", "scale_range",
                    "mask_modes", "noise_kinds"):
            setattr(self, key, tuple(getattr(self, key)))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class AugmentationOutcome:
    values: np.ndarray
    target: np.ndarray
    applied: list = field(default_factory=list)  # [(TransformKind, params dict)]


def _apply(kind: TransformKind, x: np.ndarray, cfg: AugmentConfig, rng) -> tuple[np.ndarray, dict]:
    n = len(x)
    if kind is TransformKind.MASK:
        mode = str(rng.choice(cfg.mask_modes))
        ratio = float(rng.uniform(*cfg.mask_ratio_range))
        res = mask(x, mode, ratio, cfg.rate_hz, rng)
        return res.values, {"mode": res.mode, "ratio": ratio}
    if kind is TransformKind.CROP:
        length = int(round(rng.uniform(*cfg.crop_fraction_range) * n))
        return crop(x, max(1, length), rng), {"length": length}
    if kind is TransformKind.NOISE:
        noise_kind = str(rng.choice(cfg.noise_kinds))
        snr = float(rng.uniform(*cfg.snr_db_range))
        if not np.any(x):
            return x.copy(), {"kind": noise_kind, "snr_db": snr, "skipped": True}
        return add_noise(x, noise_kind, snr, rng, rate_hz=cfg.rate_hz), {"kind": noise_kind, "snr_db": snr}
    if kind is TransformKind.PERMUTE:
        m = int(rng.integers(cfg.permute_m_range[0], cfg.permute_m_range[1] + 1))
        return permute(x, m, rng), {"m": m}
    if kind is TransformKind.TIME_WARP:
        return time_warp(x, cfg.warp_segments, cfg.warp_factor_range, rng), {}
    if kind is TransformKind.SCALE:
        factor = float(np.exp(rng.uniform(*np.log(cfg.scale_range))))
        alpha = factor if rng.random() < 0.5 else 1.0 / factor
        return scale(x, alpha), {"alpha": alpha}
    if kind is TransformKind.INVERT_TIME:
        return invert_time(x), {}
    return negate(x), {}


def compose(window, config: AugmentConfig | None = None, seed=None) -> AugmentationOutcome:
    """Randomly transform one window and build its 9-way multi-label target.

    Each of the eight transforms is drawn independently with probability
    ``config.p``; a uniform subset of four survives if more are drawn. The
    survivors run in enumeration order. Bit 8 marks an untouched window.
    """
    config = config or AugmentConfig()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    x = np.asarray(window, dtype=np.float64)
    picked = [k for k in TransformKind if rng.random() < config.p]
    if len(picked) > MAX_TRANSFORMS:
        keep = rng.choice(len(picked), size=MAX_TRANSFORMS, replace=False)
        picked = [picked[i] for i in sorted(keep)]
    target = np.zeros(N_LABELS, dtype=np.float32)
    applied = []
    for kind in picked:
        x, params = _apply(kind, x, config, rng)
        applied.append((kind, params))
        target[kind] = 1.0
    if not applied:
        target[ORIGINAL_INDEX] = 1.0
    return AugmentationOutcome(x, target, applied)


def window_seed(base_seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent per-window seed stream derived from a base seed."""
    return np.random.SeedSequence([int(base_seed), *map(int, keys)])
