# Frame-level pitch probabilities on a 360-bin, 20-cent grid
# starting at C1, and the cross-entropy pitch distortion.
#
# The estimator is YIN-style: a cumulative-mean-normalised
# difference function read out at each grid bin's period.

import dataclasses
import math

import numpy as np
from scipy.ndimage import gaussian_filter1d

from pym2a.error_classes import M2AConfigError, M2AShapeError
from pym2a.s01_reporting_classes import module_logger
from pym2a.s05_spectral import _check_waveform
from pym2a.utility_classes import aligned_length

logger = module_logger(__name__)

CENTS_PER_OCTAVE = 1200
GRID_CENTS = 7200
SILENCE_RMS = 1e-4
YIN_THRESHOLD = 0.1
LOG_FLOOR = 1e-10
# Bins whose period exceeds the detected one by more than a
# semitone are treated as subharmonics
SUBHARMONIC_MARGIN = 2.0 ** (1.0 / 12.0)


@dataclasses.dataclass(frozen=True)
class PitchConfig:
    sample_rate: int = 24000
    f_min: float = 32.70
    bins: int = 360
    cents_per_bin: int = 20
    window: int = 1024
    hop: int = 288
    smoothing_std: float = 25.0

    def __post_init__(self):
        if self.bins * self.cents_per_bin != GRID_CENTS:
            raise M2AConfigError(
                f"bins * cents_per_bin must be {GRID_CENTS}, "
                f"not {self.bins * self.cents_per_bin}"
            )
        if self.f_min <= 0:
            raise M2AConfigError("f_min must be positive")
        if self.sample_rate < 2 * self.f_max:
            raise M2AConfigError(
                f"sample_rate {self.sample_rate} is below twice the grid top "
                f"{self.f_max:.1f} Hz"
            )
        if self.window < 1 or self.hop < 1:
            raise M2AConfigError("pitch window and hop must be at least 1")
        if self.smoothing_std < 0:
            raise M2AConfigError("smoothing_std must be non-negative")

    @property
    def f_max(self):
        return self.f_min * 2.0 ** (GRID_CENTS / CENTS_PER_OCTAVE)

    @property
    def max_lag(self):
        return math.ceil(self.sample_rate / self.f_min) + 1

    def frame_count(self, signal_length):
        return 1 + signal_length // self.hop


@dataclasses.dataclass(frozen=True, eq=False)
class PitchPosterior:
    probs: np.ndarray
    config: PitchConfig

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != self.config.bins:
            raise M2AShapeError(
                f"expected frames x {self.config.bins}, got {probs.shape}"
            )
        if np.any(probs < 0):
            raise M2AShapeError("posterior entries must be non-negative")
        if probs.size and np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-6:
            raise M2AShapeError("posterior rows must sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def frames(self):
        return self.probs.shape[0]


def bin_frequencies(cfg):
    """f_b = f_min * 2**(b * cents_per_bin / 1200)"""
    return cfg.f_min * 2.0 ** (np.arange(cfg.bins) * cfg.cents_per_bin / CENTS_PER_OCTAVE)


def _frame_segments(waveform, cfg):
    # Frame t starts at t*hop - window//2, zeros outside the signal
    frames = cfg.frame_count(waveform.size)
    span = cfg.window + cfg.max_lag
    half = cfg.window // 2
    needed = (frames - 1) * cfg.hop + span
    padded = np.zeros(needed)
    length = min(waveform.size, needed - half)
    padded[half : half + length] = waveform[:length]
    starts = np.arange(frames)[:, None] * cfg.hop
    return padded[starts + np.arange(span)[None, :]]


def _difference(segments, cfg):
    """
    d(tau) = sum_{j<W} (x[j] - x[j + tau])**2 for tau in [0, max_lag],
    computed through the FFT cross-correlation.
    """
    window, span = cfg.window, segments.shape[1]
    size = 1 << int(math.ceil(math.log2(span + window)))
    head = segments[:, :window]
    correlation = np.fft.irfft(
        np.conj(np.fft.rfft(head, size, axis=1)) * np.fft.rfft(segments, size, axis=1),
        size,
        axis=1,
    )[:, : cfg.max_lag + 1]
    energy = np.concatenate(
        (np.zeros((segments.shape[0], 1)), np.cumsum(segments**2, axis=1)), axis=1
    )
    lags = np.arange(cfg.max_lag + 1)
    shifted = energy[:, lags + window] - energy[:, lags]
    return np.maximum(energy[:, [window]] + shifted - 2.0 * correlation, 0.0)


def _normalised_difference(diff):
    # d'(0) = 1, d'(tau) = d(tau) * tau / sum_{j=1..tau} d(j)
    lags = np.arange(diff.shape[1])
    running = np.cumsum(diff[:, 1:], axis=1)
    cmndf = np.ones_like(diff)
    np.divide(
        diff[:, 1:] * lags[None, 1:],
        running,
        out=cmndf[:, 1:],
        where=running > 0,
    )
    return cmndf


def _interpolate(cmndf, lags):
    # Quadratic interpolation through the three nearest integer lags
    centre = np.clip(np.round(lags).astype(int), 1, cmndf.shape[1] - 2)
    delta = lags - centre
    y0, y1, y2 = cmndf[:, centre - 1], cmndf[:, centre], cmndf[:, centre + 1]
    return y1 + 0.5 * delta * (y2 - y0) + 0.5 * delta**2 * (y2 - 2.0 * y1 + y0)


def _detected_periods(cmndf, shortest):
    # First dip below the threshold, walked down to its local minimum;
    # the global minimum when nothing dips
    periods = np.empty(cmndf.shape[0])
    for index, row in enumerate(cmndf):
        below = np.flatnonzero(row[shortest:] < YIN_THRESHOLD)
        if below.size == 0:
            periods[index] = shortest + np.argmin(row[shortest:])
            continue
        lag = shortest + below[0]
        while lag + 1 < row.size and row[lag + 1] < row[lag]:
            lag += 1
        periods[index] = lag
    return periods


def pitch_posterior(waveform, cfg):
    """
    Salience of each bin is max(0, 1 - d'(tau_bin)). A periodic frame
    also dips at every multiple of its period, so bins whose period is
    more than a semitone above the detected YIN period get zero
    salience before the blur.

    :param waveform: 1-D samples at ``cfg.sample_rate``
    :param cfg: PitchConfig
    :return: PitchPosterior with 1 + len // hop frames; silent
        frames (RMS below 1e-4) are uniform
    """
    waveform = _check_waveform(waveform)
    segments = _frame_segments(waveform, cfg)
    cmndf = _normalised_difference(_difference(segments, cfg))
    lags = cfg.sample_rate / bin_frequencies(cfg)
    salience = np.maximum(0.0, 1.0 - _interpolate(cmndf, lags))
    shortest = max(1, int(math.floor(cfg.sample_rate / cfg.f_max)))
    periods = _detected_periods(cmndf, shortest)
    salience[lags[None, :] > SUBHARMONIC_MARGIN * periods[:, None]] = 0.0
    if cfg.smoothing_std > 0:
        salience = gaussian_filter1d(
            salience, cfg.smoothing_std / cfg.cents_per_bin, axis=1, mode="constant"
        )
    rms = np.sqrt(np.mean(segments[:, : cfg.window] ** 2, axis=1))
    totals = salience.sum(axis=1)
    voiced = (rms >= SILENCE_RMS) & (totals > 0)
    probs = np.full(salience.shape, 1.0 / cfg.bins)
    probs[voiced] = salience[voiced] / totals[voiced, None]
    logger.debug("pitch posterior: %d frames, %d voiced", len(probs), voiced.sum())
    return PitchPosterior(probs, cfg)


def posterior_argmax_table(posterior):
    """
    :return: list of (frame_index, hz, confidence) with confidence
        the row maximum
    """
    freqs = bin_frequencies(posterior.config)
    best = np.argmax(posterior.probs, axis=1)
    return [
        (index, float(freqs[bin_]), float(posterior.probs[index, bin_]))
        for index, bin_ in enumerate(best)
    ]


def _probs(posterior):
    if isinstance(posterior, PitchPosterior):
        return posterior.probs
    return np.asarray(posterior, dtype=np.float64)


def frame_cross_entropy(ref, test):
    """
    Per-frame -sum_b ref[b] * log(max(test[b], 1e-10)) after
    truncating both to the shorter length.

    :raises M2AAlignmentError: frame counts differ by more than 5%
    """
    ref, test = _probs(ref), _probs(test)
    if ref.shape[1] != test.shape[1]:
        raise M2AShapeError(f"bin counts differ: {ref.shape[1]} vs {test.shape[1]}")
    frames = aligned_length(len(ref), len(test), "pitch frames")
    return -np.sum(ref[:frames] * np.log(np.maximum(test[:frames], LOG_FLOOR)), axis=1)


def pitch_cross_entropy(ref, test):
    """
    Pitch distortion in nats: mean frame cross-entropy of the test
    posterior against the reference (natural) posterior.
    """
    per_frame = frame_cross_entropy(ref, test)
    if per_frame.size == 0:
        raise M2AShapeError("no frames to compare")
    return float(np.mean(per_frame))
