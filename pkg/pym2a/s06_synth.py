# Deterministic waveform generation: additive note synthesis,
# noise-excited source-filter synthesis, and Griffin-Lim
# reconstruction from MIDI spectrograms.
#
# Randomness always comes from numpy.random.default_rng(seed);
# nothing here touches global RNG state.

import dataclasses
import logging

import numpy as np
from scipy import sparse

from pym2a.error_classes import M2AConfigError, M2AInputError, M2AShapeError
from pym2a.s01_reporting_classes import module_logger
from pym2a.s05_spectral import (
    NUM_FILTERS,
    FilterbankCache,
    MagnitudeSpectrogram,
    _crop,
    _frames_stft,
    _overlap_add,
    istft,
    midi_center_frequencies,
    midi_spectrogram,
    stft,
    zero_filter_indices,
)
from pym2a.utility_classes import PYM2A_DEBUG

logger = module_logger(__name__)

# Per-pitch starting phase, spread by the golden ratio
PHASE_SPREAD = 0.618034
# Release tails are rendered for this many time constants
RELEASE_TAIL = 7.0
PEAK_TARGET = 0.9
NNLS_ITERATIONS = 200
NNLS_RIDGE = 1e-4
METHODS = ("additive", "source-filter", "griffin-lim")


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = 24000
    harmonics: int = 8
    rolloff_exponent: float = 1.0
    attack: float = 0.01
    release: float = 0.1

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise M2AConfigError("sample_rate must be positive")
        if self.harmonics < 1:
            raise M2AConfigError("harmonics must be at least 1")
        if self.rolloff_exponent <= 0:
            raise M2AConfigError("rolloff_exponent must be positive")
        if self.attack < 0 or self.release < 0:
            raise M2AConfigError("attack and release must be non-negative")


@dataclasses.dataclass(frozen=True, eq=False)
class GriffinLimResult:
    waveform: np.ndarray
    errors: tuple


def roll_notes(roll):
    """
    Recovers notes from a piano roll: runs of equal nonzero values
    in one pitch column, within valid_frames.

    :return: list of (pitch, start_frame, end_frame, level)
    """
    values = roll.values[: roll.valid_frames]
    notes = []
    for pitch in np.flatnonzero(values.any(axis=0)):
        column = values[:, pitch]
        edges = np.flatnonzero(np.diff(column)) + 1
        starts = np.concatenate(([0], edges))
        ends = np.concatenate((edges, [len(column)]))
        for start, end in zip(starts, ends):
            if column[start] > 0:
                notes.append((int(pitch), int(start), int(end), float(column[start])))
    return sorted(notes, key=lambda note: (note[1], note[0]))


def _envelope(elapsed, duration, cfg):
    # Linear attack while held, exponential release after the offset
    if cfg.attack > 0:
        ramp = np.minimum(1.0, np.maximum(elapsed, 0.0) / cfg.attack)
        held_level = min(1.0, duration / cfg.attack)
    else:
        ramp = np.ones_like(elapsed)
        held_level = 1.0
    after = elapsed - duration
    if cfg.release > 0:
        tail = held_level * np.exp(-np.maximum(after, 0.0) / cfg.release)
    else:
        tail = np.zeros_like(elapsed)
    return np.where(after < 0, ramp, tail)


def _limit_peak(waveform):
    peak = np.max(np.abs(waveform), initial=0.0)
    if peak > 1.0:
        logger.debug("peak %.3f, normalising to %.1f", peak, PEAK_TARGET)
        return waveform * (PEAK_TARGET / peak)
    return waveform


def additive_synth(roll, cfg):
    """
    Sum of harmonic tones, one per note of the roll:
    velocity * envelope(t) * sum_k k**-rolloff * sin(2 pi k f t + phase),
    with harmonics at or above Nyquist left out.

    :param roll: PianoRoll
    :param cfg: SynthConfig
    :return: waveform covering the roll's valid frames
    """
    period = roll.frame_spec.frame_period
    sample_rate = cfg.sample_rate
    length = int(round(roll.valid_frames * period * sample_rate))
    waveform = np.zeros(length)
    tail = RELEASE_TAIL * cfg.release
    for pitch, start, end, level in roll_notes(roll):
        onset, offset = start * period, end * period
        first = int(round(onset * sample_rate))
        stop = min(length, int(round((offset + tail) * sample_rate)))
        if first >= stop:
            continue
        times = np.arange(first, stop) / sample_rate
        f0 = midi_center_frequencies()[pitch]
        phase = 2.0 * np.pi * ((pitch * PHASE_SPREAD) % 1.0)
        tone = np.zeros(stop - first)
        for harmonic in range(1, cfg.harmonics + 1):
            if harmonic * f0 >= sample_rate / 2.0:
                break
            tone += harmonic ** (-cfg.rolloff_exponent) * np.sin(
                2.0 * np.pi * harmonic * f0 * times + phase
            )
        envelope = _envelope(times - onset, offset - onset, cfg)
        waveform[first:stop] += level * envelope * tone
    return _limit_peak(waveform)


def _check_spec(spec, fb, cfg):
    if spec.values.shape[1] != fb.weights.shape[0]:
        raise M2AShapeError(
            f"spectrogram has {spec.values.shape[1]} dims, "
            f"filterbank has {fb.weights.shape[0]} rows"
        )
    if not fb.matches(cfg):
        raise M2AShapeError(
            f"filterbank built for {fb.sample_rate} Hz / n_fft {fb.n_fft}, "
            f"config is {cfg.sample_rate} Hz / n_fft {cfg.n_fft}"
        )


def invert_filterbank(
    spec, fb, iterations=NNLS_ITERATIONS, ridge=NNLS_RIDGE, cfg=None
):
    """
    Per frame, solves min ||A x - e||^2 + ridge ||x||^2 with x >= 0
    by projected gradient, where A holds the non-zero filterbank rows
    and e = 10**values the filter energies. Zero filters are ignored.
    The start point spreads each filter's energy density back over
    its bins.

    :param spec: MidiSpectrogram
    :param fb: MidiFilterbank the spectrogram was made with
    :return: MagnitudeSpectrogram, sqrt of the power solution
    """
    cfg = spec.config if cfg is None else cfg
    _check_spec(spec, fb, cfg)
    active = np.array(
        sorted(set(range(fb.weights.shape[0])) - zero_filter_indices(fb)), dtype=int
    )
    bins = fb.weights.shape[1]
    power = np.zeros((bins, spec.frames))
    if active.size and spec.frames:
        matrix = sparse.csr_matrix(fb.weights[active])
        energies = 10.0 ** spec.values[:, active].T
        row_sums = np.asarray(matrix.sum(axis=1)).ravel()
        power = matrix.T @ (energies / row_sums[:, None])
        gram = (matrix @ matrix.T).toarray()
        step = 1.0 / (np.linalg.eigvalsh(gram)[-1] + ridge)
        for iteration in range(iterations):
            residual = matrix @ power - energies
            gradient = matrix.T @ residual + ridge * power
            power = np.maximum(power - step * gradient, 0.0)
            if logger.isEnabledFor(PYM2A_DEBUG):
                logger.log(
                    PYM2A_DEBUG, "nnls %d: residual %.6g", iteration, np.linalg.norm(residual)
                )
    return MagnitudeSpectrogram(np.sqrt(power.T), cfg, spec.signal_length)


def source_filter_synth(spec, fb, cfg, seed=0):
    """
    Shapes seeded white noise with the spectral envelope recovered
    from a MIDI spectrogram. Noise phases are kept, magnitudes are
    replaced per frame, and the result is overlap-added.

    :param spec: MidiSpectrogram
    :param fb: MidiFilterbank
    :param cfg: StftConfig
    :param seed: RNG seed
    :return: waveform
    """
    _check_spec(spec, fb, cfg)
    if spec.frames == 0:
        return np.zeros(0)
    envelope = invert_filterbank(spec, fb, cfg=cfg)
    length = max(spec.signal_length, 1)
    noise = np.random.default_rng(seed).standard_normal(length)
    excitation = stft(noise, cfg).values[: spec.frames]
    # unit expected power per bin for unit-variance white noise
    excitation = excitation / np.sqrt(np.sum(cfg.window_samples() ** 2))
    return istft(excitation * envelope.values, cfg, length)


def _spectral_convergence(spectra, target, weights):
    difference = np.sum(weights * (np.abs(spectra) - target) ** 2)
    reference = np.sum(weights * target**2)
    if reference == 0.0:
        return 0.0 if difference == 0.0 else float("inf")
    return float(np.sqrt(difference / reference))


def griffin_lim(mag, iterations=32, seed=0, init_phase=None):
    """
    Alternating projections between consistent spectrograms and
    spectrograms with the target magnitude.

    :param mag: MagnitudeSpectrogram
    :param iterations: number of projection rounds
    :param seed: RNG seed for the starting phase
    :param init_phase: optional starting phase in radians, same
        shape as ``mag.values``; replaces the random start
    :return: GriffinLimResult; ``errors`` holds the spectral
        convergence before every round and after the last one
    """
    if iterations < 0:
        raise M2AInputError("iterations must be non-negative")
    cfg = mag.config
    target = mag.values
    frames = mag.frames
    if init_phase is None:
        init_phase = 2.0 * np.pi * np.random.default_rng(seed).random(target.shape)
    elif np.shape(init_phase) != target.shape:
        raise M2AShapeError("init_phase must match the magnitude shape")
    padded_length = cfg.padded_length(frames)
    weights = cfg.full_spectrum_weights()[None, :]
    signal = _overlap_add(target * np.exp(1j * init_phase), cfg, padded_length)
    errors = []
    for iteration in range(iterations + 1):
        spectra = _frames_stft(signal, cfg, frames)
        errors.append(_spectral_convergence(spectra, target, weights))
        if logger.isEnabledFor(PYM2A_DEBUG):
            logger.log(PYM2A_DEBUG, "griffin-lim %d: %.6g", iteration, errors[-1])
        if iteration == iterations:
            break
        signal = _overlap_add(target * np.exp(1j * np.angle(spectra)), cfg, padded_length)
    waveform = _crop(signal, cfg.window_length // 2, mag.signal_length)
    if logger.isEnabledFor(logging.DEBUG) and errors:
        logger.debug("griffin-lim error %.4f -> %.4f", errors[0], errors[-1])
    return GriffinLimResult(waveform, tuple(errors))


def render_roll(
    roll,
    method,
    synth_cfg,
    stft_cfg,
    floor=1e-5,
    iterations=32,
    seed=0,
    features=None,
):
    """
    Renders a piano roll with one of the baseline methods.

    ``source-filter`` and ``griffin-lim`` work from a MIDI
    spectrogram: ``features`` when given, else the spectrogram of the
    additive rendering of the roll.

    :return: waveform at ``synth_cfg.sample_rate``
    """
    if method not in METHODS:
        raise M2AInputError(f"unknown synthesis method {method!r}, use one of {METHODS}")
    if method == "additive":
        return additive_synth(roll, synth_cfg)
    if synth_cfg.sample_rate != stft_cfg.sample_rate:
        raise M2AConfigError("synthesis and STFT sample rates differ")
    fb = FilterbankCache().get(stft_cfg.sample_rate, stft_cfg.n_fft)
    if features is None:
        features = midi_spectrogram(additive_synth(roll, synth_cfg), stft_cfg, fb, floor)
    elif features.values.shape[1] != NUM_FILTERS:
        raise M2AShapeError("features must have 128 dims")
    if method == "source-filter":
        return _limit_peak(source_filter_synth(features, fb, stft_cfg, seed))
    magnitude = invert_filterbank(features, fb, cfg=stft_cfg)
    return _limit_peak(griffin_lim(magnitude, iterations, seed).waveform)
