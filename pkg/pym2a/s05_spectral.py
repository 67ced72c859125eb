# STFT, the MIDI-scale filterbank and the features built on it.
#
# Frames are centred: frame t covers original samples
# [t*hop - W//2, t*hop - W//2 + W) after reflect padding by W//2,
# and each windowed frame is zero padded to n_fft before the FFT.

import dataclasses

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy.signal import get_window

from pym2a import utility_classes
from pym2a.error_classes import M2AAudioError, M2AConfigError, M2AShapeError
from pym2a.s01_reporting_classes import module_logger
from pym2a.s03_file_formats import write_image

logger = module_logger(__name__)

NUM_FILTERS = 128
A4_HZ = 440.0
A4_MIDI = 69
DEFAULT_FLOOR = 1e-5
WINDOWS = {"hann": "hann", "rect": "boxcar"}


@dataclasses.dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 24000
    window_length: int = 2048
    hop: int = 288
    n_fft: int = 16384
    window: str = "hann"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise M2AConfigError(f"sample_rate must be positive, not {self.sample_rate}")
        if not 1 <= self.hop <= self.window_length:
            raise M2AConfigError(
                f"hop must lie in [1, window_length], not {self.hop}"
            )
        if self.n_fft < self.window_length:
            raise M2AConfigError(
                f"n_fft {self.n_fft} is smaller than window_length {self.window_length}"
            )
        if self.window not in WINDOWS:
            raise M2AConfigError(f"unknown window {self.window!r}")

    @property
    def bins(self):
        return self.n_fft // 2 + 1

    def window_samples(self):
        """Periodic window of window_length samples."""
        return get_window(WINDOWS[self.window], self.window_length, fftbins=True)

    def bin_frequencies(self):
        return np.arange(self.bins) * self.sample_rate / self.n_fft

    def frame_count(self, signal_length):
        return 1 + signal_length // self.hop

    def padded_length(self, frames):
        return (frames - 1) * self.hop + self.window_length

    def full_spectrum_weights(self):
        """
        Weights turning sums over the one-sided spectrum into sums
        over the full symmetric spectrum.
        """
        weights = np.full(self.bins, 2.0)
        weights[0] = 1.0
        if self.n_fft % 2 == 0:
            weights[-1] = 1.0
        return weights


def _readonly(array):
    array = np.array(array)
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    values: np.ndarray
    config: StftConfig
    signal_length: int

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.config.bins:
            raise M2AShapeError(
                f"expected {self.config.bins} bins, got shape {self.values.shape}"
            )
        object.__setattr__(self, "values", _readonly(self.values))

    @property
    def frames(self):
        return self.values.shape[0]

    def magnitude(self):
        return MagnitudeSpectrogram(np.abs(self.values), self.config, self.signal_length)


@dataclasses.dataclass(frozen=True, eq=False)
class MagnitudeSpectrogram:
    values: np.ndarray
    config: StftConfig
    signal_length: int = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.config.bins:
            raise M2AShapeError(
                f"expected {self.config.bins} bins, got shape {values.shape}"
            )
        if np.any(values < 0):
            raise M2AShapeError("magnitudes must be non-negative")
        if self.signal_length is None:
            object.__setattr__(
                self, "signal_length", max(values.shape[0] - 1, 0) * self.config.hop
            )
        object.__setattr__(self, "values", _readonly(values))

    @property
    def frames(self):
        return self.values.shape[0]


@dataclasses.dataclass(frozen=True, eq=False)
class MidiFilterbank:
    weights: np.ndarray
    center_freqs: np.ndarray
    sample_rate: int
    n_fft: int

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise M2AShapeError("filterbank weights must be non-negative")
        object.__setattr__(self, "weights", _readonly(self.weights))
        object.__setattr__(self, "center_freqs", _readonly(self.center_freqs))

    def matches(self, config):
        return self.sample_rate == config.sample_rate and self.n_fft == config.n_fft


@dataclasses.dataclass(frozen=True, eq=False)
class MidiSpectrogram:
    values: np.ndarray
    floor: float
    config: StftConfig
    signal_length: int = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != NUM_FILTERS:
            raise M2AShapeError(f"expected frames x 128, got {values.shape}")
        if self.signal_length is None:
            object.__setattr__(
                self, "signal_length", max(values.shape[0] - 1, 0) * self.config.hop
            )
        object.__setattr__(self, "values", _readonly(values))

    @property
    def frames(self):
        return self.values.shape[0]


@dataclasses.dataclass(frozen=True, eq=False)
class Rainbowgram:
    amplitude_db: np.ndarray
    inst_freq_hz: np.ndarray
    config: StftConfig


def _check_waveform(waveform):
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise M2AAudioError("waveform must be one-dimensional")
    if waveform.size == 0:
        raise M2AAudioError("empty waveform")
    return waveform


def _pad_signal(waveform, cfg):
    half = cfg.window_length // 2
    mode = "reflect" if waveform.size > half else "constant"
    padded = np.pad(waveform, half, mode=mode)
    needed = cfg.padded_length(cfg.frame_count(waveform.size))
    if padded.size < needed:
        padded = np.pad(padded, (0, needed - padded.size))
    return padded[:needed]


def _frames_stft(padded, cfg, frames):
    # STFT on the padded domain, frame t starting at t*hop
    starts = np.arange(frames)[:, None] * cfg.hop
    segments = padded[starts + np.arange(cfg.window_length)[None, :]]
    return np.fft.rfft(segments * cfg.window_samples(), n=cfg.n_fft, axis=1)


def _overlap_add(spectra, cfg, padded_length):
    # Least-squares inverse of _frames_stft
    window = cfg.window_samples()
    frames = np.fft.irfft(spectra, n=cfg.n_fft, axis=1)[:, : cfg.window_length]
    signal = np.zeros(padded_length)
    norm = np.zeros(padded_length)
    for index, frame in enumerate(frames):
        start = index * cfg.hop
        signal[start : start + cfg.window_length] += frame * window
        norm[start : start + cfg.window_length] += window**2
    covered = norm > 0.0
    signal[covered] /= norm[covered]
    signal[~covered] = 0.0
    return signal


def stft(waveform, cfg):
    """
    :param waveform: 1-D samples
    :param cfg: StftConfig
    :return: ComplexSpectrogram with 1 + len // hop frames
    :raises M2AAudioError: empty waveform
    """
    waveform = _check_waveform(waveform)
    frames = cfg.frame_count(waveform.size)
    values = _frames_stft(_pad_signal(waveform, cfg), cfg, frames)
    return ComplexSpectrogram(values, cfg, waveform.size)


def istft(spec, cfg=None, signal_length=None):
    """
    Weighted overlap-add inverse of ``stft`` with synthesis-window
    normalisation.

    :param spec: ComplexSpectrogram, or a complex array with ``cfg``
    :param signal_length: samples to return, defaults to the
        spectrogram's own signal length
    :return: 1-D waveform
    """
    if isinstance(spec, ComplexSpectrogram):
        cfg = spec.config if cfg is None else cfg
        signal_length = spec.signal_length if signal_length is None else signal_length
        values = spec.values
    else:
        values = np.asarray(spec)
        if signal_length is None:
            signal_length = (values.shape[0] - 1) * cfg.hop
    if values.shape[1] != cfg.bins:
        raise M2AShapeError(f"expected {cfg.bins} bins, got {values.shape[1]}")
    padded = _overlap_add(values, cfg, cfg.padded_length(values.shape[0]))
    half = cfg.window_length // 2
    return _crop(padded, half, signal_length)


def _crop(padded, offset, length):
    out = padded[offset : offset + length]
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out


def midi_center_frequencies(count=NUM_FILTERS):
    """f(m) = 440 * 2**((m - 69) / 12)"""
    return A4_HZ * 2.0 ** ((np.arange(count) - A4_MIDI) / 12.0)


def build_midi_filterbank(sample_rate, n_fft):
    """
    128 triangular filters with peak 1.0. Filter m rises from
    f(m-1) to f(m) and falls to f(m+1). The outermost filters use
    f(-1) and f(128) from the same formula.

    :param sample_rate: Hz
    :param n_fft: power of two
    :return: MidiFilterbank
    """
    if sample_rate <= 0:
        raise M2AConfigError(f"sample_rate must be positive, not {sample_rate}")
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise M2AShapeError(f"n_fft must be a power of two, not {n_fft}")
    edges = A4_HZ * 2.0 ** ((np.arange(-1, NUM_FILTERS + 1) - A4_MIDI) / 12.0)
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    rising = (freqs[None, :] - lower[:, None]) / (center - lower)[:, None]
    falling = (upper[:, None] - freqs[None, :]) / (upper - center)[:, None]
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return MidiFilterbank(weights, center, sample_rate, n_fft)


class FilterbankCache(metaclass=utility_classes.Singleton):
    """
    Memoises ``build_midi_filterbank`` by (sample_rate, n_fft).
    """

    def __init__(self):
        self._banks = {}

    def get(self, sample_rate, n_fft):
        key = (int(sample_rate), int(n_fft))
        if key not in self._banks:
            logger.debug("building filterbank for %d Hz, n_fft %d", *key)
            self._banks[key] = build_midi_filterbank(*key)
        return self._banks[key]

    def clear(self):
        self._banks = {}


def zero_filter_indices(fb):
    """
    :param fb: MidiFilterbank, or any 2-D weight matrix
    :return: set of row indices whose weights are all exactly zero
    """
    weights = fb.weights if isinstance(fb, MidiFilterbank) else np.asarray(fb)
    return {int(ii) for ii in np.flatnonzero(~np.any(weights != 0.0, axis=1))}


def filterbank_report(sample_rate, n_ffts):
    """
    :return: {n_fft: sorted zero-filter indices} for every n_fft
    """
    return {
        n_fft: sorted(zero_filter_indices(FilterbankCache().get(sample_rate, n_fft)))
        for n_fft in n_ffts
    }


def power_spectrogram(waveform, cfg):
    return np.abs(stft(waveform, cfg).values) ** 2


def midi_spectrogram(waveform, cfg, fb=None, floor=DEFAULT_FLOOR):
    """
    values = log10(max(power @ fb.T, floor)) per frame

    :param waveform: 1-D samples
    :param cfg: StftConfig
    :param fb: MidiFilterbank built for cfg, taken from the cache if None
    :param floor: energy floor
    :return: MidiSpectrogram
    :raises M2AShapeError: fb was built for another sample rate or n_fft
    """
    if fb is None:
        fb = FilterbankCache().get(cfg.sample_rate, cfg.n_fft)
    if not fb.matches(cfg):
        raise M2AShapeError(
            f"filterbank built for {fb.sample_rate} Hz / n_fft {fb.n_fft}, "
            f"config is {cfg.sample_rate} Hz / n_fft {cfg.n_fft}"
        )
    waveform = _check_waveform(waveform)
    energies = power_spectrogram(waveform, cfg) @ fb.weights.T
    values = np.log10(np.maximum(energies, floor))
    return MidiSpectrogram(values, floor, cfg, waveform.size)


def pitch_class_matrix(cfg):
    """
    One-hot (bins x 12) assignment of each bin with f > 0 to pitch
    class (round(12 log2(f / 440)) + 9) mod 12, C = 0.
    """
    freqs = cfg.bin_frequencies()
    assignment = np.zeros((cfg.bins, 12))
    positive = freqs > 0
    classes = (np.round(12.0 * np.log2(freqs[positive] / A4_HZ)).astype(int) + 9) % 12
    assignment[np.flatnonzero(positive), classes] = 1.0
    return assignment


def chroma(waveform, cfg):
    """
    :return: frames x 12 pitch-class energies, each frame divided by
        its maximum; all-zero frames stay zero
    """
    energies = power_spectrogram(waveform, cfg) @ pitch_class_matrix(cfg)
    peaks = energies.max(axis=1, keepdims=True)
    return np.divide(energies, peaks, out=np.zeros_like(energies), where=peaks > 0)


def principal_argument(phase):
    """Wraps phase to [-pi, pi)."""
    return np.mod(phase + np.pi, 2.0 * np.pi) - np.pi


def rainbowgram(waveform, cfg, floor=DEFAULT_FLOOR):
    """
    Amplitude in dB and instantaneous frequency per STFT bin.

    The frame-to-frame phase difference of bin k is compared with the
    advance expected at the bin centre, 2*pi*hop*k/n_fft; the wrapped
    deviation is converted to Hz and added to the bin frequency.
    The first frame reports bin frequencies.

    :raises M2AConfigError: hop not smaller than the window
    """
    if not cfg.hop < cfg.window_length:
        raise M2AConfigError("rainbowgram needs hop < window_length")
    spec = stft(waveform, cfg)
    amplitude_db = 20.0 * np.log10(np.maximum(np.abs(spec.values), floor))
    bins = np.arange(cfg.bins)
    expected = 2.0 * np.pi * cfg.hop * bins / cfg.n_fft
    phase = np.angle(spec.values)
    deviation = principal_argument(np.diff(phase, axis=0) - expected[None, :])
    bin_hz = cfg.bin_frequencies()
    inst_freq = np.empty_like(amplitude_db)
    inst_freq[0] = bin_hz
    inst_freq[1:] = bin_hz[None, :] + deviation * cfg.sample_rate / (
        2.0 * np.pi * cfg.hop
    )
    inst_freq = np.clip(inst_freq, 0.0, cfg.sample_rate / 2.0)
    return Rainbowgram(_readonly(amplitude_db), _readonly(inst_freq), cfg)


def render_rainbowgram(rg, path, dynamic_range=80.0, max_freq=None):
    """
    Saves a rainbow-gram image: hue follows instantaneous frequency,
    lightness follows amplitude. Low frequencies at the bottom.

    :param rg: Rainbowgram
    :param path: .png or .ppm
    :param dynamic_range: dB below the peak rendered as black
    :param max_freq: crop the image above this frequency in Hz
    """
    nyquist = rg.config.sample_rate / 2.0
    bins = rg.amplitude_db.shape[1]
    if max_freq is not None:
        bins = min(bins, int(max_freq * rg.config.n_fft / rg.config.sample_rate) + 1)
    amplitude = rg.amplitude_db[:, :bins]
    top = amplitude.max()
    value = np.clip((amplitude - top + dynamic_range) / dynamic_range, 0.0, 1.0)
    hue = 0.8 * rg.inst_freq_hz[:, :bins] / nyquist
    hsv = np.stack([hue, np.ones_like(hue), value], axis=-1)
    rgb = np.round(hsv_to_rgb(hsv) * 255.0).astype(np.uint8)
    # frames run left to right, frequency bottom to top
    write_image(path, rgb.transpose(1, 0, 2)[::-1])
