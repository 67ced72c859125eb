# Objective distortion metrics, the multi-resolution STFT loss,
# note-level analysis and correlation against MOS.

import dataclasses
import math

import numpy as np

from pym2a.error_classes import M2AAudioError, M2AInputError, M2AShapeError, M2AStatsError
from pym2a.s01_reporting_classes import module_logger
from pym2a.s03_file_formats import write_csv, write_json
from pym2a.s05_spectral import NUM_FILTERS, StftConfig, chroma, midi_spectrogram, stft
from pym2a.s07_pitch import frame_cross_entropy, pitch_cross_entropy, pitch_posterior
from pym2a.utility_classes import aligned_length

logger = module_logger(__name__)

DEFAULT_RESOLUTIONS = ((512, 128, 512), (1024, 256, 1024), (2048, 512, 2048))
LOG_MAGNITUDE_FLOOR = 1e-7
METRIC_COLUMNS = ("pitch", "chroma", "spec")
METRICS_HEADER = ("system", "pitch", "chroma", "spec", "mos")
NOTE_LEVEL_HEADER = ("note", "mos", "pitch_ce", "spec_mse", "support")


def _matrix(features):
    values = getattr(features, "values", features)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise M2AShapeError(f"feature matrix must be 2-D, not {values.ndim}-D")
    return values


def _aligned(a, b):
    a, b = _matrix(a), _matrix(b)
    if a.shape[1] != b.shape[1]:
        raise M2AShapeError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    frames = aligned_length(len(a), len(b))
    return a[:frames], b[:frames]


def feature_mse(a, b):
    """
    Mean over all cells of (a - b)**2, rows truncated to the shorter
    matrix.

    :param a: frames x dims matrix, or anything with ``.values``
    :param b: same column count as ``a``
    :raises M2AShapeError: column counts differ
    :raises M2AAlignmentError: row counts differ by more than 5%
    """
    a, b = _aligned(a, b)
    if a.size == 0:
        raise M2AShapeError("no cells to compare")
    return float(np.mean((a - b) ** 2))


def note_level_spec_distortion(nat, syn):
    """
    :return: 128-vector, element n the MSE over frames of dimension n
    """
    nat, syn = _aligned(nat, syn)
    if nat.shape[1] != NUM_FILTERS:
        raise M2AShapeError(f"expected {NUM_FILTERS} dims, got {nat.shape[1]}")
    if len(nat) == 0:
        raise M2AShapeError("no frames to compare")
    return np.mean((nat - syn) ** 2, axis=0)


def multires_stft_loss(x, y, resolutions=DEFAULT_RESOLUTIONS, sample_rate=24000):
    """
    Mean over resolutions of spectral convergence plus mean absolute
    log-magnitude difference. ``y`` is the reference.

    :param x: test waveform
    :param y: reference waveform
    :param resolutions: (n_fft, hop, window) triples
    :raises M2AAudioError: empty input
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    length = min(x.size, y.size)
    if length == 0:
        raise M2AAudioError("multi-resolution STFT loss needs non-empty waveforms")
    if not resolutions:
        raise M2AInputError("at least one resolution is needed")
    x, y = x[:length], y[:length]
    terms = []
    for n_fft, hop, window in resolutions:
        cfg = StftConfig(sample_rate, window, hop, n_fft)
        test = np.abs(stft(x, cfg).values)
        ref = np.abs(stft(y, cfg).values)
        reference = np.linalg.norm(ref)
        difference = np.linalg.norm(ref - test)
        if reference > 0:
            convergence = difference / reference
        else:
            convergence = 0.0 if difference == 0 else 1.0
        log_distance = np.mean(
            np.abs(
                np.log(np.maximum(ref, LOG_MAGNITUDE_FLOOR))
                - np.log(np.maximum(test, LOG_MAGNITUDE_FLOOR))
            )
        )
        terms.append(convergence + log_distance)
    return float(np.mean(terms))


def note_level_mos(ratings, presence):
    """
    Assigns each rating's score to every note present in its sample
    and averages per note.

    :param ratings: iterable of (sample_id, score)
    :param presence: {sample_id: set of MIDI notes}
    :return: {note: mean score} for notes with at least one rating
    :raises M2AInputError: a rated sample has no presence entry
    """
    scores = {}
    for sample_id, score in ratings:
        if sample_id not in presence:
            raise M2AInputError(f"no note presence for sample {sample_id!r}")
        for note in presence[sample_id]:
            scores.setdefault(int(note), []).append(score)
    return {note: math.fsum(vals) / len(vals) for note, vals in sorted(scores.items())}


def _roll_activity(roll):
    values = roll.values[: roll.valid_frames] if hasattr(roll, "valid_frames") else roll
    return np.asarray(values) > 0


def note_level_pitch_distortion(frame_ce, roll):
    """
    Every frame's CE goes to every note active in that frame; the
    result is the per-note mean.

    :param frame_ce: per-frame cross-entropy values
    :param roll: PianoRoll (or a frames x 128 activity matrix)
    :return: {note: mean CE} for notes active in at least one frame
    """
    frame_ce = np.asarray(frame_ce, dtype=np.float64)
    active = _roll_activity(roll)
    frames = aligned_length(len(frame_ce), len(active))
    sums, counts = _note_sums(frame_ce[:frames], active[:frames])
    return {int(note): sums[note] / counts[note] for note in np.flatnonzero(counts)}


def _note_sums(frame_values, active):
    sums = active.T.astype(np.float64) @ frame_values
    return sums, active.sum(axis=0)


def pearson(xs, ys):
    """
    Sample Pearson correlation coefficient.

    :raises M2AStatsError: fewer than 3 points, unequal lengths, or
        zero variance in either argument
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise M2AStatsError(f"pearson needs equal-length lists, got {xs.shape} and {ys.shape}")
    if xs.size < 3:
        raise M2AStatsError("pearson needs at least 3 points")
    dx, dy = xs - xs.mean(), ys - ys.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise M2AStatsError("pearson is undefined for zero variance")
    return float(np.clip(np.dot(dx, dy) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclasses.dataclass(frozen=True, eq=False)
class FeatureSet:
    midi_spec: object
    chroma: np.ndarray
    posterior: object


def extract_features(waveform, stft_cfg, pitch_cfg, floor=1e-5, fb=None):
    """
    :return: FeatureSet holding the MIDI spectrogram, chroma and
        pitch posterior of ``waveform``
    """
    return FeatureSet(
        midi_spectrogram(waveform, stft_cfg, fb, floor),
        chroma(waveform, stft_cfg),
        pitch_posterior(waveform, pitch_cfg),
    )


@dataclasses.dataclass(frozen=True)
class SampleMetrics:
    sample_id: str
    system_id: str
    pitch_ce: float
    chroma_mse: float
    spec_mse: float


def sample_metrics(sample_id, system_id, natural, synthesized):
    """
    Distortions of one rendering against the natural recording,
    both given as FeatureSets. CE is taken with the natural
    posterior as reference.
    """
    return SampleMetrics(
        sample_id,
        system_id,
        pitch_cross_entropy(natural.posterior, synthesized.posterior),
        feature_mse(natural.chroma, synthesized.chroma),
        feature_mse(natural.midi_spec, synthesized.midi_spec),
    )


@dataclasses.dataclass(frozen=True)
class SystemMetrics:
    system_id: str
    pitch_ce: float
    chroma_mse: float
    spec_mse: float
    mos_mean: float = None

    def __post_init__(self):
        for name in ("pitch_ce", "chroma_mse", "spec_mse"):
            if getattr(self, name) < 0:
                raise M2AStatsError(f"{self.system_id}: {name} must be non-negative")

    @classmethod
    def from_samples(cls, system_id, samples, mos_mean=None):
        """
        Averages per-sample metrics, folding in sample-id order.
        """
        ordered = sorted(
            (s for s in samples if s.system_id == system_id), key=lambda s: s.sample_id
        )
        if not ordered:
            raise M2AStatsError(f"no sample metrics for system {system_id!r}")
        count = len(ordered)
        return cls(
            system_id,
            math.fsum(s.pitch_ce for s in ordered) / count,
            math.fsum(s.chroma_mse for s in ordered) / count,
            math.fsum(s.spec_mse for s in ordered) / count,
            mos_mean,
        )

    def column(self, name):
        return {
            "pitch": self.pitch_ce,
            "chroma": self.chroma_mse,
            "spec": self.spec_mse,
            "mos": self.mos_mean,
        }[name]

    def row(self):
        return (self.system_id,) + tuple(self.column(name) for name in METRICS_HEADER[1:])


NATURAL_MOS = 3.98

# system: (pitch CE, chroma MSE, spec MSE, MOS)
_REFERENCE_ROWS = {
    "Fluidsynth": (1.00, 0.33, 13.95, 3.56),
    "Pianoteq": (0.92, 0.32, 12.16, 4.10),
    "abs-mfbf-nsfs": (1.01, 0.31, 6.60, 3.71),
    "taco-mfbf-nsfs": (1.18, 0.37, 9.65, 2.95),
    "abs-mfb-nsfs": (1.31, 0.38, 5.72, 3.31),
    "abs-mfb-nsf": (1.37, 0.39, 7.20, 3.35),
    "abs-mfb-nsfg": (1.26, 0.34, 5.14, 3.69),
    "abs-mfb-hfg": (1.16, 0.31, 4.69, 3.80),
    "taco-mfb-nsfs": (1.19, 0.37, 9.70, 3.16),
    "taco-mfb-nsf": (1.29, 0.40, 11.78, 3.16),
    "taco-mfb-nsfg": (1.11, 0.35, 9.09, 3.18),
    "taco-mfb-hfg": (1.58, 0.56, 10.07, 2.21),
    "trans-mfb-nsfs": (1.33, 0.41, 9.41, 3.22),
    "trans-mfb-nsf": (1.42, 0.44, 10.94, 3.10),
    "trans-mfb-nsfg": (1.27, 0.40, 9.15, 3.08),
    "trans-mfb-hfg": (1.83, 0.60, 9.95, 1.88),
    "joint-nsf": (1.59, 0.47, 16.39, 2.23),
    "joint-nsfg": (1.12, 0.38, 9.09, 3.32),
    "joint-hfg": (1.10, 0.38, 9.14, 3.58),
}

REFERENCE_METRICS = {name: SystemMetrics(name, *row) for name, row in _REFERENCE_ROWS.items()}
SOFTWARE_BASELINES = ("Fluidsynth", "Pianoteq")
DATA_DRIVEN_SYSTEMS = tuple(name for name in REFERENCE_METRICS if name not in SOFTWARE_BASELINES)


def correlate_with_mos(metrics, column, subset=None):
    """
    Pearson correlation between one metric column and MOS.

    :param metrics: iterable of SystemMetrics, or {name: SystemMetrics}
    :param column: "pitch", "chroma" or "spec"
    :param subset: system ids to include, default all with a MOS
    """
    if column not in METRIC_COLUMNS:
        raise M2AInputError(f"unknown metric column {column!r}")
    if isinstance(metrics, dict):
        metrics = metrics.values()
    by_name = {m.system_id: m for m in metrics}
    names = list(by_name) if subset is None else list(subset)
    missing = [name for name in names if name not in by_name]
    if missing:
        raise M2AStatsError(f"no metrics for systems {missing}")
    rows = [by_name[name] for name in names if by_name[name].mos_mean is not None]
    return pearson([m.column(column) for m in rows], [m.mos_mean for m in rows])


@dataclasses.dataclass(frozen=True)
class NoteLevelReport:
    """
    Per-note results. Notes with zero support have no entries.
    """

    mos: dict
    pitch_ce: dict
    spec_mse: dict
    support: dict

    def notes(self):
        return sorted(note for note, count in self.support.items() if count > 0)

    def rows(self):
        return [
            (
                note,
                self.mos.get(note),
                self.pitch_ce.get(note),
                self.spec_mse.get(note),
                self.support[note],
            )
            for note in self.notes()
        ]


def note_level_report(samples, ratings=None):
    """
    Pools note-level results over samples.

    :param samples: iterable of (sample_id, presence, frame_ce, roll,
        spec_distortion) where presence is the set of notes sounding
        in the sample and spec_distortion its 128-vector
    :param ratings: optional iterable of (sample_id, score)
    :return: NoteLevelReport; support counts the samples holding a note
    """
    support = {}
    presence_by_sample = {}
    ce_sums = np.zeros(NUM_FILTERS)
    ce_counts = np.zeros(NUM_FILTERS)
    spec_values = {}
    for sample_id, presence, frame_ce, roll, spec_distortion in samples:
        presence_by_sample[sample_id] = presence
        active = _roll_activity(roll)
        frames = aligned_length(len(frame_ce), len(active))
        sums, counts = _note_sums(np.asarray(frame_ce[:frames], dtype=np.float64), active[:frames])
        ce_sums += sums
        ce_counts += counts
        for note in presence:
            support[note] = support.get(note, 0) + 1
            spec_values.setdefault(note, []).append(float(spec_distortion[note]))
    mos = note_level_mos(ratings, presence_by_sample) if ratings is not None else {}
    pitch_ce = {
        int(note): float(ce_sums[note] / ce_counts[note]) for note in np.flatnonzero(ce_counts)
    }
    spec_mse = {note: math.fsum(vals) / len(vals) for note, vals in spec_values.items()}
    return NoteLevelReport(
        {n: v for n, v in mos.items() if n in support},
        {n: v for n, v in pitch_ce.items() if n in support},
        spec_mse,
        dict(sorted(support.items())),
    )


def write_metrics_table(out_dir, metrics):
    """
    Writes metrics.csv and metrics.json (columns system, pitch,
    chroma, spec, mos) in the given system order.
    """
    rows = [m.row() for m in metrics]
    write_csv(f"{out_dir}/metrics.csv", METRICS_HEADER, rows)
    write_json(
        f"{out_dir}/metrics.json",
        [dict(zip(METRICS_HEADER, row)) for row in rows],
    )
    logger.info("wrote metrics for %d systems to %s", len(rows), out_dir)


def write_note_level_report(path, report):
    write_csv(path, NOTE_LEVEL_HEADER, report.rows())


def frame_ce_between(natural, synthesized):
    """Per-frame pitch CE of two FeatureSets, natural as reference."""
    return frame_cross_entropy(natural.posterior, synthesized.posterior)
