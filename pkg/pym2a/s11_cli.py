# Batch front end. Every subcommand is a Command object driven
# through the common phases; per-sample work goes to a process
# pool and comes back in sample-id order.

import argparse
import dataclasses
import functools
import logging
import pathlib
import sys
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool

from pym2a.error_classes import (
    M2AConfigError,
    M2AFatalError,
    M2AInputError,
    M2AManifestError,
    M2AUsageError,
)
from pym2a.s01_reporting_classes import ROOT_LOGGER_NAME, ReportObject
from pym2a.s02_config_classes import (
    FEATURE_FFT_SIZES,
    ConfigDB,
    RunConfig,
    load_config_file,
)
from pym2a.s03_file_formats import (
    load_audio,
    read_bytes,
    read_json,
    read_matrix,
    write_csv,
    write_matrix,
    write_wav,
)
from pym2a.s04_midi_core import (
    chunk_frames,
    note_presence,
    parse_midi,
    segment_by_pauses,
    to_piano_roll,
)
from pym2a.s05_spectral import (
    MidiSpectrogram,
    filterbank_report,
    rainbowgram,
    render_rainbowgram,
)
from pym2a.s06_synth import METHODS, render_roll
from pym2a.s07_pitch import posterior_argmax_table
from pym2a.s08_eval import (
    SystemMetrics,
    extract_features,
    frame_ce_between,
    note_level_report,
    note_level_spec_distortion,
    sample_metrics,
    write_metrics_table,
    write_note_level_report,
)
from pym2a.s09_stats import (
    UNITS,
    aggregate_mos,
    read_ratings_csv,
    render_significance_grid,
    significance_matrix,
    write_mos_table,
    write_significance_csv,
)
from pym2a.s10_phasing import m2a_common_phases

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INTERNAL = 2

# flag dest -> (config section, key); stored with FLAG_PRECEDENCE
_FLAG_KEYS = {
    "sr": ("frame", "sample_rate"),
    "hop": ("frame", "hop"),
    "nfft": ("stft", "n_fft"),
    "window": ("stft", "window_length"),
    "stft_hop": ("stft", "hop"),
    "floor": ("feature", "floor"),
    "seed": ("run", "seed"),
    "workers": ("run", "workers"),
}


class M2AArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise M2AUsageError(f"{self.prog}: {message}")


# Manifest


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    midi_path: str
    natural_wav_path: str
    systems: tuple
    root: str = "."

    def resolve(self, path):
        """
        :return: the path joined to the dataset root
        :raises M2AManifestError: the file does not exist
        """
        full = pathlib.Path(self.root) / path
        if not full.is_file():
            raise M2AManifestError(f"sample {self.sample_id}: missing file {full}")
        return str(full)

    def system_path(self, system_id):
        paths = dict(self.systems)
        if system_id not in paths:
            raise M2AManifestError(f"sample {self.sample_id} has no system {system_id!r}")
        return self.resolve(paths[system_id])


@dataclasses.dataclass(frozen=True)
class Manifest:
    root: str
    entries: tuple

    @classmethod
    def load(cls, path):
        """
        Reads {"root": ..., "entries": [{sample_id, midi_path,
        natural_wav_path, systems: {system_id: wav_path}}]}. A relative
        root is taken from the manifest's directory.

        :raises M2AManifestError: schema errors or duplicate sample ids
        """
        data = read_json(path)
        if not isinstance(data, dict) or not isinstance(data.get("entries"), list):
            raise M2AManifestError(f"{path}: manifest needs an 'entries' list")
        root = pathlib.Path(path).parent / data.get("root", ".")
        entries = []
        seen = set()
        for index, item in enumerate(data["entries"]):
            try:
                sample_id = item["sample_id"]
                fields = (sample_id, item["midi_path"], item["natural_wav_path"])
                systems = item["systems"]
            except (KeyError, TypeError) as err:
                raise M2AManifestError(f"{path}: entry {index} lacks {err}")
            if not all(isinstance(field, str) for field in fields):
                raise M2AManifestError(f"{path}: entry {index} paths must be strings")
            if not isinstance(systems, dict) or not all(
                isinstance(key, str) and isinstance(value, str)
                for key, value in systems.items()
            ):
                raise M2AManifestError(f"{path}: entry {index} systems must map ids to paths")
            if sample_id in seen:
                raise M2AManifestError(f"{path}: duplicate sample id {sample_id!r}")
            seen.add(sample_id)
            entries.append(
                ManifestEntry(*fields, tuple(sorted(systems.items())), str(root))
            )
        return cls(str(root), tuple(sorted(entries, key=lambda e: e.sample_id)))

    def system_ids(self):
        return sorted({system for entry in self.entries for system, _ in entry.systems})


# Per-sample work. These run in worker processes and must stay at
# module level so they can be pickled.


def _features(path, cfg):
    waveform = load_audio(path, cfg.sample_rate)
    return extract_features(waveform, cfg.stft_config(), cfg.pitch_config(), cfg.floor)


def _eval_sample(entry, cfg):
    natural = _features(entry.resolve(entry.natural_wav_path), cfg)
    return [
        sample_metrics(
            entry.sample_id, system_id, natural, _features(entry.system_path(system_id), cfg)
        )
        for system_id, _ in entry.systems
    ]


def _note_level_sample(entry, cfg, system_id):
    seq = parse_midi(read_bytes(entry.resolve(entry.midi_path)))
    roll = to_piano_roll(seq, cfg.frame_spec(), cfg.sustain)
    natural = _features(entry.resolve(entry.natural_wav_path), cfg)
    synthesized = _features(entry.system_path(system_id), cfg)
    return (
        entry.sample_id,
        note_presence(seq),
        frame_ce_between(natural, synthesized),
        roll,
        note_level_spec_distortion(natural.midi_spec, synthesized.midi_spec),
    )


def _guarded(func, entry):
    try:
        return entry.sample_id, func(entry), None
    except M2AInputError as err:
        return entry.sample_id, None, ("input", str(err))
    except Exception as err:
        return entry.sample_id, None, ("internal", f"{type(err).__name__}: {err}")


def map_samples(func, entries, workers):
    """
    Runs ``func(entry)`` for every entry, inline for a single worker
    and in a process pool otherwise.

    :return: list of (sample_id, result, failure) in sample-id order;
        failure is None or (kind, message)
    """
    entries = sorted(entries, key=lambda entry: entry.sample_id)
    if workers <= 1 or len(entries) <= 1:
        return [_guarded(func, entry) for entry in entries]
    try:
        with ProcessPoolExecutor(max_workers=min(workers, len(entries))) as pool:
            futures = [pool.submit(_guarded, func, entry) for entry in entries]
            return [future.result() for future in futures]
    except BrokenProcessPool as err:
        raise M2AFatalError(f"worker pool died: {err}")


# Commands


def _out_dir(path):
    directory = pathlib.Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


class Command(ReportObject):
    """
    Base of all subcommands. A subclass names itself, declares its
    arguments, and fills in the phase methods it needs.
    """

    name = None
    help = ""
    flag_keys = {}

    def __init__(self, args):
        super().__init__(self.name)
        self.args = args
        self.cfg = None
        self.failures = []

    @classmethod
    def add_arguments(cls, parser):
        pass

    def build_phase(self):
        self.cfg = RunConfig.from_config_db().validate()

    def run_phase(self):
        pass

    def report_phase(self):
        pass

    def final_phase(self):
        if self.failures:
            self.logger.error(
                "%d sample(s) failed: %s",
                len(self.failures),
                ", ".join(sample_id for sample_id, _, _ in self.failures),
            )

    def run_samples(self, func, entries):
        """
        Maps ``func`` over manifest entries. Failed samples are
        logged and recorded; the results of the others are returned
        as {sample_id: result}.
        """
        results = {}
        for sample_id, result, failure in map_samples(func, entries, self.cfg.pool_size()):
            if failure is None:
                results[sample_id] = result
            else:
                kind, message = failure
                self.logger.error("sample %s failed (%s): %s", sample_id, kind, message)
                self.failures.append((sample_id, kind, message))
        return results

    @property
    def exit_code(self):
        if any(kind == "internal" for _, kind, _ in self.failures):
            return EXIT_INTERNAL
        return EXIT_INPUT if self.failures else EXIT_OK


class RollCommand(Command):
    name = "roll"
    help = "MIDI file to piano roll"
    flag_keys = {"sustain": ("frame", "sustain")}

    @classmethod
    def add_arguments(cls, parser):
        parser.add_argument("--midi", required=True, help="Standard MIDI File")
        parser.add_argument("--out", required=True, help="piano roll matrix file")
        parser.add_argument("--notes", help="also write the notes as JSON")
        parser.add_argument("--chunk-dir", help="also write fixed-size chunks here")
        parser.add_argument("--sustain", action="store_const", const=True)

    def run_phase(self):
        self.seq = parse_midi(read_bytes(self.args.midi))
        self.roll = to_piano_roll(self.seq, self.cfg.frame_spec(), self.cfg.sustain)
        self.logger.info("%d notes, %d frames", len(self.seq), self.roll.frames)

    def report_phase(self):
        write_matrix(self.args.out, self.roll.values)
        if self.args.notes:
            pathlib.Path(self.args.notes).write_text(self.seq.to_json(), encoding="utf-8")
        if self.args.chunk_dir:
            directory = _out_dir(self.args.chunk_dir)
            rows = []
            for index, chunk in enumerate(chunk_frames(self.roll)):
                write_matrix(directory / f"chunk_{index:04d}.bin", chunk.values)
                rows.append((index, chunk.valid_frames))
            write_csv(directory / "chunks.csv", ("chunk", "valid_frames"), rows)


class SegmentCommand(Command):
    name = "segment"
    help = "split a performance at long pauses"
    flag_keys = {
        "min_pause": ("run", "min_pause"),
        "min_length": ("run", "min_length"),
        "max_length": ("run", "max_length"),
    }

    @classmethod
    def add_arguments(cls, parser):
        parser.add_argument("--midi", required=True)
        parser.add_argument("--out", required=True, help="segments CSV")
        parser.add_argument("--min-pause", type=float)
        parser.add_argument("--min-length", type=float)
        parser.add_argument("--max-length", type=float)

    def run_phase(self):
        seq = parse_midi(read_bytes(self.args.midi))
        self.segments = segment_by_pauses(
            seq, self.cfg.min_pause, self.cfg.min_length, self.cfg.max_length
        )

    def report_phase(self):
        write_csv(
            self.args.out,
            ("segment", "start", "end", "notes"),
            [
                (index, seg.start, seg.end, len(seg.note_indices))
                for index, seg in enumerate(self.segments)
            ],
        )


class FeaturizeCommand(Command):
    name = "featurize"
    help = "WAV to MIDI spectrogram, chroma and pitch posterior"

    @classmethod
    def add_arguments(cls, parser):
        parser.add_argument("--wav", required=True)
        parser.add_argument("--out", required=True, help="output directory")

    def run_phase(self):
        self.features = _features(self.args.wav, self.cfg)

    def report_phase(self):
        directory = _out_dir(self.args.out)
        write_matrix(directory / "midi_spectrogram.bin", self.features.midi_spec.values)
        write_matrix(directory / "chroma.bin", self.features.chroma)
        write_matrix(directory / "pitch_posterior.bin", self.features.posterior.probs)
        write_csv(
            directory / "pitch.csv",
            ("frame_index", "hz", "confidence"),
            posterior_argmax_table(self.features.posterior),
        )


class SynthCommand(Command):
    name = "synth"
    help = "render a piano roll or MIDI spectrogram to WAV"
    flag_keys = {"iterations": ("synth", "iterations"), "sustain": ("frame", "sustain")}

    @classmethod
    def add_arguments(cls, parser):
        parser.add_argument("--midi", help="Standard MIDI File")
        parser.add_argument("--features", help="MIDI spectrogram matrix file")
        parser.add_argument("--method", choices=METHODS, default="additive")
        parser.add_argument("--out", required=True, help="output WAV")
        parser.add_argument("--subtype", choices=("pcm16", "float32"), default="pcm16")
        parser.add_argument("--iterations", type=int)
        parser.add_argument("--sustain", action="store_const", const=True)

    def build_phase(self):
        super().build_phase()
        if self.args.method == "additive" and not self.args.midi:
            raise M2AUsageError("additive synthesis needs --midi")
        if not (self.args.midi or self.args.features):
            raise M2AUsageError(f"{self.args.method} synthesis needs --midi or --features")

    def run_phase(self):
        cfg = self.cfg
        roll = features = None
        if self.args.midi:
            seq = parse_midi(read_bytes(self.args.midi))
            roll = to_piano_roll(seq, cfg.frame_spec(), cfg.sustain)
        if self.args.features:
            features = MidiSpectrogram(read_matrix(self.args.features), cfg.floor, cfg.stft_config())
        self.waveform = render_roll(
            roll,
            self.args.method,
            cfg.synth_config(),
            cfg.stft_config(),
            cfg.floor,
            cfg.iterations,
            cfg.seed,
            features,
        )

    def report_phase(self):
        write_wav(self.args.out, self.cfg.sample_rate, self.waveform, self.args.subtype)


class RainbowCommand(Command):
    name = "rainbow"
    help = "rainbow-gram matrices and image"

    @classmethod
    def add_arguments(cls, parser):
        parser.add_argument("--wav", required=True)
        parser.add_argument("--out", required=True, help="output directory")
        parser.add_argument("--image", help=".png or .ppm rendering")
        parser.add_argument("--max-freq", type=float, help="crop the image above this Hz")
        parser.add_argument("--dynamic-range", type=float, default=80.0)

    def run_phase(self):
        waveform = load_audio(self.args.wav, self.cfg.sample_rate)
        self.rainbow = rainbowgram(waveform, self.cfg.stft_config(), self.cfg.floor)

    def report_phase(self):
        directory = _out_dir(self.args.out)
        write_matrix(directory / "amplitude_db.bin", self.rainbow.amplitude_db)
        write_matrix(directory / "inst_freq.bin", self.rainbow.inst_freq_hz)
        if self.args.image:
            render_rainbowgram(
                self.rainbow, self.args.image, self.args.dynamic_range, self.args.max_freq
            )


class EvalCommand(Command):
    name = "eval"
    help = "manifest to metrics table"

    @classmethod
    def add_arguments(cls, parser):
        parser.add_argument("--manifest", required=True)
        parser.add_argument("--out", required=True, help="report directory")
        parser.add_argument("--ratings", help="ratings CSV for the mos column")

    def build_phase(self):
        super().build_phase()
        self.manifest = Manifest.load(self.args.manifest)
        self.ratings = read_ratings_csv(self.args.ratings) if self.args.ratings else []

    def run_phase(self):
        work = functools.partial(_eval_sample, cfg=self.cfg)
        results = self.run_samples(work, self.manifest.entries)
        samples = [metric for sample_id in sorted(results) for metric in results[sample_id]]
        mos = {name: s.mean for name, s in aggregate_mos(self.ratings).items()}
        rated = {metric.system_id for metric in samples}
        self.metrics = [
            SystemMetrics.from_samples(system_id, samples, mos.get(system_id))
            for system_id in self.manifest.system_ids()
            if system_id in rated
        ]

    def report_phase(self):
        write_metrics_table(_out_dir(self.args.out), self.metrics)


class NoteLevelCommand(Command):
    name = "notelevel"
    help = "per-note MOS and distortions for one system"

    @classmethod
    def add_arguments(cls, parser):
        parser.add_argument("--manifest", required=True)
        parser.add_argument("--system", required=True)
        parser.add_argument("--out", required=True, help="note-level CSV")
        parser.add_argument("--ratings", help="ratings CSV")

    def build_phase(self):
        super().build_phase()
        self.manifest = Manifest.load(self.args.manifest)
        if self.args.system not in self.manifest.system_ids():
            raise M2AManifestError(f"no sample has system {self.args.system!r}")
        self.ratings = None
        if self.args.ratings:
            self.ratings = [
                r for r in read_ratings_csv(self.args.ratings) if r.system_id == self.args.system
            ]
            known = {entry.sample_id for entry in self.manifest.entries}
            unknown = sorted({r.sample_id for r in self.ratings} - known)
            if unknown:
                raise M2AManifestError(f"ratings for samples not in the manifest: {unknown}")

    def run_phase(self):
        work = functools.partial(_note_level_sample, cfg=self.cfg, system_id=self.args.system)
        results = self.run_samples(work, self.manifest.entries)
        ratings = None
        if self.ratings is not None:
            ratings = [(r.sample_id, r.score) for r in self.ratings if r.sample_id in results]
        self.report = note_level_report(
            [results[sample_id] for sample_id in sorted(results)], ratings
        )

    def report_phase(self):
        write_note_level_report(self.args.out, self.report)


class StatsCommand(Command):
    name = "stats"
    help = "ratings to MOS table and significance matrix"
    flag_keys = {"alpha": ("run", "alpha"), "unit": ("run", "unit")}

    @classmethod
    def add_arguments(cls, parser):
        parser.add_argument("--ratings", required=True)
        parser.add_argument("--out", required=True, help="output directory")
        parser.add_argument("--alpha", type=float)
        parser.add_argument("--unit", choices=UNITS)

    def run_phase(self):
        records = read_ratings_csv(self.args.ratings)
        self.summary = aggregate_mos(records)
        self.matrix = significance_matrix(records, self.cfg.alpha, self.cfg.unit)

    def report_phase(self):
        directory = _out_dir(self.args.out)
        write_mos_table(directory / "mos.csv", self.summary)
        write_significance_csv(directory, self.matrix)
        render_significance_grid(directory / "significance.png", self.matrix)


class ZeroFiltersCommand(Command):
    name = "zero-filters"
    help = "report all-zero filterbank rows per n_fft"

    @classmethod
    def add_arguments(cls, parser):
        parser.add_argument(
            "--all", action="store_true", help=f"report every size in {FEATURE_FFT_SIZES}"
        )
        parser.add_argument("--out", help="CSV path, default standard output")

    def run_phase(self):
        sizes = FEATURE_FFT_SIZES if self.args.all else (self.cfg.n_fft,)
        self.report = filterbank_report(self.cfg.sample_rate, sizes)

    def report_phase(self):
        rows = [
            (n_fft, len(indices), " ".join(str(index) for index in indices))
            for n_fft, indices in self.report.items()
        ]
        write_csv(self.args.out or sys.stdout, ("n_fft", "count", "indices"), rows)


COMMANDS = {
    command.name: command
    for command in (
        RollCommand,
        SegmentCommand,
        FeaturizeCommand,
        SynthCommand,
        RainbowCommand,
        EvalCommand,
        NoteLevelCommand,
        StatsCommand,
        ZeroFiltersCommand,
    )
}


def build_parser():
    common = M2AArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style config file")
    common.add_argument("--workers", type=int, help="worker processes, 0 for all cores")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--sr", type=int, help="sample rate in Hz")
    common.add_argument("--hop", type=int, help="piano roll hop in samples")
    common.add_argument("--nfft", type=int)
    common.add_argument("--window", type=int, help="STFT window length")
    common.add_argument("--stft-hop", type=int)
    common.add_argument("--floor", type=float)
    parser = M2AArgumentParser(
        prog="pym2a", description="MIDI-to-audio features, synthesis and evaluation"
    )
    subparsers = parser.add_subparsers(
        dest="command", metavar="COMMAND", required=True, parser_class=M2AArgumentParser
    )
    for name, command in COMMANDS.items():
        command.add_arguments(
            subparsers.add_parser(name, parents=[common], help=command.help)
        )
    return parser


def apply_flags(args, command, config_db=None):
    """
    Stores every flag that was given in the ConfigDB with
    FLAG_PRECEDENCE so it overrides the config file.
    """
    config_db = ConfigDB() if config_db is None else config_db
    for dest, (section, key) in {**_FLAG_KEYS, **command.flag_keys}.items():
        value = getattr(args, dest, None)
        if value is not None:
            config_db.set(section, key, value, ConfigDB.FLAG_PRECEDENCE)


def _diagnose(prefix, err, code):
    print(f"{prefix}: {err}", file=sys.stderr)
    return code


def run(argv=None):
    """
    :param argv: arguments without the program name
    :return: 0 on success, 1 on input errors, 2 on internal failure
    """
    root_logger = logging.getLogger(ROOT_LOGGER_NAME)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)-8s %(name)s: %(message)s"))
    previous_level = root_logger.level
    root_logger.addHandler(handler)
    command = None
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:
            # --help
            return exc.code or EXIT_OK
        level = logging.DEBUG if args.verbose else logging.INFO
        if args.quiet:
            level = logging.WARNING
        root_logger.setLevel(level)
        ReportObject.set_default_logging_level(level)
        command_class = COMMANDS[args.command]
        ConfigDB().clear()
        if args.config:
            load_config_file(args.config)
        apply_flags(args, command_class)
        command = command_class(args)
        for phase in m2a_common_phases:
            phase.execute(command)
        return command.exit_code
    except M2AUsageError as err:
        return _diagnose("usage error", err, EXIT_INPUT)
    except M2AConfigError as err:
        return _diagnose("invalid configuration", err, EXIT_INPUT)
    except M2AInputError as err:
        return _diagnose("input error", err, EXIT_INPUT)
    except M2AFatalError as err:
        return _diagnose("internal failure", err, EXIT_INTERNAL)
    except Exception as err:
        return _diagnose("internal failure", f"{type(err).__name__}: {err}", EXIT_INTERNAL)
    finally:
        if command is not None:
            command.close()
        root_logger.removeHandler(handler)
        root_logger.setLevel(previous_level)


def main():
    sys.exit(run())
