import configparser
import dataclasses
import fnmatch
import string

from pym2a import error_classes, utility_classes
from pym2a._utils import resolve_workers
from pym2a.s01_reporting_classes import ReportObject, module_logger
from pym2a.s04_midi_core import FrameSpec
from pym2a.s05_spectral import StftConfig
from pym2a.s06_synth import SynthConfig
from pym2a.s07_pitch import PitchConfig

FEATURE_FFT_SIZES = (4096, 8192, 16384)


class ConfigDB(metaclass=utility_classes.Singleton):
    default_get = object()
    DEFAULT_PRECEDENCE = 0
    FILE_PRECEDENCE = 100
    FLAG_PRECEDENCE = 1000
    legal_chars = set(string.ascii_letters) | set(string.digits) | set("_.")
    """
    A section-based singleton storage system
    """

    # The ConfigDB is a dual-level dict. The outer dict is keyed by
    # section paths that may hold globs ("stft", "*"). Each entry
    # maps a key to a {precedence: value} dict.
    #
    # A lookup walks the matching sections from most specific to
    # most greedy and, inside the first section that has the key,
    # returns the value stored with the highest precedence. Flags
    # are stored with FLAG_PRECEDENCE so they beat config files.

    def __init__(self):
        self.logger_holder = ReportObject("config_db")
        self._path_dict = {}
        self.is_tracing = False

    def clear(self):
        """Reset the ConfigDB. Used for testing and between runs."""
        if self.is_tracing:
            self.logger_holder.logger.info("CFGDB/CLEAR: Clearing ConfigDB()")
        self._path_dict = {}

    def trace(self, method, section, key, value):
        """
        Output the ConfigDB activity if tracing is on.
        """
        if self.is_tracing:
            self.logger_holder.logger.info(f"CFGDB/{method} {section} {key}={value}")

    def set(self, section, key, value, precedence=DEFAULT_PRECEDENCE):
        """
        Stores a value under a section path and a key.

        :param section: Section path, may be a glob
        :param key: The key we're setting, no wildcards
        :param value: The object to be stored
        :param precedence: Higher precedence wins on retrieval
        :return: None

        """
        if not set(key).issubset(self.legal_chars):
            raise error_classes.M2AConfigError(
                f"pym2a does not allow wildcards in key names ({key})"
            )
        fields = self._path_dict.setdefault(section, {})
        fields.setdefault(key, {})[precedence] = value
        self.trace("SET", section, key, value)

    def get(self, section, key, default=default_get):
        """
        The section matches against the stored paths, which may be
        globs. Returns the value stored at key. If the key is missing,
        returns default or raises ``M2AConfigItemNotFound``.

        :param section: section path with no wildcards
        :param key: the key being retrieved
        :param default: the value to return if there is no key
        :raises M2AConfigItemNotFound: if the key is not found and the
            default is not set
        :return: value found at location

        """
        if not set(section).issubset(self.legal_chars):
            raise error_classes.M2AConfigError(
                f'"{section}" is illegal: section wildcards only allowed when storing.'
            )
        key_matches = [dk for dk in self._path_dict if fnmatch.fnmatch(section, dk)]
        # Sort the matching paths from most specific to
        # most greedy. stft before st* before *
        sorted_paths = []
        for path in key_matches:
            for ii in range(len(sorted_paths)):
                if fnmatch.fnmatch(path, sorted_paths[ii]):
                    sorted_paths.insert(ii, path)
                    break
            else:
                sorted_paths.append(path)
        for path in sorted_paths:
            matching = self._path_dict[path].get(key)
            if matching:
                value = matching[max(matching)]
                self.trace("GET", section, key, value)
                return value
        if default is self.default_get:
            raise error_classes.M2AConfigItemNotFound(
                f'"Section {section} has no key: {key}'
            )
        return default

    def exists(self, section, key):
        """
        Returns true if there is data in the database at this location
        """
        try:
            _ = self.get(section, key)
        except error_classes.M2AConfigItemNotFound:
            return False
        return True

    def __str__(self):
        str_list = [f"\n{'SECTION':20}: {'KEY':20}: {'DATA':30}"]
        for section in self._path_dict:
            for key in self._path_dict[section]:
                str_list.append(
                    f"{section:20}: {key:20}: {self._path_dict[section][key]}"
                )  # noqa: E501
        return "\n".join(str_list)


def _field(default, section, key=None):
    return dataclasses.field(
        default=default, metadata={"section": section, "key": key}
    )


def _to_bool(text):
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """
    Every tunable of a run. Values come from the field defaults,
    then the config file, then the command-line flags.
    """

    sample_rate: int = _field(24000, "frame")
    frame_hop: int = _field(288, "frame", "hop")
    frames_per_chunk: int = _field(800, "frame")
    sustain: bool = _field(False, "frame")
    window_length: int = _field(2048, "stft")
    stft_hop: int = _field(288, "stft", "hop")
    n_fft: int = _field(16384, "stft")
    window: str = _field("hann", "stft")
    floor: float = _field(1e-5, "feature")
    f_min: float = _field(32.70, "pitch")
    pitch_window: int = _field(1024, "pitch", "window")
    pitch_hop: int = _field(288, "pitch", "hop")
    smoothing_std: float = _field(25.0, "pitch")
    harmonics: int = _field(8, "synth")
    rolloff_exponent: float = _field(1.0, "synth")
    attack: float = _field(0.01, "synth")
    release: float = _field(0.1, "synth")
    iterations: int = _field(32, "synth")
    seed: int = _field(0, "run")
    workers: int = _field(0, "run")
    alpha: float = _field(0.05, "run")
    unit: str = _field("rating", "run")
    min_pause: float = _field(0.5, "run")
    min_length: float = _field(10.0, "run")
    max_length: float = _field(30.0, "run")

    @staticmethod
    def config_key(field):
        return field.metadata["section"], field.metadata["key"] or field.name

    @classmethod
    def sections(cls):
        """:return: {section: {key: field}} for every field"""
        table = {}
        for field in dataclasses.fields(cls):
            section, key = cls.config_key(field)
            table.setdefault(section, {})[key] = field
        return table

    @classmethod
    def from_config_db(cls, config_db=None):
        """
        Assemble a RunConfig from the ConfigDB, converting the text
        values a config file delivers to the field types.

        :raises M2AConfigError: if a value cannot be converted
        """
        config_db = ConfigDB() if config_db is None else config_db
        values = {}
        for field in dataclasses.fields(cls):
            section, key = cls.config_key(field)
            raw = config_db.get(section, key, default=field.default)
            converter = _to_bool if field.type in (bool, "bool") else _converter(field)
            try:
                values[field.name] = converter(raw)
            except (TypeError, ValueError) as err:
                raise error_classes.M2AConfigError(
                    f"[{section}] {key}: cannot use {raw!r} ({err})"
                )
        return cls(**values)

    def validate(self):
        """
        Checks every parameter before any file is processed.

        :raises M2AConfigError: listing every problem found
        """
        problems = []
        if self.sample_rate <= 0:
            problems.append("sample_rate must be positive")
        if self.frame_hop < 1 or self.stft_hop < 1 or self.pitch_hop < 1:
            problems.append("hops must be at least 1")
        if self.frames_per_chunk < 1:
            problems.append("frames_per_chunk must be at least 1")
        if self.n_fft not in FEATURE_FFT_SIZES:
            problems.append(f"n_fft must be one of {FEATURE_FFT_SIZES}, not {self.n_fft}")
        if self.window_length > self.n_fft:
            problems.append("window_length must not exceed n_fft")
        if self.stft_hop > self.window_length:
            problems.append("stft hop must not exceed window_length")
        if self.window not in ("hann", "rect"):
            problems.append(f"unknown window {self.window!r}")
        if self.floor <= 0:
            problems.append("floor must be positive")
        if self.harmonics < 1:
            problems.append("harmonics must be at least 1")
        if self.rolloff_exponent <= 0:
            problems.append("rolloff_exponent must be positive")
        if self.attack < 0 or self.release < 0:
            problems.append("attack and release must be non-negative")
        if self.iterations < 0:
            problems.append("iterations must be non-negative")
        if self.workers < 0:
            problems.append("workers must be non-negative (0 means all cores)")
        if not 0 < self.alpha < 1:
            problems.append("alpha must lie in (0, 1)")
        if self.unit not in ("rating", "sample"):
            problems.append(f"unit must be 'rating' or 'sample', not {self.unit!r}")
        if self.min_pause <= 0:
            problems.append("min_pause must be positive")
        if not 0 < self.min_length < self.max_length:
            problems.append("segment lengths must satisfy 0 < min_length < max_length")
        if self.f_min <= 0 or self.sample_rate < 2 * self.f_min * 2**6:
            problems.append("sample_rate must be at least twice the top of the pitch grid")
        if problems:
            raise error_classes.M2AConfigError("; ".join(problems))
        return self

    def pool_size(self):
        return resolve_workers(self.workers)

    def frame_spec(self):
        return FrameSpec(self.sample_rate, self.frame_hop, self.frames_per_chunk)

    def stft_config(self):
        return StftConfig(
            self.sample_rate, self.window_length, self.stft_hop, self.n_fft, self.window
        )

    def pitch_config(self):
        return PitchConfig(
            sample_rate=self.sample_rate,
            f_min=self.f_min,
            window=self.pitch_window,
            hop=self.pitch_hop,
            smoothing_std=self.smoothing_std,
        )

    def synth_config(self):
        return SynthConfig(
            self.sample_rate,
            self.harmonics,
            self.rolloff_exponent,
            self.attack,
            self.release,
        )


def _converter(field):
    return {"int": int, "float": float, "str": str}.get(
        getattr(field.type, "__name__", field.type), lambda value: value
    )


def load_config_file(path, config_db=None):
    """
    Reads an INI-style config file into the ConfigDB with
    FILE_PRECEDENCE. Sections and keys must be known to RunConfig.

    :param path: config file path
    :param config_db: defaults to the singleton
    :raises M2AConfigError: unreadable file, unknown section or key
    """
    config_db = ConfigDB() if config_db is None else config_db
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as err:
        raise error_classes.M2AConfigError(f"cannot read config file {path}: {err}")
    known = RunConfig.sections()
    for section in parser.sections():
        if section not in known:
            raise error_classes.M2AConfigError(f"{path}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in known[section]:
                raise error_classes.M2AConfigError(
                    f"{path}: unknown key {key!r} in [{section}]"
                )
            config_db.set(section, key, value, ConfigDB.FILE_PRECEDENCE)
    module_logger(__name__).debug(
        "loaded %d sections from %s", len(parser.sections()), path
    )
