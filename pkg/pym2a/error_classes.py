class M2AError(Exception):
    """
    All pym2a Errors
    """


class M2AInputError(M2AError):
    """Bad user input. The command line exits with code 1."""


class M2AUsageError(M2AInputError):
    """Unknown subcommand or malformed flags"""


class M2AMidiError(M2AInputError):
    """Malformed header chunk or truncated track in a MIDI file"""


class M2AAudioError(M2AInputError):
    """Empty, unreadable, or unsupported waveform"""


class M2AShapeError(M2AInputError):
    """Dimension, configuration, or filterbank mismatch"""


class M2AAlignmentError(M2AInputError):
    """Frame counts differ by more than the allowed tolerance"""


class M2AStatsError(M2AInputError):
    """Empty samples, degenerate variance, or too few systems"""


class M2AManifestError(M2AInputError):
    """Manifest schema errors, duplicate sample ids, missing files"""


class M2AConfigError(M2AInputError):
    """Errors using the ConfigDB or the run configuration"""


class M2AConfigItemNotFound(M2AConfigError):
    """Couldn't find something in ConfigDB"""


class M2ANotImplemented(M2AInputError):
    """
    For inputs we recognize but do not support, such as
    SMF format 2 or SMPTE time division.
    """


class M2ABadPhase(M2AError):
    """Errors in phasing"""


class M2AFatalError(M2AError):
    """Internal failure. The command line exits with code 2."""
