import logging

from pym2a.error_classes import M2AAlignmentError

PYM2A_DEBUG = 4
logging.addLevelName(PYM2A_DEBUG, "PYM2A_DEBUG")

# Allowed mismatch between frame counts of two renderings of one segment
ALIGNMENT_TOLERANCE = 0.05


class Singleton(type):
    _instances = {}

    def __call__(cls, *args, **kwargs):
        if cls not in cls._instances:
            cls._instances[cls] = super().__call__(*args, **kwargs)  # noqa: E501
        return cls._instances[cls]

    @classmethod
    def clear_singletons(cls, keep=()):
        classes = list(cls._instances.keys())
        for del_cls in classes:
            if del_cls not in keep:
                del cls._instances[del_cls]


def aligned_length(len_a, len_b, what="frames", error=None):
    """
    Natural and synthesized renderings of one segment can differ by a
    few frames. Returns the common length to truncate to.

    :param len_a: frame count of the first item
    :param len_b: frame count of the second item
    :param what: noun used in the diagnostic
    :param error: exception class raised on a mismatch over tolerance
    :raises M2AAlignmentError: if the counts differ by more than 5%
    :return: min(len_a, len_b)
    """
    longest = max(len_a, len_b)
    if abs(len_a - len_b) > ALIGNMENT_TOLERANCE * longest:
        raise (error or M2AAlignmentError)(
            f"{what} differ by more than {ALIGNMENT_TOLERANCE:.0%}: {len_a} vs {len_b}"
        )
    return min(len_a, len_b)
