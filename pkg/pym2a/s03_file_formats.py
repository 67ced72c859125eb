# Readers and writers for everything that crosses the disk:
# binary feature matrices, WAV, JSON, CSV and images.
# Writers are byte-for-byte deterministic for identical input.

import csv
import json
import math
import pathlib

import numpy as np
from PIL import Image
from scipy.io import wavfile
from scipy.signal import resample_poly

from pym2a.error_classes import M2AAudioError, M2AInputError, M2AShapeError
from pym2a.s01_reporting_classes import module_logger

logger = module_logger(__name__)

MATRIX_HEADER = np.dtype("<u4")
MATRIX_VALUES = np.dtype("<f4")
IMAGE_FORMATS = {".png": "PNG", ".ppm": "PPM"}


def write_matrix(path, matrix):
    """
    Binary matrix file: (frames, dims) as unsigned 32-bit
    little-endian integers followed by 32-bit little-endian
    floats in row-major order.

    :param path: output path
    :param matrix: 2-D array-like
    """
    values = np.asarray(matrix)
    if values.ndim != 2:
        raise M2AShapeError(f"matrix must be 2-D, not {values.ndim}-D")
    header = np.array(values.shape, dtype=MATRIX_HEADER)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(values, dtype=MATRIX_VALUES).tobytes())


def read_matrix(path):
    """
    :param path: binary matrix file
    :return: float32 array of shape (frames, dims)
    :raises M2AInputError: unreadable file or size not matching the header
    """
    try:
        raw = pathlib.Path(path).read_bytes()
    except OSError as err:
        raise M2AInputError(f"cannot read {path}: {err}")
    if len(raw) < 8:
        raise M2AShapeError(f"{path}: truncated matrix header")
    frames, dims = np.frombuffer(raw[:8], dtype=MATRIX_HEADER)
    expected = 8 + int(frames) * int(dims) * MATRIX_VALUES.itemsize
    if len(raw) != expected:
        raise M2AShapeError(
            f"{path}: header says {frames}x{dims} but file holds {len(raw)} bytes"
        )
    return np.frombuffer(raw[8:], dtype=MATRIX_VALUES).reshape(int(frames), int(dims))


def read_wav(path):
    """
    Reads a mono WAV file.

    :param path: WAV path (PCM 8/16/32-bit or IEEE float)
    :return: (sample_rate, float64 samples in [-1, 1])
    :raises M2AAudioError: unreadable, empty, or multi-channel file
    """
    try:
        sample_rate, data = wavfile.read(path)
    except (OSError, ValueError) as err:
        raise M2AAudioError(f"cannot read {path}: {err}")
    if data.ndim != 1:
        raise M2AAudioError(f"{path}: only mono audio is supported")
    if data.size == 0:
        raise M2AAudioError(f"{path}: empty waveform")
    if data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.integer):
        samples = data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    else:
        samples = data.astype(np.float64)
    return int(sample_rate), samples


def load_audio(path, sample_rate):
    """
    Reads a WAV file and resamples it to ``sample_rate`` when needed.
    """
    file_rate, samples = read_wav(path)
    if file_rate != sample_rate:
        divisor = math.gcd(file_rate, sample_rate)
        logger.info("resampling %s from %d Hz to %d Hz", path, file_rate, sample_rate)
        samples = resample_poly(samples, sample_rate // divisor, file_rate // divisor)
    return samples


def write_wav(path, sample_rate, samples, subtype="pcm16"):
    """
    :param path: output path
    :param sample_rate: Hz
    :param samples: mono float samples, nominally in [-1, 1]
    :param subtype: "pcm16" (clipped, scaled by 32767) or "float32"
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise M2AAudioError("only mono audio can be written")
    if subtype == "pcm16":
        data = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    elif subtype == "float32":
        data = samples.astype("<f4")
    else:
        raise M2AInputError(f"unknown WAV subtype {subtype!r}")
    wavfile.write(path, int(sample_rate), data)


def read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as err:
        raise M2AInputError(f"cannot read {path}: {err}")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as err:
        raise M2AInputError(f"cannot read {path}: {err}")
    except json.JSONDecodeError as err:
        raise M2AInputError(f"{path} is not valid JSON: {err}")


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json(obj))


def format_cell(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{value:.6f}"
    return str(value)


def write_csv(path, header, rows):
    """
    CSV with "\\n" line endings and floats formatted ``%.6f``.
    None becomes an empty cell.

    :param path: output path, or an open text stream
    """
    if hasattr(path, "write"):
        _write_rows(path, header, rows)
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        _write_rows(fh, header, rows)


def _write_rows(fh, header, rows):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(cell) for cell in row])


def write_image(path, rgb):
    """
    Writes an RGB uint8 image as PNG or PPM, chosen by suffix.

    :param path: output path ending in .png or .ppm
    :param rgb: array (height, width, 3) of uint8
    """
    suffix = pathlib.Path(path).suffix.lower()
    if suffix not in IMAGE_FORMATS:
        raise M2AInputError(f"{path}: images must end in .png or .ppm")
    rgb = np.asarray(rgb)
    assert rgb.ndim == 3 and rgb.shape[2] == 3, f"not an RGB image: {rgb.shape}"
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(
        path, format=IMAGE_FORMATS[suffix]
    )
