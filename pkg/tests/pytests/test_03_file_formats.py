import io
import struct

import numpy as np
import pytest
from PIL import Image
from scipy.io import wavfile

from pym2a import *

pytestmark = pytest.mark.usefixtures("initialize_pym2a")


def test_matrix_layout(tmp_path):
    """
    Two little-endian uint32 then row-major float32
    """
    path = tmp_path / "m.bin"
    values = np.arange(12, dtype=np.float64).reshape(3, 4) / 4.0
    write_matrix(path, values)
    raw = path.read_bytes()
    assert len(raw) == 8 + 12 * 4
    assert struct.unpack("<II", raw[:8]) == (3, 4)
    assert struct.unpack("<f", raw[8:12])[0] == 0.0
    assert struct.unpack("<f", raw[12:16])[0] == 0.25
    back = read_matrix(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, values.astype(np.float32))


def test_matrix_empty(tmp_path):
    path = tmp_path / "m.bin"
    write_matrix(path, np.zeros((0, 128)))
    assert read_matrix(path).shape == (0, 128)


def test_matrix_deterministic(tmp_path):
    values = np.random.default_rng(5).random((7, 5))
    write_matrix(tmp_path / "a.bin", values)
    write_matrix(tmp_path / "b.bin", values)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_matrix_must_be_2d(tmp_path):
    with pytest.raises(M2AShapeError):
        write_matrix(tmp_path / "m.bin", np.zeros(4))


def test_matrix_size_mismatch(tmp_path):
    path = tmp_path / "m.bin"
    path.write_bytes(struct.pack("<II", 2, 2) + b"\x00" * 12)
    with pytest.raises(M2AShapeError):
        read_matrix(path)
    path.write_bytes(b"\x01\x00")
    with pytest.raises(M2AShapeError):
        read_matrix(path)


def test_matrix_missing(tmp_path):
    with pytest.raises(M2AInputError):
        read_matrix(tmp_path / "absent.bin")


def test_wav_pcm16(tmp_path):
    path = tmp_path / "a.wav"
    samples = np.linspace(-1.0, 1.0, 101)
    write_wav(path, 24000, samples)
    rate, back = read_wav(path)
    assert rate == 24000
    assert back.dtype == np.float64
    assert np.max(np.abs(back - samples)) < 2.0 / 32767


def test_wav_pcm16_clips(tmp_path):
    path = tmp_path / "a.wav"
    write_wav(path, 24000, np.array([1.5, -1.5, 0.0]))
    _, data = wavfile.read(path)
    assert data.tolist() == [32767, -32767, 0]


def test_wav_float32(tmp_path):
    path = tmp_path / "a.wav"
    samples = np.array([0.1, -0.25, 0.5])
    write_wav(path, 16000, samples, subtype="float32")
    rate, back = read_wav(path)
    assert rate == 16000
    assert np.allclose(back, samples, atol=1e-7)


def test_wav_unknown_subtype(tmp_path):
    with pytest.raises(M2AInputError):
        write_wav(tmp_path / "a.wav", 24000, np.zeros(4), subtype="mp3")


def test_wav_stereo_rejected(tmp_path):
    path = tmp_path / "stereo.wav"
    wavfile.write(path, 24000, np.zeros((10, 2), dtype=np.int16))
    with pytest.raises(M2AAudioError):
        read_wav(path)


def test_wav_garbage_rejected(tmp_path):
    path = tmp_path / "noise.wav"
    path.write_bytes(b"this is not a wav file at all")
    with pytest.raises(M2AAudioError):
        read_wav(path)


def test_load_audio_resamples(tmp_path, make_tone):
    path = tmp_path / "48k.wav"
    write_wav(path, 48000, make_tone(440.0, 0.1, sample_rate=48000))
    samples = load_audio(path, 24000)
    assert samples.size == 2400
    assert np.max(np.abs(samples)) == pytest.approx(0.5, abs=0.02)


def test_load_audio_same_rate(tmp_path, make_tone):
    path = tmp_path / "24k.wav"
    write_wav(path, 24000, make_tone(440.0, 0.1))
    assert load_audio(path, 24000).size == 2400


def test_csv_format():
    stream = io.StringIO()
    write_csv(stream, ("a", "b", "c", "d"), [(1, 0.5, True, None), ("x", 1 / 3, False, "")])
    assert stream.getvalue() == "a,b,c,d\n1,0.500000,1,\nx,0.333333,0,\n"


def test_csv_file(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(path, ("n",), [(np.float64(2.0),), (np.int64(3),)])
    assert path.read_bytes() == b"n\n2.000000\n3\n"


def test_json_round(tmp_path):
    path = tmp_path / "t.json"
    write_json(path, {"b": 1, "a": [1.5, None]})
    text = path.read_text(encoding="utf-8")
    assert text.index('"a"') < text.index('"b"')
    assert text.endswith("\n")
    assert read_json(path) == {"a": [1.5, None], "b": 1}


def test_json_invalid(tmp_path):
    path = tmp_path / "t.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(M2AInputError):
        read_json(path)
    with pytest.raises(M2AInputError):
        read_json(tmp_path / "absent.json")


def test_read_bytes(tmp_path):
    path = tmp_path / "b"
    path.write_bytes(b"MThd")
    assert read_bytes(path) == b"MThd"
    with pytest.raises(M2AInputError):
        read_bytes(tmp_path / "absent")


@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_write_image(suffix, tmp_path):
    path = tmp_path / f"img{suffix}"
    rgb = np.zeros((4, 6, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    write_image(path, rgb)
    with Image.open(path) as image:
        assert image.size == (6, 4)
        assert image.getpixel((0, 0)) == (255, 0, 0)


def test_write_image_suffix(tmp_path):
    with pytest.raises(M2AInputError):
        write_image(tmp_path / "img.jpg", np.zeros((2, 2, 3), dtype=np.uint8))
