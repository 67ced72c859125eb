import io
import json

import mido
import numpy as np
import pytest

from pym2a import (
    ConfigDB,
    FrameSpec,
    NoteEvent,
    NoteSequence,
    Singleton,
    SynthConfig,
    additive_synth,
    to_piano_roll,
    write_wav,
)
from pym2a._utils import NUM_THREADS_ENV

SAMPLE_RATE = 24000


@pytest.fixture()
def initialize_pym2a(request, monkeypatch):
    Singleton.clear_singletons()
    ConfigDB().clear()
    monkeypatch.delenv(NUM_THREADS_ENV, raising=False)


@pytest.fixture()
def make_tone():
    """
    make_tone(freqs, seconds, amplitude) -> sum of sines at 24 kHz
    """

    def _tone(freqs, seconds=1.0, amplitude=0.5, sample_rate=SAMPLE_RATE, phase=0.0):
        if np.isscalar(freqs):
            freqs = [freqs]
        times = np.arange(int(round(seconds * sample_rate))) / sample_rate
        return sum(
            amplitude * np.sin(2.0 * np.pi * freq * times + phase) for freq in freqs
        )

    return _tone


@pytest.fixture()
def make_smf():
    """
    make_smf(tracks, ticks_per_beat, midi_type) -> SMF bytes, each
    track a list of mido messages with delta times
    """

    def _smf(tracks, ticks_per_beat=480, midi_type=None):
        if midi_type is None:
            midi_type = 0 if len(tracks) == 1 else 1
        midi_file = mido.MidiFile(type=midi_type, ticks_per_beat=ticks_per_beat)
        for messages in tracks:
            midi_file.tracks.append(mido.MidiTrack(messages))
        buffer = io.BytesIO()
        midi_file.save(file=buffer)
        return buffer.getvalue()

    return _smf


def single_note_track(note, ticks=480, velocity=100):
    return [
        mido.Message("note_on", note=note, velocity=velocity, time=0),
        mido.Message("note_off", note=note, velocity=0, time=ticks),
        mido.MetaMessage("end_of_track", time=0),
    ]


def _render(note, harmonics, seconds=0.5):
    seq = NoteSequence((NoteEvent(note, 0.0, seconds, 100),), seconds)
    roll = to_piano_roll(seq, FrameSpec())
    return additive_synth(roll, SynthConfig(harmonics=harmonics))


@pytest.fixture()
def two_sample_manifest(tmp_path, make_smf):
    """
    Two samples (notes 60 and 67), each with a natural recording and
    two systems: "bright" (more harmonics) and "noisy" (added noise).
    """
    rng = np.random.default_rng(1234)
    entries = []
    for sample_id, note in (("s1", 60), ("s2", 67)):
        (tmp_path / f"{sample_id}.mid").write_bytes(make_smf([single_note_track(note)]))
        natural = _render(note, 8)
        write_wav(tmp_path / f"{sample_id}_natural.wav", SAMPLE_RATE, natural)
        write_wav(tmp_path / f"{sample_id}_bright.wav", SAMPLE_RATE, _render(note, 12))
        noisy = natural + 0.05 * rng.standard_normal(natural.size)
        write_wav(tmp_path / f"{sample_id}_noisy.wav", SAMPLE_RATE, noisy)
        entries.append(
            {
                "sample_id": sample_id,
                "midi_path": f"{sample_id}.mid",
                "natural_wav_path": f"{sample_id}_natural.wav",
                "systems": {
                    "bright": f"{sample_id}_bright.wav",
                    "noisy": f"{sample_id}_noisy.wav",
                },
            }
        )
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"root": ".", "entries": entries}), encoding="utf-8")
    return path


@pytest.fixture()
def write_ratings():
    """
    write_ratings(path, {system: mos}) writes 100 ratings per system
    whose mean is exactly the given MOS (two decimals).
    """

    def _write(path, mos_by_system, samples=10):
        lines = ["listener_id,system_id,sample_id,score"]
        for system, mos in mos_by_system.items():
            total = int(round(mos * 100))
            base, extra = divmod(total, 100)
            for index in range(100):
                score = base + 1 if index < extra else base
                lines.append(f"l{index:03d},{system},s{index % samples},{score}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return _write
