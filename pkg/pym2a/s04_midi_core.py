# MIDI parsing, piano rolls, segmentation and chunking.
#
# Every type here is immutable after construction and every
# operation is a pure function, so workers can share them freely.

import bisect
import collections
import dataclasses
import io
import json
import math

import mido
import numpy as np

from pym2a.error_classes import (
    M2AConfigError,
    M2AInputError,
    M2AMidiError,
    M2ANotImplemented,
    M2AShapeError,
)
from pym2a.s01_reporting_classes import module_logger

logger = module_logger(__name__)

NUM_PITCHES = 128
DEFAULT_TEMPO = 500000  # microseconds per quarter note, 120 BPM
SUSTAIN_CONTROL = 64
# Frame boundaries are computed in floating point; values this
# close to an integer frame index are treated as on the boundary.
FRAME_EPSILON = 1e-9


@dataclasses.dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    offset: float
    velocity: int

    def __post_init__(self):
        if not 0 <= self.pitch < NUM_PITCHES:
            raise M2AInputError(f"pitch {self.pitch} outside [0, 127]")
        if not 1 <= self.velocity <= 127:
            raise M2AInputError(f"velocity {self.velocity} outside [1, 127]")
        if self.onset < 0:
            raise M2AInputError(f"negative onset {self.onset}")
        if not self.offset > self.onset:
            raise M2AInputError(
                f"offset {self.offset} must be after onset {self.onset}"
            )

    def sort_key(self):
        return (self.onset, self.pitch, self.offset, self.velocity)

    def to_dict(self):
        return {
            "pitch": self.pitch,
            "onset": self.onset,
            "offset": self.offset,
            "velocity": self.velocity,
        }


@dataclasses.dataclass(frozen=True)
class NoteSequence:
    """
    Parsed, tempo-resolved notes sorted by (onset, pitch).

    ``sustain`` holds the (start, end) seconds during which
    controller 64 was held down on any channel, merged.
    ``unmatched_note_ons`` counts notes closed at the end of
    their track for lack of a note-off.
    """

    notes: tuple = ()
    duration: float = 0.0
    source_ticks_per_quarter: int = 0
    sustain: tuple = ()
    unmatched_note_ons: int = 0

    def __post_init__(self):
        notes = tuple(sorted(self.notes, key=NoteEvent.sort_key))
        object.__setattr__(self, "notes", notes)
        object.__setattr__(self, "sustain", tuple(tuple(ii) for ii in self.sustain))
        if notes:
            last_offset = max(note.offset for note in notes)
            if self.duration < last_offset:
                raise M2AInputError(
                    f"duration {self.duration} is shorter than last offset {last_offset}"
                )

    def __len__(self):
        return len(self.notes)

    def to_json(self):
        """:return: JSON array of {pitch, onset, offset, velocity}"""
        return json.dumps(
            [note.to_dict() for note in self.notes], sort_keys=True, indent=2
        ) + "\n"

    @classmethod
    def from_json(cls, text, duration=None):
        """
        Inverse of ``to_json``. Duration defaults to the last offset.
        """
        try:
            items = json.loads(text)
            notes = [
                NoteEvent(
                    int(item["pitch"]),
                    float(item["onset"]),
                    float(item["offset"]),
                    int(item["velocity"]),
                )
                for item in items
            ]
        except (ValueError, KeyError, TypeError) as err:
            raise M2AInputError(f"malformed note list: {err}")
        if duration is None:
            duration = max((note.offset for note in notes), default=0.0)
        return cls(tuple(notes), duration)


@dataclasses.dataclass(frozen=True)
class FrameSpec:
    sample_rate: int = 24000
    hop: int = 288
    frames_per_chunk: int = 800

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise M2AConfigError(f"sample_rate must be positive, not {self.sample_rate}")
        if self.hop < 1:
            raise M2AConfigError(f"hop must be at least 1, not {self.hop}")
        if self.frames_per_chunk < 1:
            raise M2AConfigError(
                f"frames_per_chunk must be at least 1, not {self.frames_per_chunk}"
            )

    @property
    def frame_period(self):
        return self.hop / self.sample_rate

    def frames_at(self, seconds):
        """:return: seconds expressed in (fractional) frames"""
        return seconds * self.sample_rate / self.hop


@dataclasses.dataclass(frozen=True, eq=False)
class PianoRoll:
    values: np.ndarray
    frame_spec: FrameSpec
    valid_frames: int

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != NUM_PITCHES:
            raise M2AShapeError(f"piano roll must be frames x 128, not {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise M2AShapeError("piano roll entries must lie in [0, 1]")
        if not 0 <= self.valid_frames <= values.shape[0]:
            raise M2AShapeError(
                f"valid_frames {self.valid_frames} outside [0, {values.shape[0]}]"
            )
        if np.any(values[self.valid_frames :]):
            raise M2AShapeError("padding beyond valid_frames must be zero")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def frames(self):
        return self.values.shape[0]

    def trim(self):
        """:return: the roll without its zero padding"""
        return PianoRoll(
            self.values[: self.valid_frames], self.frame_spec, self.valid_frames
        )


@dataclasses.dataclass(frozen=True)
class Segment:
    start: float
    end: float
    note_indices: tuple = ()

    def __post_init__(self):
        if not self.end > self.start:
            raise M2AInputError(f"segment end {self.end} must follow start {self.start}")

    @property
    def length(self):
        return self.end - self.start


class _TempoMap:
    """
    Piecewise-constant tempo from every set_tempo event in the file.
    Converts absolute ticks to seconds by integrating over segments.
    """

    def __init__(self, tempo_events, ticks_per_quarter):
        self.ticks_per_quarter = ticks_per_quarter
        changes = {0: DEFAULT_TEMPO}
        for tick, tempo in sorted(tempo_events, key=lambda event: event[0]):
            changes[tick] = tempo
        self.ticks = sorted(changes)
        self.tempos = [changes[tick] for tick in self.ticks]
        self.seconds = [0.0]
        for ii in range(1, len(self.ticks)):
            span = self.ticks[ii] - self.ticks[ii - 1]
            self.seconds.append(
                self.seconds[-1]
                + mido.tick2second(span, ticks_per_quarter, self.tempos[ii - 1])
            )

    def to_seconds(self, tick):
        ii = bisect.bisect_right(self.ticks, tick) - 1
        return self.seconds[ii] + mido.tick2second(
            tick - self.ticks[ii], self.ticks_per_quarter, self.tempos[ii]
        )


def _merge_intervals(intervals):
    merged = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [tuple(interval) for interval in merged]


def _read_midi(data):
    try:
        return mido.MidiFile(file=io.BytesIO(data))
    except (OSError, EOFError, ValueError, KeyError, IndexError) as err:
        raise M2AMidiError(f"cannot parse MIDI data: {err}")


def parse_midi(data):
    """
    Parses a Standard MIDI File into a NoteSequence.

    Note-ons are paired with note-offs first-in first-out per
    (track, channel, pitch); a note-on with velocity 0 is a note-off.
    Notes still open at the end of their track are closed there and
    counted in ``unmatched_note_ons``.

    :param data: SMF bytes, format 0 or 1
    :return: NoteSequence
    :raises M2AMidiError: malformed header or truncated track
    :raises M2ANotImplemented: format 2 or SMPTE time division
    """
    midi_file = _read_midi(bytes(data))
    if midi_file.type == 2:
        raise M2ANotImplemented("SMF format 2 is not supported")
    ticks_per_quarter = midi_file.ticks_per_beat
    if ticks_per_quarter <= 0 or ticks_per_quarter & 0x8000:
        raise M2ANotImplemented("SMPTE time division is not supported")

    tempo_events = []
    tracks = []
    for track in midi_file.tracks:
        tick = 0
        events = []
        for msg in track:
            tick += msg.time
            events.append((tick, msg))
            if msg.type == "set_tempo":
                tempo_events.append((tick, msg.tempo))
        tracks.append((events, tick))
    tempo_map = _TempoMap(tempo_events, ticks_per_quarter)

    raw_notes = []
    pedal_intervals = []
    unmatched = 0
    zero_length = 0
    for events, end_tick in tracks:
        open_notes = collections.defaultdict(collections.deque)
        pedal_down = {}
        for tick, msg in events:
            if msg.type == "note_on" and msg.velocity > 0:
                open_notes[(msg.channel, msg.note)].append((tick, msg.velocity))
            elif msg.type in ("note_off", "note_on"):
                pending = open_notes.get((msg.channel, msg.note))
                if pending:
                    on_tick, velocity = pending.popleft()  # FIFO
                    raw_notes.append((msg.note, on_tick, tick, velocity))
            elif msg.type == "control_change" and msg.control == SUSTAIN_CONTROL:
                if msg.value >= 64:
                    pedal_down.setdefault(msg.channel, tick)
                elif msg.channel in pedal_down:
                    pedal_intervals.append((pedal_down.pop(msg.channel), tick))
        for (_, pitch), pending in sorted(open_notes.items()):
            for on_tick, velocity in pending:
                unmatched += 1
                raw_notes.append((pitch, on_tick, end_tick, velocity))
        for down_tick in pedal_down.values():
            pedal_intervals.append((down_tick, end_tick))

    notes = []
    for pitch, on_tick, off_tick, velocity in raw_notes:
        onset = tempo_map.to_seconds(on_tick)
        offset = tempo_map.to_seconds(off_tick)
        if offset <= onset:
            zero_length += 1
            continue
        notes.append(NoteEvent(pitch, onset, offset, velocity))
    if unmatched:
        logger.warning("closed %d unmatched note-on(s) at end of track", unmatched)
    if zero_length:
        logger.warning("dropped %d zero-length note(s)", zero_length)

    end_tick = max((end for _, end in tracks), default=0)
    duration = max(
        [tempo_map.to_seconds(end_tick)] + [note.offset for note in notes]
    )
    sustain = _merge_intervals(
        (tempo_map.to_seconds(start), tempo_map.to_seconds(end))
        for start, end in pedal_intervals
        if end > start
    )
    return NoteSequence(
        tuple(notes),
        duration,
        ticks_per_quarter,
        tuple(sustain),
        unmatched,
    )


def _sustained_offset(offset, sustain):
    for start, end in sustain:
        if start <= offset < end:
            return end
    return offset


def _note_frames(onset, offset, frame_spec):
    start = math.floor(frame_spec.frames_at(onset) + FRAME_EPSILON)
    end = math.ceil(frame_spec.frames_at(offset) - FRAME_EPSILON)
    return start, max(end, start + 1)


def to_piano_roll(seq, frame_spec, sustain=False):
    """
    A note occupies frames floor(onset/Tf) through ceil(offset/Tf) - 1
    holding velocity/127. A later onset at the same pitch overwrites.

    :param seq: NoteSequence
    :param frame_spec: FrameSpec
    :param sustain: extend offsets while controller 64 is held
    :return: PianoRoll with valid_frames equal to its length
    """
    spans = []
    for note in seq.notes:
        offset = _sustained_offset(note.offset, seq.sustain) if sustain else note.offset
        spans.append((*_note_frames(note.onset, offset, frame_spec), note))
    frames = math.ceil(frame_spec.frames_at(seq.duration) - FRAME_EPSILON)
    frames = max([frames] + [end for _, end, _ in spans])
    values = np.zeros((frames, NUM_PITCHES))
    for start, end, note in spans:
        values[start:end, note.pitch] = note.velocity / 127.0
    return PianoRoll(values, frame_spec, frames)


def chunk_frames(roll):
    """
    Cuts the valid part of a roll into consecutive chunks of
    ``frames_per_chunk`` frames. The last chunk is zero-padded and
    records its unpadded length in ``valid_frames``.
    """
    size = roll.frame_spec.frames_per_chunk
    chunks = []
    for start in range(0, roll.valid_frames, size):
        piece = roll.values[start : min(start + size, roll.valid_frames)]
        padded = np.zeros((size, NUM_PITCHES))
        padded[: len(piece)] = piece
        chunks.append(PianoRoll(padded, roll.frame_spec, len(piece)))
    return chunks


def _note_blocks(seq, min_pause):
    # Runs of note activity separated by silences of at least min_pause
    blocks = []
    for note in seq.notes:
        if blocks and note.onset - blocks[-1][1] < min_pause:
            blocks[-1][1] = max(blocks[-1][1], note.offset)
        else:
            blocks.append([note.onset, note.offset])
    return [tuple(block) for block in blocks]


def _split_long(blocks, max_length):
    start, end = blocks[0][0], blocks[-1][1]
    if end - start <= max_length:
        return [(start, end)]
    if len(blocks) == 1:
        cuts = np.arange(start, end, max_length).tolist()
        return [(cut, min(cut + max_length, end)) for cut in cuts]
    gaps = [blocks[ii + 1][0] - blocks[ii][1] for ii in range(len(blocks) - 1)]
    widest = int(np.argmax(gaps))
    return _split_long(blocks[: widest + 1], max_length) + _split_long(
        blocks[widest + 1 :], max_length
    )


def segment_by_pauses(seq, min_pause=0.5, min_length=10.0, max_length=30.0):
    """
    Splits a performance at long pauses into listening segments.

    Cut points lie only where nothing sounds for at least
    ``min_pause`` seconds. Pieces shorter than ``min_length`` merge
    forward (a short final piece merges backward). Pieces longer than
    ``max_length`` are split at their longest internal pause, or cut
    every ``max_length`` seconds when they have none.

    :return: list of Segment, ordered and non-overlapping
    """
    if min_pause <= 0:
        raise M2AConfigError("min_pause must be positive")
    if not min_length < max_length:
        raise M2AConfigError("min_length must be smaller than max_length")
    groups = []
    for block in _note_blocks(seq, min_pause):
        if groups and groups[-1][-1][1] - groups[-1][0][0] < min_length:
            groups[-1].append(block)
        else:
            groups.append([block])
    if len(groups) > 1 and groups[-1][-1][1] - groups[-1][0][0] < min_length:
        groups[-2].extend(groups.pop())

    segments = []
    for group in groups:
        for start, end in _split_long(group, max_length):
            indices = tuple(
                ii
                for ii, note in enumerate(seq.notes)
                if note.onset < end and note.offset > start
            )
            segments.append(Segment(start, end, indices))
    return segments


def note_presence(seq, segment=None):
    """
    :return: frozenset of MIDI notes sounding in the segment, or
        anywhere in the sequence when no segment is given
    """
    if segment is None:
        return frozenset(note.pitch for note in seq.notes)
    return frozenset(seq.notes[ii].pitch for ii in segment.note_indices)
