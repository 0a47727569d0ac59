"""Interleaved frame/word/state token sequences for streaming narration training.

A record's timeline is cut into chunks of ``stride_k`` frames
(``stride_k / fps`` seconds each). Every chunk serializes as its frame
tokens, then at most one ``<State>`` token, then the narration words whose
end time falls inside the chunk. The state token is present only in chunks
where the (phase, step) state changes; :func:`build_sequence_v1` instead
repeats the current state in every chunk.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Literal

from .errors import EmptySequenceError, HierarchyValidationError, ParseError
from .hierarchy import HierarchicalRecord, Transition, detect_transitions, state_labels, validate_record
from .timebase import as_fraction, chunk_duration, chunk_index

ConditioningMode = Literal["asr_history", "title_only"]
MODES = ("asr_history", "title_only")
SEQUENCE_HEADER = "#surgnarr-seq/1"
SEQUENCE_META_SCHEMA = "surgnarr.sequence-meta/1"


@dataclass(frozen=True)
class ContextToken:
    text: str


@dataclass(frozen=True)
class FrameToken:
    frame_index: int
    timestamp: float


@dataclass(frozen=True)
class WordToken:
    text: str
    t_start: float
    t_end: float


@dataclass(frozen=True)
class StateToken:
    phase_label: str
    step_label: str
    time: float

    def render(self) -> str:
        return render_state(self.phase_label, self.step_label)


Token = ContextToken | FrameToken | WordToken | StateToken


def render_state(phase_label: str, step_label: str) -> str:
    return f"<State>Phase={phase_label}, Step={step_label}</State>"


def parse_state(text: str) -> tuple[str, str]:
    prefix, sep, suffix = "<State>Phase=", ", Step=", "</State>"
    if not (text.startswith(prefix) and text.endswith(suffix) and sep in text):
        raise ParseError(f"not a state token: {text!r}")
    body = text[len(prefix) : -len(suffix)]
    phase, _, step = body.partition(sep)
    return phase, step


@dataclass(frozen=True)
class Chunk:
    index: int
    t_start: float
    t_end: float
    frames: tuple[FrameToken, ...]
    state: StateToken | None
    narration: tuple[WordToken, ...]

    def tokens(self) -> list[Token]:
        head: list[Token] = list(self.frames)
        if self.state is not None:
            head.append(self.state)
        return head + list(self.narration)


@dataclass(frozen=True)
class StateNote:
    """A state that did not get its own token (superseded within a chunk, or carried to the start)."""

    reason: str
    chunk_index: int
    time: float
    phase_label: str
    step_label: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "reason": self.reason,
            "chunk_index": self.chunk_index,
            "time": self.time,
            "phase_label": self.phase_label,
            "step_label": self.step_label,
        }


@dataclass(frozen=True)
class InterleavedSequence:
    video_id: str
    context: ContextToken
    chunks: tuple[Chunk, ...]
    fps: float
    stride_k: int
    conditioning_mode: str
    variant: str = "eq2"
    notes: tuple[StateNote, ...] = field(default=(), compare=False)

    @property
    def chunk_seconds(self) -> float:
        return float(chunk_duration(self.fps, self.stride_k))

    def tokens(self) -> list[Token]:
        out: list[Token] = [self.context]
        for c in self.chunks:
            out.extend(c.tokens())
        return out

    def words(self) -> list[WordToken]:
        return [w for c in self.chunks for w in c.narration]

    def states(self) -> list[StateToken]:
        return [c.state for c in self.chunks if c.state is not None]

    def metadata(self) -> dict[str, Any]:
        """Sidecar document: grid parameters, counts and state diagnostics."""
        return {
            "schema": SEQUENCE_META_SCHEMA,
            "video_id": self.video_id,
            "variant": self.variant,
            "fps": self.fps,
            "stride_k": self.stride_k,
            "chunk_seconds": self.chunk_seconds,
            "conditioning_mode": self.conditioning_mode,
            "n_chunks": len(self.chunks),
            "n_words": len(self.words()),
            "n_state_tokens": len(self.states()),
            "state_notes": [n.to_dict() for n in self.notes],
        }


def _frames(index: int, fps: Fraction, k: int) -> tuple[FrameToken, ...]:
    return tuple(FrameToken(f, float(Fraction(f) / fps)) for f in range(index * k, (index + 1) * k))


def _grid(record: HierarchicalRecord, fps: float, stride_k: int, start: float) -> tuple[int, int]:
    if not fps > 0:
        raise ValueError(f"fps must be positive, got {fps}")
    if stride_k < 1:
        raise ValueError(f"stride_k must be >= 1, got {stride_k}")
    violations = validate_record(record)
    if violations:
        raise HierarchyValidationError(violations)
    if record.duration <= 0:
        raise EmptySequenceError(f"{record.video_id}: record has zero duration")
    if not 0 <= start < record.duration:
        raise ValueError(f"start {start} outside [0, {record.duration})")
    delta = chunk_duration(fps, stride_k)
    first = chunk_index(start, fps, stride_k)
    stop = math.ceil(as_fraction(record.duration) / delta)
    # a word ending exactly on the final grid line needs one more chunk
    if record.words:
        stop = max(stop, chunk_index(record.words[-1].t_end, fps, stride_k) + 1)
    return first, stop


def _place_transitions(
    record: HierarchicalRecord, transitions: list[Transition], fps: float, k: int, first: int
) -> tuple[dict[int, Transition], list[StateNote], Transition | None]:
    """Last transition per chunk, plus notes for superseded ones and the pre-start carry."""
    placed: dict[int, Transition] = {}
    notes: list[StateNote] = []
    carried: Transition | None = None
    for tr in transitions:
        ci = chunk_index(tr.time, fps, k)
        if ci < first:
            carried = tr
            continue
        if ci in placed:
            old = placed[ci]
            notes.append(StateNote("superseded", ci, old.time, *state_labels(record, old.phase_index, old.step_index)))
        placed[ci] = tr
    return placed, notes, carried


def _build(
    record: HierarchicalRecord,
    fps: float,
    stride_k: int,
    mode: str,
    start: float,
    every_chunk: bool,
) -> InterleavedSequence:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    first, stop = _grid(record, fps, stride_k, start)
    fps_q = as_fraction(fps)
    delta = chunk_duration(fps, stride_k)

    buckets: dict[int, list[WordToken]] = {}
    history: list[str] = []
    for w in record.words:
        ci = chunk_index(w.t_end, fps, stride_k)
        if ci < first:
            history.append(w.text)
        else:
            buckets.setdefault(ci, []).append(WordToken(w.text, w.t_start, w.t_end))

    placed, notes, carried = _place_transitions(
        record, detect_transitions(record), fps, stride_k, first
    )
    if carried is not None:
        labels = state_labels(record, carried.phase_index, carried.step_index)
        if first in placed:
            notes.append(StateNote("superseded", first, carried.time, *labels))
        else:
            notes.append(StateNote("carried", first, carried.time, *labels))
            t0 = float(first * delta)
            placed[first] = Transition(t0, carried.phase_index, carried.step_index)

    chunks = []
    active: Transition | None = None
    for ci in range(first, stop):
        tr = placed.get(ci)
        state = None
        if tr is not None:
            active = tr
            state = StateToken(*state_labels(record, tr.phase_index, tr.step_index), tr.time)
        elif every_chunk:
            # before the first phase nothing is active: an explicit empty state
            labels = ("", "") if active is None else state_labels(record, active.phase_index, active.step_index)
            state = StateToken(*labels, float(ci * delta))
        chunks.append(
            Chunk(
                index=ci,
                t_start=float(ci * delta),
                t_end=float((ci + 1) * delta),
                frames=_frames(ci, fps_q, stride_k),
                state=state,
                narration=tuple(buckets.get(ci, ())),
            )
        )

    context = record.title
    if mode == "asr_history" and history:
        context = f"{record.title}\n{' '.join(history)}"
    return InterleavedSequence(
        video_id=record.video_id,
        context=ContextToken(context),
        chunks=tuple(chunks),
        fps=float(fps),
        stride_k=stride_k,
        conditioning_mode=mode,
        variant="v1" if every_chunk else "eq2",
        notes=tuple(sorted(notes, key=lambda n: (n.chunk_index, n.time))),
    )


def build_sequence(
    record: HierarchicalRecord,
    fps: float = 2,
    stride_k: int = 1,
    mode: str = "title_only",
    start: float = 0.0,
) -> InterleavedSequence:
    """Interleave ``record`` with a state token only where the state changes.

    Words land in the chunk holding their end time, state tokens in the
    chunk holding the transition time (half-open chunks). Several
    transitions inside one chunk collapse into one token carrying the last
    state; the others are kept in ``notes``. With ``start > 0`` the
    sequence begins at the chunk holding ``start``: earlier words become
    context history in ``asr_history`` mode and the state active at that
    point opens the first chunk.
    """
    return _build(record, fps, stride_k, mode, start, every_chunk=False)


def build_sequence_v1(
    record: HierarchicalRecord,
    fps: float = 2,
    stride_k: int = 1,
    mode: str = "title_only",
    start: float = 0.0,
) -> InterleavedSequence:
    """Same chunks as :func:`build_sequence`, but every chunk carries the active state.

    Chunks before the first phase starts carry the empty state
    ``<State>Phase=, Step=</State>``.
    """
    return _build(record, fps, stride_k, mode, start, every_chunk=True)


# ----------------------------------------------------------------- text format


def serialize(seq: InterleavedSequence) -> str:
    header = {
        "video_id": seq.video_id,
        "fps": seq.fps,
        "stride_k": seq.stride_k,
        "mode": seq.conditioning_mode,
        "variant": seq.variant,
    }
    lines = [f"{SEQUENCE_HEADER} {json.dumps(header, sort_keys=True)}"]
    lines.append(f"C\t{json.dumps(seq.context.text, ensure_ascii=False)}")
    for chunk in seq.chunks:
        for f in chunk.frames:
            lines.append(f"F\t{f.frame_index}\t{f.timestamp!r}")
        if chunk.state is not None:
            lines.append(f"S\t{chunk.state.time!r}\t{chunk.state.render()}")
        for w in chunk.narration:
            lines.append(f"W\t{w.t_start!r}\t{w.t_end!r}\t{json.dumps(w.text, ensure_ascii=False)}")
    return "\n".join(lines) + "\n"


def deserialize(text: str, metadata: dict[str, Any] | None = None) -> InterleavedSequence:
    """Inverse of :func:`serialize`; ``metadata`` (the sidecar) restores state notes."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith(SEQUENCE_HEADER + " "):
        raise ParseError("missing sequence header", "line 1")
    try:
        header = json.loads(lines[0][len(SEQUENCE_HEADER) + 1 :])
        fps, k = float(header["fps"]), int(header["stride_k"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad header: {exc}", "line 1") from exc
    if len(lines) < 2 or not lines[1].startswith("C\t"):
        raise ParseError("expected context line", "line 2")
    context = ContextToken(json.loads(lines[1][2:]))
    delta = chunk_duration(fps, k)

    chunks: list[Chunk] = []
    frames: list[FrameToken] = []
    state: StateToken | None = None
    words: list[WordToken] = []

    def flush() -> None:
        ci = frames[0].frame_index // k
        chunks.append(
            Chunk(ci, float(ci * delta), float((ci + 1) * delta), tuple(frames), state, tuple(words))
        )

    for lineno, line in enumerate(lines[2:], start=3):
        tag, _, rest = line.partition("\t")
        where = f"line {lineno}"
        try:
            if tag == "F":
                idx, ts = rest.split("\t")
                if frames and len(frames) == k:
                    flush()
                    frames, state, words = [], None, []
                elif frames and (state is not None or words):
                    raise ParseError("frame after state/narration inside a chunk", where)
                frames.append(FrameToken(int(idx), float(ts)))
            elif tag == "S":
                if not frames or state is not None or words:
                    raise ParseError("state token out of place", where)
                t, rendered = rest.split("\t", 1)
                state = StateToken(*parse_state(rendered), float(t))
            elif tag == "W":
                if not frames:
                    raise ParseError("word before any frame", where)
                a, b, word = rest.split("\t", 2)
                words.append(WordToken(json.loads(word), float(a), float(b)))
            else:
                raise ParseError(f"unknown token tag {tag!r}", where)
        except ValueError as exc:
            raise ParseError(str(exc), where) from exc
    if frames:
        if len(frames) != k:
            raise ParseError(f"last chunk has {len(frames)} frames, expected {k}", f"line {len(lines)}")
        flush()

    notes: tuple[StateNote, ...] = ()
    if metadata is not None:
        notes = tuple(StateNote(**n) for n in metadata.get("state_notes", ()))
    return InterleavedSequence(
        video_id=header["video_id"],
        context=context,
        chunks=tuple(chunks),
        fps=fps,
        stride_k=k,
        conditioning_mode=header["mode"],
        variant=header.get("variant", "eq2"),
        notes=notes,
    )
