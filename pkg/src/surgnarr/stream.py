"""Causal streaming simulation over interleaved sequences.

The harness owns the clock and pushes one chunk at a time to a
:class:`NarrationModel`. Everything the model can see goes through a
:class:`Gatekeeper`, which refuses any look at a chunk that has not been
delivered yet and any acknowledgment that is not for the current chunk.
"""

from __future__ import annotations

import json
import logging
import math
import subprocess
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence, Union

from .errors import CausalityViolation, EmptyInputError, StreamRunError
from .hierarchy import HierarchicalRecord, active_state, state_labels
from .interleave import Chunk, FrameToken, InterleavedSequence, StateToken

logger = logging.getLogger(__name__)

PROTOCOL = "surgnarr.stream/1"
REPORT_SCHEMA = "surgnarr.stream-report/1"
CLOCK_MODES = ("as_fast_as_possible", "paced")


@dataclass(frozen=True)
class WordOut:
    text: str


@dataclass(frozen=True)
class StateOut:
    phase: str
    step: str


Emission = Union[WordOut, StateOut]


class Gatekeeper:
    """Mediates every model access to chunks for one run."""

    def __init__(self, chunks: Sequence[Chunk]) -> None:
        self._chunks = list(chunks)
        self.delivered = -1
        self.acknowledged = -1
        self.violation: CausalityViolation | None = None

    def violate(self, message: str) -> CausalityViolation:
        """Record a violation; the run aborts even if the model swallows the exception."""
        self.violation = CausalityViolation(message)
        return self.violation

    def deliver(self, position: int) -> ChunkView:
        if position != self.acknowledged + 1:
            raise self.violate(
                f"chunk {position} delivered before chunk {self.acknowledged + 1} was acknowledged"
            )
        self.delivered = position
        return self._view(position)

    def _view(self, position: int) -> ChunkView:
        c = self._chunks[position]
        return ChunkView(position, c.index, c.t_start, c.t_end, c.frames, c.state, self)

    def fetch(self, position: int) -> ChunkView:
        """Look back at an already delivered chunk (by position in the run)."""
        if position > self.delivered:
            raise self.violate(
                f"requested chunk {position} while only {self.delivered} has been delivered"
            )
        if position < 0:
            raise IndexError(position)
        return self._view(position)

    def acknowledge(self, position: int) -> None:
        if position != self.delivered or position <= self.acknowledged:
            raise self.violate(
                f"acknowledged chunk {position}; expected {self.delivered}"
            )
        self.acknowledged = position


@dataclass(frozen=True)
class ChunkView:
    """What a model is allowed to see of one chunk. ``state`` is the teacher-forced ground truth."""

    position: int
    index: int
    t_start: float
    t_end: float
    frames: tuple[FrameToken, ...]
    state: StateToken | None
    gate: Gatekeeper = field(repr=False, compare=False)

    def lookback(self, position: int) -> ChunkView:
        return self.gate.fetch(position)

    def ack(self) -> None:
        self.gate.acknowledge(self.position)


class NarrationModel(Protocol):
    name: str

    def reset(self) -> None: ...

    def on_context(self, text: str) -> None: ...

    def on_frames(self, chunk: ChunkView) -> list[Emission]: ...


@dataclass(frozen=True)
class StreamEvent:
    wall_clock: float
    media_time: float
    kind: str
    chunk_index: int
    text: str | None = None
    phase: str | None = None
    step: str | None = None
    frames: tuple[int, ...] = ()
    teacher_forced: bool | None = None

    def to_dict(self, include_wall_clock: bool = True) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "chunk_index": self.chunk_index, "media_time": self.media_time}
        if include_wall_clock:
            d["wall_clock"] = self.wall_clock
        if self.kind == "FrameIn":
            d["frames"] = list(self.frames)
        elif self.kind == "WordOut":
            d["text"] = self.text
        else:
            d.update(phase=self.phase, step=self.step, teacher_forced=self.teacher_forced)
        return d


@dataclass
class StreamReport:
    video_id: str
    model_name: str
    clock_mode: str
    events: list[StreamEvent]
    per_chunk_latency: list[float]
    realtime_factor: float

    def words(self) -> list[str]:
        return [e.text for e in self.events if e.kind == "WordOut"]

    def states(self) -> list[tuple[str, str]]:
        return [(e.phase, e.step) for e in self.events if e.kind == "StateOut"]

    def to_dict(self) -> dict[str, Any]:
        """Events without wall-clock readings; identical across repeated runs."""
        return {
            "schema": REPORT_SCHEMA,
            "video_id": self.video_id,
            "model": self.model_name,
            "clock_mode": self.clock_mode,
            "n_chunks": len(self.per_chunk_latency),
            "events": [e.to_dict(include_wall_clock=False) for e in self.events],
        }

    def timing_dict(self) -> dict[str, Any]:
        lat = self.per_chunk_latency
        return {
            "video_id": self.video_id,
            "model": self.model_name,
            "clock_mode": self.clock_mode,
            "realtime_factor": self.realtime_factor,
            "latency_mean": sum(lat) / len(lat) if lat else 0.0,
            "latency_max": max(lat, default=0.0),
            "per_chunk_latency": lat,
            "wall_clock": [e.wall_clock for e in self.events],
        }


def simulate(
    seq: InterleavedSequence,
    model: NarrationModel,
    clock_mode: str = "as_fast_as_possible",
    *,
    clock: Callable[[], float] = time.perf_counter,
    sleep: Callable[[float], None] = time.sleep,
) -> StreamReport:
    """Stream ``seq`` through ``model`` chunk by chunk.

    In ``paced`` mode chunk ``i`` is not delivered before ``i`` chunk
    durations of wall time have elapsed since the run started. Emissions are
    stamped with the media time of the last frame the model has seen.
    """
    if clock_mode not in CLOCK_MODES:
        raise ValueError(f"clock_mode must be one of {CLOCK_MODES}")
    gate = Gatekeeper(seq.chunks)
    events: list[StreamEvent] = []
    latencies: list[float] = []
    media_origin = seq.chunks[0].t_start if seq.chunks else 0.0

    model.reset()
    t0 = clock()
    model.on_context(seq.context.text)
    for pos, chunk in enumerate(seq.chunks):
        if clock_mode == "paced":
            due = t0 + (chunk.t_start - media_origin)
            while (remaining := due - clock()) > 0:
                sleep(min(remaining, 0.002) if remaining < 0.01 else remaining - 0.005)
        view = gate.deliver(pos)
        delivered_at = clock()
        events.append(
            StreamEvent(
                delivered_at - t0, chunk.t_start, "FrameIn", chunk.index,
                frames=tuple(f.frame_index for f in chunk.frames),
            )
        )
        try:
            out = model.on_frames(view)
        except CausalityViolation:
            raise
        except Exception as exc:
            raise StreamRunError(f"{type(exc).__name__}: {exc}", chunk.index) from exc
        if gate.violation is not None:
            raise gate.violation
        if gate.acknowledged < pos:
            gate.acknowledge(pos)
        emitted_at = clock() - t0
        media_time = chunk.frames[-1].timestamp
        for item in out or ():
            if isinstance(item, WordOut):
                events.append(StreamEvent(emitted_at, media_time, "WordOut", chunk.index, text=item.text))
            elif isinstance(item, StateOut):
                forced = chunk.state is not None and (item.phase, item.step) == (
                    chunk.state.phase_label, chunk.state.step_label,
                )
                events.append(
                    StreamEvent(
                        emitted_at, media_time, "StateOut", chunk.index,
                        phase=item.phase, step=item.step, teacher_forced=forced,
                    )
                )
            else:
                raise StreamRunError(f"model emitted {item!r}", chunk.index)
        latencies.append(clock() - delivered_at)

    wall = clock() - t0
    media = (seq.chunks[-1].t_end - media_origin) if seq.chunks else 0.0
    rtf = media / wall if wall > 0 else math.inf
    return StreamReport(seq.video_id, getattr(model, "name", type(model).__name__), clock_mode, events, latencies, rtf)


def replay_mismatches(seq: InterleavedSequence, report: StreamReport) -> list[str]:
    """Differences between the report's emissions and the sequence's ground truth."""
    problems = []
    expected_words = [(c.index, w.text) for c in seq.chunks for w in c.narration]
    got_words = [(e.chunk_index, e.text) for e in report.events if e.kind == "WordOut"]
    if expected_words != got_words:
        problems.append(f"words differ: {len(expected_words)} expected, {len(got_words)} emitted")
    expected_states = [(c.index, c.state.phase_label, c.state.step_label) for c in seq.chunks if c.state]
    got_states = [(e.chunk_index, e.phase, e.step) for e in report.events if e.kind == "StateOut"]
    if expected_states != got_states:
        problems.append(f"states differ: {expected_states[:3]} vs {got_states[:3]}")
    return problems


# --------------------------------------------------------------------- models


class NullModel:
    name = "null"

    def reset(self) -> None:
        pass

    def on_context(self, text: str) -> None:
        pass

    def on_frames(self, chunk: ChunkView) -> list[Emission]:
        return []


class ReplayModel:
    """Emits each chunk's ground-truth state and words. Used to check the harness itself."""

    name = "replay"

    def __init__(self, seq: InterleavedSequence) -> None:
        self._by_index = {c.index: c for c in seq.chunks}

    def reset(self) -> None:
        pass

    def on_context(self, text: str) -> None:
        pass

    def on_frames(self, chunk: ChunkView) -> list[Emission]:
        truth = self._by_index[chunk.index]
        out: list[Emission] = []
        if truth.state is not None:
            out.append(StateOut(truth.state.phase_label, truth.state.step_label))
        out.extend(WordOut(w.text) for w in truth.narration)
        return out


class NgramNarrationModel:
    """Order-n word model conditioned on the active (phase, step) state.

    Counts are kept per full state, per phase label, and globally; prediction
    backs off from the longest history to the shortest and from the most to
    the least specific state. Choices are argmax with lexicographic
    tie-breaking, so output is fully deterministic. Ground-truth state tokens
    in each chunk are copied out as state announcements.
    """

    name = "ngram"

    def __init__(
        self,
        records: Sequence[HierarchicalRecord],
        order: int = 3,
        max_words_per_chunk: int = 2,
    ) -> None:
        if not records:
            raise EmptyInputError("n-gram model needs at least one training record")
        if order < 1:
            raise ValueError("order must be >= 1")
        self.order = order
        self.max_words_per_chunk = max_words_per_chunk
        self.counts: dict[tuple, Counter[str]] = defaultdict(Counter)
        self.vocabulary: set[str] = set()
        seconds: Counter[str] = Counter()
        n_words: Counter[str] = Counter()
        for rec in records:
            for p in rec.phases:
                seconds[p.label] += p.t_end - p.t_start
            history: list[str] = []
            for w in rec.words:
                phase, step = active_state(rec, w.t_end)
                key = state_labels(rec, phase, step) if phase is not None else None
                n_words[key[0] if key else ""] += 1
                self.vocabulary.add(w.text)
                for n in range(order):
                    ctx = tuple(history[-n:]) if n else ()
                    if len(ctx) < n:
                        break
                    for scope in self._scopes(key):
                        self.counts[(scope, ctx)][w.text] += 1
                history.append(w.text)
        total_s = sum(seconds.values())
        self.global_rate = sum(n_words.values()) / total_s if total_s > 0 else 0.0
        self.rates = {k: n_words[k] / s for k, s in seconds.items() if s > 0}
        self.reset()

    @staticmethod
    def _scopes(key: tuple[str, str] | None) -> list[tuple]:
        if key is None:
            return [("*",)]
        return [("state", *key), ("phase", key[0]), ("*",)]

    def reset(self) -> None:
        self._state: tuple[str, str] | None = None
        self._history: list[str] = []
        self._credit = 0.0

    def on_context(self, text: str) -> None:
        pass

    def _next(self) -> str | None:
        last = self._history[-1] if self._history else None
        for n in range(self.order - 1, -1, -1):
            if n > len(self._history):
                continue
            ctx = tuple(self._history[-n:]) if n else ()
            for scope in self._scopes(self._state):
                counter = self.counts.get((scope, ctx))
                if not counter:
                    continue
                ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
                for word, _ in ranked:
                    if word != last:
                        return word
        return None

    def on_frames(self, chunk: ChunkView) -> list[Emission]:
        out: list[Emission] = []
        if chunk.state is not None:
            self._state = (chunk.state.phase_label, chunk.state.step_label)
            out.append(StateOut(*self._state))
        rate = self.rates.get(self._state[0], self.global_rate) if self._state else self.global_rate
        self._credit = min(self._credit + rate * (chunk.t_end - chunk.t_start), float(self.max_words_per_chunk))
        n = int(self._credit)
        self._credit -= n
        for _ in range(n):
            word = self._next()
            if word is None:
                break
            self._history.append(word)
            out.append(WordOut(word))
        return out


def ngram_model(records: Sequence[HierarchicalRecord], **kwargs: Any) -> NgramNarrationModel:
    return NgramNarrationModel(records, **kwargs)


class ExternalNarrationModel:
    """Drives a model server over newline-delimited JSON on stdin/stdout.

    Requests are ``{"protocol", "type": "reset" | "context" | "chunk", ...}``;
    a chunk request carries ``index``, ``t_start``, ``t_end``, ``frames``
    (``[frame_index, timestamp]`` pairs) and the teacher-forced ``state``.
    The reply to a chunk must be ``{"ack": <index>, "tokens": [...]}`` with
    tokens ``{"kind": "word", "text"}`` or ``{"kind": "state", "phase", "step"}``;
    an ack for any other chunk is a causality violation.
    """

    def __init__(self, command: Sequence[str], name: str = "external") -> None:
        self.command = list(command)
        self.name = name
        self._proc: subprocess.Popen[str] | None = None

    def _request(self, message: dict[str, Any]) -> dict[str, Any]:
        assert self._proc is not None and self._proc.stdin and self._proc.stdout
        self._proc.stdin.write(json.dumps({"protocol": PROTOCOL, **message}) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError(f"model process exited (code {self._proc.poll()})")
        return json.loads(line)

    def reset(self) -> None:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        self._request({"type": "reset"})

    def on_context(self, text: str) -> None:
        self._request({"type": "context", "text": text})

    def on_frames(self, chunk: ChunkView) -> list[Emission]:
        state = None
        if chunk.state is not None:
            state = {"phase": chunk.state.phase_label, "step": chunk.state.step_label}
        reply = self._request(
            {
                "type": "chunk",
                "index": chunk.index,
                "t_start": chunk.t_start,
                "t_end": chunk.t_end,
                "frames": [[f.frame_index, f.timestamp] for f in chunk.frames],
                "state": state,
            }
        )
        ack = reply.get("ack")
        if ack != chunk.index:
            raise chunk.gate.violate(f"model acknowledged {ack!r} while handling chunk {chunk.index}")
        chunk.ack()
        out: list[Emission] = []
        for tok in reply.get("tokens", []):
            if tok.get("kind") == "word":
                out.append(WordOut(str(tok["text"])))
            elif tok.get("kind") == "state":
                out.append(StateOut(str(tok["phase"]), str(tok["step"])))
            else:
                raise ValueError(f"unknown token kind in reply: {tok!r}")
        return out

    def close(self) -> None:
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
            self._proc = None
