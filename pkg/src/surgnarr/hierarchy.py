"""Phase -> Step -> Word records, their validator, and the stratified split."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

from .clients import LanguageModelClient, call_with_retry, load_prompt
from .errors import HierarchyValidationError, ParseError, ValidationError
from .timebase import round_ms
from .transcript import Sentence, TimedWord, Transcript

logger = logging.getLogger(__name__)

RECORD_SCHEMA = "surgnarr.record/1"
SPLIT_SCHEMA = "surgnarr.split/1"
MAX_STEPS_PER_SEGMENT = 3

# Labels end up inside "<State>Phase=..., Step=...</State>" lines.
_FORBIDDEN_IN_LABEL = ("\n", "\r", "\t", ", Step=", "</State>")


@dataclass(frozen=True)
class PhaseAnnotation:
    label: str
    t_start: float
    t_end: float

    def to_dict(self) -> dict[str, Any]:
        return {"label": self.label, "t_start": self.t_start, "t_end": self.t_end}


@dataclass(frozen=True)
class StepAnnotation:
    label: str
    t_start: float
    t_end: float
    parent_phase_index: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "parent_phase_index": self.parent_phase_index,
        }


@dataclass(frozen=True)
class Violation:
    kind: str
    index: int
    message: str

    def __str__(self) -> str:
        return f"{self.kind}[{self.index}]: {self.message}"


@dataclass(frozen=True)
class HierarchicalRecord:
    video_id: str
    title: str
    meta_type: str
    phases: tuple[PhaseAnnotation, ...]
    steps: tuple[StepAnnotation, ...]
    words: tuple[TimedWord, ...]

    @property
    def duration(self) -> float:
        return self.phases[-1].t_end if self.phases else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": RECORD_SCHEMA,
            "video_id": self.video_id,
            "title": self.title,
            "meta_type": self.meta_type,
            "phases": [p.to_dict() for p in self.phases],
            "steps": [s.to_dict() for s in self.steps],
            "words": [w.to_dict() for w in self.words],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> HierarchicalRecord:
        if data.get("schema") != RECORD_SCHEMA:
            raise ParseError(f"expected schema {RECORD_SCHEMA!r}, got {data.get('schema')!r}")
        record = cls(
            video_id=data["video_id"],
            title=data["title"],
            meta_type=data["meta_type"],
            phases=tuple(
                PhaseAnnotation(p["label"], float(p["t_start"]), float(p["t_end"]))
                for p in data["phases"]
            ),
            steps=tuple(
                StepAnnotation(
                    s["label"], float(s["t_start"]), float(s["t_end"]), int(s["parent_phase_index"])
                )
                for s in data["steps"]
            ),
            words=tuple(TimedWord.from_dict(w) for w in data["words"]),
        )
        violations = validate_record(record)
        if violations:
            raise HierarchyValidationError(violations)
        return record


def _label_problem(label: Any) -> str | None:
    if not isinstance(label, str) or not label.strip():
        return "empty label"
    for bad in _FORBIDDEN_IN_LABEL:
        if bad in label:
            return f"label contains {bad!r}"
    return None


def validate_record(record: HierarchicalRecord) -> list[Violation]:
    """Every violated hierarchy constraint of ``record`` (empty list when valid)."""
    out: list[Violation] = []
    phases, steps, words = record.phases, record.steps, record.words

    for i, p in enumerate(phases):
        problem = _label_problem(p.label)
        if problem:
            out.append(Violation("phase_invalid", i, problem))
        if p.t_start < 0 or not p.t_start < p.t_end:
            out.append(Violation("phase_invalid", i, f"bad interval [{p.t_start}, {p.t_end}]"))
    for i in range(1, len(phases)):
        a, b = phases[i - 1], phases[i]
        if b.t_start < a.t_end:
            out.append(
                Violation(
                    "phase_overlap", i,
                    f"phase {i} starts at {b.t_start} before phase {i - 1} ends at {a.t_end}",
                )
            )

    for j, s in enumerate(steps):
        problem = _label_problem(s.label)
        if problem:
            out.append(Violation("step_invalid", j, problem))
        if not s.t_start < s.t_end:
            out.append(Violation("step_invalid", j, f"bad interval [{s.t_start}, {s.t_end}]"))
        if not 0 <= s.parent_phase_index < len(phases):
            out.append(Violation("step_parent", j, f"no phase {s.parent_phase_index}"))
            continue
        parent = phases[s.parent_phase_index]
        if s.t_start < parent.t_start or s.t_end > parent.t_end:
            out.append(
                Violation(
                    "step_escape", j,
                    f"step [{s.t_start}, {s.t_end}] outside phase {s.parent_phase_index} "
                    f"[{parent.t_start}, {parent.t_end}]",
                )
            )
    for j in range(1, len(steps)):
        a, b = steps[j - 1], steps[j]
        if b.t_start < a.t_end:
            out.append(
                Violation(
                    "step_overlap", j,
                    f"step {j} starts at {b.t_start} before step {j - 1} ends at {a.t_end}",
                )
            )

    if words:
        if not phases:
            out.append(Violation("word_orphan", 0, "words present but no phases"))
        else:
            lo, hi = phases[0].t_start, phases[-1].t_end
            for k, w in enumerate(words):
                if not lo <= w.t_end <= hi:
                    out.append(
                        Violation("word_orphan", k, f"word {w.text!r} ends at {w.t_end}, outside [{lo}, {hi}]")
                    )
        for k in range(1, len(words)):
            a, b = words[k - 1], words[k]
            if b.t_start < a.t_start or b.t_end < a.t_end:
                out.append(Violation("word_order", k, f"word {b.text!r} out of temporal order"))
    return out


def assemble_record(
    transcript: Transcript,
    phases: Sequence[PhaseAnnotation],
    steps: Sequence[StepAnnotation],
    title: str,
    meta_type: str,
) -> HierarchicalRecord:
    """Combine ACTION narration with phase/step annotations into a validated record.

    Raises :class:`HierarchyValidationError` listing every violation found.
    """
    record = HierarchicalRecord(
        video_id=transcript.video_id,
        title=title,
        meta_type=meta_type,
        phases=tuple(phases),
        steps=tuple(steps),
        words=tuple(transcript.words),
    )
    violations = validate_record(record)
    if violations:
        raise HierarchyValidationError(violations)
    return record


# ----------------------------------------------------------------- step proposal


def phase_index_at(t: float, phases: Sequence[PhaseAnnotation]) -> int | None:
    """Phase whose ``[t_start, t_end)`` holds ``t``; the last phase also owns its end point."""
    for i, p in enumerate(phases):
        if p.t_start <= t < p.t_end:
            return i
    if phases and t == phases[-1].t_end:
        return len(phases) - 1
    return None


def segment_sentences(
    sentences: Sequence[Sentence], phases: Sequence[PhaseAnnotation] | None
) -> list[tuple[int, list[Sentence]]]:
    """Maximal runs of sentences inside one phase, keyed by the phase of each sentence's end."""
    if phases is None:
        return [(0, list(sentences))] if sentences else []
    segments: list[tuple[int, list[Sentence]]] = []
    for s in sentences:
        idx = phase_index_at(s.t_end, phases)
        if idx is None:
            logger.info("sentence %s ends between phases, no step", s.sentence_id)
            continue
        if segments and segments[-1][0] == idx:
            segments[-1][1].append(s)
        else:
            segments.append((idx, [s]))
    return segments


def _nearest(value: float, candidates: Sequence[float]) -> float:
    return min(candidates, key=lambda c: (abs(c - value), c))


def _check_proposal(raw: Any) -> str | None:
    if not isinstance(raw, list) or not 1 <= len(raw) <= MAX_STEPS_PER_SEGMENT:
        n = len(raw) if isinstance(raw, list) else "non-list"
        return f"expected 1-{MAX_STEPS_PER_SEGMENT} steps, got {n}"
    prev_end = -math.inf
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            return f"step {i} is not an object"
        if _label_problem(item.get("label")):
            return f"step {i}: {_label_problem(item.get('label'))}"
        try:
            a, b = float(item["t_start"]), float(item["t_end"])
        except (KeyError, TypeError, ValueError):
            return f"step {i} has no numeric interval"
        if not a < b:
            return f"step {i} has empty interval [{a}, {b}]"
        if a < prev_end:
            return f"step {i} overlaps or precedes step {i - 1}"
        prev_end = b
    return None


def propose_steps(
    action_sentences: Sequence[Sentence],
    client: LanguageModelClient,
    phases: Sequence[PhaseAnnotation] | None = None,
    *,
    incidents: list[str] | None = None,
    retries: int = 3,
    backoff: float = 0.5,
) -> list[StepAnnotation]:
    """Ask the model for 1-3 steps per phase-bounded segment of action sentences.

    Proposed boundaries snap to the nearest sentence start/end and are
    clipped to the parent phase. Any proposal that is out of range or
    overlapping is replaced by one step spanning the whole segment; the
    reason is logged and appended to ``incidents``.
    """
    for a, b in zip(action_sentences, action_sentences[1:]):
        if b.t_start < a.t_start:
            raise ValidationError("action sentences must be temporally ordered")
    constraints = load_prompt("steps").text
    steps: list[StepAnnotation] = []
    for phase_idx, segment in segment_sentences(action_sentences, phases):
        lo = phases[phase_idx].t_start if phases else -math.inf
        hi = phases[phase_idx].t_end if phases else math.inf
        items = [{"text": s.text, "t_start": s.t_start, "t_end": s.t_end} for s in segment]
        raw = call_with_retry(
            lambda: client.summarize_steps(items, constraints),
            item_id=segment[0].sentence_id,
            retries=retries,
            backoff=backoff,
        )
        problem = _check_proposal(raw)
        snapped: list[StepAnnotation] = []
        if problem is None:
            starts = [s.t_start for s in segment]
            ends = [s.t_end for s in segment]
            for item in raw:
                a = max(_nearest(float(item["t_start"]), starts), lo)
                b = min(_nearest(float(item["t_end"]), ends), hi)
                snapped.append(StepAnnotation(item["label"].strip(), a, b, phase_idx))
            problem = _check_proposal([s.to_dict() for s in snapped])
            if problem:
                problem = f"after snapping: {problem}"
        if problem is not None:
            a = max(segment[0].t_start, lo)
            b = min(max(s.t_end for s in segment), hi)
            label = phases[phase_idx].label if phases else "Step 1"
            msg = f"segment at {segment[0].t_start}s rejected ({problem}); fallback [{a}, {b}]"
            logger.warning(msg)
            if incidents is not None:
                incidents.append(msg)
            if not a < b:
                logger.warning("segment at %ss has zero span, no step", a)
                continue
            snapped = [StepAnnotation(label, a, b, phase_idx)]
        if steps and snapped[0].t_start < steps[-1].t_end:
            msg = f"segment at {segment[0].t_start}s overlaps previous step; skipped"
            logger.warning(msg)
            if incidents is not None:
                incidents.append(msg)
            continue
        steps.extend(snapped)
    return steps


# ------------------------------------------------------------------ transitions


@dataclass(frozen=True)
class Transition:
    time: float
    phase_index: int
    step_index: int | None


def active_state(record: HierarchicalRecord, t: float) -> tuple[int | None, int | None]:
    """(phase, step) most recently entered at or before ``t``.

    State only changes when an annotation starts; a finished step stays the
    active one until the next step of the same phase begins.
    """
    phase = None
    for i, p in enumerate(record.phases):
        if p.t_start <= t:
            phase = i
    if phase is None:
        return None, None
    step = None
    for j, s in enumerate(record.steps):
        if s.parent_phase_index == phase and s.t_start <= t:
            step = j
    return phase, step


def detect_transitions(record: HierarchicalRecord) -> list[Transition]:
    times = sorted({p.t_start for p in record.phases} | {s.t_start for s in record.steps})
    out: list[Transition] = []
    current: tuple[int | None, int | None] = (None, None)
    for t in times:
        state = active_state(record, t)
        if state != current and state[0] is not None:
            out.append(Transition(t, state[0], state[1]))
            current = state
    return out


def state_labels(record: HierarchicalRecord, phase: int, step: int | None) -> tuple[str, str]:
    return record.phases[phase].label, (record.steps[step].label if step is not None else "")


# ------------------------------------------------------------------------ split


@dataclass(frozen=True)
class SplitManifest:
    train: tuple[str, ...]
    test: tuple[str, ...]
    ratio: float
    strata: dict[str, tuple[int, int]]
    seed: int
    warnings: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": SPLIT_SCHEMA,
            "ratio": self.ratio,
            "seed": self.seed,
            "strata": {k: list(v) for k, v in sorted(self.strata.items())},
            "train": list(self.train),
            "test": list(self.test),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SplitManifest:
        return cls(
            train=tuple(data["train"]),
            test=tuple(data["test"]),
            ratio=float(data["ratio"]),
            strata={k: (int(v[0]), int(v[1])) for k, v in data["strata"].items()},
            seed=int(data["seed"]),
            warnings=tuple(data.get("warnings", ())),
        )


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def split_dataset(
    records: Sequence[HierarchicalRecord], ratio: float = 0.8, seed: int = 0
) -> SplitManifest:
    """Per meta-type stratum, send round-half-up(ratio * n) records to train.

    Which records go to train depends only on ``seed`` and the video ids:
    each stratum is ordered by ``sha256(seed:video_id)``.
    """
    if not records:
        raise ValueError("cannot split an empty record list")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    ids = [r.video_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate video ids in split input")
    exact = Fraction(str(ratio))
    strata: dict[str, list[str]] = defaultdict(list)
    for r in records:
        strata[r.meta_type].append(r.video_id)

    train: list[str] = []
    test: list[str] = []
    counts: dict[str, tuple[int, int]] = {}
    warnings: list[str] = []
    for meta in sorted(strata):
        members = sorted(
            strata[meta],
            key=lambda v: (hashlib.sha256(f"{seed}:{v}".encode()).hexdigest(), v),
        )
        n = len(members)
        n_train = min(n, _round_half_up(exact * n))
        if n == 1:
            n_train = 1
            msg = f"stratum {meta!r} has a single record; assigned to train"
            logger.warning(msg)
            warnings.append(msg)
        train.extend(members[:n_train])
        test.extend(members[n_train:])
        counts[meta] = (n_train, n - n_train)
    return SplitManifest(
        train=tuple(sorted(train)),
        test=tuple(sorted(test)),
        ratio=ratio,
        strata=counts,
        seed=seed,
        warnings=tuple(warnings),
    )


# --------------------------------------------------------------------- metadata


@dataclass(frozen=True)
class VideoMetadata:
    video_id: str
    title: str
    meta_type: str
    phases: tuple[PhaseAnnotation, ...]


def parse_metadata(raw: str | bytes | dict[str, Any], video_id: str | None = None) -> VideoMetadata:
    """Read a per-video metadata document (``title``, ``meta_type``, ``phases``)."""
    if isinstance(raw, (str, bytes)):
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, f"line {exc.lineno}, column {exc.colno}") from exc
    else:
        doc = raw
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", "$")
    vid = doc.get("video_id") or video_id
    for key in ("title", "meta_type", "phases"):
        if key not in doc:
            raise ParseError(f"missing {key!r}", "$")
    if not vid:
        raise ParseError("missing 'video_id' and none supplied", "$")
    phases = []
    for i, p in enumerate(doc["phases"]):
        try:
            phases.append(PhaseAnnotation(str(p["label"]), round_ms(p["start"]), round_ms(p["end"])))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad phase entry: {exc}", f"$.phases[{i}]") from exc
    return VideoMetadata(str(vid), str(doc["title"]), str(doc["meta_type"]), tuple(phases))


def load_metadata(path: str | Path) -> VideoMetadata:
    path = Path(path)
    return parse_metadata(path.read_bytes(), video_id=path.stem)
