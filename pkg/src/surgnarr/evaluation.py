"""Pairwise LLM-as-judge win rates and hierarchy-tracking metrics."""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Sequence

from .clients import LanguageModelClient, call_with_retry, load_prompt
from .errors import EmptyInputError
from .hierarchy import HierarchicalRecord, detect_transitions
from .stream import StreamReport
from .timebase import as_fraction, chunk_duration, round_ms, to_ms
from .transcript import Transcript

logger = logging.getLogger(__name__)

WINNERS = ("A", "B", "TIE")
NARRATION_SCHEMA = "surgnarr.narration/1"


@dataclass(frozen=True)
class NarrationArtifactDoc:
    video_id: str
    model_name: str
    narration: tuple[tuple[str, float], ...]
    state_outputs: tuple[tuple[str, str, float], ...] = ()

    def __post_init__(self) -> None:
        for name, times in (
            ("narration", [t for _, t in self.narration]),
            ("state_outputs", [t for *_, t in self.state_outputs]),
        ):
            if any(b < a for a, b in zip(times, times[1:])):
                raise ValueError(f"{self.video_id}/{self.model_name}: {name} times decrease")

    @property
    def text(self) -> str:
        return " ".join(w for w, _ in self.narration)

    @classmethod
    def from_report(cls, report: StreamReport) -> NarrationArtifactDoc:
        return cls(
            video_id=report.video_id,
            model_name=report.model_name,
            narration=tuple((e.text, e.media_time) for e in report.events if e.kind == "WordOut"),
            state_outputs=tuple(
                (e.phase, e.step, e.media_time) for e in report.events if e.kind == "StateOut"
            ),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema": NARRATION_SCHEMA,
            "video_id": self.video_id,
            "model": self.model_name,
            "narration": [[w, t] for w, t in self.narration],
            "state_outputs": [[p, s, t] for p, s, t in self.state_outputs],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> NarrationArtifactDoc:
        return cls(
            video_id=data["video_id"],
            model_name=data["model"],
            narration=tuple((str(w), float(t)) for w, t in data["narration"]),
            state_outputs=tuple((str(p), str(s), float(t)) for p, s, t in data.get("state_outputs", [])),
        )


@dataclass(frozen=True)
class JudgeVerdict:
    video_id: str
    model_a: str
    model_b: str
    winner: str
    rationale: str
    presented_order: str = "AB"

    def __post_init__(self) -> None:
        if self.winner not in WINNERS:
            raise ValueError(f"winner must be one of {WINNERS}, got {self.winner!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "video_id": self.video_id,
            "model_a": self.model_a,
            "model_b": self.model_b,
            "winner": self.winner,
            "rationale": self.rationale,
            "presented_order": self.presented_order,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> JudgeVerdict:
        return cls(**{k: data[k] for k in ("video_id", "model_a", "model_b", "winner", "rationale")},
                   presented_order=data.get("presented_order", "AB"))


def parse_judge_reply(reply: str) -> tuple[str | None, str]:
    """Return (``"1"``/``"2"``/``"tie"`` or ``None``, rationale) from a judge reply."""
    fence = re.search(r"\{.*\}", reply, re.DOTALL)
    if fence:
        try:
            data = json.loads(fence.group(0))
            winner = str(data.get("winner", "")).strip().lower()
            if winner in ("1", "2", "tie"):
                return winner, str(data.get("rationale", ""))
        except json.JSONDecodeError:
            pass
    m = re.search(r"winner\W{0,5}(1|2|tie)\b", reply, re.IGNORECASE)
    if m:
        return m.group(1).lower(), reply.strip()
    return None, reply.strip()


def judge_pairwise(
    gt_asr: Transcript,
    a: NarrationArtifactDoc,
    b: NarrationArtifactDoc,
    judge: LanguageModelClient,
    rng: random.Random | None = None,
    *,
    retries: int = 3,
    backoff: float = 0.5,
) -> JudgeVerdict:
    """Ask ``judge`` which narration better matches the ground-truth transcript.

    The two narrations are shown in an order drawn from ``rng`` and the
    permutation is kept on the verdict, so position bias averages out over
    a corpus and stays auditable.
    """
    if not a.video_id == b.video_id == gt_asr.video_id:
        raise ValueError(
            f"video mismatch: gt={gt_asr.video_id}, a={a.video_id}, b={b.video_id}"
        )
    rng = rng or random.Random(0)
    swapped = rng.random() < 0.5
    first, second = (b, a) if swapped else (a, b)
    reference = " ".join(w.text for w in gt_asr.words)
    instruction = load_prompt("judge").text
    reply = call_with_retry(
        lambda: judge.judge(reference, first.text, second.text, instruction),
        item_id=a.video_id,
        retries=retries,
        backoff=backoff,
    )
    choice, rationale = parse_judge_reply(reply)
    if choice is None:
        logger.warning("%s: unparseable judge reply %.80r", a.video_id, reply)
        winner, rationale = "TIE", "unparseable"
    elif choice == "tie":
        winner = "TIE"
    else:
        first_won = choice == "1"
        winner = "A" if first_won != swapped else "B"
    return JudgeVerdict(
        a.video_id, a.model_name, b.model_name, winner, rationale, "BA" if swapped else "AB"
    )


@dataclass(frozen=True)
class WinRateReport:
    model_a: str
    model_b: str
    n_comparisons: int
    wins_a: int
    wins_b: int
    ties: int
    win_rate_a: float
    win_rate_b: float

    def swapped(self) -> WinRateReport:
        return WinRateReport(
            self.model_b, self.model_a, self.n_comparisons, self.wins_b, self.wins_a,
            self.ties, self.win_rate_b, self.win_rate_a,
        )

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def percentage(wins: int, total: int) -> float:
    """``100 * wins / total`` to one decimal, rounding exact halves to even.

    Half-even keeps complementary rates summing to exactly 100.0
    (6.25/93.75 -> 6.2/93.8), which half-up would not.
    """
    return float(round(Fraction(100 * wins, total), 1))


def compute_win_rate(verdicts: Sequence[JudgeVerdict]) -> WinRateReport:
    if not verdicts:
        raise EmptyInputError("no verdicts to aggregate")
    pairs = {(v.model_a, v.model_b) for v in verdicts}
    if len(pairs) != 1:
        raise ValueError(f"verdicts mix model pairs: {sorted(pairs)}")
    (model_a, model_b), = pairs
    n = len(verdicts)
    wins_a = sum(v.winner == "A" for v in verdicts)
    wins_b = sum(v.winner == "B" for v in verdicts)
    return WinRateReport(
        model_a, model_b, n, wins_a, wins_b, n - wins_a - wins_b,
        percentage(wins_a, n), percentage(wins_b, n),
    )


@dataclass(frozen=True)
class PhaseCorrectness:
    accuracy: float
    timing_errors: tuple[float, ...]
    matched_video: bool
    matches: tuple[tuple[int, int], ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "timing_errors": list(self.timing_errors),
            "matched_video": self.matched_video,
            "matches": [list(m) for m in self.matches],
        }


def phase_changes(record: HierarchicalRecord) -> list[tuple[str, float]]:
    """(phase label, time) at every transition where the active phase changes."""
    out = []
    previous = None
    for tr in detect_transitions(record):
        if tr.phase_index != previous:
            out.append((record.phases[tr.phase_index].label, tr.time))
        previous = tr.phase_index
    return out


def phase_correctness(
    pred: NarrationArtifactDoc,
    gt: HierarchicalRecord,
    tolerance: float | None = None,
    *,
    fps: float = 2,
    stride_k: int = 1,
) -> PhaseCorrectness:
    """Match ground-truth phase changes to predicted phase announcements.

    Ground truth is every time the active phase changes (step-only changes
    are ignored); predictions are the StateOut events whose phase differs
    from the previously announced one. A ground-truth change matches a
    prediction with the same phase label within ``tolerance`` seconds
    (default: one chunk). Pairs are taken greedily in order of increasing
    time error and each prediction is used at most once. ``matched_video``
    is true when every change matched.
    """
    if pred.video_id != gt.video_id:
        raise ValueError(f"video mismatch: {pred.video_id} vs {gt.video_id}")
    tol = chunk_duration(fps, stride_k) if tolerance is None else as_fraction(tolerance)
    changes = phase_changes(gt)
    if not changes:
        return PhaseCorrectness(1.0, (), True)
    announced = []
    previous = None
    for phase, _step, t in pred.state_outputs:
        if phase != previous:
            announced.append((phase, t))
        previous = phase
    candidates = []
    for gi, (label, gt_time) in enumerate(changes):
        for pi, (phase, t) in enumerate(announced):
            if phase != label:
                continue
            err_ms = abs(to_ms(t) - to_ms(gt_time))
            if Fraction(err_ms, 1000) <= tol:
                candidates.append((err_ms, gi, pi))
    used_g: set[int] = set()
    used_p: set[int] = set()
    matches = []
    for err_ms, gi, pi in sorted(candidates):
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        matches.append((gi, pi, err_ms))
    matches.sort()
    accuracy = len(matches) / len(changes)
    return PhaseCorrectness(
        accuracy=accuracy,
        timing_errors=tuple(round_ms(e / 1000) for _, _, e in matches),
        matched_video=len(matches) == len(changes),
        matches=tuple((g, p) for g, p, _ in matches),
    )
