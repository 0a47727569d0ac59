"""Domain-aware correction of low-confidence sentences and ACTION filtering."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Any, Mapping

from .clients import LanguageModelClient, call_with_retry, load_prompt, map_bounded
from .errors import EmptyInputError, ValidationError
from .transcript import Sentence, TimedWord, Transcript

logger = logging.getLogger(__name__)


class SentenceClass(str, enum.Enum):
    ACTION = "ACTION"
    EXPLANATION = "EXPLANATION"
    INTERACTION = "INTERACTION"

    @classmethod
    def parse(cls, reply: str) -> SentenceClass | None:
        """Read a label out of a free-text model reply; ``None`` if absent or ambiguous."""
        cleaned = reply.strip().strip(".`'\"*").upper()
        if cleaned in cls.__members__:
            return cls[cleaned]
        found = {c for c in cls if c.value in reply.upper()}
        return found.pop() if len(found) == 1 else None


@dataclass(frozen=True)
class RewriteResult:
    sentence_id: str
    original_words: tuple[str, ...]
    corrected_words: tuple[str, ...]
    accepted: bool
    rejection_reason: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "sentence_id": self.sentence_id,
            "original_words": list(self.original_words),
            "corrected_words": list(self.corrected_words),
            "accepted": self.accepted,
            "rejection_reason": self.rejection_reason,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RewriteResult:
        return cls(
            data["sentence_id"],
            tuple(data["original_words"]),
            tuple(data["corrected_words"]),
            data["accepted"],
            data.get("rejection_reason"),
        )


def validate_rewrite(sentence: Sentence, rewrite: str) -> RewriteResult:
    """Accept a rewrite only if it keeps the word count, so timestamps stay paired."""
    original = tuple(w.text for w in sentence.words)
    corrected = tuple(rewrite.split())
    if len(corrected) != len(original):
        return RewriteResult(
            sentence.sentence_id, original, corrected, False, "word count changed"
        )
    return RewriteResult(sentence.sentence_id, original, corrected, True)


def apply_rewrite(sentence: Sentence, result: RewriteResult) -> Sentence:
    if not result.accepted:
        return sentence
    words = tuple(
        TimedWord(text, w.t_start, w.t_end)
        for text, w in zip(result.corrected_words, sentence.words)
    )
    return replace(sentence, words=words)


def correct_flagged(
    transcript: Transcript,
    flagged: set[str],
    client: LanguageModelClient,
    *,
    max_in_flight: int = 4,
    retries: int = 3,
    backoff: float = 0.5,
) -> tuple[Transcript, list[RewriteResult]]:
    """Rewrite flagged sentences through ``client`` under the word-count contract.

    Rejected rewrites keep the original sentence and record why. Unflagged
    sentences are passed through as the very same objects.
    """
    unknown = set(flagged) - set(transcript.sentence_ids)
    if unknown:
        raise ValueError(f"flagged ids not in transcript: {sorted(unknown)}")
    if not flagged:
        return transcript, []
    instruction = load_prompt("correct").text
    targets = [s for s in transcript.sentences if s.sentence_id in flagged]

    def _rewrite(s: Sentence) -> RewriteResult:
        reply = call_with_retry(
            lambda: client.correct(s.text, instruction),
            item_id=s.sentence_id,
            retries=retries,
            backoff=backoff,
        )
        return validate_rewrite(s, reply)

    results = {r.sentence_id: r for r in map_bounded(_rewrite, targets, max_in_flight)}
    for r in results.values():
        if not r.accepted:
            logger.info("%s/%s rewrite rejected: %s", transcript.video_id, r.sentence_id, r.rejection_reason)
    sentences = tuple(
        apply_rewrite(s, results[s.sentence_id]) if s.sentence_id in results else s
        for s in transcript.sentences
    )
    ordered = [results[s.sentence_id] for s in targets]
    return replace(transcript, sentences=sentences), ordered


def classify_sentences(
    transcript: Transcript,
    client: LanguageModelClient,
    *,
    max_in_flight: int = 4,
    retries: int = 3,
    backoff: float = 0.5,
) -> dict[str, SentenceClass]:
    if not transcript.sentences:
        raise EmptyInputError(f"{transcript.video_id}: nothing to classify")
    instruction = load_prompt("classify").text

    def _classify(s: Sentence) -> tuple[str, SentenceClass]:
        reply = call_with_retry(
            lambda: client.classify(s.text, instruction),
            item_id=s.sentence_id,
            retries=retries,
            backoff=backoff,
        )
        label = SentenceClass.parse(reply)
        if label is None:
            logger.warning(
                "%s/%s: unparseable class %.60r, treating as EXPLANATION",
                transcript.video_id, s.sentence_id, reply,
            )
            label = SentenceClass.EXPLANATION
        return s.sentence_id, label

    return dict(sorted(map_bounded(_classify, transcript.sentences, max_in_flight)))


def filter_actions(transcript: Transcript, classes: Mapping[str, SentenceClass]) -> Transcript:
    missing = [sid for sid in transcript.sentence_ids if sid not in classes]
    if missing:
        raise ValidationError(f"{transcript.video_id}: no class for sentence(s) {missing}")
    kept = tuple(
        s for s in transcript.sentences if SentenceClass(classes[s.sentence_id]) is SentenceClass.ACTION
    )
    return replace(transcript, sentences=kept)
