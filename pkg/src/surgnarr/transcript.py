"""Word-level timestamped ASR transcripts.

The input is the segment/word layout produced by forced-alignment ASR
tools: a JSON object with a ``segments`` list, each segment holding
``text``, ``avg_logprob`` and ``words`` (``word``, ``start``, ``end`` and an
optional ``probability``). A word may carry ``logprob`` instead of
``probability``; words with neither inherit the segment's ``avg_logprob``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .errors import EmptyInputError, ParseError, ValidationError
from .timebase import round_ms

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = -0.15

# Averages are rounded so that a segment whose words all inherit e.g. -0.15
# compares equal to -0.15 instead of landing one ulp below it.
_LOGPROB_DIGITS = 12


@dataclass(frozen=True)
class TimedWord:
    text: str
    t_start: float
    t_end: float

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValidationError(f"empty word text at {self.t_start}s")
        if self.t_start < 0:
            raise ValidationError(f"word {self.text!r} starts before 0s ({self.t_start})")
        if self.t_end < self.t_start:
            raise ValidationError(
                f"word {self.text!r} ends before it starts ({self.t_start} > {self.t_end})"
            )

    def to_dict(self) -> dict[str, Any]:
        return {"text": self.text, "t_start": self.t_start, "t_end": self.t_end}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TimedWord:
        return cls(data["text"], float(data["t_start"]), float(data["t_end"]))


@dataclass(frozen=True)
class Sentence:
    sentence_id: str
    words: tuple[TimedWord, ...]
    avg_log_prob: float

    def __post_init__(self) -> None:
        if not self.words:
            raise ValidationError(f"sentence {self.sentence_id} has no words")
        if self.avg_log_prob > 0:
            raise ValidationError(
                f"sentence {self.sentence_id} has positive log-probability {self.avg_log_prob}"
            )
        for prev, cur in zip(self.words, self.words[1:]):
            if cur.t_start < prev.t_start:
                raise ValidationError(
                    f"sentence {self.sentence_id}: word {cur.text!r} at {cur.t_start}s "
                    f"starts before preceding word {prev.text!r} at {prev.t_start}s"
                )

    @property
    def text(self) -> str:
        return " ".join(w.text for w in self.words)

    @property
    def t_start(self) -> float:
        return self.words[0].t_start

    @property
    def t_end(self) -> float:
        return max(w.t_end for w in self.words)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sentence_id": self.sentence_id,
            "avg_log_prob": self.avg_log_prob,
            "words": [w.to_dict() for w in self.words],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Sentence:
        return cls(
            sentence_id=data["sentence_id"],
            words=tuple(TimedWord.from_dict(w) for w in data["words"]),
            avg_log_prob=float(data["avg_log_prob"]),
        )


@dataclass(frozen=True)
class Transcript:
    video_id: str
    sentences: tuple[Sentence, ...] = ()

    def __post_init__(self) -> None:
        ids: set[str] = set()
        seen: set[tuple[float, float, str]] = set()
        for prev, cur in zip(self.sentences, self.sentences[1:]):
            if cur.t_start < prev.t_start:
                raise ValidationError(
                    f"{self.video_id}: sentence {cur.sentence_id} starts before {prev.sentence_id}"
                )
        for s in self.sentences:
            if s.sentence_id in ids:
                raise ValidationError(f"{self.video_id}: duplicate sentence id {s.sentence_id}")
            ids.add(s.sentence_id)
            for w in s.words:
                key = (w.t_start, w.t_end, w.text)
                if key in seen:
                    raise ValidationError(
                        f"{self.video_id}: duplicate word {w.text!r} at {w.t_start}-{w.t_end}s"
                    )
                seen.add(key)

    @property
    def words(self) -> list[TimedWord]:
        return [w for s in self.sentences for w in s.words]

    @property
    def sentence_ids(self) -> list[str]:
        return [s.sentence_id for s in self.sentences]

    def sentence(self, sentence_id: str) -> Sentence:
        for s in self.sentences:
            if s.sentence_id == sentence_id:
                return s
        raise KeyError(sentence_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "video_id": self.video_id,
            "sentences": [s.to_dict() for s in self.sentences],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Transcript:
        return cls(
            video_id=data["video_id"],
            sentences=tuple(Sentence.from_dict(s) for s in data["sentences"]),
        )


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"expected a number, got {value!r}", where)
    if not math.isfinite(value):
        raise ParseError(f"non-finite number {value!r}", where)
    return float(value)


def _word_logprob(raw: dict[str, Any], segment_logprob: float, where: str) -> float:
    if "logprob" in raw and raw["logprob"] is not None:
        lp = _number(raw["logprob"], f"{where}.logprob")
        if lp > 0:
            raise ValidationError(f"{where}: log-probability {lp} is positive")
        return lp
    if "probability" in raw and raw["probability"] is not None:
        p = _number(raw["probability"], f"{where}.probability")
        if not 0.0 < p <= 1.0:
            raise ValidationError(f"{where}: probability {p} outside (0, 1]")
        return math.log(p)
    return segment_logprob


def parse_asr(raw: str | bytes | dict[str, Any], video_id: str | None = None) -> Transcript:
    """Parse one ASR document into a :class:`Transcript`.

    ``raw`` may be the JSON text or an already decoded mapping; ``video_id``
    is used when the document carries none. Sentence
    boundaries are the document's segment boundaries; a sentence's
    confidence is the arithmetic mean of its words' log-probabilities.
    """
    if isinstance(raw, (str, bytes)):
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        if not text.strip():
            raise EmptyInputError("empty ASR document")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, f"line {exc.lineno}, column {exc.colno}") from exc
    else:
        doc = raw
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", "$")
    vid = doc.get("video_id") or video_id
    if not vid:
        raise ParseError("missing 'video_id' and none supplied", "$")
    segments = doc.get("segments")
    if not isinstance(segments, list):
        raise ParseError("missing or non-list 'segments'", "$.segments")
    if not segments:
        raise EmptyInputError(f"{vid}: no segments")

    sentences: list[Sentence] = []
    for si, seg in enumerate(segments):
        where = f"$.segments[{si}]"
        if not isinstance(seg, dict):
            raise ParseError("segment must be an object", where)
        seg_lp = _number(seg.get("avg_logprob", 0.0), f"{where}.avg_logprob")
        if seg_lp > 0:
            raise ValidationError(f"{where}: avg_logprob {seg_lp} is positive")
        raw_words = seg.get("words")
        if not isinstance(raw_words, list):
            raise ParseError("missing or non-list 'words'", f"{where}.words")
        if not raw_words:
            logger.warning("%s: %s has no words, skipped", vid, where)
            continue
        words: list[TimedWord] = []
        logprobs: list[float] = []
        for wi, rw in enumerate(raw_words):
            wwhere = f"{where}.words[{wi}]"
            if not isinstance(rw, dict):
                raise ParseError("word must be an object", wwhere)
            for key in ("word", "start", "end"):
                if key not in rw:
                    raise ParseError(f"missing {key!r}", wwhere)
            if not isinstance(rw["word"], str):
                raise ParseError("'word' must be a string", wwhere)
            start = round_ms(_number(rw["start"], f"{wwhere}.start"))
            end = round_ms(_number(rw["end"], f"{wwhere}.end"))
            token = rw["word"].strip()
            if end < start:
                raise ValidationError(
                    f"{wwhere}: word {token!r} has end {end} before start {start}"
                )
            try:
                words.append(TimedWord(token, start, end))
            except ValidationError as exc:
                raise ValidationError(f"{wwhere}: {exc}") from exc
            logprobs.append(_word_logprob(rw, seg_lp, wwhere))
        avg = round(math.fsum(logprobs) / len(logprobs), _LOGPROB_DIGITS) + 0.0
        sentences.append(Sentence(f"s{len(sentences):04d}", tuple(words), min(avg, 0.0)))

    if not sentences:
        raise EmptyInputError(f"{vid}: no words in any segment")
    return Transcript(str(vid), tuple(sentences))


def load_asr(path: str | Path) -> Transcript:
    path = Path(path)
    return parse_asr(path.read_bytes(), video_id=path.stem)


def flag_low_confidence(
    transcript: Transcript, threshold: float = DEFAULT_THRESHOLD
) -> set[str]:
    """Ids of sentences whose average log-probability is strictly below ``threshold``."""
    if threshold > 0:
        raise ValueError(f"threshold must be <= 0, got {threshold}")
    return {s.sentence_id for s in transcript.sentences if s.avg_log_prob < threshold}


def word_texts(transcripts: Iterable[Transcript]) -> list[str]:
    return [w.text for t in transcripts for w in t.words]
