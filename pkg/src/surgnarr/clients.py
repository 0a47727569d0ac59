"""Language-model clients used for correction, classification, step proposal and judging.

Everything that talks to an external model goes through the
:class:`LanguageModelClient` protocol. :class:`MockLanguageModelClient` is
rule-based and deterministic so that tests and offline runs never need a
paid API. :class:`HttpLanguageModelClient` speaks the OpenAI-compatible
chat-completions wire format and is configured from environment variables.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence, TypeVar

import httpx

from .errors import ClientTransportError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

ENV_ENDPOINT = "SURGNARR_LLM_ENDPOINT"
ENV_API_KEY = "SURGNARR_LLM_API_KEY"
ENV_MODEL = "SURGNARR_LLM_MODEL"
ENV_TIMEOUT = "SURGNARR_LLM_TIMEOUT"


@dataclass(frozen=True)
class Prompt:
    name: str
    version: str
    text: str


def load_prompt(name: str) -> Prompt:
    """Load a versioned prompt asset shipped in ``surgnarr/prompts``."""
    raw = resources.files("surgnarr").joinpath("prompts", f"{name}.txt").read_text("utf-8")
    header, _, body = raw.partition("\n")
    if not header.startswith("version:"):
        raise ValueError(f"prompt {name!r} lacks a version header")
    return Prompt(name, header.split(":", 1)[1].strip(), body.strip())


class LanguageModelClient(Protocol):
    """Behavioural interface to the external language model.

    Implementations return opaque strings (or step proposal mappings) and
    never touch pipeline state. They must be safe to call from several
    threads at once.
    """

    def correct(self, text: str, instruction: str) -> str: ...

    def classify(self, text: str, instruction: str) -> str: ...

    def summarize_steps(
        self, items: Sequence[dict[str, Any]], constraints: str
    ) -> list[dict[str, Any]]: ...

    def judge(self, reference: str, first: str, second: str, instruction: str) -> str: ...


# --------------------------------------------------------------------------- mock

TERMINOLOGY = {
    "messy": "mesh",
    "mash": "mesh",
    "gallblader": "gallbladder",
    "peritonium": "peritoneum",
    "cistic": "cystic",
    "calots": "Calot's",
    "sutchered": "sutured",
    "sutcher": "suture",
    "mesentary": "mesentery",
    "trochar": "trocar",
    "promontary": "promontory",
}

_INTERACTION_MARKERS = (
    "thank you", "thanks", "welcome", "subscribe", "hello", "hi everyone",
    "let me know", "questions", "comment", "see you", "good morning",
    "our channel", "you guys",
)
_EXPLANATION_MARKERS = (
    "as you know", "because", "important", "usually", "typically", "varies",
    "in my experience", "we believe", "the reason", "remember", "in general",
    "it is known", "studies", "literature", "patients", "prefer", "why",
)
_ACTION_VERBS = (
    "grasp", "retract", "dissect", "clip", "cut", "divid", "suture", "sutur",
    "introduc", "fix", "place", "insert", "incis", "cauteriz", "coagulat",
    "expos", "open", "clos", "irrigat", "stapl", "mobiliz", "elevat", "pull",
    "push", "separat", "remov", "extract", "transect", "ligat", "tie", "knot",
    "position", "advanc", "withdraw", "spread", "lift", "trim", "secur",
    "anchor", "tack", "fire", "seal", "aspirat", "suction", "identif", "visualiz",
)
_STOPWORDS = {
    "the", "a", "an", "is", "are", "was", "were", "be", "being", "been", "of",
    "to", "and", "or", "we", "now", "then", "this", "that", "it", "its", "with",
    "on", "in", "into", "at", "by", "for", "from", "here", "there", "using",
}


def _tokens(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


def _overlap_f1(candidate: str, reference: str) -> float:
    cand, ref = Counter(_tokens(candidate)), Counter(_tokens(reference))
    if not cand or not ref:
        return 0.0
    common = sum((cand & ref).values())
    if common == 0:
        return 0.0
    precision = common / sum(cand.values())
    recall = common / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


class MockLanguageModelClient:
    """Deterministic rule-based stand-in for the external model.

    * ``classify``: marker phrases for INTERACTION and EXPLANATION, then a
      surgical verb-stem lexicon for ACTION, otherwise EXPLANATION.
    * ``correct``: per-word substitution from a fixed terminology table.
    * ``summarize_steps``: even contiguous partition into ``min(3, n)`` groups.
    * ``judge``: token-overlap F1 against the reference; symmetric, so the
      verdict does not depend on presentation order.
    """

    name = "mock"

    def __init__(self, terminology: dict[str, str] | None = None) -> None:
        self.terminology = dict(TERMINOLOGY if terminology is None else terminology)

    def classify(self, text: str, instruction: str = "") -> str:
        low = " ".join(_tokens(text))
        if any(m in low for m in _INTERACTION_MARKERS) or text.rstrip().endswith("?"):
            return "INTERACTION"
        if any(m in low for m in _EXPLANATION_MARKERS):
            return "EXPLANATION"
        if any(tok.startswith(v) for tok in low.split() for v in _ACTION_VERBS):
            return "ACTION"
        return "EXPLANATION"

    def correct(self, text: str, instruction: str = "") -> str:
        out = []
        for word in text.split():
            m = re.fullmatch(r"([^\w']*)([\w'-]+)([^\w']*)", word)
            if not m:
                out.append(word)
                continue
            lead, core, trail = m.groups()
            fix = self.terminology.get(core.lower())
            if fix is not None:
                if core[:1].isupper():
                    fix = fix[:1].upper() + fix[1:]
                core = fix
            out.append(lead + core + trail)
        return " ".join(out)

    def summarize_steps(
        self, items: Sequence[dict[str, Any]], constraints: str = ""
    ) -> list[dict[str, Any]]:
        if not items:
            return []
        n_steps = min(3, len(items))
        size = math.ceil(len(items) / n_steps)
        steps = []
        for g in range(0, len(items), size):
            group = items[g : g + size]
            content = [t for t in _tokens(group[0]["text"]) if t not in _STOPWORDS]
            label = " ".join(content[:2]).capitalize() or f"Step {len(steps) + 1}"
            steps.append(
                {
                    "label": label,
                    "t_start": group[0]["t_start"],
                    "t_end": max(it["t_end"] for it in group),
                }
            )
        return steps

    def judge(self, reference: str, first: str, second: str, instruction: str = "") -> str:
        s1, s2 = _overlap_f1(first, reference), _overlap_f1(second, reference)
        if abs(s1 - s2) < 1e-12:
            winner = "tie"
        else:
            winner = "1" if s1 > s2 else "2"
        return json.dumps(
            {"winner": winner, "rationale": f"reference overlap {s1:.3f} vs {s2:.3f}"}
        )


# --------------------------------------------------------------------------- http


def _parse_steps_reply(reply: str) -> list[dict[str, Any]]:
    fence = re.search(r"```(?:json)?\s*\n(.*?)\n\s*```", reply, re.DOTALL)
    if fence:
        reply = fence.group(1)
    try:
        data = json.loads(reply)
    except json.JSONDecodeError:
        logger.warning("unparseable step proposal: %.80r", reply)
        return []
    if not isinstance(data, list):
        return []
    return [d for d in data if isinstance(d, dict)]


class HttpLanguageModelClient:
    """OpenAI-compatible chat-completions client."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.model = model
        self.name = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, env: dict[str, str] | None = None) -> HttpLanguageModelClient:
        env = dict(os.environ if env is None else env)
        endpoint = env.get(ENV_ENDPOINT)
        if not endpoint:
            raise ValueError(f"{ENV_ENDPOINT} is not set")
        return cls(
            endpoint=endpoint,
            model=env.get(ENV_MODEL, "gpt-4o"),
            api_key=env.get(ENV_API_KEY),
            timeout=float(env.get(ENV_TIMEOUT, "60")),
        )

    def _chat(self, system: str, user: str) -> str:
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        try:
            resp = self._http.post(self.endpoint, json=payload)
        except httpx.HTTPError as exc:
            raise ClientTransportError(f"request failed: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ClientTransportError(f"server returned {resp.status_code}")
        resp.raise_for_status()
        try:
            return resp.json()["choices"][0]["message"]["content"].strip()
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ClientTransportError(f"malformed response body: {exc}") from exc

    def correct(self, text: str, instruction: str) -> str:
        return self._chat(instruction, text)

    def classify(self, text: str, instruction: str) -> str:
        return self._chat(instruction, text)

    def summarize_steps(
        self, items: Sequence[dict[str, Any]], constraints: str
    ) -> list[dict[str, Any]]:
        lines = [f"[{it['t_start']:.3f}-{it['t_end']:.3f}] {it['text']}" for it in items]
        return _parse_steps_reply(self._chat(constraints, "\n".join(lines)))

    def judge(self, reference: str, first: str, second: str, instruction: str) -> str:
        user = (
            f"Reference transcript:\n{reference}\n\n"
            f"Narration 1:\n{first}\n\nNarration 2:\n{second}"
        )
        return self._chat(instruction, user)


# --------------------------------------------------------------------------- cache


class CachedClient:
    """Content-addressed on-disk cache in front of another client.

    Every response is stored under ``cache_dir/<hh>/<sha256>.json`` keyed by
    the client namespace, method name and arguments, so re-runs only pay
    for inputs they have not seen.
    """

    def __init__(self, inner: LanguageModelClient, cache_dir: str | Path, namespace: str) -> None:
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.namespace = namespace
        self.name = getattr(inner, "name", namespace)
        self.hits = 0
        self.misses = 0

    def _key(self, method: str, args: Any) -> str:
        blob = json.dumps([self.namespace, method, args], sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _call(self, method: str, args: list[Any], fn: Callable[[], Any]) -> Any:
        key = self._key(method, args)
        path = self.cache_dir / key[:2] / f"{key}.json"
        if path.exists():
            self.hits += 1
            return json.loads(path.read_text("utf-8"))["response"]
        self.misses += 1
        response = fn()
        path.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(
            "w", encoding="utf-8", dir=path.parent, suffix=".tmp", delete=False
        ) as fh:
            json.dump({"response": response}, fh, ensure_ascii=False)
        os.replace(fh.name, path)
        return response

    def correct(self, text: str, instruction: str) -> str:
        return self._call("correct", [text, instruction], lambda: self.inner.correct(text, instruction))

    def classify(self, text: str, instruction: str) -> str:
        return self._call(
            "classify", [text, instruction], lambda: self.inner.classify(text, instruction)
        )

    def summarize_steps(
        self, items: Sequence[dict[str, Any]], constraints: str
    ) -> list[dict[str, Any]]:
        return self._call(
            "summarize_steps",
            [list(items), constraints],
            lambda: self.inner.summarize_steps(items, constraints),
        )

    def judge(self, reference: str, first: str, second: str, instruction: str) -> str:
        return self._call(
            "judge",
            [reference, first, second, instruction],
            lambda: self.inner.judge(reference, first, second, instruction),
        )


# --------------------------------------------------------------------------- calling


def call_with_retry(
    fn: Callable[[], R],
    *,
    item_id: str | None = None,
    retries: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> R:
    """Call ``fn``, retrying :class:`ClientTransportError` with exponential backoff."""
    attempt = 0
    while True:
        try:
            return fn()
        except ClientTransportError as exc:
            if attempt >= retries:
                raise ClientTransportError(str(exc), item_id=item_id) from exc
            delay = backoff * (2**attempt)
            logger.info("transport error on %s, retry %d in %.2fs", item_id, attempt + 1, delay)
            sleep(delay)
            attempt += 1


def map_bounded(fn: Callable[[T], R], items: Iterable[T], max_in_flight: int = 4) -> list[R]:
    """Apply ``fn`` concurrently with at most ``max_in_flight`` calls; results keep input order."""
    items = list(items)
    if max_in_flight <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(fn, items))


def make_client(kind: str, cache_dir: str | Path | None = None) -> LanguageModelClient:
    """Build a client by name (``mock`` or ``external``), optionally disk-cached."""
    if kind == "mock":
        client: LanguageModelClient = MockLanguageModelClient()
        namespace = "mock"
    elif kind == "external":
        http = HttpLanguageModelClient.from_env()
        client, namespace = http, f"external:{http.model}"
    else:
        raise ValueError(f"unknown client kind {kind!r}")
    if cache_dir is not None:
        return CachedClient(client, cache_dir, namespace)
    return client
