"""Synthetic records and fixture videos.

Random records drive the property and acceptance suites; the fixture set
is a small, fully deterministic stand-in corpus (ASR documents plus phase
metadata) for end-to-end runs of the CLI.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from .hierarchy import HierarchicalRecord, PhaseAnnotation, StepAnnotation
from .transcript import TimedWord

_VOCAB = (
    "grasp retract dissect clip cut the tissue mesh suture gallbladder duct artery "
    "peritoneum is being now lifted fixed placed cautery hook plane anterior posterior"
).split()


def random_record(
    rng: random.Random,
    *,
    video_id: str = "rand",
    max_phases: int = 4,
    max_words: int = 40,
    min_state_gap_ms: int = 0,
    allow_gaps: bool = True,
    meta_type: str = "synthetic",
) -> HierarchicalRecord:
    """A random valid record on a millisecond grid.

    ``min_state_gap_ms`` keeps every phase/step start at least that far from
    the previous one, so that no two state changes share a chunk of that
    length or shorter.
    """
    gap = max(min_state_gap_ms, 1)
    phases: list[PhaseAnnotation] = []
    steps: list[StepAnnotation] = []
    t = rng.randint(0, 3000) if rng.random() < 0.3 else 0
    last_change = -gap
    for p in range(rng.randint(1, max_phases)):
        if allow_gaps and phases and rng.random() < 0.3:
            t += rng.randint(1, 2500)
        start = max(t, last_change + gap)
        last_change = start
        cursor = start
        for _ in range(rng.randint(0, 3)):
            s_start = cursor if (cursor == start and rng.random() < 0.5) else cursor + rng.randint(0, 2000)
            if s_start != start:
                s_start = max(s_start, last_change + gap)
            s_end = s_start + rng.randint(1, 6000)
            steps.append(StepAnnotation(f"S{len(steps) + 1}", s_start / 1000, s_end / 1000, p))
            last_change = s_start
            cursor = s_end
            if allow_gaps and rng.random() < 0.3:
                cursor += rng.randint(1, 1500)
        end = max(cursor, start + 500) + rng.randint(0, 4000)
        phases.append(PhaseAnnotation(f"P{p + 1}", start / 1000, end / 1000))
        t = end

    lo, hi = int(round(phases[0].t_start * 1000)), int(round(phases[-1].t_end * 1000))
    n_words = rng.randint(0, max_words)
    ends = sorted(rng.randint(lo, hi) for _ in range(n_words))
    words = []
    prev_start = 0
    for i, e in enumerate(ends):
        s = max(prev_start, e - rng.randint(0, 800))
        s = min(s, e)
        prev_start = s
        words.append(TimedWord(f"{rng.choice(_VOCAB)}{i}", s / 1000, e / 1000))
    return HierarchicalRecord(video_id, "Synthetic procedure", meta_type, tuple(phases), tuple(steps), tuple(words))


# ------------------------------------------------------------------- fixtures

_PROCEDURES = {
    "cholecystectomy": {
        "title": "Laparoscopic cholecystectomy for symptomatic gallstones",
        "phases": {
            "Preparation": [
                "The trocars are placed under direct vision",
                "The fundus of the gallbladder is grasped and retracted superiorly",
            ],
            "Calot Triangle Dissection": [
                "The peritonium over Calot's triangle is opened with the hook",
                "We dissect the cystic duct away from the gallbladder neck",
                "The cistic artery is identified posterior to the duct",
            ],
            "Clipping and Cutting": [
                "Two clips are placed on the cystic duct",
                "The cystic artery is clipped and divided",
                "The duct is cut between the clips",
            ],
            "Gallbladder Dissection": [
                "The gallbladder is dissected from the liver bed with cautery",
                "The specimen is placed into the retrieval bag",
            ],
        },
    },
    "sacrocolpopexy": {
        "title": "Robotic sacrocolpopexy with V-shaped mesh",
        "phases": {
            "Promontory Dissection": [
                "The peritoneum over the sacral promontory is opened",
                "The presacral space is dissected down to the ligament",
            ],
            "Mesh Introduction": [
                "The V-shape messy is introduced into the pelvis",
                "The mesh is positioned over the pelvic floor",
            ],
            "Mesh Fixation": [
                "The first leg of the mesh is sutured to the vaginal wall",
                "The second leg of the mesh is then sutured",
                "The mesh is fixed to the promontory with a tacker",
            ],
        },
    },
}

_ASIDES = [
    ("As you know anatomy varies between patients", -0.08),
    ("Thank you for watching and please subscribe", -0.05),
    ("This step is important because bleeding here is hard to control", -0.1),
    ("Hello everyone welcome to our channel", -0.04),
]

FIXTURE_VIDEOS = (
    ("vid001", "cholecystectomy"),
    ("vid002", "cholecystectomy"),
    ("vid003", "cholecystectomy"),
    ("vid004", "sacrocolpopexy"),
    ("vid005", "sacrocolpopexy"),
)


def _segment(rng: random.Random, text: str, t: float, seg_logprob: float) -> tuple[dict, float]:
    words = []
    for token in text.split():
        dur = round(0.18 + 0.05 * len(token) + rng.random() * 0.1, 3)
        words.append(
            {
                "word": token,
                "start": round(t, 3),
                "end": round(t + dur, 3),
                "logprob": round(seg_logprob + rng.uniform(-0.02, 0.02), 4),
            }
        )
        t += dur + round(rng.random() * 0.08, 3)
    avg = round(sum(w["logprob"] for w in words) / len(words), 4)
    return {"text": " " + text, "start": words[0]["start"], "end": words[-1]["end"], "avg_logprob": avg, "words": words}, t


def fixture_documents(video_id: str, meta_type: str, seed: int = 7) -> tuple[dict, dict]:
    """ASR and metadata documents for one fixture video."""
    rng = random.Random(f"{seed}:{video_id}")
    proc = _PROCEDURES[meta_type]
    segments = []
    phases = []
    t = round(rng.uniform(0.5, 2.0), 3)
    phase_start = 0.0
    for p_i, (label, sentences) in enumerate(proc["phases"].items()):
        for s_i, sentence in enumerate(sentences):
            low = "messy" in sentence or "peritonium" in sentence or "cistic" in sentence
            seg, t = _segment(rng, sentence, t, -0.3 if low else -0.06)
            segments.append(seg)
            t += round(rng.uniform(0.6, 1.6), 3)
            if s_i == 0 and rng.random() < 0.5:
                aside, lp = _ASIDES[rng.randrange(len(_ASIDES))]
                seg, t = _segment(rng, aside, t, lp)
                segments.append(seg)
                t += round(rng.uniform(0.6, 1.6), 3)
        phase_end = round(t, 3) if p_i < len(proc["phases"]) - 1 else round(t + 1.0, 3)
        phases.append({"label": label, "start": phase_start, "end": phase_end})
        phase_start = phase_end
        t += 0.3
    asr = {"video_id": video_id, "language": "en", "segments": segments}
    meta = {"video_id": video_id, "title": proc["title"], "meta_type": meta_type, "phases": phases}
    return asr, meta


def write_fixture_set(root: str | Path, seed: int = 7) -> list[str]:
    """Write the 5-video fixture corpus under ``root/asr`` and ``root/meta``."""
    root = Path(root)
    (root / "asr").mkdir(parents=True, exist_ok=True)
    (root / "meta").mkdir(parents=True, exist_ok=True)
    for vid, meta_type in FIXTURE_VIDEOS:
        asr, meta = fixture_documents(vid, meta_type, seed)
        (root / "asr" / f"{vid}.json").write_text(json.dumps(asr, indent=2) + "\n", "utf-8")
        (root / "meta" / f"{vid}.json").write_text(json.dumps(meta, indent=2) + "\n", "utf-8")
    return [v for v, _ in FIXTURE_VIDEOS]
