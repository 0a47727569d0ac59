"""Single-fault injection into valid records, for validator completeness checks."""

from __future__ import annotations

import random
from dataclasses import replace

from surgnarr.transcript import TimedWord

FAULTS = ("phase_overlap", "step_escape", "step_order", "word_orphan")
# violation kind each fault must produce
EXPECTED_KIND = {
    "phase_overlap": "phase_overlap",
    "step_escape": "step_escape",
    "step_order": "step_overlap",
    "word_orphan": "word_orphan",
}


def applicable(record, fault: str) -> bool:
    if fault == "phase_overlap":
        return len(record.phases) >= 2
    if fault == "step_escape":
        return len(record.steps) >= 1
    if fault == "step_order":
        return len(record.steps) >= 2
    return True


def inject(record, fault: str, rng: random.Random):
    """Return a copy of ``record`` with exactly one constraint broken."""
    phases, steps, words = list(record.phases), list(record.steps), list(record.words)
    if fault == "phase_overlap":
        i = rng.randrange(1, len(phases))
        prev, cur = phases[i - 1], phases[i]
        overlap_ms = rng.randint(1, max(1, int(round((prev.t_end - prev.t_start) * 1000)) - 1))
        new_start = round(prev.t_end - overlap_ms / 1000, 3)
        phases[i] = replace(cur, t_start=new_start)
    elif fault == "step_escape":
        j = rng.randrange(len(steps))
        s = steps[j]
        parent = phases[s.parent_phase_index]
        if rng.random() < 0.5 or parent.t_start == 0:
            steps[j] = replace(s, t_end=round(parent.t_end + rng.randint(1, 2000) / 1000, 3))
        else:
            shift = rng.randint(1, int(round(parent.t_start * 1000)))
            steps[j] = replace(s, t_start=round(parent.t_start - shift / 1000, 3))
    elif fault == "step_order":
        j = rng.randrange(1, len(steps))
        steps[j - 1], steps[j] = steps[j], steps[j - 1]
    elif fault == "word_orphan":
        hi = phases[-1].t_end
        start = max([hi] + [w.t_start for w in words])
        end = round(hi + rng.randint(1, 3000) / 1000, 3)
        words.append(TimedWord("orphan", start, max(start, end)))
    else:
        raise ValueError(fault)
    return replace(record, phases=tuple(phases), steps=tuple(steps), words=tuple(words))
