import json
import random
import sys
import textwrap

import pytest

from surgnarr.errors import CausalityViolation, EmptyInputError, StreamRunError
from surgnarr.hierarchy import HierarchicalRecord, PhaseAnnotation, StepAnnotation
from surgnarr.interleave import build_sequence
from surgnarr.stream import (
    ExternalNarrationModel,
    NgramNarrationModel,
    NullModel,
    ReplayModel,
    StateOut,
    WordOut,
    ngram_model,
    replay_mismatches,
    simulate,
)
from surgnarr.synth import random_record
from surgnarr.transcript import TimedWord


def small_record(duration=3.0):
    words = tuple(TimedWord(f"w{i}", i * 0.3, i * 0.3 + 0.2) for i in range(int(duration / 0.3)))
    return HierarchicalRecord(
        "v", "Title", "m",
        (PhaseAnnotation("P1", 0.0, duration / 2), PhaseAnnotation("P2", duration / 2, duration)),
        (StepAnnotation("S1", 0.0, min(1.0, duration / 2), 0),),
        words,
    )


class Base:
    name = "adversary"

    def reset(self):
        pass

    def on_context(self, text):
        pass


class FutureFetch(Base):
    def __init__(self, at, ahead):
        self.at, self.ahead = at, ahead

    def on_frames(self, view):
        if view.position == self.at:
            view.lookback(view.position + self.ahead)
        return []


class AckAhead(Base):
    def __init__(self, at):
        self.at = at

    def on_frames(self, view):
        if view.position == self.at:
            view.gate.acknowledge(view.position + 1)
        return []


class AckTwice(Base):
    def __init__(self, at):
        self.at = at

    def on_frames(self, view):
        view.ack()
        if view.position == self.at:
            view.ack()
        return []


class AckStale(Base):
    def __init__(self, at):
        self.at = at

    def on_frames(self, view):
        if view.position == self.at:
            view.gate.acknowledge(view.position - 1)
        return []


class PullNext(Base):
    """Tries to have the next chunk delivered without acknowledging this one."""

    def __init__(self, at):
        self.at = at

    def on_frames(self, view):
        if view.position == self.at:
            view.gate.deliver(view.position + 1)
        return []


class Swallower(FutureFetch):
    """Catches its own violation and carries on; the run must still abort."""

    def on_frames(self, view):
        try:
            return super().on_frames(view)
        except CausalityViolation:
            return [WordOut("innocent")]


ADVERSARIES = [
    lambda at: FutureFetch(at, 1),
    lambda at: FutureFetch(at, 2),
    AckAhead,
    AckTwice,
    lambda at: AckStale(max(at, 1)),
    PullNext,
    lambda at: Swallower(at, 2),
]


@pytest.mark.parametrize("make", ADVERSARIES)
@pytest.mark.parametrize("at", [0, 3, 5])
def test_adversaries_abort_the_run(make, at):
    seq = build_sequence(small_record())
    with pytest.raises(CausalityViolation):
        simulate(seq, make(at))


def test_lookback_is_allowed():
    class Looker(Base):
        def on_frames(self, view):
            if view.position:
                assert view.lookback(view.position - 1).index == view.index - 1
            return []

    simulate(build_sequence(small_record()), Looker())


def test_model_crash_reports_chunk_index():
    class Crash(Base):
        def on_frames(self, view):
            if view.index == 4:
                raise KeyError("boom")
            return []

    with pytest.raises(StreamRunError) as err:
        simulate(build_sequence(small_record()), Crash())
    assert err.value.chunk_index == 4


def test_unknown_emission_is_a_run_error():
    class Weird(Base):
        def on_frames(self, view):
            return ["text"]

    with pytest.raises(StreamRunError):
        simulate(build_sequence(small_record()), Weird())


def test_replay_reproduces_narration_and_states():
    rec = small_record()
    seq = build_sequence(rec)
    report = simulate(seq, ReplayModel(seq))
    assert report.words() == [w.text for w in rec.words]
    assert report.states() == [(s.phase_label, s.step_label) for s in seq.states()]
    assert replay_mismatches(seq, report) == []
    assert all(e.teacher_forced for e in report.events if e.kind == "StateOut")


@pytest.mark.parametrize("seed", range(30))
def test_replay_fixpoint_fuzzed(seed):
    rec = random_record(random.Random(seed))
    seq = build_sequence(rec, fps=random.Random(seed).choice([1, 2]), stride_k=random.Random(seed).choice([1, 2, 4]))
    assert replay_mismatches(seq, simulate(seq, ReplayModel(seq))) == []


def test_null_model():
    seq = build_sequence(small_record())
    report = simulate(seq, NullModel())
    kinds = [e.kind for e in report.events]
    assert kinds == ["FrameIn"] * len(seq.chunks)
    assert len(report.per_chunk_latency) == len(seq.chunks)


def test_events_ordered_and_attributed():
    seq = build_sequence(small_record())
    report = simulate(seq, ReplayModel(seq))
    keys = [e.media_time for e in report.events]
    assert keys == sorted(keys)
    delivered = -1
    for e in report.events:
        if e.kind == "FrameIn":
            delivered = e.chunk_index
        else:
            assert e.chunk_index == delivered


def test_report_document_has_no_wall_clock():
    seq = build_sequence(small_record())
    doc = simulate(seq, ReplayModel(seq)).to_dict()
    assert "wall_clock" not in json.dumps(doc)
    assert doc["n_chunks"] == len(seq.chunks)


def test_paced_mode_respects_media_time():
    rec = small_record(1.0)
    seq = build_sequence(rec, fps=20, stride_k=1)
    report = simulate(seq, NullModel(), "paced")
    delta = 1 / 20
    frame_ins = [e for e in report.events if e.kind == "FrameIn"]
    for i, e in enumerate(frame_ins):
        assert e.wall_clock >= i * delta - 0.005


def test_paced_mode_with_fake_clock():
    now = [0.0]
    slept = []

    def sleep(dt):
        slept.append(dt)
        now[0] += dt

    seq = build_sequence(small_record(2.0))
    report = simulate(seq, NullModel(), "paced", clock=lambda: now[0], sleep=sleep)
    starts = [e.wall_clock for e in report.events]
    assert all(w >= i * 0.5 for i, w in enumerate(starts))


def test_realtime_factor_smoke():
    """Non-binding performance check: a 10-minute record through NullModel at >= 100x real time."""
    rec = HierarchicalRecord("long", "T", "m", (PhaseAnnotation("P", 0.0, 600.0),), (), ())
    report = simulate(build_sequence(rec), NullModel())
    assert report.realtime_factor >= 100


# ------------------------------------------------------------------------ n-gram


def test_ngram_closed_vocabulary_and_bound():
    rec = small_record(6.0)
    model = NgramNarrationModel([rec], max_words_per_chunk=2)
    seq = build_sequence(rec)
    report = simulate(seq, model)
    words = report.words()
    assert words and set(words) <= {w.text for w in rec.words}
    per_chunk = {}
    for e in report.events:
        if e.kind == "WordOut":
            per_chunk[e.chunk_index] = per_chunk.get(e.chunk_index, 0) + 1
    assert max(per_chunk.values()) <= 2


def test_ngram_deterministic():
    recs = [random_record(random.Random(s), max_words=40) for s in range(4)]
    seq = build_sequence(recs[0])
    a = simulate(seq, ngram_model(recs)).to_dict()
    b = simulate(seq, ngram_model(list(recs))).to_dict()
    assert a == b


def test_ngram_copies_teacher_forced_state():
    rec = small_record()
    seq = build_sequence(rec)
    report = simulate(seq, NgramNarrationModel([rec]))
    assert report.states() == [(s.phase_label, s.step_label) for s in seq.states()]


def test_ngram_needs_training_data():
    with pytest.raises(EmptyInputError):
        NgramNarrationModel([])


# ---------------------------------------------------------------------- external


ECHO_SERVER = textwrap.dedent(
    """
    import json, sys
    offset = int(sys.argv[1])
    for line in sys.stdin:
        req = json.loads(line)
        if req["type"] != "chunk":
            print(json.dumps({"ok": True}), flush=True)
            continue
        tokens = [{"kind": "word", "text": "tick%d" % req["index"]}]
        if req["state"]:
            tokens.insert(0, {"kind": "state", **req["state"]})
        print(json.dumps({"ack": req["index"] + offset, "tokens": tokens}), flush=True)
    """
)


@pytest.fixture
def server(tmp_path):
    path = tmp_path / "server.py"
    path.write_text(ECHO_SERVER)
    return path


def test_external_model_protocol(server):
    seq = build_sequence(small_record())
    model = ExternalNarrationModel([sys.executable, str(server), "0"], name="echo")
    try:
        report = simulate(seq, model)
    finally:
        model.close()
    assert report.words() == [f"tick{c.index}" for c in seq.chunks]
    assert report.states() == [(s.phase_label, s.step_label) for s in seq.states()]
    assert report.model_name == "echo"


def test_external_model_wrong_ack_is_causality_violation(server):
    seq = build_sequence(small_record())
    model = ExternalNarrationModel([sys.executable, str(server), "1"])
    try:
        with pytest.raises(CausalityViolation):
            simulate(seq, model)
    finally:
        model.close()


def test_emission_types_are_plain_values():
    assert StateOut("P", "S") == StateOut("P", "S")
    assert WordOut("a") != WordOut("b")
