import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surgnarr.errors import EmptySequenceError, HierarchyValidationError, ParseError
from surgnarr.hierarchy import HierarchicalRecord, PhaseAnnotation, StepAnnotation, detect_transitions
from surgnarr.interleave import (
    FrameToken,
    StateToken,
    WordToken,
    build_sequence,
    build_sequence_v1,
    deserialize,
    parse_state,
    render_state,
    serialize,
)
from surgnarr.synth import random_record
from surgnarr.transcript import TimedWord

from oracles import normalize_oracle, oracle_chunks, sequence_as_oracle_chunks


def record(phases, steps=(), words=(), title="Cholecystectomy"):
    return HierarchicalRecord("v", title, "m", tuple(phases), tuple(steps), tuple(words))


def words_of(*triples):
    return tuple(TimedWord(text, a, b) for text, a, b in triples)


def strip_states(seq):
    return [(c.index, c.frames, c.narration) for c in seq.chunks]


def test_words_land_in_chunk_of_their_end_time():
    rec = record([PhaseAnnotation("P", 0.0, 1.0)], words=words_of(("grasp", 0.1, 0.3), ("cut", 0.4, 0.7)))
    seq = build_sequence(rec, fps=2, stride_k=1)
    assert [(c.t_start, c.t_end) for c in seq.chunks] == [(0.0, 0.5), (0.5, 1.0)]
    assert [[w.text for w in c.narration] for c in seq.chunks] == [["grasp"], ["cut"]]


def test_chunk_without_transition_has_no_state():
    rec = record([PhaseAnnotation("P", 0.0, 2.0)], words=words_of(("a", 1.0, 1.2)))
    seq = build_sequence(rec)
    assert seq.chunks[0].state is not None
    assert all(c.state is None for c in seq.chunks[1:])
    assert [type(t) for t in seq.chunks[2].tokens()] == [FrameToken, WordToken]


def test_transition_at_18s_lands_in_chunk_holding_18s():
    rec = record([PhaseAnnotation("P1", 0.0, 18.0), PhaseAnnotation("P2", 18.0, 30.0)])
    seq = build_sequence(rec)
    chunk = next(c for c in seq.chunks if c.state and c.state.phase_label == "P2")
    assert (chunk.t_start, chunk.t_end) == (18.0, 18.5)
    assert chunk.state.time == 18.0


def test_transition_on_boundary_belongs_to_next_chunk():
    rec = record([PhaseAnnotation("P1", 0.0, 0.5), PhaseAnnotation("P2", 0.5, 1.0)])
    seq = build_sequence(rec)
    assert [c.state.phase_label for c in seq.chunks] == ["P1", "P2"]


def test_state_token_rendering():
    assert render_state("P1", "S1") == "<State>Phase=P1, Step=S1</State>"
    assert StateToken("P1", "S1", 0.0).render() == "<State>Phase=P1, Step=S1</State>"
    assert parse_state("<State>Phase=Mesh Fixation, Step=</State>") == ("Mesh Fixation", "")
    with pytest.raises(ParseError):
        parse_state("<State>P1</State>")


def test_several_transitions_in_one_chunk_collapse_to_last():
    rec = record(
        [PhaseAnnotation("P1", 0.0, 0.2), PhaseAnnotation("P2", 0.2, 2.0)],
        [StepAnnotation("S1", 0.3, 1.0, 1)],
    )
    seq = build_sequence(rec)
    assert (seq.chunks[0].state.phase_label, seq.chunks[0].state.step_label) == ("P2", "S1")
    assert seq.chunks[0].state.time == 0.3
    assert [(n.reason, n.phase_label, n.step_label) for n in seq.notes] == [
        ("superseded", "P1", ""),
        ("superseded", "P2", ""),
    ]
    assert len(seq.states()) + len(seq.notes) == len(detect_transitions(rec))


def test_four_chunk_record_v1_vs_eq2_state_counts():
    rec = record(
        [PhaseAnnotation("P", 0.0, 2.0)],
        [StepAnnotation("S1", 0.0, 1.0, 0), StepAnnotation("S2", 1.0, 2.0, 0)],
        words_of(("a", 0.1, 0.2), ("b", 1.2, 1.4)),
    )
    eq2, v1 = build_sequence(rec), build_sequence_v1(rec)
    assert len(eq2.chunks) == len(v1.chunks) == 4
    assert (len(eq2.states()), len(v1.states())) == (2, 4)
    assert strip_states(eq2) == strip_states(v1)


def test_v1_before_first_phase_carries_empty_state():
    rec = record([PhaseAnnotation("P", 1.0, 2.0)])
    v1 = build_sequence_v1(rec)
    assert [(c.state.phase_label, c.state.step_label) for c in v1.chunks] == [("", ""), ("", ""), ("P", ""), ("P", "")]
    assert len(build_sequence(rec).states()) == 1


def test_zero_duration_is_an_empty_sequence_error():
    rec = record([])
    with pytest.raises(EmptySequenceError):
        build_sequence(rec)
    with pytest.raises(EmptySequenceError):
        build_sequence_v1(rec)


def test_word_past_last_phase_propagates_validation_error():
    rec = record([PhaseAnnotation("P", 0.0, 1.0)], words=words_of(("late", 1.0, 1.5)))
    with pytest.raises(HierarchyValidationError):
        build_sequence(rec)


def test_word_ending_on_final_grid_line_gets_a_chunk():
    rec = record([PhaseAnnotation("P", 0.0, 1.0)], words=words_of(("end", 0.8, 1.0)))
    seq = build_sequence(rec)
    assert [c.index for c in seq.chunks] == [0, 1, 2]
    assert seq.chunks[-1].narration[0].text == "end"


@pytest.mark.parametrize("fps,k,delta", [(2, 1, 0.5), (1, 1, 1.0), (2, 4, 2.0), (1, 2, 2.0)])
def test_chunk_tiling(fps, k, delta):
    rec = record([PhaseAnnotation("P", 0.0, 7.3)])
    seq = build_sequence(rec, fps=fps, stride_k=k)
    assert seq.chunks[0].t_start == 0.0
    assert all(a.t_end == b.t_start for a, b in zip(seq.chunks, seq.chunks[1:]))
    assert all(c.t_end - c.t_start == pytest.approx(delta) for c in seq.chunks)
    assert seq.chunks[-1].t_end >= 7.3 > seq.chunks[-1].t_start
    assert all(len(c.frames) == k for c in seq.chunks)
    stamps = [f.timestamp for c in seq.chunks for f in c.frames]
    assert stamps == sorted(set(stamps))


def test_title_only_context():
    rec = record([PhaseAnnotation("P", 0.0, 4.0)], words=words_of(("a", 0.1, 0.2), ("b", 2.5, 2.6)))
    assert build_sequence(rec).context.text == "Cholecystectomy"


def test_asr_history_context_uses_words_before_start():
    rec = record(
        [PhaseAnnotation("P1", 0.0, 2.0), PhaseAnnotation("P2", 2.0, 4.0)],
        words=words_of(("grasp", 0.1, 0.2), ("cut", 1.0, 1.1), ("clip", 2.5, 2.6)),
    )
    seq = build_sequence(rec, mode="asr_history", start=2.2)
    assert seq.context.text == "Cholecystectomy\ngrasp cut"
    assert seq.chunks[0].index == 4
    assert [w.text for w in seq.words()] == ["clip"]
    # the state active at the start is carried into the first chunk
    assert seq.chunks[0].state.phase_label == "P2"
    title_only = build_sequence(rec, mode="title_only", start=2.2)
    assert title_only.context.text == "Cholecystectomy"


def test_carried_state_noted_when_start_is_mid_phase():
    rec = record([PhaseAnnotation("P1", 0.0, 4.0)])
    seq = build_sequence(rec, start=1.2)
    assert seq.chunks[0].state.time == 1.0
    assert [n.reason for n in seq.notes] == ["carried"]


def test_empty_narration_chunks_serialize_as_consecutive_frames():
    rec = record([PhaseAnnotation("P", 0.0, 1.5)], words=words_of(("a", 1.1, 1.2)))
    lines = serialize(build_sequence(rec)).splitlines()
    assert lines[2:] == [
        "F\t0\t0.0",
        "S\t0.0\t<State>Phase=P, Step=</State>",
        "F\t1\t0.5",
        "F\t2\t1.0",
        'W\t1.1\t1.2\t"a"',
    ]


def test_serialize_round_trip_with_awkward_text():
    rec = record(
        [PhaseAnnotation("Phase, one", 0.0, 2.0)],
        [StepAnnotation("Step \"quoted\"", 0.0, 1.0, 0)],
        words_of(("tab\there", 0.1, 0.2), ("naïve", 0.3, 0.4), ('"', 1.0, 1.9)),
        title="Title\nwith newline",
    )
    for builder in (build_sequence, build_sequence_v1):
        seq = builder(rec, fps=2, stride_k=2)
        back = deserialize(serialize(seq), seq.metadata())
        assert back == seq
        assert back.notes == seq.notes


@pytest.mark.parametrize(
    "text",
    [
        "",
        "#surgnarr-seq/1 {}\n",
        '#surgnarr-seq/1 {"fps": 2, "stride_k": 1, "video_id": "v", "mode": "title_only"}\nX\t"t"\n',
        '#surgnarr-seq/1 {"fps": 2, "stride_k": 1, "video_id": "v", "mode": "title_only"}\nC\t"t"\nW\t0\t1\t"a"\n',
        '#surgnarr-seq/1 {"fps": 2, "stride_k": 1, "video_id": "v", "mode": "title_only"}\nC\t"t"\nF\t0\t0.0\nQ\tx\n',
    ],
)
def test_deserialize_rejects_malformed(text):
    with pytest.raises(ParseError):
        deserialize(text)


def test_invalid_grid_parameters():
    rec = record([PhaseAnnotation("P", 0.0, 1.0)])
    with pytest.raises(ValueError):
        build_sequence(rec, fps=0)
    with pytest.raises(ValueError):
        build_sequence(rec, stride_k=0)
    with pytest.raises(ValueError):
        build_sequence(rec, mode="everything")


@pytest.mark.parametrize("seed", range(40))
@pytest.mark.parametrize("fps,k", [(1, 1), (2, 1), (2, 4)])
def test_matches_brute_force_oracle(seed, fps, k):
    rec = random_record(random.Random(seed), max_words=30)
    for builder, every in ((build_sequence, False), (build_sequence_v1, True)):
        got = sequence_as_oracle_chunks(builder(rec, fps=fps, stride_k=k))
        assert got == normalize_oracle(oracle_chunks(rec, fps, k, every_chunk=every))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]), st.sampled_from([1, 2, 4]))
def test_word_conservation_and_variant_relation(seed, fps, k):
    rec = random_record(random.Random(seed))
    eq2, v1 = build_sequence(rec, fps, k), build_sequence_v1(rec, fps, k)
    flat = [(w.text, w.t_start, w.t_end) for w in deserialize(serialize(eq2)).words()]
    assert flat == [(w.text, w.t_start, w.t_end) for w in rec.words]
    assert strip_states(eq2) == strip_states(v1)
    assert all(c.state is not None for c in v1.chunks)
    assert len(eq2.states()) + sum(n.reason == "superseded" for n in eq2.notes) == len(detect_transitions(rec))


def test_metadata_sidecar_counts():
    rec = random_record(random.Random(9), max_words=12)
    seq = build_sequence(rec)
    meta = seq.metadata()
    assert meta["n_chunks"] == len(seq.chunks)
    assert meta["n_words"] == len(rec.words)
    assert meta["n_state_tokens"] == len(seq.states())
    assert meta["chunk_seconds"] == 0.5


def test_record_changes_do_not_leak_between_builds():
    rec = record([PhaseAnnotation("P", 0.0, 1.0)], words=words_of(("a", 0.1, 0.2)))
    first = build_sequence(rec)
    build_sequence(replace(rec, title="Other"))
    assert first.context.text == "Cholecystectomy"
