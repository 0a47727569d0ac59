import json
import shutil
from pathlib import Path

import pytest
import yaml

from surgnarr import pipeline
from surgnarr.cli import main
from surgnarr.clients import MockLanguageModelClient
from surgnarr.interleave import deserialize
from surgnarr.pipeline import Manifest, PipelineConfig


@pytest.fixture
def corpus(tmp_path, fixture_root):
    """Three fixture videos plus an output directory; returns the common CLI flags."""
    asr, meta = tmp_path / "asr", tmp_path / "meta"
    asr.mkdir()
    meta.mkdir()
    for vid in ("vid001", "vid002", "vid004"):
        shutil.copy(fixture_root / "asr" / f"{vid}.json", asr)
        shutil.copy(fixture_root / "meta" / f"{vid}.json", meta)
    out = tmp_path / "out"
    return ["--asr-dir", str(asr), "--meta-dir", str(meta), "--out", str(out)], out


def run(cmd, flags, *extra):
    return main([cmd, *flags, *extra])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def report(out, name):
    return json.loads((out / "reports" / f"{name}.json").read_text())


# ---------------------------------------------------------------------- curate


def test_curate_marks_videos_filtered(corpus):
    flags, out = corpus
    assert run("curate", flags) == 0
    m = manifest(out)
    assert sorted(m["videos"]) == ["vid001", "vid002", "vid004"]
    assert all(v["stage"] == "filtered" for v in m["videos"].values())
    doc = json.loads((out / "curated" / "vid001.json").read_text())
    assert doc["schema"] == "surgnarr.curated/1"
    assert {"flagged", "rewrites", "rejected", "classes", "corrected", "filtered"} <= set(doc)


def test_rerun_does_no_work_and_keeps_manifest(corpus):
    flags, out = corpus
    assert run("curate", flags) == 0
    before = (out / "manifest.json").read_bytes()
    assert run("curate", flags) == 0
    assert report(out, "curate")["processed"] == []
    assert len(report(out, "curate")["skipped"]) == 3
    assert (out / "manifest.json").read_bytes() == before


def test_malformed_transcript_is_isolated(corpus, capsys):
    flags, out = corpus
    (Path(flags[1]) / "vid009.json").write_text("{not json")
    assert run("curate", flags) == 2
    r = report(out, "curate")
    assert len(r["processed"]) == 3 and list(r["failures"]) == ["vid009"]
    assert "FAILED vid009" in capsys.readouterr().out
    assert json.loads((out / "reports" / "curate_failures.json").read_text()).keys() == {"vid009"}


def test_missing_asr_dir_is_fatal(tmp_path, capsys):
    rc = main(["curate", "--asr-dir", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert rc == 1 and "ASR directory not found" in capsys.readouterr().err


def test_deleted_artifact_is_regenerated(corpus):
    flags, out = corpus
    run("curate", flags)
    (out / "curated" / "vid002.json").unlink()
    run("curate", flags)
    assert report(out, "curate")["processed"] == ["vid002"]


# ----------------------------------------------------------------------- build


def test_build_writes_records_sequences_and_split(corpus):
    flags, out = corpus
    run("curate", flags)
    assert run("build", flags) == 0
    m = manifest(out)
    assert all(v["stage"] == "interleaved" for v in m["videos"].values())
    for vid in m["videos"]:
        assert (out / "records" / f"{vid}.json").exists()
        assert (out / "sequences" / "eq2" / f"{vid}.seq.txt").exists()
        assert (out / "sequences" / "eq2" / f"{vid}.meta.json").exists()
    split = json.loads((out / "split.json").read_text())
    assert sorted(split["train"] + split["test"]) == sorted(m["videos"])
    assert run("validate", flags) == 0


def test_v1_variant_has_at_least_as_many_states(corpus):
    flags, out = corpus
    run("curate", flags)
    assert run("build", flags, "--variant", "v1") == 0
    for vid in manifest(out)["videos"]:
        eq2 = deserialize((out / "sequences" / "eq2" / f"{vid}.seq.txt").read_text())
        v1 = deserialize((out / "sequences" / "v1" / f"{vid}.seq.txt").read_text())
        assert len(v1.states()) == len(v1.chunks) >= len(eq2.states())


def test_build_before_curate_is_a_descriptive_error(corpus, capsys):
    flags, _ = corpus
    assert run("build", flags) == 1
    assert "run `curate` first" in capsys.readouterr().err


def test_invalid_step_proposal_falls_back_with_warning(corpus, monkeypatch):
    flags, out = corpus
    run("curate", flags)

    class Overlapping(MockLanguageModelClient):
        def summarize_steps(self, items, constraints=""):
            return [{"label": "A", "t_start": 0, "t_end": 1000}, {"label": "B", "t_start": 0, "t_end": 1000}]

    monkeypatch.setattr(pipeline, "_client", lambda kind, config: Overlapping())
    assert run("build", flags) == 0
    warnings = report(out, "build")["warnings"]
    assert set(warnings) >= {"vid001", "vid002", "vid004"}
    rec = json.loads((out / "records" / "vid001.json").read_text())
    assert all(s["label"] in {p["label"] for p in rec["phases"]} for s in rec["steps"])


def test_parameter_change_invalidates_only_its_stage(corpus):
    flags, out = corpus
    run("curate", flags)
    run("build", flags)
    run("build", flags, "--fps", "1")
    assert len(report(out, "build")["processed"]) == 3
    run("curate", flags)
    assert report(out, "curate")["processed"] == []
    run("curate", flags, "--threshold", "-0.3")
    assert len(report(out, "curate")["processed"]) == 3


def test_manifest_is_path_independent(corpus, tmp_path):
    flags, out = corpus
    other = tmp_path / "elsewhere"
    for target in (out, other):
        f = flags[:-1] + [str(target)]
        run("curate", f)
        run("build", f)
    assert (out / "manifest.json").read_bytes() == (other / "manifest.json").read_bytes()


def test_stage_never_regresses():
    m = Manifest()
    m.advance("v", "interleaved")
    m.advance("v", "filtered")
    assert m.stage("v") == "interleaved"


# ------------------------------------------------------------ simulate/evaluate


def built(flags):
    assert run("curate", flags) == 0
    assert run("build", flags) == 0


def test_simulate_replay_is_a_fixpoint(corpus):
    flags, out = corpus
    built(flags)
    assert run("simulate", flags, "--model", "replay", "--subset", "all") == 0
    r = report(out, "simulate-replay")
    assert r["details"]["replay_fixpoint"] == {v: True for v in ("vid001", "vid002", "vid004")}
    assert (out / "timing" / "replay" / "vid001.timing.json").exists()
    stream = json.loads((out / "stream" / "replay" / "vid001.report.json").read_text())
    assert "wall_clock" not in json.dumps(stream)


def test_evaluate_against_fixed_baseline(corpus, capsys):
    flags, out = corpus
    built(flags)
    for model in ("replay", "null", "ngram"):
        assert run("simulate", flags, "--model", model, "--subset", "all") == 0
    capsys.readouterr()
    assert run("evaluate", flags, "--fixed-baseline", "null") == 0
    text = capsys.readouterr().out
    assert "replay vs null" in text and "ngram vs null" in text and "ngram vs replay" not in text
    winrates = sorted(p.name for p in (out / "eval" / "winrate").iterdir())
    assert winrates == ["ngram__vs__null.json", "replay__vs__null.json"]
    replay_vs_null = json.loads((out / "eval" / "winrate" / "replay__vs__null.json").read_text())
    assert replay_vs_null["win_rate_a"] == 100.0
    pc = json.loads((out / "eval" / "phase_correctness.json").read_text())
    assert all(v["accuracy"] == 1.0 for v in pc["replay"].values())


def test_evaluate_with_single_model_is_empty_input(corpus, capsys):
    flags, _ = corpus
    built(flags)
    run("simulate", flags, "--model", "null", "--subset", "all")
    assert run("evaluate", flags) == 1
    assert "empty input" in capsys.readouterr().err


def test_evaluate_unknown_model(corpus, capsys):
    flags, _ = corpus
    built(flags)
    assert run("evaluate", flags, "--models", "ghost") == 1
    assert "run `simulate` first" in capsys.readouterr().err


def test_simulate_before_build(corpus, capsys):
    flags, _ = corpus
    run("curate", flags)
    assert run("simulate", flags, "--model", "null") == 1
    assert "run `build`" in capsys.readouterr().err


def test_validate_reports_broken_record(corpus, tmp_path):
    flags, out = corpus
    built(flags)
    rec = json.loads((out / "records" / "vid001.json").read_text())
    rec["steps"][0]["t_end"] = rec["phases"][-1]["t_end"] + 100
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(rec))
    assert run("validate", flags, str(bad)) == 2
    assert "step_escape" in report(out, "validate")["failures"]["bad"]


# ---------------------------------------------------------------------- config


def test_config_yaml_round_trip(tmp_path):
    cfg = PipelineConfig(fps=1.0, stride_k=2, variant="v1", output_dir=Path("x"))
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    assert PipelineConfig.load(path) == cfg


def test_example_config_loads():
    example = Path(__file__).resolve().parent.parent / "config.example.yaml"
    cfg = PipelineConfig.load(example)
    assert cfg == PipelineConfig.from_dict(yaml.safe_load(example.read_text()))


@pytest.mark.parametrize(
    "bad",
    [{"fps": 0}, {"stride_k": 0}, {"threshold": 0.5}, {"variant": "v9"}, {"split_ratio": 1.0}, {"version": 2}, {"colour": "red"}],
)
def test_config_rejects_bad_values(bad):
    with pytest.raises(ValueError):
        PipelineConfig.from_dict(bad)


def test_cli_flags_override_config_file(corpus, tmp_path):
    flags, out = corpus
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"fps": 1.0, "output_dir": str(tmp_path / "ignored")}))
    run("curate", flags, "--config", str(cfg))
    assert run("build", flags, "--config", str(cfg)) == 0
    meta = json.loads((out / "sequences" / "eq2" / "vid001.meta.json").read_text())
    assert meta["chunk_seconds"] == 1.0
    assert not (tmp_path / "ignored").exists()


def test_invalid_config_file_is_reported(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("fps: -1\n")
    assert main(["curate", "--config", str(cfg)]) == 1
    assert "fps must be > 0" in capsys.readouterr().err
