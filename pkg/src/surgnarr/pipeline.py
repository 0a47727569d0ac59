"""Manifest-driven pipeline stages behind the command line.

Every stage writes its artifacts with write-then-rename and records
content hashes in ``manifest.json``. A video is skipped when the key of
its stage (input hashes plus only the parameters that stage depends on)
is unchanged and its outputs are still present, so re-runs are
incremental and an interrupted run resumes cleanly.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import random
import tempfile
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import yaml

from .clients import LanguageModelClient, load_prompt, make_client
from .curation import RewriteResult, SentenceClass, classify_sentences, correct_flagged, filter_actions
from .errors import EmptyInputError, HierarchyValidationError, SurgNarrError
from .evaluation import (
    JudgeVerdict,
    NarrationArtifactDoc,
    compute_win_rate,
    judge_pairwise,
    phase_correctness,
)
from .hierarchy import (
    HierarchicalRecord,
    SplitManifest,
    assemble_record,
    load_metadata,
    propose_steps,
    split_dataset,
    validate_record,
)
from .interleave import MODES, build_sequence, build_sequence_v1, deserialize, serialize
from .stream import (
    CLOCK_MODES,
    ExternalNarrationModel,
    NarrationModel,
    NgramNarrationModel,
    NullModel,
    ReplayModel,
    replay_mismatches,
    simulate,
)
from .transcript import Transcript, flag_low_confidence, load_asr

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
MANIFEST_SCHEMA = "surgnarr.manifest/1"
STAGES = ("parsed", "corrected", "filtered", "hierarchized", "interleaved")
VARIANTS = ("eq2", "v1")
MODELS = ("replay", "null", "ngram", "external")
CLIENT_KINDS = ("mock", "external")
_MANIFEST_FLUSH_EVERY = 50


# ----------------------------------------------------------------------- config


@dataclass
class PipelineConfig:
    asr_dir: Path = Path("data/asr")
    meta_dir: Path = Path("data/meta")
    output_dir: Path = Path("out")
    fps: float = 2.0
    stride_k: int = 1
    threshold: float = -0.15
    conditioning_mode: str = "title_only"
    start_offset: float = 0.0
    variant: str = "eq2"
    split_ratio: float = 0.8
    seed: int = 0
    client: str = "mock"
    judge: str = "mock"
    cache_dir: Path | None = None
    max_in_flight: int = 4
    retries: int = 3
    backoff: float = 0.5
    workers: int = 4
    clock_mode: str = "as_fast_as_possible"
    version: int = CONFIG_VERSION

    def __post_init__(self) -> None:
        for name in ("asr_dir", "meta_dir", "output_dir", "cache_dir"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, Path):
                setattr(self, name, Path(value))
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.version != CONFIG_VERSION:
            problems.append(f"unsupported config version {self.version}")
        if not self.fps > 0:
            problems.append("fps must be > 0")
        if not (isinstance(self.stride_k, int) and self.stride_k >= 1):
            problems.append("stride_k must be an integer >= 1")
        if self.threshold > 0:
            problems.append("threshold is a log-probability and must be <= 0")
        if self.conditioning_mode not in MODES:
            problems.append(f"conditioning_mode must be one of {MODES}")
        if self.start_offset < 0:
            problems.append("start_offset must be >= 0")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if not 0 < self.split_ratio < 1:
            problems.append("split_ratio must be in (0, 1)")
        if self.client not in CLIENT_KINDS or self.judge not in CLIENT_KINDS:
            problems.append(f"client and judge must be one of {CLIENT_KINDS}")
        for name in ("max_in_flight", "workers"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.retries < 0 or self.backoff < 0:
            problems.append("retries and backoff must be >= 0")
        if self.clock_mode not in CLOCK_MODES:
            problems.append(f"clock_mode must be one of {CLOCK_MODES}")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    @property
    def resolved_cache_dir(self) -> Path:
        return self.cache_dir if self.cache_dir is not None else self.output_dir / "cache"

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, Path):
                out[k] = str(v)
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        data = yaml.safe_load(Path(path).read_text("utf-8")) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(data)


# ------------------------------------------------------------------------- io


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def stage_key(**parts: Any) -> str:
    return sha256_bytes(json.dumps(parts, sort_keys=True, default=str).encode("utf-8"))


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def atomic_write(path: Path, text: str) -> str:
    """Write ``text`` via a temp file and rename; returns the content hash."""
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode("utf-8")
    with tempfile.NamedTemporaryFile(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False) as fh:
        fh.write(data)
    os.replace(fh.name, path)
    return sha256_bytes(data)


def file_hash(path: Path) -> str | None:
    return sha256_bytes(path.read_bytes()) if path.exists() else None


@dataclass
class Layout:
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    def curated(self, vid: str) -> Path:
        return self.root / "curated" / f"{vid}.json"

    def record(self, vid: str) -> Path:
        return self.root / "records" / f"{vid}.json"

    def sequence(self, variant: str, vid: str) -> Path:
        return self.root / "sequences" / variant / f"{vid}.seq.txt"

    def sequence_meta(self, variant: str, vid: str) -> Path:
        return self.root / "sequences" / variant / f"{vid}.meta.json"

    @property
    def split(self) -> Path:
        return self.root / "split.json"

    def stream_report(self, model: str, vid: str) -> Path:
        return self.root / "stream" / model / f"{vid}.report.json"

    def stream_timing(self, model: str, vid: str) -> Path:
        return self.root / "timing" / model / f"{vid}.timing.json"

    def narration(self, model: str, vid: str) -> Path:
        return self.root / "narrations" / model / f"{vid}.json"

    @property
    def narrations(self) -> Path:
        return self.root / "narrations"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name


class Manifest:
    """Per-video stage status and artifact hashes. Mutated only by the command's main thread."""

    def __init__(self, data: dict[str, Any] | None = None) -> None:
        self.data = data or {"schema": MANIFEST_SCHEMA, "videos": {}, "split": None}

    @classmethod
    def load(cls, path: Path) -> Manifest:
        if not path.exists():
            return cls()
        data = json.loads(path.read_text("utf-8"))
        if data.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"{path}: not a pipeline manifest")
        return cls(data)

    def save(self, path: Path) -> None:
        self.data["videos"] = dict(sorted(self.data["videos"].items()))
        atomic_write(path, dumps(self.data))

    def video(self, vid: str) -> dict[str, Any]:
        return self.data["videos"].setdefault(vid, {"stage": None, "hashes": {}, "keys": {}})

    def stage(self, vid: str) -> str | None:
        return self.data["videos"].get(vid, {}).get("stage")

    def advance(self, vid: str, stage: str) -> None:
        """Move ``vid`` forward to ``stage``; never backwards (freshness is tracked by stage keys)."""
        if not self.at_least(vid, stage):
            self.video(vid)["stage"] = stage

    def at_least(self, vid: str, stage: str) -> bool:
        current = self.stage(vid)
        return current is not None and STAGES.index(current) >= STAGES.index(stage)


@dataclass
class StageResult:
    command: str
    processed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    warnings: dict[str, list[str]] = field(default_factory=dict)
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "processed": sorted(self.processed),
            "skipped": sorted(self.skipped),
            "failures": dict(sorted(self.failures.items())),
            "warnings": dict(sorted(self.warnings.items())),
            "details": self.details,
        }

    def summary(self) -> str:
        lines = [
            f"{self.command}: {len(self.processed)} processed, {len(self.skipped)} skipped, "
            f"{len(self.failures)} failed"
        ]
        for vid, err in sorted(self.failures.items()):
            lines.append(f"  FAILED {vid}: {err}")
        for vid, warns in sorted(self.warnings.items()):
            for w in warns:
                lines.append(f"  warning {vid}: {w}")
        for key, value in self.details.items():
            if isinstance(value, (str, int, float)):
                lines.append(f"  {key}: {value}")
        return "\n".join(lines)


def _write_reports(layout: Layout, result: StageResult) -> None:
    atomic_write(layout.report(f"{result.command}.json"), dumps(result.to_dict()))
    atomic_write(layout.report(f"{result.command}.txt"), result.summary() + "\n")


def _client(kind: str, config: PipelineConfig) -> LanguageModelClient:
    return make_client(kind, cache_dir=config.resolved_cache_dir / kind)


def _client_identity(kind: str) -> str:
    if kind == "external":
        return "external:" + os.environ.get("SURGNARR_LLM_MODEL", "gpt-4o")
    return kind


def _run_pool(
    config: PipelineConfig,
    items: list[str],
    work: Callable[[str], Any],
    on_done: Callable[[str, Any, BaseException | None], None],
    flush: Callable[[], None],
) -> None:
    """Run ``work`` per video in a bounded pool; ``on_done`` runs on the calling thread only."""
    done = 0
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = {pool.submit(work, vid): vid for vid in items}
        for fut in as_completed(futures):
            vid = futures[fut]
            exc = fut.exception()
            on_done(vid, None if exc else fut.result(), exc)
            done += 1
            if done % _MANIFEST_FLUSH_EVERY == 0:
                flush()


# ---------------------------------------------------------------------- curate


def curate_video(
    path: Path, config: PipelineConfig, client: LanguageModelClient
) -> tuple[Transcript, dict[str, Any]]:
    """parse -> flag -> correct -> classify -> filter for one ASR document."""
    transcript = load_asr(path)
    flagged = flag_low_confidence(transcript, config.threshold)
    corrected, rewrites = correct_flagged(
        transcript, flagged, client,
        max_in_flight=config.max_in_flight, retries=config.retries, backoff=config.backoff,
    )
    classes = classify_sentences(
        corrected, client,
        max_in_flight=config.max_in_flight, retries=config.retries, backoff=config.backoff,
    )
    filtered = filter_actions(corrected, classes)
    doc = {
        "schema": "surgnarr.curated/1",
        "video_id": transcript.video_id,
        "n_sentences": len(transcript.sentences),
        "flagged": sorted(flagged),
        "rewrites": [r.to_dict() for r in rewrites],
        "rejected": sorted(r.sentence_id for r in rewrites if not r.accepted),
        "classes": {sid: c.value for sid, c in sorted(classes.items())},
        "corrected": corrected.to_dict(),
        "filtered": filtered.to_dict(),
    }
    return filtered, doc


def cmd_curate(config: PipelineConfig) -> StageResult:
    layout = Layout(config.output_dir)
    if not config.asr_dir.is_dir():
        raise FileNotFoundError(f"ASR directory not found: {config.asr_dir}")
    manifest = Manifest.load(layout.manifest)
    client = _client(config.client, config)
    prompts = {n: load_prompt(n).version for n in ("correct", "classify")}
    result = StageResult("curate")

    todo: dict[str, tuple[Path, str]] = {}
    for path in sorted(config.asr_dir.glob("*.json")):
        vid = path.stem
        key = stage_key(
            asr=file_hash(path), threshold=config.threshold,
            client=_client_identity(config.client), prompts=prompts,
        )
        entry = manifest.data["videos"].get(vid)
        out = layout.curated(vid)
        if (
            entry
            and entry["keys"].get("curate") == key
            and manifest.at_least(vid, "filtered")
            and file_hash(out) == entry["hashes"].get("curated")
        ):
            result.skipped.append(vid)
        else:
            todo[vid] = (path, key)

    def work(vid: str) -> tuple[str, dict[str, Any]]:
        _, doc = curate_video(todo[vid][0], config, client)
        return atomic_write(layout.curated(vid), dumps(doc)), doc

    def on_done(vid: str, value: Any, exc: BaseException | None) -> None:
        if exc is not None:
            if not isinstance(exc, (SurgNarrError, ValueError, OSError)):
                raise exc
            logger.error("curate %s failed: %s", vid, exc)
            result.failures[vid] = f"{type(exc).__name__}: {exc}"
            return
        digest, doc = value
        entry = manifest.video(vid)
        manifest.advance(vid, "filtered")
        entry["keys"]["curate"] = todo[vid][1]
        entry["hashes"]["curated"] = digest
        entry["quality"] = {"flagged": doc["flagged"], "rewrite_rejected": doc["rejected"]}
        result.processed.append(vid)

    _run_pool(config, sorted(todo), work, on_done, lambda: manifest.save(layout.manifest))
    manifest.save(layout.manifest)
    if result.failures:
        atomic_write(layout.report("curate_failures.json"), dumps(result.failures))
    _write_reports(layout, result)
    return result


# ----------------------------------------------------------------------- build


def load_curated(layout: Layout, vid: str) -> Transcript:
    path = layout.curated(vid)
    if not path.exists():
        raise FileNotFoundError(f"{vid}: curated transcript missing; run `curate` first")
    return Transcript.from_dict(json.loads(path.read_text("utf-8"))["filtered"])


def build_video(
    vid: str, config: PipelineConfig, client: LanguageModelClient, layout: Layout
) -> tuple[HierarchicalRecord, dict[str, str], list[str]]:
    transcript = load_curated(layout, vid)
    meta_path = config.meta_dir / f"{vid}.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{vid}: metadata missing at {meta_path}")
    meta = load_metadata(meta_path)
    incidents: list[str] = []
    steps = propose_steps(
        transcript.sentences, client, meta.phases,
        incidents=incidents, retries=config.retries, backoff=config.backoff,
    )
    record = assemble_record(transcript, meta.phases, steps, meta.title, meta.meta_type)
    hashes = {"record": atomic_write(layout.record(vid), dumps(record.to_dict()))}
    variants = ["eq2"] + (["v1"] if config.variant == "v1" else [])
    for variant in variants:
        builder = build_sequence_v1 if variant == "v1" else build_sequence
        seq = builder(record, config.fps, config.stride_k, config.conditioning_mode, config.start_offset)
        hashes[f"sequence_{variant}"] = atomic_write(layout.sequence(variant, vid), serialize(seq))
        atomic_write(layout.sequence_meta(variant, vid), dumps(seq.metadata()))
    return record, hashes, incidents


def load_records(layout: Layout, vids: list[str]) -> list[HierarchicalRecord]:
    return [HierarchicalRecord.from_dict(json.loads(layout.record(v).read_text("utf-8"))) for v in vids]


def write_split(config: PipelineConfig, layout: Layout, manifest: Manifest) -> SplitManifest | None:
    vids = sorted(v for v in manifest.data["videos"] if layout.record(v).exists() and manifest.at_least(v, "hierarchized"))
    if not vids:
        return None
    split = split_dataset(load_records(layout, vids), config.split_ratio, config.seed)
    digest = atomic_write(layout.split, dumps(split.to_dict()))
    manifest.data["split"] = {"path": "split.json", "hash": digest}
    return split


def cmd_build(config: PipelineConfig) -> StageResult:
    layout = Layout(config.output_dir)
    manifest = Manifest.load(layout.manifest)
    result = StageResult("build")
    ready = sorted(v for v in manifest.data["videos"] if manifest.at_least(v, "filtered"))
    if not ready:
        raise FileNotFoundError("no curated videos in manifest; run `curate` first")
    client = _client(config.client, config)
    params = dict(
        fps=config.fps, stride_k=config.stride_k, mode=config.conditioning_mode,
        start=config.start_offset, variant=config.variant,
        client=_client_identity(config.client), prompt=load_prompt("steps").version,
    )

    todo: dict[str, str] = {}
    for vid in ready:
        entry = manifest.video(vid)
        key = stage_key(
            curated=entry["hashes"].get("curated"),
            meta=file_hash(config.meta_dir / f"{vid}.json"),
            **params,
        )
        outputs_ok = all(
            file_hash(p) == entry["hashes"].get(h)
            for p, h in [(layout.record(vid), "record"), (layout.sequence("eq2", vid), "sequence_eq2")]
            + ([(layout.sequence("v1", vid), "sequence_v1")] if config.variant == "v1" else [])
        )
        if entry["keys"].get("build") == key and manifest.at_least(vid, "interleaved") and outputs_ok:
            result.skipped.append(vid)
        else:
            todo[vid] = key

    def work(vid: str) -> Any:
        return build_video(vid, config, client, layout)

    def on_done(vid: str, value: Any, exc: BaseException | None) -> None:
        entry = manifest.video(vid)
        if exc is not None:
            if not isinstance(exc, (SurgNarrError, ValueError, OSError)):
                raise exc
            logger.error("build %s failed: %s", vid, exc)
            result.failures[vid] = f"{type(exc).__name__}: {exc}"
            entry["keys"].pop("build", None)
            return
        _record, hashes, incidents = value
        entry["hashes"].update(hashes)
        entry["keys"]["build"] = todo[vid]
        manifest.advance(vid, "interleaved")
        entry["step_incidents"] = incidents
        if incidents:
            result.warnings[vid] = incidents
        result.processed.append(vid)

    _run_pool(config, sorted(todo), work, on_done, lambda: manifest.save(layout.manifest))
    split = write_split(config, layout, manifest)
    manifest.save(layout.manifest)
    if split is not None:
        result.details["split"] = {k: list(v) for k, v in sorted(split.strata.items())}
        result.details["train"] = len(split.train)
        result.details["test"] = len(split.test)
        for w in split.warnings:
            result.warnings.setdefault("split", []).append(w)
    if result.failures:
        atomic_write(layout.report("build_failures.json"), dumps(result.failures))
    _write_reports(layout, result)
    return result


def cmd_split(config: PipelineConfig) -> StageResult:
    layout = Layout(config.output_dir)
    manifest = Manifest.load(layout.manifest)
    split = write_split(config, layout, manifest)
    if split is None:
        raise FileNotFoundError("no records to split; run `build` first")
    manifest.save(layout.manifest)
    result = StageResult("split", processed=list(split.train + split.test))
    result.details = {
        "strata": {k: list(v) for k, v in sorted(split.strata.items())},
        "train": len(split.train),
        "test": len(split.test),
    }
    _write_reports(layout, result)
    return result


def cmd_validate(config: PipelineConfig, paths: list[Path] | None = None) -> StageResult:
    """Re-check record documents (all built records, or the given files)."""
    layout = Layout(config.output_dir)
    if not paths:
        paths = sorted((layout.root / "records").glob("*.json"))
    if not paths:
        raise FileNotFoundError("no record documents to validate")
    result = StageResult("validate")
    for path in paths:
        try:
            record = HierarchicalRecord.from_dict(json.loads(Path(path).read_text("utf-8")))
            result.processed.append(record.video_id)
        except HierarchyValidationError as exc:
            result.failures[Path(path).stem] = "; ".join(str(v) for v in exc.violations)
        except (SurgNarrError, KeyError, TypeError, ValueError) as exc:
            result.failures[Path(path).stem] = f"{type(exc).__name__}: {exc}"
    if layout.root.is_dir():
        _write_reports(layout, result)
    return result


# -------------------------------------------------------------------- simulate


def _subset(layout: Layout, manifest: Manifest, subset: str) -> list[str]:
    built = sorted(v for v in manifest.data["videos"] if manifest.at_least(v, "interleaved"))
    if subset == "all":
        return built
    if not layout.split.exists():
        raise FileNotFoundError("split manifest missing; run `build` or `split` first")
    split = SplitManifest.from_dict(json.loads(layout.split.read_text("utf-8")))
    wanted = set(split.train if subset == "train" else split.test)
    return [v for v in built if v in wanted]


def cmd_simulate(
    config: PipelineConfig,
    model: str,
    *,
    subset: str = "test",
    external_cmd: list[str] | None = None,
    model_name: str | None = None,
) -> StageResult:
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    layout = Layout(config.output_dir)
    manifest = Manifest.load(layout.manifest)
    vids = _subset(layout, manifest, subset)
    if not vids:
        raise FileNotFoundError(f"no interleaved sequences for subset {subset!r}; run `build` first")
    name = model_name or model
    result = StageResult(f"simulate-{name}")

    shared: NarrationModel | None = None
    if model == "null":
        shared = NullModel()
    elif model == "ngram":
        train = _subset(layout, manifest, "train") if subset != "train" else vids
        shared = NgramNarrationModel(load_records(layout, train or vids))
    elif model == "external":
        if not external_cmd:
            raise ValueError("--external-cmd is required for the external model")
        shared = ExternalNarrationModel(external_cmd, name=name)

    fixpoint: dict[str, bool] = {}
    try:
        for vid in vids:
            path = layout.sequence("eq2", vid)
            if not path.exists():
                result.failures[vid] = "sequence missing; run `build` first"
                continue
            seq = deserialize(path.read_text("utf-8"))
            runner = shared if shared is not None else ReplayModel(seq)
            runner.name = name
            try:
                report = simulate(seq, runner, config.clock_mode)
            except SurgNarrError as exc:
                result.failures[vid] = f"{type(exc).__name__}: {exc}"
                continue
            atomic_write(layout.stream_report(name, vid), dumps(report.to_dict()))
            atomic_write(layout.stream_timing(name, vid), dumps(report.timing_dict()))
            doc = NarrationArtifactDoc.from_report(report)
            atomic_write(layout.narration(name, vid), dumps(doc.to_dict()))
            if model == "replay":
                problems = replay_mismatches(seq, report)
                fixpoint[vid] = not problems
                if problems:
                    result.failures[vid] = "replay mismatch: " + "; ".join(problems)
            result.processed.append(vid)
    finally:
        if isinstance(shared, ExternalNarrationModel):
            shared.close()
    if fixpoint:
        result.details["replay_fixpoint"] = dict(sorted(fixpoint.items()))
    _write_reports(layout, result)
    return result


# -------------------------------------------------------------------- evaluate


def _load_narrations(root: Path) -> dict[str, dict[str, NarrationArtifactDoc]]:
    out: dict[str, dict[str, NarrationArtifactDoc]] = {}
    if not root.is_dir():
        return out
    for model_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        docs = {}
        for f in sorted(model_dir.glob("*.json")):
            doc = NarrationArtifactDoc.from_dict(json.loads(f.read_text("utf-8")))
            docs[doc.video_id] = doc
        out[model_dir.name] = docs
    return out


def cmd_evaluate(
    config: PipelineConfig,
    *,
    fixed_baseline: str | None = None,
    models: list[str] | None = None,
    narrations_dir: Path | None = None,
) -> StageResult:
    """Judge every candidate pair per video, aggregate win rates, score state tracking."""
    layout = Layout(config.output_dir)
    narrations = _load_narrations(narrations_dir or layout.narrations)
    if models:
        missing = [m for m in models if m not in narrations]
        if missing:
            raise FileNotFoundError(f"no narrations for model(s) {missing}; run `simulate` first")
        narrations = {m: narrations[m] for m in models}
    if fixed_baseline is not None:
        if fixed_baseline not in narrations:
            raise FileNotFoundError(f"no narrations for baseline {fixed_baseline!r}")
        pairs = [(m, fixed_baseline) for m in sorted(narrations) if m != fixed_baseline]
    else:
        pairs = list(itertools.combinations(sorted(narrations), 2))

    judge = _client(config.judge, config)
    result = StageResult("evaluate")
    reports = {}
    all_verdicts = 0
    for a, b in pairs:
        verdicts: list[JudgeVerdict] = []
        for vid in sorted(set(narrations[a]) & set(narrations[b])):
            try:
                gt = load_curated(layout, vid)
            except FileNotFoundError as exc:
                result.failures[vid] = str(exc)
                continue
            rng = random.Random(f"{config.seed}:{a}:{b}:{vid}")
            verdicts.append(
                judge_pairwise(gt, narrations[a][vid], narrations[b][vid], judge, rng,
                               retries=config.retries, backoff=config.backoff)
            )
        if not verdicts:
            continue
        all_verdicts += len(verdicts)
        report = compute_win_rate(verdicts)
        reports[f"{a}__vs__{b}"] = report.to_dict()
        atomic_write(layout.eval_dir / "verdicts" / f"{a}__vs__{b}.json",
                     dumps([v.to_dict() for v in verdicts]))
        atomic_write(layout.eval_dir / "winrate" / f"{a}__vs__{b}.json", dumps(report.to_dict()))
    if all_verdicts == 0:
        raise EmptyInputError("no verdicts produced: need narrations from at least two models on shared videos")

    table: dict[str, dict[str, Any]] = {}
    for model_name, docs in sorted(narrations.items()):
        for vid, doc in sorted(docs.items()):
            if not layout.record(vid).exists():
                continue
            record = load_records(layout, [vid])[0]
            pc = phase_correctness(doc, record, fps=config.fps, stride_k=config.stride_k)
            table.setdefault(model_name, {})[vid] = pc.to_dict()
    atomic_write(layout.eval_dir / "phase_correctness.json", dumps(table))

    lines = ["pairwise win rates (judge: %s)" % config.judge]
    for key, r in reports.items():
        lines.append(
            f"  {r['model_a']} vs {r['model_b']}: {r['win_rate_a']:.1f} / {r['win_rate_b']:.1f} "
            f"(n={r['n_comparisons']}, ties={r['ties']})"
        )
    lines.append("phase correctness (mean accuracy, videos fully matched)")
    for model_name, per_video in table.items():
        accs = [v["accuracy"] for v in per_video.values()]
        full = sum(v["matched_video"] for v in per_video.values())
        lines.append(f"  {model_name}: {sum(accs) / len(accs):.3f}, {full}/{len(accs)}")
    atomic_write(layout.eval_dir / "report.txt", "\n".join(lines) + "\n")
    result.processed = sorted(reports)
    result.details["win_rates"] = reports
    _write_reports(layout, result)
    result.details["text"] = "\n".join(lines)
    return result
