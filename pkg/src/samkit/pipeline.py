"""End-to-end select -> merge -> infer -> ensemble -> evaluate orchestration.

Every stage reads and writes plain files under ``output_dir`` so stages can be
run separately from the command line.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import inference
from .errors import ConfigError, EmptyInput, SamError
from .inference import EndpointConfig, GenerationRequest, MockBackend, MockProfile, build_prompt
from .merge import MergeRecipe, merge_archives, weights_mode1, weights_mode2
from .ner_eval import (
    Instance,
    PredictionSet,
    ensemble_intersection,
    ensemble_union,
    micro_f1,
    parse_prediction,
    read_corpus,
    write_predictions,
)
from .selection import (
    ExpertRecord,
    SelectionConfig,
    SelectionResult,
    centroid,
    cluster_split,
    eco_combine_with_fallback,
    load_embeddings,
    load_registry,
    rank_by_domain_similarity,
    rank_by_sampling_eval,
    sample_instances,
)
from .tensor_store import apply_delta_archive

logger = logging.getLogger(__name__)

ENSEMBLES = ("union", "intersection", "ds_only", "se_only", "eco1", "eco2", "eco3")
WEIGHTINGS = ("uniform", "mode1", "mode2")


def derive_seed(root: int, stage: str) -> int:
    """Per-stage seed: root XOR the first 8 bytes of blake2b(stage)."""
    digest = hashlib.blake2b(stage.encode("utf-8"), digest_size=8).digest()
    return (root ^ int.from_bytes(digest, "little")) & 0xFFFFFFFFFFFFFFFF


@dataclass
class PipelineConfig:
    registry_path: str = ""
    target_corpus_path: str = ""
    output_dir: str = "samkit_out"
    base_model_path: str | None = None
    target_embeddings_path: str | None = None
    gold_path: str | None = None
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    merge: MergeRecipe = field(default_factory=MergeRecipe)
    ensemble: str = "union"
    weighting: str = "uniform"
    clustering: int | None = None
    seed: int = 0
    output_format: str = "json"
    entity_types: list[str] = field(default_factory=list)
    endpoint: dict = field(default_factory=dict)
    mock: bool = False
    mock_profiles: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.ensemble not in ENSEMBLES:
            raise ConfigError(f"ensemble must be one of {ENSEMBLES}, got {self.ensemble!r}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.clustering is not None and self.clustering < 1:
            raise ConfigError("clustering must be a positive number of splits")
        if not self.registry_path:
            raise ConfigError("registry_path is required")
        if not self.target_corpus_path:
            raise ConfigError("target_corpus_path is required")
        for attr in ("registry_path", "target_corpus_path", "base_model_path", "target_embeddings_path", "gold_path"):
            path = getattr(self, attr)
            if path and not Path(path).exists():
                raise ConfigError(f"{attr} does not exist: {path}")
        self.selection.validate()
        self.merge.validate()

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "selection" in doc:
            doc["selection"] = SelectionConfig(**doc["selection"])
        if "merge" in doc:
            doc["merge"] = MergeRecipe.from_dict(doc["merge"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)


class StageError(SamError):
    """A pipeline stage failed; keeps the stage name and the exit code of the cause."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 5)


class Pipeline:
    """Holds the loaded registry, corpus and endpoint for one configuration."""

    def __init__(self, config: PipelineConfig):
        config.validate()
        self.config = config
        self.out = Path(config.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.experts = load_registry(config.registry_path)
        if not self.experts:
            raise ConfigError("registry lists no experts")
        self.corpus = read_corpus(config.target_corpus_path)
        if not self.corpus:
            raise EmptyInput("target corpus is empty")
        self.endpoint = self._endpoint()

    def _endpoint(self) -> EndpointConfig:
        ep = dict(self.config.endpoint)
        token = os.environ.get("SAMKIT_AUTH_TOKEN")
        if token and not ep.get("auth_token"):
            ep["auth_token"] = token
        if self.config.mock:
            try:
                profiles = {eid: MockProfile(**doc) for eid, doc in self.config.mock_profiles.items()}
            except TypeError as exc:
                raise ConfigError(f"bad mock profile: {exc}") from exc
            ep["mode"] = "mock"
            ep["mock"] = MockBackend(self.corpus, profiles)
        try:
            return EndpointConfig(**ep)
        except TypeError as exc:
            raise ConfigError(f"bad endpoint settings: {exc}") from exc

    # --- helpers ---------------------------------------------------------

    def _expert_embeddings(self) -> None:
        for e in self.experts:
            if e.embedding is None:
                if not e.embedding_path:
                    raise ConfigError(f"expert {e.id!r} has no embedding_path")
                e.embedding = centroid(load_embeddings(e.embedding_path))

    def target_embeddings(self) -> list[np.ndarray]:
        if self.config.target_embeddings_path:
            vecs = load_embeddings(self.config.target_embeddings_path)
            if len(vecs) != len(self.corpus):
                raise ConfigError(f"{len(vecs)} target embeddings for {len(self.corpus)} corpus instances")
            return vecs
        return inference.embed(self.endpoint, [inst.text for inst in self.corpus])

    def predict(self, model: str, instances: Sequence[Instance]) -> list[PredictionSet]:
        fmt = self.config.output_format
        reqs = [GenerationRequest(build_prompt(inst, self.config.entity_types, fmt), model=model) for inst in instances]
        outputs = inference.batch_generate(self.endpoint, reqs)
        preds = []
        for inst, text in zip(instances, outputs):
            if isinstance(text, Exception):
                raise text
            preds.append(parse_prediction(text, fmt, inst.instance_id))
        return preds

    def _write_json(self, path: Path, doc) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def clusters(self) -> list[list[int]]:
        """Corpus index groups: one group, or one per k-means split of the target embeddings."""
        n_splits = self.config.clustering
        if not n_splits or n_splits == 1:
            return [list(range(len(self.corpus)))]
        labels = cluster_split(self.target_embeddings(), n_splits, derive_seed(self.config.seed, "cluster"))
        self._write_json(self.out / "clusters.json", {"assignments": labels})
        return [[i for i, l in enumerate(labels) if l == c] for c in range(n_splits)]

    def _group_dir(self, group: int, n_groups: int) -> Path:
        return self.out if n_groups == 1 else self.out / f"cluster{group}"

    # --- stages ------------------------------------------------------------

    def select(self) -> list[tuple[SelectionResult, SelectionResult]]:
        cfg = self.config
        cfg.selection.validate(len(self.experts))
        self._expert_embeddings()
        target_emb = self.target_embeddings()
        groups = self.clusters()
        results = []
        for g, idx in enumerate(groups):
            instances = [self.corpus[i] for i in idx]
            ds = rank_by_domain_similarity([target_emb[i] for i in idx], self.experts, cfg.selection.m)
            if cfg.selection.k >= len(instances):
                logger.warning("k=%d >= %d target instances; evaluating on all of them", cfg.selection.k, len(instances))
            sampled = sample_instances(instances, cfg.selection.k, derive_seed(cfg.seed, f"sample:{g}"))
            preds = {e.id: self.predict(e.id, sampled) for e in self.experts}
            se = rank_by_sampling_eval(self.experts, preds, cfg.selection.m)
            d = self._group_dir(g, len(groups))
            self._write_json(d / "ds_selection.json", ds.to_dict())
            self._write_json(d / "se_selection.json", se.to_dict())
            results.append((ds, se))
        return results

    def load_selections(self) -> list[tuple[SelectionResult, SelectionResult]]:
        n = self.config.clustering or 1
        marker = self.out / "clusters.json"
        if not self.config.clustering and marker.exists() and not (self.out / "ds_selection.json").exists():
            # a clustered 'select' ran in this directory
            n = max(json.loads(marker.read_text())["assignments"]) + 1
        out = []
        for g in range(n):
            d = self._group_dir(g, n)
            try:
                ds = SelectionResult.from_dict(json.loads((d / "ds_selection.json").read_text()))
                se = SelectionResult.from_dict(json.loads((d / "se_selection.json").read_text()))
            except OSError as exc:
                raise ConfigError(f"selection files missing in {d}; run 'select' first") from exc
            out.append((ds, se))
        return out

    def _weights(self, sel: SelectionResult) -> list[float]:
        if self.config.weighting == "mode1":
            return weights_mode1(len(sel.ids))
        if self.config.weighting == "mode2":
            return weights_mode2(sel.scores)
        return [1.0] * len(sel.ids)

    def model_sets(self, ds: SelectionResult, se: SelectionResult) -> dict[str, SelectionResult]:
        """Which merged models to build: DS and SE, or one economic set."""
        ens = self.config.ensemble
        if ens.startswith("eco"):
            return {"eco": eco_combine_with_fallback(ds, se, int(ens[-1]), self.config.selection.m)}
        if ens == "ds_only":
            return {"ds": ds}
        if ens == "se_only":
            return {"se": se}
        return {"ds": ds, "se": se}

    def merge(self, selections=None) -> list[dict[str, Path]]:
        cfg = self.config
        selections = selections if selections is not None else self.load_selections()
        by_id = {e.id: e for e in self.experts}
        built = []
        for g, (ds, se) in enumerate(selections):
            d = self._group_dir(g, len(selections))
            d.mkdir(parents=True, exist_ok=True)
            reports, paths = {}, {}
            for name, sel in self.model_sets(ds, se).items():
                weights = self._weights(sel)
                recipe = MergeRecipe(
                    cfg.merge.method,
                    cfg.merge.density,
                    cfg.merge.drop_rate,
                    cfg.merge.scale,
                    weights,
                    derive_seed(cfg.seed, "merge") if not cfg.merge.seed else cfg.merge.seed,
                )
                delta_paths = [by_id[e].delta_path for e in sel.ids]
                out_path = d / f"merged_{name}.safetensors"
                report = merge_archives(recipe, delta_paths, out_path, {"experts": json.dumps(sel.ids)})
                doc = report.to_dict()
                doc["experts"] = sel.ids
                reports[name] = doc
                paths[name] = out_path
                if cfg.base_model_path:
                    apply_delta_archive(cfg.base_model_path, out_path, d / f"model_{name}.safetensors")
                if self.endpoint.mode == "mock":
                    self.endpoint.mock.add_alias(self._model_name(g, name, len(selections)), sel.ids)
            self._write_json(d / "merge_report.json", reports)
            built.append(paths)
        return built

    def _model_name(self, group: int, name: str, n_groups: int) -> str:
        return f"merged_{name}" if n_groups == 1 else f"cluster{group}/merged_{name}"

    def infer(self, built: list[dict[str, Path]]) -> list[PredictionSet]:
        groups = self.clusters() if len(built) > 1 else [list(range(len(self.corpus)))]
        final: dict[int, PredictionSet] = {}
        for g, idx in enumerate(groups):
            instances = [self.corpus[i] for i in idx]
            d = self._group_dir(g, len(groups))
            outputs = {}
            for name in built[g]:
                outputs[name] = self.predict(self._model_name(g, name, len(groups)), instances)
                write_predictions(outputs[name], d / f"predictions_{name}.jsonl")
            if "ds" in outputs and "se" in outputs:
                combine = ensemble_intersection if self.config.ensemble == "intersection" else ensemble_union
                merged = [combine(a, b) for a, b in zip(outputs["ds"], outputs["se"])]
            else:
                merged = next(iter(outputs.values()))
            for i, p in zip(idx, merged):
                final[i] = p
        preds = [final[i] for i in range(len(self.corpus))]
        write_predictions(preds, self.out / "predictions.jsonl")
        return preds

    def golds(self) -> list[PredictionSet] | None:
        if self.config.gold_path:
            gold_corpus = read_corpus(self.config.gold_path)
            return [inst.gold or PredictionSet(inst.instance_id) for inst in gold_corpus]
        if all(inst.gold is not None for inst in self.corpus):
            return [inst.gold for inst in self.corpus]
        return None

    def evaluate(self, preds: list[PredictionSet]):
        golds = self.golds()
        if golds is None:
            return None
        report = micro_f1(preds, golds)
        self._write_json(self.out / "eval_report.json", report.to_dict())
        return report


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except SamError as exc:
        raise StageError(name, exc) from exc


def cmd_select(config: PipelineConfig) -> list[tuple[SelectionResult, SelectionResult]]:
    return _stage("select", lambda: Pipeline(config).select())


def cmd_merge(config: PipelineConfig) -> list[dict[str, Path]]:
    return _stage("merge", lambda: Pipeline(config).merge())


def cmd_run(config: PipelineConfig) -> dict:
    pipe = _stage("setup", Pipeline, config)
    selections = _stage("select", pipe.select)
    built = _stage("merge", pipe.merge, selections)
    preds = _stage("infer", pipe.infer, built)
    report = _stage("evaluate", pipe.evaluate, preds)
    return {"selections": selections, "models": built, "predictions": preds, "report": report}
