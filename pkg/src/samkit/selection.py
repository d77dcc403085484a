"""Expert selection: domain similarity, sampling evaluation, economic set
combination and k-means target splits."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DegenerateEmbedding,
    DimMismatch,
    EmptyInput,
    EmptyIntersection,
    FormatError,
    InvalidValue,
    IoError,
    TooFewExperts,
    TooFewPoints,
)
from .ner_eval import PredictionSet, ensemble_vote, majority_threshold, micro_f1

logger = logging.getLogger(__name__)

STRATEGIES = ("domain_similarity", "sampling_evaluation", "eco_mode1", "eco_mode2", "eco_mode3")


@dataclass
class ExpertRecord:
    id: str
    domain_label: str = ""
    delta_path: str = ""
    embedding_path: str | None = None
    embedding: np.ndarray | None = None
    similarity_score: float | None = None
    sampling_f1: float | None = None


@dataclass
class SelectionConfig:
    m: int = 3
    k: int = 10
    seed: int = 0

    def validate(self, n_experts: int | None = None) -> None:
        if self.m < 1:
            raise InvalidValue("m must be >= 1")
        if self.k < 1:
            raise InvalidValue("k must be >= 1")
        if n_experts is not None and self.m > n_experts:
            raise TooFewExperts(f"m={self.m} but only {n_experts} experts")


@dataclass
class SelectionResult:
    strategy: str
    ranked: list[tuple[str, float]]
    all_scores: list[tuple[str, float]] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [eid for eid, _ in self.ranked]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.ranked]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "selected": [{"id": e, "score": s} for e, s in self.ranked],
            "ranking": [{"id": e, "score": s} for e, s in self.all_scores],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SelectionResult":
        try:
            return cls(
                doc["strategy"],
                [(d["id"], float(d["score"])) for d in doc["selected"]],
                [(d["id"], float(d["score"])) for d in doc.get("ranking", [])],
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed selection document: {exc}") from exc


def _as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidValue(f"embedding must be a non-empty vector, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidValue("embedding contains non-finite values")
    return arr


def centroid(embeddings: Sequence) -> np.ndarray:
    if len(embeddings) == 0:
        raise EmptyInput("cannot take the centroid of no embeddings")
    vecs = [_as_vector(e) for e in embeddings]
    dims = {v.size for v in vecs}
    if len(dims) > 1:
        raise DimMismatch(f"embeddings have mixed dimensions {sorted(dims)}")
    return np.mean(np.stack(vecs), axis=0)


def cosine_similarity(a, b) -> float:
    a, b = _as_vector(a), _as_vector(b)
    if a.size != b.size:
        raise DimMismatch(f"dimension {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateEmbedding("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def _rank(scores: Mapping[str, float]) -> list[tuple[str, float]]:
    # descending score, ties by id ascending
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def _top(strategy: str, scores: Mapping[str, float], m: int) -> SelectionResult:
    if m < 1:
        raise InvalidValue("m must be >= 1")
    if m > len(scores):
        raise TooFewExperts(f"asked for {m} experts, only {len(scores)} available")
    ranking = _rank(scores)
    return SelectionResult(strategy, ranking[:m], ranking)


def rank_by_domain_similarity(target_embeddings: Sequence, experts: Sequence[ExpertRecord], m: int) -> SelectionResult:
    h_t = centroid(target_embeddings)
    scores = {}
    for e in experts:
        if e.embedding is None:
            raise InvalidValue(f"expert {e.id!r} has no domain embedding")
        scores[e.id] = cosine_similarity(h_t, e.embedding)
        e.similarity_score = scores[e.id]
    return _top("domain_similarity", scores, m)


def sample_instances(corpus: Sequence, k: int, seed: int) -> list:
    if len(corpus) == 0:
        raise EmptyInput("cannot sample from an empty corpus")
    if k < 1:
        raise InvalidValue("k must be >= 1")
    if k >= len(corpus):
        return list(corpus)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(corpus), size=k, replace=False)
    return [corpus[i] for i in idx]


def build_pseudo_labels(per_expert_predictions: Sequence[PredictionSet], n_experts: int | None = None) -> PredictionSet:
    """Strict-majority vote over one instance's expert predictions."""
    if not per_expert_predictions:
        raise EmptyInput("no expert predictions")
    n = len(per_expert_predictions) if n_experts is None else n_experts
    if n != len(per_expert_predictions):
        raise InvalidValue(f"n_experts={n} but {len(per_expert_predictions)} prediction sets given")
    return ensemble_vote(per_expert_predictions, majority_threshold(n))


def rank_by_sampling_eval(
    experts: Sequence[ExpertRecord],
    predictions: Mapping[str, Sequence[PredictionSet]],
    m: int,
) -> SelectionResult:
    """Score experts by micro-F1 against majority-vote pseudo-labels.

    ``predictions`` maps expert id to that expert's predictions on the
    sampled instances, all lists aligned by position.
    """
    ids = [e.id for e in experts]
    if not ids:
        raise EmptyInput("no experts")
    missing = [i for i in ids if i not in predictions]
    if missing:
        raise InvalidValue(f"no predictions for experts {missing}")
    n_inst = {len(predictions[i]) for i in ids}
    if len(n_inst) != 1:
        raise InvalidValue("experts were evaluated on different numbers of instances")
    pseudo = [
        build_pseudo_labels([predictions[i][j] for i in ids], len(ids)) for j in range(n_inst.pop())
    ]
    scores = {}
    for e in experts:
        scores[e.id] = micro_f1(predictions[e.id], pseudo).f1
        e.sampling_f1 = scores[e.id]
    return _top("sampling_evaluation", scores, m)


def _minmax(scores: Sequence[tuple[str, float]]) -> dict[str, float]:
    vals = np.array([s for _, s in scores], dtype=np.float64)
    lo, hi = vals.min(), vals.max()
    if hi == lo:
        return {e: 1.0 for e, _ in scores}
    return {e: float((s - lo) / (hi - lo)) for e, s in scores}


def eco_combine(ds: SelectionResult, se: SelectionResult, mode: int, m: int) -> SelectionResult:
    """Collapse the two selections into one expert set.

    Every mode scores experts by the mean of the two min-max normalized
    strategy scores; modes differ in which experts they keep and in order.
    """
    ds_all = ds.all_scores or ds.ranked
    se_all = se.all_scores or se.ranked
    if {e for e, _ in ds_all} != {e for e, _ in se_all}:
        raise InvalidValue("selections cover different expert universes")
    nd, ns = _minmax(ds_all), _minmax(se_all)
    combined = {e: (nd[e] + ns[e]) / 2 for e in nd}
    ranking = _rank(combined)

    if mode == 1:
        se_ids = set(se.ids)
        chosen = [e for e in ds.ids if e in se_ids]
        if not chosen:
            raise EmptyIntersection(f"selections {ds.ids} and {se.ids} do not intersect")
    elif mode == 2:
        if m > len(combined):
            raise TooFewExperts(f"asked for {m} experts, only {len(combined)} available")
        chosen = [e for e, _ in ranking[:m]]
    elif mode == 3:
        chosen = []
        for pair in zip_longest_ids(ds.ids, se.ids):
            for e in pair:
                if e is not None and e not in chosen:
                    chosen.append(e)
        chosen = chosen[:m]
    else:
        raise InvalidValue(f"eco mode must be 1, 2 or 3, got {mode}")
    return SelectionResult(f"eco_mode{mode}", [(e, combined[e]) for e in chosen], ranking)


def zip_longest_ids(a: Sequence[str], b: Sequence[str]):
    for i in range(max(len(a), len(b))):
        yield (a[i] if i < len(a) else None, b[i] if i < len(b) else None)


def eco_combine_with_fallback(ds: SelectionResult, se: SelectionResult, mode: int, m: int) -> SelectionResult:
    try:
        return eco_combine(ds, se, mode, m)
    except EmptyIntersection:
        logger.warning("eco mode1 intersection is empty; falling back to mode3")
        return eco_combine(ds, se, 3, m)


# --- clustering ------------------------------------------------------------


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            # all remaining points coincide with a center; pick any unused point
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(x: np.ndarray, k: int, seed: int, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (labels, centers, objective history). Empty clusters are refilled
    with the point farthest from its center.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    history = []
    labels = np.zeros(len(x), dtype=int)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        cost = d2[np.arange(len(x)), labels]
        history.append(float(cost.sum()))
        cost = cost.copy()
        for c in range(k):
            if not (labels == c).any():
                far = int(cost.argmax())
                labels[far] = c
                cost[far] = -1.0
        new = np.array([x[labels == c].mean(axis=0) for c in range(k)])
        shift = float(np.abs(new - centers).max())
        centers = new
        if shift <= tol:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    final = d2.argmin(axis=1)
    if all((final == c).any() for c in range(k)):
        labels = final
    history.append(float(d2[np.arange(len(x)), labels].sum()))
    return labels, centers, history


def cluster_split(embeddings: Sequence, n_splits: int, seed: int) -> list[int]:
    if n_splits < 1:
        raise InvalidValue("n_splits must be >= 1")
    if n_splits > len(embeddings):
        raise TooFewPoints(f"{n_splits} splits requested for {len(embeddings)} points")
    x = np.stack([_as_vector(e) for e in embeddings])
    if n_splits == 1:
        return [0] * len(x)
    labels, _, _ = kmeans(x, n_splits, seed)
    return [int(l) for l in labels]


# --- registry / embedding files --------------------------------------------


def load_registry(path) -> list[ExpertRecord]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read registry {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"registry {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise FormatError("registry must be a JSON array")
    experts = []
    for item in doc:
        try:
            rec = ExpertRecord(
                id=str(item["id"]),
                domain_label=str(item.get("domain_label", "")),
                delta_path=str(item.get("delta_path", "")),
                embedding_path=item.get("embedding_path"),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise FormatError(f"malformed registry entry {item!r}") from exc
        for attr in ("delta_path", "embedding_path"):
            val = getattr(rec, attr)
            if val and not Path(val).is_absolute():
                setattr(rec, attr, str(path.parent / val))
        experts.append(rec)
    ids = [e.id for e in experts]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate expert ids in registry")
    return experts


def load_embeddings(path) -> list[np.ndarray]:
    """Read embeddings from JSON-lines ({"vector": [...]}) or a tensor archive
    holding an ``embeddings`` tensor of shape [n, dim]."""
    path = Path(path)
    if path.suffix in (".safetensors", ".st", ".bin"):
        from .tensor_store import load_tensor_archive

        tmap = load_tensor_archive(path)
        if "embeddings" not in tmap or tmap["embeddings"].ndim != 2:
            raise FormatError(f"{path}: expected an [n, dim] tensor named 'embeddings'")
        return [np.asarray(row, dtype=np.float64) for row in tmap["embeddings"]]
    vecs = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        vecs.append(_as_vector(json.loads(line)["vector"]))
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise FormatError(f"{path}:{lineno}: {exc}") from exc
    except FormatError:
        raise
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return vecs


def write_embeddings(vectors: Sequence, path, ids: Sequence[str] | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, v in enumerate(vectors):
            doc = {"vector": [float(x) for x in v]}
            if ids is not None:
                doc = {"id": ids[i], **doc}
            fh.write(json.dumps(doc) + "\n")
