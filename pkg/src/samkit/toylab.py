"""Desk-scale testbed: synthetic NER domains, linear softmax token taggers as
experts, and the domain study that runs them through selection, merging and
scoring.

Token features are character trigrams of the token and its two neighbours,
hashed with 32-bit FNV-1a into ``feature_dim`` buckets.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DivergenceError, InvalidValue, ShapeMismatch
from .merge import MergeRecipe, merge
from .ner_eval import PredictionSet, ensemble_union, micro_f1
from .selection import ExpertRecord, centroid, rank_by_domain_similarity, rank_by_sampling_eval, sample_instances
from .tensor_store import DeltaSet, TensorMap, apply_delta, compute_delta

logger = logging.getLogger(__name__)

FNV_OFFSET = 0x811C9DC5
FNV_PRIME = 0x01000193
OUTSIDE = "O"


def fnv1a(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFF
    return h


@lru_cache(maxsize=200_000)
def _token_trigrams(token: str) -> tuple[str, ...]:
    padded = f"^{token.lower()}$"
    return tuple(padded[i : i + 3] for i in range(len(padded) - 2))


@lru_cache(maxsize=400_000)
def _hashed(position: str, token: str, dim: int) -> tuple[int, ...]:
    return tuple(fnv1a(f"{position}|{g}".encode("utf-8")) % dim for g in _token_trigrams(token))


def token_features(tokens: Sequence[str], dim: int) -> sp.csr_matrix:
    """Row i holds the L2-normalized hashed trigram counts of tokens i-1, i, i+1."""
    rows, cols = [], []
    padded = ["<s>", *tokens, "</s>"]
    for i in range(len(tokens)):
        for pos, tok in (("-1", padded[i]), ("0", padded[i + 1]), ("+1", padded[i + 2])):
            idx = _hashed(pos, tok, dim)
            rows.extend([i] * len(idx))
            cols.extend(idx)
    data = np.ones(len(rows), dtype=np.float32)
    mat = sp.csr_matrix((data, (rows, cols)), shape=(len(tokens), dim), dtype=np.float32)
    mat.sum_duplicates()
    norms = np.sqrt(np.asarray(mat.multiply(mat).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    return sp.csr_matrix(sp.diags(1.0 / norms) @ mat, dtype=np.float32)


def text_embedding(tokens: Sequence[str], dim: int = 256) -> np.ndarray:
    """Bag-of-words hashed embedding; the toy stand-in for a sentence encoder."""
    vec = np.zeros(dim)
    for tok in tokens:
        vec[fnv1a(f"w|{tok.lower()}".encode("utf-8")) % dim] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm else vec


# --- synthetic domains -----------------------------------------------------


@dataclass
class SyntheticDomainSpec:
    domain_id: str
    entity_types: list[str]
    lexicons: dict[str, list[str]]
    filler: list[str]
    instances: int = 300
    entity_density: float = 1.5
    seed: int = 0
    min_filler: int = 4
    max_filler: int = 10

    def validate(self) -> None:
        if not self.entity_types:
            raise InvalidValue(f"{self.domain_id}: at least one entity type required")
        for t in self.entity_types:
            if not self.lexicons.get(t):
                raise InvalidValue(f"{self.domain_id}: empty lexicon for type {t!r}")
        if not self.filler:
            raise InvalidValue(f"{self.domain_id}: empty filler vocabulary")
        if self.instances < 1:
            raise InvalidValue(f"{self.domain_id}: instances must be >= 1")
        if self.entity_density < 0:
            raise InvalidValue(f"{self.domain_id}: entity_density must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticDomainSpec":
        spec = cls(**doc)
        spec.validate()
        return spec


@dataclass
class ToyInstance:
    instance_id: str
    tokens: list[str]
    gold: PredictionSet

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class ToyDataset:
    instances: list[ToyInstance]
    # label set the data is annotated with; plays the role of the type list in an NER prompt
    entity_types: list[str] | None = None

    def types(self) -> list[str]:
        if self.entity_types is not None:
            return list(self.entity_types)
        return sorted({m.etype for inst in self.instances for m in inst.gold.mentions})

    def __len__(self) -> int:
        return len(self.instances)

    def golds(self) -> list[PredictionSet]:
        return [inst.gold for inst in self.instances]

    def __add__(self, other: "ToyDataset") -> "ToyDataset":
        return ToyDataset(self.instances + other.instances, sorted(set(self.types()) | set(other.types())))


def gen_synthetic_domain(spec: SyntheticDomainSpec, split: str = "train") -> ToyDataset:
    spec.validate()
    rng = np.random.default_rng([spec.seed, fnv1a(split.encode())])
    out = []
    for n in range(spec.instances):
        n_mentions = int(rng.poisson(spec.entity_density))
        n_fill = max(int(rng.integers(spec.min_filler, spec.max_filler + 1)), n_mentions - 1)
        fillers = [spec.filler[i] for i in rng.integers(len(spec.filler), size=n_fill)]
        # distinct gaps keep at least one filler token between consecutive mentions
        gaps = sorted(rng.choice(n_fill + 1, size=n_mentions, replace=False)) if n_mentions else []
        mentions = []
        for _ in range(n_mentions):
            etype = spec.entity_types[int(rng.integers(len(spec.entity_types)))]
            lex = spec.lexicons[etype]
            mentions.append((lex[int(rng.integers(len(lex)))], etype))
        tokens: list[str] = []
        gi = 0
        for pos in range(n_fill + 1):
            while gi < len(gaps) and gaps[gi] == pos:
                tokens.extend(mentions[gi][0].split())
                gi += 1
            if pos < n_fill:
                tokens.append(fillers[pos])
        iid = f"{spec.domain_id}-{split}-{n}"
        out.append(ToyInstance(iid, tokens, PredictionSet(iid, mentions)))
    return ToyDataset(out, [t.lower() for t in spec.entity_types])


def token_labels(inst: ToyInstance, label_list: Sequence[str]) -> list[int]:
    """Label each token by locating gold spans in the token sequence."""
    index = {t: i for i, t in enumerate(label_list)}
    outside = len(label_list)
    labels = [outside] * len(inst.tokens)
    for m in inst.gold.sorted_mentions():
        span = m.span.split()
        for start in range(len(inst.tokens) - len(span) + 1):
            if inst.tokens[start : start + len(span)] == span:
                labels[start : start + len(span)] = [index.get(m.etype, outside)] * len(span)
    return labels


F32_MAX = float(np.finfo(np.float32).max)

# --- taggers -----------------------------------------------------------------


@dataclass
class ToyTagger:
    W: np.ndarray
    b: np.ndarray
    label_list: list[str]

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float32)
        self.b = np.asarray(self.b, dtype=np.float32)
        if self.W.ndim != 2 or self.W.shape[1] != len(self.label_list) + 1 or self.b.shape != (self.W.shape[1],):
            raise ShapeMismatch(f"W {self.W.shape} / b {self.b.shape} do not fit {len(self.label_list)} labels + O")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise InvalidValue("tagger parameters must be finite")

    @property
    def feature_dim(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, label_list: Sequence[str], feature_dim: int = 2048, seed: int = 0, scale: float = 0.01) -> "ToyTagger":
        rng = np.random.default_rng(seed)
        n = len(label_list) + 1
        return cls(rng.normal(0, scale, (feature_dim, n)), np.zeros(n), list(label_list))

    def to_tensors(self) -> TensorMap:
        return TensorMap({"w": self.W, "b": self.b}, {"label_list": json.dumps(self.label_list)})

    @classmethod
    def from_tensors(cls, tmap: TensorMap, label_list: Sequence[str] | None = None) -> "ToyTagger":
        if label_list is None:
            label_list = json.loads(tmap.metadata["label_list"])
        return cls(np.array(tmap["w"]), np.array(tmap["b"]), list(label_list))

    def logits(self, feats: sp.csr_matrix) -> np.ndarray:
        return np.asarray(feats @ self.W) + self.b

    def equals(self, other: "ToyTagger") -> bool:
        return (
            self.label_list == other.label_list
            and np.array_equal(self.W, other.W)
            and np.array_equal(self.b, other.b)
        )


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _design(data: ToyDataset, label_list: Sequence[str], dim: int) -> tuple[sp.csr_matrix, np.ndarray]:
    mats, labels = [], []
    for inst in data.instances:
        if inst.tokens:
            mats.append(token_features(inst.tokens, dim))
            labels.extend(token_labels(inst, label_list))
    if not mats:
        return sp.csr_matrix((0, dim), dtype=np.float32), np.zeros(0, dtype=int)
    return sp.vstack(mats, format="csr"), np.asarray(labels)


def train_toy_tagger(
    data: ToyDataset,
    base: ToyTagger,
    epochs: int = 5,
    lr: float = 0.1,
    seed: int = 0,
    batch_size: int = 32,
    history: list | None = None,
) -> ToyTagger:
    """Mini-batch SGD on per-token softmax cross-entropy, starting from ``base``.

    The softmax runs over O plus the dataset's own entity types only, so the
    columns of labels the domain never annotates keep their base values. The
    loss of a batch is summed over its tokens, making ``lr`` a per-token step.
    Mean loss per epoch is appended to ``history`` when given.
    """
    if not lr > 0:
        raise InvalidValue("lr must be > 0")
    W, b = base.W.astype(np.float64), base.b.astype(np.float64)
    if epochs <= 0:
        return ToyTagger(base.W.copy(), base.b.copy(), list(base.label_list))
    X, y = _design(data, base.label_list, base.feature_dim)
    inactive = ~_label_mask(base.label_list, data.types())
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = X[idx]
            logits = np.asarray(xb @ W) + b
            logits[:, inactive] = -np.inf
            probs = _softmax(logits)
            yb = y[idx]
            total += float(-np.log(probs[np.arange(len(idx)), yb] + 1e-12).sum())
            probs[np.arange(len(idx)), yb] -= 1.0
            W -= lr * np.asarray(xb.T @ probs)
            b -= lr * probs.sum(axis=0)
        mean_loss = total / max(n, 1)
        if not math.isfinite(mean_loss) or not np.abs(W).max() < F32_MAX or not np.abs(b).max() < F32_MAX:
            raise DivergenceError(f"training diverged (loss {mean_loss}); lower the learning rate")
        if history is not None:
            history.append(mean_loss)
    return ToyTagger(W, b, list(base.label_list))


def _label_mask(label_list: Sequence[str], types: Sequence[str] | None) -> np.ndarray:
    """Boolean mask over label columns (O included) allowed for ``types``."""
    if types is None:
        return np.ones(len(label_list) + 1, dtype=bool)
    wanted = {t.lower() for t in types}
    return np.array([t in wanted for t in label_list] + [True])


def tag(
    tagger: ToyTagger, tokens: Sequence[str], instance_id: str = "", types: Sequence[str] | None = None
) -> PredictionSet:
    """Argmax label per token; maximal runs of one non-O label become mentions.

    ``types`` restricts the candidate labels, as the type list of a prompt would.
    """
    if not tokens:
        return PredictionSet(instance_id)
    logits = tagger.logits(token_features(tokens, tagger.feature_dim))
    logits[:, ~_label_mask(tagger.label_list, types)] = -np.inf
    pred = logits.argmax(axis=1)
    outside = len(tagger.label_list)
    mentions = []
    start = 0
    for i in range(1, len(tokens) + 1):
        if i == len(tokens) or pred[i] != pred[start]:
            if pred[start] != outside:
                mentions.append((" ".join(tokens[start:i]), tagger.label_list[pred[start]]))
            start = i
    return PredictionSet(instance_id, mentions)


def tag_dataset(tagger: ToyTagger, data: ToyDataset) -> list[PredictionSet]:
    return [tag(tagger, inst.tokens, inst.instance_id, data.entity_types) for inst in data.instances]


def export_delta(tagger: ToyTagger, base: ToyTagger, origin: str = "") -> DeltaSet:
    if tagger.label_list != base.label_list:
        raise ShapeMismatch("tagger and base use different label lists")
    return compute_delta(tagger.to_tensors(), base.to_tensors(), origin=origin)


def tagger_from_delta(base: ToyTagger, delta: TensorMap, scale: float = 1.0) -> ToyTagger:
    return ToyTagger.from_tensors(apply_delta(base.to_tensors(), delta, scale), base.label_list)


def evaluate(tagger: ToyTagger, data: ToyDataset) -> float:
    return micro_f1(tag_dataset(tagger, data), data.golds()).f1


# --- synthetic domain families ---------------------------------------------

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def _syllables(rng: np.random.Generator, n: int) -> list[str]:
    out = set()
    while len(out) < n:
        out.add(
            _CONSONANTS[rng.integers(len(_CONSONANTS))]
            + _VOWELS[rng.integers(len(_VOWELS))]
            + _CONSONANTS[rng.integers(len(_CONSONANTS))]
        )
    return sorted(out)


def _words(rng: np.random.Generator, syllables: list[str], n: int, max_tokens: int = 2) -> list[str]:
    out: set[str] = set()
    while len(out) < n:
        n_tok = int(rng.integers(1, max_tokens + 1))
        toks = ["".join(rng.choice(syllables, size=int(rng.integers(2, 4)))) for _ in range(n_tok)]
        out.add(" ".join(toks))
    return sorted(out)


def make_domain_family(
    n_sources: int = 4,
    n_targets: int = 2,
    seed: int = 0,
    shared_types: Sequence[str] = ("person", "location"),
    own_types: int = 2,
    lexicon_size: int = 40,
    filler_size: int = 60,
    instances: int = 300,
    entity_density: float = 1.5,
) -> tuple[list[SyntheticDomainSpec], list[SyntheticDomainSpec]]:
    """Build source domains and held-out targets that mix two sources each.

    Every entity type draws its names from its own syllable inventory, so
    unseen names of a known type share character trigrams with seen ones.
    Sources share ``shared_types`` and add ``own_types`` private types;
    targets use fresh names and blend the fillers of their two parents.
    """
    rng = np.random.default_rng(seed)
    type_names = list(shared_types) + [f"kind{d}_{j}" for d in range(n_sources) for j in range(own_types)]
    inventories = {t: _syllables(rng, 6) for t in type_names}
    filler_syl = _syllables(rng, 40)
    common = _words(rng, filler_syl, filler_size // 2, 1)
    sources = []
    pools = []
    for d in range(n_sources):
        types = list(shared_types) + [f"kind{d}_{j}" for j in range(own_types)]
        pool = [w for w in _words(rng, filler_syl, filler_size, 1) if w not in common]
        pools.append(pool)
        lex = {t: _words(rng, inventories[t], lexicon_size) for t in types}
        sources.append(
            SyntheticDomainSpec(f"src{d}", types, lex, common + pool, instances, entity_density, int(rng.integers(2**31)))
        )
    targets = []
    for t in range(n_targets):
        a, b = (2 * t) % n_sources, (2 * t + 1) % n_sources
        types = sorted(set(sources[a].entity_types) | set(sources[b].entity_types), key=type_names.index)
        lex = {ty: _words(rng, inventories[ty], lexicon_size) for ty in types}
        targets.append(
            SyntheticDomainSpec(
                f"tgt{t}", types, lex, common + pools[a] + pools[b], instances, entity_density, int(rng.integers(2**31))
            )
        )
    return sources, targets


# --- domain study -------------------------------------------------------------


@dataclass
class StudyConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    epochs: int = 5
    lr: float = 0.1
    feature_dim: int = 2048
    m: int = 2
    k: int = 10
    recipe: MergeRecipe = field(default_factory=lambda: MergeRecipe(method="ties", density=0.2))
    test_instances: int = 200

    @classmethod
    def from_dict(cls, doc: dict) -> "StudyConfig":
        doc = dict(doc)
        if "recipe" in doc:
            doc["recipe"] = MergeRecipe.from_dict(doc["recipe"])
        return cls(**doc)


def _reseed(spec: SyntheticDomainSpec, seed: int, instances: int | None = None) -> SyntheticDomainSpec:
    mixed = fnv1a(f"{spec.seed}:{seed}".encode()) & 0x7FFFFFFF
    return replace(spec, seed=mixed, instances=instances or spec.instances)


def _merged_tagger(base: ToyTagger, deltas: Sequence[DeltaSet], recipe: MergeRecipe) -> ToyTagger:
    recipe = replace(recipe, weights=[])
    merged, _ = merge(recipe, deltas)
    return tagger_from_delta(base, merged)


def sam_predict(
    base: ToyTagger,
    experts: dict[str, ToyTagger],
    deltas: dict[str, DeltaSet],
    domain_embeddings: dict[str, np.ndarray],
    target: ToyDataset,
    m: int,
    k: int,
    recipe: MergeRecipe,
    seed: int,
) -> dict[str, list[PredictionSet]]:
    """Run both selection strategies on a target, merge each expert set, and
    return DS-only, SE-only and union predictions."""
    records = [ExpertRecord(eid, embedding=domain_embeddings[eid]) for eid in sorted(experts)]
    target_emb = [text_embedding(inst.tokens) for inst in target.instances]
    ds = rank_by_domain_similarity(target_emb, records, m)
    sampled = ToyDataset(sample_instances(target.instances, k, seed), target.entity_types)
    preds = {eid: tag_dataset(experts[eid], sampled) for eid in experts}
    se = rank_by_sampling_eval(records, preds, m)
    m_ds = _merged_tagger(base, [deltas[e] for e in ds.ids], recipe)
    m_se = _merged_tagger(base, [deltas[e] for e in se.ids], recipe)
    y_ds = tag_dataset(m_ds, target)
    y_se = tag_dataset(m_se, target)
    return {
        "ds": y_ds,
        "se": y_se,
        "union": [ensemble_union(a, b) for a, b in zip(y_ds, y_se)],
        "selected_ds": ds.ids,
        "selected_se": se.ids,
    }


def run_single_seed(
    domains: Sequence[SyntheticDomainSpec],
    held_out: Sequence[SyntheticDomainSpec],
    config: StudyConfig,
    seed: int,
) -> dict:
    sources = [_reseed(s, seed) for s in domains]
    targets = [_reseed(t, seed, config.test_instances) for t in held_out]
    label_list = sorted({t for s in [*sources, *targets] for t in s.entity_types})
    base = ToyTagger.init(label_list, config.feature_dim, seed=seed)

    train = {s.domain_id: gen_synthetic_domain(s, "train") for s in sources}
    in_test = {s.domain_id: gen_synthetic_domain(replace(s, instances=config.test_instances), "test") for s in sources}
    out_test = {t.domain_id: gen_synthetic_domain(t, "test") for t in targets}

    experts = {}
    for i, (did, data) in enumerate(sorted(train.items())):
        experts[did] = train_toy_tagger(data, base, config.epochs, config.lr, seed=seed * 1000 + i)
    pooled_data = ToyDataset([])
    for did in sorted(train):
        pooled_data = pooled_data + train[did]
    pooled = train_toy_tagger(pooled_data, base, config.epochs, config.lr, seed=seed * 1000 + 999)
    deltas = {did: export_delta(t, base, origin=did) for did, t in experts.items()}
    merged_all = _merged_tagger(base, [deltas[d] for d in sorted(deltas)], config.recipe)
    dom_emb = {did: centroid([text_embedding(i.tokens) for i in data.instances]) for did, data in train.items()}

    def table(tests: dict[str, ToyDataset], with_sam: bool) -> dict[str, dict[str, float]]:
        rows: dict[str, dict[str, float]] = {}
        for did, tagger in experts.items():
            rows[f"expert:{did}"] = {tid: evaluate(tagger, data) for tid, data in tests.items()}
        rows["data_merging"] = {tid: evaluate(pooled, data) for tid, data in tests.items()}
        rows["model_merging"] = {tid: evaluate(merged_all, data) for tid, data in tests.items()}
        if with_sam:
            for name in ("ds", "se", "union"):
                rows[f"sam_{name}" if name != "union" else "sam"] = {}
            for tid, data in tests.items():
                res = sam_predict(base, experts, deltas, dom_emb, data, config.m, config.k, config.recipe, seed)
                golds = data.golds()
                rows["sam_ds"][tid] = micro_f1(res["ds"], golds).f1
                rows["sam_se"][tid] = micro_f1(res["se"], golds).f1
                rows["sam"][tid] = micro_f1(res["union"], golds).f1
        return rows

    return {"seed": seed, "in_domain": table(in_test, False), "out_of_domain": table(out_test, True)}


def run_domain_study(
    domains: Sequence[SyntheticDomainSpec],
    held_out: Sequence[SyntheticDomainSpec],
    config: StudyConfig | None = None,
) -> dict:
    if len(domains) < 3:
        raise InvalidValue("the domain study needs at least 3 source domains")
    if len(held_out) < 2:
        raise InvalidValue("the domain study needs at least 2 held-out domains")
    config = config or StudyConfig()
    runs = [run_single_seed(domains, held_out, config, s) for s in config.seeds]
    return {"config": {**asdict(config)}, "runs": runs, "summary": summarize(runs)}


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else 0.0


def summarize(runs: Sequence[dict]) -> dict:
    """Per-seed aggregates used by the trend checks, plus mean tables."""
    per_seed = []
    for run in runs:
        ood = run["out_of_domain"]
        ind = run["in_domain"]
        expert_rows = [r for r in ood if r.startswith("expert:")]
        diag_wins = 0
        for did in ind[expert_rows[0]]:
            best = max(expert_rows, key=lambda r: (ind[r][did], r == f"expert:{did}"))
            diag_wins += best == f"expert:{did}"
        per_seed.append(
            {
                "seed": run["seed"],
                "mean_single_expert_ood": _mean(_mean(ood[r].values()) for r in expert_rows),
                "model_merging_ood": _mean(ood["model_merging"].values()),
                "data_merging_ood": _mean(ood["data_merging"].values()),
                "sam_ood": _mean(ood["sam"].values()),
                "diagonal_wins": diag_wins,
                "n_domains": len(ind[expert_rows[0]]),
            }
        )
    mean_tables = {}
    for part in ("in_domain", "out_of_domain"):
        methods = runs[0][part].keys()
        mean_tables[part] = {
            meth: {col: _mean(r[part][meth][col] for r in runs) for col in runs[0][part][meth]} for meth in methods
        }
    return {"per_seed": per_seed, "mean": mean_tables}


def format_table(table: dict[str, dict[str, float]]) -> str:
    """Fixed-width methods x domains table of F1 (x100)."""
    cols = sorted(next(iter(table.values())))
    width = max(len(r) for r in table) + 2
    lines = [" " * width + "".join(f"{c:>10}" for c in cols)]
    for row, vals in table.items():
        lines.append(f"{row:<{width}}" + "".join(f"{100 * vals[c]:>10.2f}" for c in cols))
    return "\n".join(lines)
