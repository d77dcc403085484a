"""Entity mentions, output parsing, entity-level micro-F1 and prediction ensembling."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import AlignmentError, EmptyInput, FormatError, InvalidValue, IoError

logger = logging.getLogger(__name__)

FORMATS = ("json", "enumeration")


def normalize_span(span: str) -> str:
    return " ".join(str(span).split())


@dataclass(frozen=True, order=True)
class EntityMention:
    """A (span, type) pair. Spans are whitespace-normalized and case-sensitive;
    types are lowercased."""

    span: str
    etype: str

    def __post_init__(self):
        object.__setattr__(self, "span", normalize_span(self.span))
        object.__setattr__(self, "etype", normalize_span(self.etype).lower())
        if not self.span or not self.etype:
            raise InvalidValue(f"empty span or type in mention {self!r}")


def _mentions(items: Iterable) -> frozenset[EntityMention]:
    out = set()
    for m in items:
        if isinstance(m, EntityMention):
            out.add(m)
        else:
            span, etype = m
            out.add(EntityMention(span, etype))
    return frozenset(out)


@dataclass(frozen=True)
class PredictionSet:
    instance_id: str
    mentions: frozenset = field(default_factory=frozenset)
    warnings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mentions", _mentions(self.mentions))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    def __len__(self) -> int:
        return len(self.mentions)

    def __contains__(self, mention) -> bool:
        if not isinstance(mention, EntityMention):
            try:
                mention = EntityMention(*mention)
            except (TypeError, InvalidValue):
                return False
        return mention in self.mentions

    def sorted_mentions(self) -> list[EntityMention]:
        return sorted(self.mentions)

    def to_dict(self) -> dict:
        doc = {
            "instance_id": self.instance_id,
            "mentions": [{"span": m.span, "type": m.etype} for m in self.sorted_mentions()],
        }
        if self.warnings:
            doc["warnings"] = list(self.warnings)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PredictionSet":
        try:
            mentions = [(m["span"], m["type"]) for m in doc.get("mentions", [])]
            return cls(str(doc["instance_id"]), mentions, tuple(doc.get("warnings", ())))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed prediction record: {exc}") from exc


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }

    def summary_table(self) -> str:
        lines = [
            f"{'TP':>6} {'FP':>6} {'FN':>6} {'P':>8} {'R':>8} {'F1':>8}",
            f"{self.tp:>6d} {self.fp:>6d} {self.fn:>6d} "
            f"{self.precision:>8.4f} {self.recall:>8.4f} {self.f1:>8.4f}",
        ]
        return "\n".join(lines)


# --- parsing -------------------------------------------------------------


class _Pairs(list):
    pass


def _first_json_object(text: str):
    # keep key/value pairs in order so one span may carry several types
    decoder = json.JSONDecoder(object_pairs_hook=_Pairs)
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, _Pairs):
            return obj
        pos = text.find("{", pos + 1)
    return None


def _parse_json(raw: str, warnings: list[str]) -> list[tuple[str, str]]:
    obj = _first_json_object(raw)
    if obj is None:
        warnings.append("no JSON object found in output")
        return []
    pairs = []
    for span, etype in obj:
        if not isinstance(etype, str) or not normalize_span(span) or not normalize_span(etype):
            warnings.append(f"skipped entry {span!r}: {etype!r}")
            continue
        pairs.append((span, etype))
    return pairs


def _parse_enumeration(raw: str, warnings: list[str]) -> list[tuple[str, str]]:
    pairs = []
    matched = False
    for line in raw.splitlines():
        if ":" not in line:
            if line.strip():
                warnings.append(f"unparsed line {line.strip()[:60]!r}")
            continue
        etype, _, rest = line.partition(":")
        if not normalize_span(etype):
            warnings.append(f"line without a type {line.strip()[:60]!r}")
            continue
        matched = True
        for span in rest.split(","):
            if normalize_span(span):
                pairs.append((span, etype))
    if not matched and not warnings:
        warnings.append("no 'Type: spans' lines found in output")
    return pairs


def parse_prediction(raw: str, fmt: str = "json", instance_id: str = "") -> PredictionSet:
    """Parse generated text into a PredictionSet. Never raises on bad model output;
    problems are reported in ``PredictionSet.warnings``."""
    if fmt not in FORMATS:
        raise InvalidValue(f"unknown output format {fmt!r}")
    warnings: list[str] = []
    if not isinstance(raw, str):
        raw = "" if raw is None else str(raw)
    pairs = _parse_json(raw, warnings) if fmt == "json" else _parse_enumeration(raw, warnings)
    return PredictionSet(instance_id, pairs, tuple(warnings))


def format_prediction(pred: PredictionSet, fmt: str = "json") -> str:
    """Inverse of parse_prediction for well-formed sets."""
    if fmt == "json":
        # written by hand: a span with two types needs a repeated key
        dump = lambda s: json.dumps(s, ensure_ascii=False)  # noqa: E731
        return "{" + ", ".join(f"{dump(m.span)}: {dump(m.etype)}" for m in pred.sorted_mentions()) + "}"
    by_type: dict[str, list[str]] = {}
    for m in pred.sorted_mentions():
        by_type.setdefault(m.etype, []).append(m.span)
    return "\n".join(f"{t}: {', '.join(spans)}" for t, spans in sorted(by_type.items()))


# --- scoring -------------------------------------------------------------


def _check_aligned(predictions: Sequence[PredictionSet], golds: Sequence[PredictionSet]) -> None:
    if len(predictions) != len(golds):
        raise AlignmentError(f"{len(predictions)} predictions vs {len(golds)} gold instances")
    for p, g in zip(predictions, golds):
        if p.instance_id != g.instance_id:
            raise AlignmentError(f"instance ids differ: {p.instance_id!r} vs {g.instance_id!r}")


def micro_f1(predictions: Sequence[PredictionSet], golds: Sequence[PredictionSet]) -> EvalReport:
    _check_aligned(predictions, golds)
    tp = fp = fn = 0
    for p, g in zip(predictions, golds):
        hit = len(p.mentions & g.mentions)
        tp += hit
        fp += len(p.mentions) - hit
        fn += len(g.mentions) - hit
    return EvalReport(tp, fp, fn)


# --- ensembling ----------------------------------------------------------


def _same_instance(sets: Sequence[PredictionSet]) -> str:
    ids = {s.instance_id for s in sets}
    if len(ids) > 1:
        raise AlignmentError(f"cannot ensemble different instances: {sorted(ids)}")
    return sets[0].instance_id


def ensemble_union(a: PredictionSet, b: PredictionSet) -> PredictionSet:
    return PredictionSet(_same_instance([a, b]), a.mentions | b.mentions)


def ensemble_intersection(a: PredictionSet, b: PredictionSet) -> PredictionSet:
    return PredictionSet(_same_instance([a, b]), a.mentions & b.mentions)


def ensemble_vote(sets: Sequence[PredictionSet], threshold: int) -> PredictionSet:
    """Keep mentions predicted by at least ``threshold`` of the sets."""
    if not sets:
        raise EmptyInput("no prediction sets to vote over")
    if not 1 <= threshold <= len(sets):
        raise InvalidValue(f"threshold must be in [1, {len(sets)}], got {threshold}")
    iid = _same_instance(sets)
    votes = Counter(m for s in sets for m in s.mentions)
    return PredictionSet(iid, [m for m, c in votes.items() if c >= threshold])


def majority_threshold(n: int) -> int:
    return n // 2 + 1


# --- JSON-lines I/O --------------------------------------------------------


def read_predictions(path) -> list[PredictionSet]:
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    out.append(PredictionSet.from_dict(json.loads(line)))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
    except FormatError:
        raise
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return out


def write_predictions(preds: Iterable[PredictionSet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


@dataclass(frozen=True)
class Instance:
    """One corpus sentence; ``gold`` is None for unlabeled target data."""

    instance_id: str
    text: str
    gold: PredictionSet | None = None

    @property
    def tokens(self) -> list[str]:
        return self.text.split()


def read_corpus(path) -> list[Instance]:
    """JSON-lines of {instance_id, text, mentions?: [{span, type}]}."""
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    iid = str(doc["instance_id"])
                    gold = PredictionSet.from_dict(doc) if "mentions" in doc else None
                    out.append(Instance(iid, str(doc.get("text", "")), gold))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
    except FormatError:
        raise
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return out


def write_corpus(instances: Iterable[Instance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            doc = {"instance_id": inst.instance_id, "text": inst.text}
            if inst.gold is not None:
                doc["mentions"] = inst.gold.to_dict()["mentions"]
            fh.write(json.dumps(doc, ensure_ascii=False, sort_keys=True) + "\n")
