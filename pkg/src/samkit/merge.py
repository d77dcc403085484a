"""Parameter-space merging of task vectors: linear, task arithmetic, TIES and DARE.

All kernels work one tensor at a time on a stacked ``(n_experts, ...)`` array.
Accumulation happens in float64 over values sorted along the expert axis, so
every output coordinate depends only on the multiset of (weight, delta) pairs
at that coordinate: results are permutation invariant bit-for-bit and do not
depend on thread scheduling.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyInput, InvalidValue, ShapeMismatch
from .tensor_store import ArchiveWriter, DeltaSet, TensorArchive, TensorMap, check_compatible

METHODS = ("linear", "task_arithmetic", "ties", "dare_linear", "dare_ties")

DEFAULT_DENSITY = 0.2
DEFAULT_DROP_RATE = 0.5
DEFAULT_SCALE = 1.0


@dataclass
class MergeRecipe:
    method: str = "ties"
    density: float = DEFAULT_DENSITY
    drop_rate: float = DEFAULT_DROP_RATE
    scale: float = DEFAULT_SCALE
    weights: list[float] = field(default_factory=list)
    seed: int = 0

    def validate(self, n_deltas: int | None = None) -> None:
        if self.method not in METHODS:
            raise InvalidValue(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if not 0 < self.density <= 1:
            raise InvalidValue(f"density must be in (0, 1], got {self.density}")
        if not 0 <= self.drop_rate < 1:
            raise InvalidValue(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if not math.isfinite(self.scale):
            raise InvalidValue("scale must be finite")
        if any(not (w > 0 and math.isfinite(w)) for w in self.weights):
            raise InvalidValue(f"weights must be positive and finite, got {self.weights}")
        if n_deltas is not None and self.weights and len(self.weights) != n_deltas:
            raise InvalidValue(f"{len(self.weights)} weights for {n_deltas} deltas")
        if not 0 <= self.seed < 2**64:
            raise InvalidValue("seed must be an unsigned 64-bit integer")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "MergeRecipe":
        keys = {"method", "density", "drop_rate", "scale", "weights", "seed"}
        unknown = set(doc) - keys
        if unknown:
            raise ConfigError(f"unknown MergeRecipe keys: {sorted(unknown)}")
        recipe = cls(**doc)
        recipe.weights = [float(w) for w in recipe.weights]
        recipe.validate()
        return recipe

    @classmethod
    def from_json(cls, text: str) -> "MergeRecipe":
        return cls.from_dict(json.loads(text))


@dataclass
class TensorStats:
    total: int
    trimmed: int = 0
    sign_conflicts: int = 0
    zeroed: int = 0


@dataclass
class MergeReport:
    method: str
    weights: list[float]
    tensors: dict[str, TensorStats] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "weights": list(self.weights),
            "tensors": {k: asdict(v) for k, v in sorted(self.tensors.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# --- per-tensor kernels --------------------------------------------------


def _weighted_stack(stack: np.ndarray, weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape((-1,) + (1,) * (stack.ndim - 1))
    return stack.astype(np.float64) * w


def _ordered_sum(values: np.ndarray) -> np.ndarray:
    return np.sort(values, axis=0).sum(axis=0)


def linear_kernel(stack: np.ndarray, weights: Sequence[float]) -> np.ndarray:
    total_w = float(np.sort(np.asarray(weights, dtype=np.float64)).sum())
    return (_ordered_sum(_weighted_stack(stack, weights)) / total_w).astype(np.float32)


def task_arithmetic_kernel(stack: np.ndarray, weights: Sequence[float], scale: float) -> np.ndarray:
    return (scale * _ordered_sum(_weighted_stack(stack, weights))).astype(np.float32)


def trim_count(density: float, size: int) -> int:
    # round first so e.g. 0.3 * 10 does not become ceil(3.0000000000000004) = 4
    return max(1, math.ceil(round(density * size, 9)))


def trim_mask(values: np.ndarray, density: float) -> np.ndarray:
    """Boolean mask keeping the ceil(density*d) largest magnitudes of a flat array.

    Equal magnitudes at the boundary are kept in ascending index order.
    """
    d = values.size
    k = trim_count(density, d)
    if k >= d:
        return np.ones(d, dtype=bool)
    mag = np.abs(values)
    kth = np.partition(mag, d - k)[d - k]
    keep = mag > kth
    remaining = k - int(keep.sum())
    if remaining > 0:
        at_boundary = np.flatnonzero(mag == kth)[:remaining]
        keep[at_boundary] = True
    return keep


def ties_kernel(
    stack: np.ndarray, weights: Sequence[float], density: float, scale: float
) -> tuple[np.ndarray, TensorStats]:
    shape = stack.shape[1:]
    n = stack.shape[0]
    flat = _weighted_stack(stack, weights).reshape(n, -1)
    trimmed = np.zeros_like(flat)
    for i in range(n):
        mask = trim_mask(flat[i], density)
        trimmed[i, mask] = flat[i, mask]
    elected = np.sign(_ordered_sum(trimmed))
    agree = (np.sign(trimmed) == elected) & (trimmed != 0)
    counts = agree.sum(axis=0)
    sums = _ordered_sum(np.where(agree, trimmed, 0.0))
    merged = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    merged = (scale * merged).astype(np.float32).reshape(shape)

    stats = TensorStats(total=flat.shape[1])
    stats.trimmed = int(((flat != 0) & (trimmed == 0)).any(axis=0).sum())
    stats.sign_conflicts = int(((trimmed > 0).any(axis=0) & (trimmed < 0).any(axis=0)).sum())
    stats.zeroed = int(((trimmed != 0).any(axis=0) & (counts == 0)).sum())
    return merged, stats


def _tensor_seed(seed: int, name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return seed ^ int.from_bytes(digest, "little")


def dare_kernel(values: np.ndarray, drop_rate: float, seed: int, name: str) -> np.ndarray:
    if drop_rate == 0:
        return values
    rng = np.random.default_rng(_tensor_seed(seed, name))
    keep = rng.random(values.shape) >= drop_rate
    return np.where(keep, values.astype(np.float64) / (1.0 - drop_rate), 0.0).astype(np.float32)


# --- DeltaSet-level API --------------------------------------------------


def _check_weights(n: int, weights: Sequence[float] | None) -> list[float]:
    if weights is None or len(weights) == 0:
        return [1.0] * n
    if len(weights) != n:
        raise InvalidValue(f"{len(weights)} weights for {n} deltas")
    if any(not (w > 0 and math.isfinite(w)) for w in weights):
        raise InvalidValue(f"weights must be positive and finite, got {list(weights)}")
    return [float(w) for w in weights]


def _check_inputs(deltas: Sequence[TensorMap], weights: Sequence[float] | None) -> list[float]:
    if not deltas:
        raise EmptyInput("no deltas to merge")
    for other in deltas[1:]:
        check_compatible(deltas[0], other, "deltas")
    return _check_weights(len(deltas), weights)


def _stack(deltas: Sequence[TensorMap], name: str) -> np.ndarray:
    return np.stack([d[name] for d in deltas])


def merge_linear(deltas: Sequence[TensorMap], weights: Sequence[float] | None = None) -> DeltaSet:
    weights = _check_inputs(deltas, weights)
    return DeltaSet({k: linear_kernel(_stack(deltas, k), weights) for k in deltas[0]}, origin="merge:linear")


def merge_task_arithmetic(
    deltas: Sequence[TensorMap], weights: Sequence[float] | None = None, scale: float = DEFAULT_SCALE
) -> DeltaSet:
    weights = _check_inputs(deltas, weights)
    out = {k: task_arithmetic_kernel(_stack(deltas, k), weights, scale) for k in deltas[0]}
    return DeltaSet(out, origin="merge:task_arithmetic")


def ties_merge(
    deltas: Sequence[TensorMap],
    weights: Sequence[float] | None = None,
    density: float = DEFAULT_DENSITY,
    scale: float = DEFAULT_SCALE,
) -> tuple[DeltaSet, MergeReport]:
    weights = _check_inputs(deltas, weights)
    if not 0 < density <= 1:
        raise InvalidValue(f"density must be in (0, 1], got {density}")
    report = MergeReport("ties", weights)
    out = {}
    for k in deltas[0]:
        out[k], report.tensors[k] = ties_kernel(_stack(deltas, k), weights, density, scale)
    return DeltaSet(out, origin="merge:ties"), report


def dare_preprocess(delta: TensorMap, drop_rate: float, seed: int) -> DeltaSet:
    if not 0 <= drop_rate < 1:
        raise InvalidValue(f"drop_rate must be in [0, 1), got {drop_rate}")
    origin = getattr(delta, "origin", "")
    return DeltaSet({k: dare_kernel(delta[k], drop_rate, seed, k) for k in delta}, delta.metadata, origin=origin)


def expert_seed(seed: int, index: int) -> int:
    return seed ^ index


def _merge_tensor(recipe: MergeRecipe, name: str, stack: np.ndarray, weights: list[float]):
    """Merge one tensor; returns (array, stats-or-None)."""
    method = recipe.method
    if method.startswith("dare_"):
        stack = np.stack(
            [dare_kernel(stack[i], recipe.drop_rate, expert_seed(recipe.seed, i), name) for i in range(len(stack))]
        )
        method = method[len("dare_"):]
    if method == "linear":
        out = linear_kernel(stack, weights)
        if recipe.scale != 1:
            out = (np.float64(recipe.scale) * out.astype(np.float64)).astype(np.float32)
        return out, None
    if method == "task_arithmetic":
        return task_arithmetic_kernel(stack, weights, recipe.scale), None
    return ties_kernel(stack, weights, recipe.density, recipe.scale)


def merge(recipe: MergeRecipe, deltas: Sequence[TensorMap], max_workers: int = 1) -> tuple[DeltaSet, MergeReport]:
    """Dispatch a recipe over in-memory deltas.

    DARE variants draw each expert's mask from ``seed ^ expert_index``; the
    report carries TIES statistics and zero counts for the other methods.
    """
    recipe.validate(len(deltas))
    weights = _check_inputs(deltas, recipe.weights)
    names = list(deltas[0])

    def one(name):
        return _merge_tensor(recipe, name, _stack(deltas, name), weights)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(one, names))
    else:
        results = [one(n) for n in names]
    report = MergeReport(recipe.method, weights)
    out = {}
    for name, (arr, stats) in zip(names, results):
        out[name] = arr
        report.tensors[name] = stats or TensorStats(total=arr.size)
    return DeltaSet(out, origin=f"merge:{recipe.method}"), report


def merge_archives(recipe: MergeRecipe, paths: Sequence, out_path, metadata: dict | None = None) -> MergeReport:
    """Merge delta archives on disk, holding one tensor per expert in memory at a time."""
    if not paths:
        raise EmptyInput("no delta archives to merge")
    recipe.validate(len(paths))
    weights = _check_weights(len(paths), recipe.weights)
    archives = [TensorArchive(p) for p in paths]
    try:
        shapes = archives[0].shapes()
        for a in archives[1:]:
            if a.shapes() != shapes:
                raise ShapeMismatch(f"{a.path} does not match {archives[0].path}")
        report = MergeReport(recipe.method, weights)
        meta = {"merge_recipe": recipe.to_json(), **(metadata or {})}
        with ArchiveWriter(out_path, shapes, meta) as writer:
            for name in sorted(shapes):
                stack = np.stack([a.read(name) for a in archives])
                arr, stats = _merge_tensor(recipe, name, stack, weights)
                report.tensors[name] = stats or TensorStats(total=arr.size)
                writer.write(name, arr)
    finally:
        for a in archives:
            a.close()
    return report


# --- expert weighting modes ---------------------------------------------


def weights_mode1(num_selected: int) -> list[float]:
    """Rank-based weights: (1.5, 1.0, 0.5) for three experts, a 1.5 -> 0.5 ramp otherwise."""
    if num_selected <= 0:
        raise EmptyInput("no experts selected")
    if num_selected == 1:
        return [1.0]
    return [float(w) for w in np.linspace(1.5, 0.5, num_selected)]


def weights_mode2(scores: Sequence[float]) -> list[float]:
    """Scores divided by the median selected score (lower middle for even counts)."""
    if not scores:
        raise EmptyInput("no scores")
    if any(not (s > 0) for s in scores):
        raise InvalidValue(f"mode2 weighting needs positive scores, got {list(scores)}")
    med = sorted(scores)[(len(scores) - 1) // 2]
    return [float(s) / med for s in scores]
