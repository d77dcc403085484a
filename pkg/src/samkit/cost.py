"""Storage arithmetic for serving n LoRA experts next to one base model."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidValue

# the closed form quoted for the default setting; see normalized_storage below
QUOTED_OVERHEAD_PER_EXPERT = 0.02


@dataclass(frozen=True)
class CostQuery:
    H: int
    r: int
    L: int
    V: int = 128_000
    n: int = 1

    def __post_init__(self):
        for name in ("H", "r", "L", "V", "n"):
            val = getattr(self, name)
            if not isinstance(val, int) or isinstance(val, bool) or val < 0:
                raise InvalidValue(f"{name} must be a non-negative integer, got {val!r}")
        if self.H == 0 or self.L == 0:
            raise InvalidValue("H and L must be positive")


def expert_params(q: CostQuery) -> int:
    """LoRA on every linear layer: 18 * H * r parameters per layer."""
    return 18 * q.H * q.r * q.L


def base_params(q: CostQuery) -> int:
    return (12 * q.H * q.H + 13 * q.H) * q.L + q.V * q.H


def cost_report(q: CostQuery) -> dict:
    per_expert = expert_params(q)
    base = base_params(q)
    total = q.n * per_expert
    return {
        "query": {"H": q.H, "r": q.r, "L": q.L, "V": q.V, "n": q.n},
        "per_expert_params": per_expert,
        "all_experts_params": total,
        "base_params": base,
        "normalized_storage": 1 + total / base,
        "overhead_per_expert": per_expert / base,
        "quoted_overhead_per_expert": QUOTED_OVERHEAD_PER_EXPERT,
    }


def format_cost(report: dict) -> str:
    rows = [
        ("per-expert params", f"{report['per_expert_params']:,}"),
        ("all-experts params", f"{report['all_experts_params']:,}"),
        ("base params", f"{report['base_params']:,}"),
        ("normalized storage", f"{report['normalized_storage']:.6f}"),
        ("overhead / expert", f"{report['overhead_per_expert']:.6f}"),
        ("quoted overhead / expert", f"{report['quoted_overhead_per_expert']:.2f}"),
    ]
    return "\n".join(f"{k:<26}{v:>24}" for k, v in rows)
