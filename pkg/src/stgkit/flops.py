"""Closed-form FLOPs for the single-layer block and a stacked-attention baseline.

One multiply-add counts as one FLOP unit. Counts are Python integers, so
large arguments promote to arbitrary precision instead of wrapping.

The block's closed form is ``K * C * (E + N + T + N * T * C)``; its three
report fields split that sum into propagation ``K*C*E``, attention
``K*C*(N+T)`` and interaction ``K*N*T*C**2``. The baseline stacks ``L``
full-softmax layers: ``L * (T * N**2 * C + N * T**2 * C)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .attention import AttentionMode, GateStack, QkvProjection, recursive_interaction
from .counting import MaddCounter
from .errors import ContractError
from .graph import build_operator, graph_propagation, random_graph
from .rng import make_rng
from .tensor import Tensor


def _check_counts(**kwargs: int) -> None:
    for name, value in kwargs.items():
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ContractError(f"{name} must be an integer, got {value!r}")
        floor = 0 if name == "E" else 1
        if value < floor:
            raise ContractError(f"{name} must be >= {floor}, got {value}")


def flops_stgformer(N: int, T: int, C: int, K: int, E: int) -> int:
    _check_counts(N=N, T=T, C=C, K=K, E=E)
    N, T, C, K, E = (int(v) for v in (N, T, C, K, E))
    return K * C * (E + N + T + N * T * C)


def flops_baseline(N: int, T: int, C: int, L: int) -> int:
    _check_counts(N=N, T=T, C=C, L=L)
    N, T, C, L = (int(v) for v in (N, T, C, L))
    return L * (T * N * N * C + N * T * T * C)


def render_ratio(ratio: Fraction) -> str:
    """Fixed six-decimal rendering, e.g. ``0.003952``."""
    return f"{float(ratio):.6f}"


def flops_ratio(stg_args: tuple[int, int, int, int, int], baseline_args: tuple[int, int, int, int]) -> Fraction:
    """Exact ``flops_stgformer(*stg_args) / flops_baseline(*baseline_args)``."""
    return Fraction(flops_stgformer(*stg_args), flops_baseline(*baseline_args))


@dataclass(frozen=True)
class FlopsReport:
    N: int
    T: int
    C: int
    K: int
    E: int
    L: int
    propagation: int
    attention: int
    interaction: int
    total_stg: int
    total_baseline: int
    ratio: Fraction

    @classmethod
    def compute(cls, N: int, T: int, C: int, K: int, E: int, L: int) -> "FlopsReport":
        total = flops_stgformer(N, T, C, K, E)
        base = flops_baseline(N, T, C, L)
        prop, attn, inter = K * C * E, K * C * (N + T), K * N * T * C * C
        if prop + attn + inter != total:
            raise AssertionError("closed-form stage split does not sum to the total")
        return cls(N, T, C, K, E, L, prop, attn, inter, total, base, Fraction(total, base))

    @property
    def ratio_text(self) -> str:
        return render_ratio(self.ratio)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ratio"] = float(self.ratio)
        out["ratio_exact"] = f"{self.ratio.numerator}/{self.ratio.denominator}"
        out["ratio_text"] = self.ratio_text
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    def table(self) -> str:
        rows = [
            ("propagation  K*C*E", self.propagation),
            ("attention    K*C*(N+T)", self.attention),
            ("interaction  K*N*T*C^2", self.interaction),
            ("block total", self.total_stg),
            (f"baseline (L={self.L})", self.total_baseline),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"N={self.N} T={self.T} C={self.C} K={self.K} E={self.E} L={self.L}"]
        lines += [f"{name:<{width}}  {value:>20,}" for name, value in rows]
        lines.append(f"{'ratio':<{width}}  {self.ratio_text:>20}")
        return "\n".join(lines)


# --- measured counts ----------------------------------------------------------------
STAGE_GROUPS = ("propagation", "attention", "interaction")


def count_actual_madds(fn: Callable[[], object]) -> dict[str, int]:
    """Run ``fn`` under a fresh counter; returns raw stage counts plus the three group totals."""
    with MaddCounter() as counter:
        fn()
    out = dict(counter.counts)
    for group in STAGE_GROUPS:
        out[group] = counter.total(group)
    out["total"] = counter.total()
    return out


def measure_instance(
    N: int, T: int, C: int, K: int, E: int, kind: str = "linear", seed: int = 0,
    spatial: bool = True, temporal: bool = True,
) -> dict[str, int]:
    """Measured multiply-adds of propagation plus recursive interaction on a random instance."""
    graph = random_graph(N, E, seed)
    op = build_operator(graph, "sgc_adjacency", K)
    rng = make_rng(seed, "flops.instance")
    x = Tensor(rng.standard_normal((T, N, C)))
    proj = QkvProjection.init(rng, C)
    gates = GateStack.init(rng, C, K)
    mode = AttentionMode.ablation(kind, spatial, temporal)

    def run():
        orders = graph_propagation(x, op, K)
        return recursive_interaction(orders, proj, gates, mode)

    return count_actual_madds(run)


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])
