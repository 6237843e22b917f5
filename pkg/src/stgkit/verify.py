"""Property checks shared by the ``verify`` command and the test suite.

Each check returns a :class:`CheckResult`; none of them raise on a failed
property, so the caller can report every outcome.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracles
from .attention import QkvProjection, spatial_linear, st_attention_softmax, temporal_linear
from .calendar import StWindow
from .flops import FlopsReport, flops_baseline, flops_ratio, flops_stgformer, loglog_slope, measure_instance, render_ratio
from .graph import RoadGraph, build_operator, graph_propagation, lambda_max, normalized_laplacian, random_graph
from .metrics import masked_metrics
from .model import StgConfig, StgModel, forward
from .rng import make_rng
from .tensor import Tape, Tensor, backward, layer_norm, matmul, softmax
from . import tensor as T


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crash is a failed property, reported with its cause
        ok, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Largest elementwise ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


# --- linear attention identity -----------------------------------------------------
def linear_attention_identity(n_instances: int = 100, seed: int = 0) -> tuple[float, int]:
    """Max relative error between ``Q (K^T V) / n`` and ``(Q K^T) V / n`` over random shapes.

    Both branches are checked: spatial (``n = N``) and temporal (``n = T``).
    Relative error is measured against the largest entry of the quadratic form.
    """
    rng = make_rng(seed, "verify.attention")
    worst = 0.0
    for _ in range(n_instances):
        t, n, c = int(rng.integers(1, 17)), int(rng.integers(1, 65)), int(rng.integers(1, 33))
        q, k, v = (rng.standard_normal((t, n, c)) for _ in range(3))
        fast_s = spatial_linear(Tensor(q), Tensor(k), Tensor(v)).data
        fast_t = temporal_linear(Tensor(q), Tensor(k), Tensor(v)).data
        slow_s = np.stack([oracles.quadratic_linear_attention(q[i], k[i], v[i]) for i in range(t)])
        slow_t = np.stack(
            [oracles.quadratic_linear_attention(q[:, j], k[:, j], v[:, j]) for j in range(n)], axis=1
        )
        for fast, slow in ((fast_s, slow_s), (fast_t, slow_t)):
            scale = max(float(np.abs(slow).max()), 1e-300)
            worst = max(worst, float(np.abs(fast - slow).max()) / scale)
    return worst, n_instances


def check_linear_attention(n_instances: int = 100) -> CheckResult:
    def run():
        err, count = linear_attention_identity(n_instances)
        return err <= 1e-10, f"{count} instances, max relative error {err:.2e} (limit 1e-10)"
    return _timed("linear_attention_identity", run)


def check_softmax_attention() -> CheckResult:
    def run():
        rng = make_rng(0, "verify.softmax")
        worst = 0.0
        for _ in range(5):
            t, n, c = (int(v) for v in rng.integers(1, 6, size=3))
            proj = QkvProjection.init(rng, c)
            h = rng.standard_normal((t, n, c))
            got = st_attention_softmax(Tensor(h), proj).data
            wq, wk, wv, wo = (p.data for p in (proj.w_q, proj.w_k, proj.w_v, proj.w_o))
            q, k, v = h @ wq, h @ wk, h @ wv
            mixed = np.zeros_like(h)
            for i in range(t):
                mixed[i] += oracles.loop_softmax_attention(q[i], k[i], v[i])
            for j in range(n):
                mixed[:, j] += oracles.loop_softmax_attention(q[:, j], k[:, j], v[:, j])
            worst = max(worst, float(np.abs(got - mixed @ wo).max()))
        return worst <= 1e-12, f"max abs error vs loop oracle {worst:.2e}"
    return _timed("softmax_attention_oracle", run)


# --- gradients ------------------------------------------------------------------------
def primitive_gradcheck(seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error of analytic vs central-difference gradients for each primitive."""
    rng = make_rng(seed, "verify.primitives")

    def arr(*shape, positive=False):
        x = rng.standard_normal(shape)
        return np.abs(x) + 0.5 if positive else x

    cases: dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]] = {
        "add": (lambda a, b: a + b, [arr(3, 4), arr(4)]),
        "sub": (lambda a, b: a - b, [arr(2, 3, 4), arr(3, 4)]),
        "mul": (lambda a, b: a * b, [arr(3, 4), arr(3, 4)]),
        "div": (lambda a, b: a / b, [arr(3, 4), arr(4, positive=True)]),
        "sqrt": (lambda a: T.sqrt(a), [arr(3, 4, positive=True)]),
        "exp": (lambda a: T.exp(a), [arr(3, 4)]),
        "abs": (lambda a: T.tabs(a), [arr(3, 4, positive=True) * np.sign(arr(3, 4))]),
        "sum": (lambda a: T.tsum(a, axis=1), [arr(3, 4)]),
        "mean": (lambda a: T.mean(a, axis=(0, 2), keepdims=True), [arr(2, 3, 4)]),
        "reshape": (lambda a: T.reshape(a, (4, 3)), [arr(3, 4)]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [arr(2, 3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=-1), [arr(2, 3), arr(2, 2)]),
        "getitem": (lambda a: a[1:, ::2], [arr(3, 4)]),
        "broadcast_to": (lambda a: T.broadcast_to(a, (2, 3, 4)), [arr(3, 1)]),
        "gather_rows": (lambda a: T.gather_rows(a, np.array([0, 2, 2, 1])), [arr(3, 4)]),
        "matmul": (lambda a, b: matmul(a, b), [arr(2, 3, 4), arr(4, 5)]),
        "matmul_batched": (lambda a, b: matmul(a, b), [arr(2, 3, 4), arr(2, 4, 5)]),
        "softmax": (lambda a: softmax(a, axis=-1), [arr(3, 4)]),
        "layer_norm": (lambda a, g, b: layer_norm(a, g, b), [arr(3, 4), arr(4), arr(4)]),
    }
    out = {}
    for name, (fn, inputs) in cases.items():
        out[name] = _gradcheck(fn, inputs, rng, eps)
    return out


def _gradcheck(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng, eps: float) -> float:
    probe_shape = fn(*[Tensor(x) for x in inputs]).shape
    w = rng.standard_normal(probe_shape)
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape():
        loss = T.tsum(fn(*leaves) * Tensor(w))
        grads = backward(loss)
    worst = 0.0
    work = [x.copy() for x in inputs]
    for idx, leaf in enumerate(leaves):
        def f():
            return float((fn(*[Tensor(x) for x in work]).data * w).sum())
        numeric = oracles.central_difference(f, work[idx], eps)
        worst = max(worst, rel_error(grads[leaf], numeric, floor=1e-6))
    return worst


def small_model(kind: str = "linear", seed: int = 0) -> tuple[StgModel, StWindow]:
    """The T=2, N=3, C=4 (d=1), K=2 model used for end-to-end gradient checks."""
    graph = random_graph(3, 2, seed)
    cfg = StgConfig(steps_in=2, steps_out=2, d=1, order=2, attn_mode=kind, seed=seed)
    model = StgModel.create(cfg, graph)
    rng = make_rng(seed, "verify.small_model")
    # Spread every parameter away from its initial structure (zero biases, unit gains).
    state = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in model.state().items()}
    model.load_state(state)
    window = StWindow(rng.standard_normal((2, 3, 1)), np.array([2, 2]), np.array([100, 101]))
    return model, window


def model_gradcheck(kind: str = "linear", seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per trainable tensor for ``sum(w * forward(model, window))``."""
    model, window = small_model(kind, seed)
    params = model.named_parameters()
    w = make_rng(seed, "verify.probe").standard_normal(forward(model, window).shape)
    with Tape():
        loss = T.tsum(forward(model, window) * Tensor(w))
        grads = backward(loss)
    out = {}
    for name, p in params.items():
        work = p.numpy()

        def f():
            p.set_data(work)
            return float((forward(model, window).data * w).sum())

        numeric = oracles.central_difference(f, work, eps)
        p.set_data(work)
        out[name] = rel_error(grads[p], numeric, floor=1e-6)
    return out


def check_gradients() -> CheckResult:
    def run():
        prim = primitive_gradcheck()
        worst_prim = max(prim.values())
        model_errs = {**{f"linear/{k}": v for k, v in model_gradcheck("linear").items()},
                      **{f"softmax/{k}": v for k, v in model_gradcheck("softmax").items()}}
        worst_model = max(model_errs.values())
        ok = worst_prim <= 1e-6 and worst_model <= 1e-3
        bad = [k for k, v in {**prim, **model_errs}.items() if v > (1e-6 if k in prim else 1e-3)]
        detail = f"primitives max {worst_prim:.2e} (limit 1e-6); model max {worst_model:.2e} (limit 1e-3)"
        if bad:
            detail += f"; failing: {', '.join(bad)}"
        return ok, detail
    return _timed("gradient_integrity", run)


# --- metrics --------------------------------------------------------------------------
def metric_oracle_errors(n_instances: int = 1000, seed: int = 0) -> tuple[float, bool]:
    """Max absolute gap to the loop oracle and whether MAE <= RMSE held everywhere."""
    rng = make_rng(seed, "verify.metrics")
    worst, ordered = 0.0, True
    for _ in range(n_instances):
        shape = tuple(int(v) for v in rng.integers(1, 7, size=int(rng.integers(1, 4))))
        truth = rng.uniform(-50, 50, size=shape)
        truth[rng.random(shape) < 0.3] = 0.0
        truth.flat[int(rng.integers(truth.size))] = rng.uniform(1, 50)
        pred = truth + rng.normal(0, 5, size=shape)
        report = masked_metrics(pred, truth)
        ref = oracles.loop_metrics(pred, truth)
        got = (report.mae, report.rmse, report.mape)
        worst = max(worst, max(abs(g - r) / max(abs(r), 1.0) for g, r in zip(got, ref)))
        ordered &= report.mae <= report.rmse * (1 + 1e-15)
    return worst, ordered


def check_metrics(n_instances: int = 1000) -> CheckResult:
    def run():
        err, ordered = metric_oracle_errors(n_instances)
        return err <= 1e-12 and ordered, (
            f"{n_instances} instances, max error {err:.2e} (limit 1e-12), MAE <= RMSE: {ordered}"
        )
    return _timed("metric_oracle", run)


# --- graph ----------------------------------------------------------------------------
def equivariance_errors(n_graphs: int = 50, n_nodes: int = 10, seed: int = 0) -> float:
    """Max abs gap between ``prop(P x)`` and ``P prop(x)`` over random graphs and permutations."""
    rng = make_rng(seed, "verify.equivariance")
    worst = 0.0
    for g_idx in range(n_graphs):
        n_edges = int(rng.integers(n_nodes, n_nodes * (n_nodes - 1) // 2 + 1))
        graph = random_graph(n_nodes, n_edges, seed=int(rng.integers(2**31)))
        kind = ("sgc_adjacency", "rescaled_laplacian")[g_idx % 2]
        if kind == "rescaled_laplacian" and (graph.degrees() == 0).any():
            kind = "sgc_adjacency"
        perm = rng.permutation(n_nodes)
        x = rng.standard_normal((3, n_nodes, 4))
        base = graph_propagation(Tensor(x), build_operator(graph, kind, 3))
        moved = graph_propagation(Tensor(x[:, perm]), build_operator(graph.permuted(perm), kind, 3))
        for a, b in zip(base, moved):
            worst = max(worst, float(np.abs(a.data[:, perm] - b.data).max()))
    return worst


def check_equivariance() -> CheckResult:
    def run():
        err = equivariance_errors()
        return err <= 1e-12, f"50 graphs of 10 nodes, max error {err:.2e} (limit 1e-12)"
    return _timed("permutation_equivariance", run)


def check_lambda_max() -> CheckResult:
    def run():
        rng = make_rng(0, "verify.lambda")
        worst = 0.0
        for _ in range(5):
            graph = random_graph(8, int(rng.integers(10, 20)), seed=int(rng.integers(2**31)))
            graph = RoadGraph.from_adjacency(graph.adjacency, self_loops=True)
            lap = normalized_laplacian(graph)
            ref = oracles.jacobi_eigenvalues(lap)[-1]
            worst = max(worst, abs(lambda_max(lap, tol=1e-13) - ref) / ref)
        return worst <= 1e-6, f"max relative error vs Jacobi {worst:.2e} (limit 1e-6)"
    return _timed("lambda_max_oracle", run)


# --- forward pipeline -----------------------------------------------------------------
def check_forward_oracle() -> CheckResult:
    def run():
        worst = 0.0
        for kind in ("linear", "softmax"):
            graph = random_graph(3, 2, 1)
            cfg = StgConfig(steps_in=2, steps_out=1, d=1, order=2, attn_mode=kind, seed=3)
            model = StgModel.create(cfg, graph)
            rng = make_rng(5, "verify.forward")
            state = {k: rng.standard_normal(v.shape) for k, v in model.state().items()}
            model.load_state(state)
            x, dow, sod = rng.standard_normal((2, 3, 1)), np.array([3, 3]), np.array([7, 8])
            got = forward(model, StWindow(x, dow, sod)).data
            ref = oracles.pipeline_forward(state, graph.adjacency, x, dow, sod, 2, 1, kind)
            worst = max(worst, float(np.abs(got - ref).max()))
        return worst <= 1e-10, f"max abs error vs token-loop pipeline {worst:.2e} (limit 1e-10)"
    return _timed("forward_pipeline_oracle", run)


# --- FLOPs ----------------------------------------------------------------------------
def check_flops_arithmetic() -> CheckResult:
    def run():
        k3 = flops_stgformer(8600, 12, 32, 3, 201363)
        base = flops_baseline(8600, 12, 32, 3)
        r3 = render_ratio(flops_ratio((8600, 12, 32, 3, 201363), (8600, 12, 32, 3)))
        r1 = render_ratio(flops_ratio((8600, 12, 32, 1, 201363), (8600, 12, 32, 3)))
        ok = k3 == 337_188_000 and base == 85_320_806_400 and r3 == "0.003952" and r1 == "0.001317"
        return ok, f"K=3 total {k3:,}, baseline {base:,}, ratio K=3 {r3}, K=1 {r1}"
    return _timed("flops_arithmetic", run)


def attention_scaling(nodes=(32, 64, 128, 256), steps: int = 4, channels: int = 4, order: int = 1) -> dict[str, float]:
    linear, spatial = [], []
    for n in nodes:
        linear.append(measure_instance(n, steps, channels, order, 2 * n, "linear")["attention"])
        spatial.append(measure_instance(n, steps, channels, order, 2 * n, "softmax")["attention.spatial"])
    return {"linear": loglog_slope(nodes, linear), "softmax_spatial": loglog_slope(nodes, spatial)}


def check_flops_scaling() -> CheckResult:
    def run():
        s = attention_scaling()
        ok = abs(s["linear"] - 1.0) <= 0.05 and abs(s["softmax_spatial"] - 2.0) <= 0.05
        return ok, f"log-log slopes: linear {s['linear']:.4f} (1.0 +/- 0.05), softmax spatial {s['softmax_spatial']:.4f} (2.0 +/- 0.05)"
    return _timed("flops_scaling", run)


def check_flops_measured() -> CheckResult:
    """Measured propagation/interaction madds against the closed-form terms."""
    def run():
        n, t, c, k, e = 24, 5, 6, 3, 40
        m = measure_instance(n, t, c, k, e)
        report = FlopsReport.compute(n, t, c, k, 2 * e, 1)
        prop_factor = m["propagation"] / t / report.propagation
        inter_ok = m["interaction"] == report.interaction
        ok = 1.0 <= prop_factor <= 2.0 and inter_ok
        return ok, (
            f"propagation per step / closed form = {prop_factor:.3f} (<= 2); "
            f"interaction measured {m['interaction']} vs closed form {report.interaction}"
        )
    return _timed("flops_measured_vs_closed_form", run)


ALL_CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_linear_attention,
    check_softmax_attention,
    check_gradients,
    check_forward_oracle,
    check_metrics,
    check_equivariance,
    check_lambda_max,
    check_flops_arithmetic,
    check_flops_scaling,
    check_flops_measured,
)


def run_suite(checks=ALL_CHECKS) -> list[CheckResult]:
    return [check() for check in checks]
