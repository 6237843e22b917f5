"""Road graphs, normalized propagation operators and parameter-free propagation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from . import stgt
from .counting import add_madds, stage
from .errors import (
    ContractError,
    DegenerateDegreeError,
    EstimationError,
    LoadError,
)
from .rng import make_rng
from .tensor import Tensor, apply_op, as_tensor

log = logging.getLogger(__name__)

OperatorKind = Literal["sgc_adjacency", "rescaled_laplacian"]
OPERATOR_KINDS = ("sgc_adjacency", "rescaled_laplacian")


@dataclass(frozen=True)
class CsrMatrix:
    """Square-or-rectangular matrix in compressed sparse row form."""

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @classmethod
    def from_dense(cls, dense: np.ndarray, pattern: np.ndarray | None = None) -> "CsrMatrix":
        """Store entries where ``pattern`` is true (default: nonzeros), explicit zeros included."""
        dense = np.asarray(dense, dtype=np.float64)
        if pattern is None:
            pattern = dense != 0
        rows, cols = np.nonzero(pattern)
        counts = np.bincount(rows, minlength=dense.shape[0])
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return cls(dense.shape[0], dense.shape[1], indptr, cols.astype(np.int64), dense[rows, cols])

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        out[rows, self.indices] = self.data
        return out

    def transpose(self) -> "CsrMatrix":
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        order = np.lexsort((rows, self.indices))
        counts = np.bincount(self.indices, minlength=self.n_cols)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return CsrMatrix(self.n_cols, self.n_rows, indptr, rows[order], self.data[order])

    def matmul_dense(self, x: np.ndarray) -> np.ndarray:
        """``self @ x`` for a 2-D ``x`` of shape (n_cols, m); one madd per stored entry per column.

        Each output row is one weighted combination of the gathered operand
        rows, so work is proportional to the stored entries.
        """
        if x.shape[0] != self.n_cols:
            raise ContractError(f"CSR matmul: matrix has {self.n_cols} columns, operand {x.shape}")
        m = x.shape[1]
        add_madds(self.nnz * m)
        out = np.zeros((self.n_rows, m))
        for i in range(self.n_rows):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            if hi > lo:
                out[i] = self.data[lo:hi] @ x[self.indices[lo:hi]]
        return out


@dataclass
class RoadGraph:
    """Undirected weighted graph; ``adjacency`` is symmetric with a zero diagonal."""

    n_nodes: int
    edges: list[tuple[int, int, float]]
    adjacency: np.ndarray
    self_loops: bool = False

    @classmethod
    def from_adjacency(cls, adjacency, self_loops: bool = False) -> "RoadGraph":
        a = np.array(adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ContractError(f"adjacency must be square, got shape {a.shape}")
        if (a < 0).any():
            raise ContractError("adjacency weights must be nonnegative")
        diag = np.count_nonzero(np.diag(a))
        if diag:
            log.warning("dropping %d self-edge(s) from input adjacency", diag)
            np.fill_diagonal(a, 0.0)
        asym = int(np.count_nonzero(a != a.T))
        if asym:
            log.warning("symmetrizing directed input: %d asymmetric entries", asym)
            a = np.maximum(a, a.T)
        iu, ju = np.nonzero(np.triu(a, k=1))
        edges = [(int(i), int(j), float(a[i, j])) for i, j in zip(iu, ju)]
        return cls(a.shape[0], edges, a, self_loops)

    @classmethod
    def from_edges(
        cls, n_nodes: int, edges: Iterable[tuple[int, int, float]], self_loops: bool = False
    ) -> "RoadGraph":
        a = np.zeros((n_nodes, n_nodes))
        loops = 0
        for src, dst, w in edges:
            if not (0 <= src < n_nodes and 0 <= dst < n_nodes):
                raise ContractError(f"edge ({src}, {dst}) outside [0, {n_nodes})")
            if w < 0:
                raise ContractError(f"edge ({src}, {dst}) has negative weight {w}")
            if src == dst:
                loops += 1
                continue
            w = max(a[src, dst], w)
            a[src, dst] = a[dst, src] = w
        if loops:
            log.warning("dropping %d self-edge(s) from edge list", loops)
        return cls.from_adjacency(a, self_loops)

    @property
    def n_edges(self) -> int:
        """Distinct undirected edges."""
        return len(self.edges)

    @property
    def n_directed_edges(self) -> int:
        """Stored adjacency nonzeros, i.e. each undirected edge counted both ways."""
        return 2 * len(self.edges)

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def permuted(self, perm: np.ndarray) -> "RoadGraph":
        """Relabel so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        return RoadGraph.from_adjacency(self.adjacency[np.ix_(perm, perm)], self.self_loops)


def normalized_laplacian(g: RoadGraph) -> np.ndarray:
    """``D^{-1/2} (D - A) D^{-1/2}``, using ``A + I`` when the graph carries self-loops."""
    a = g.adjacency + (np.eye(g.n_nodes) if g.self_loops else 0.0)
    deg = a.sum(axis=1)
    zero = np.flatnonzero(deg <= 0)
    if zero.size:
        raise DegenerateDegreeError(int(zero[0]))
    dinv = 1.0 / np.sqrt(deg)
    lap = np.eye(g.n_nodes) - dinv[:, None] * a * dinv[None, :]
    return 0.5 * (lap + lap.T)


def lambda_max(
    lap: np.ndarray, tol: float = 1e-9, max_iter: int = 10_000, seed: int = 0
) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops once the Rayleigh quotient moves by less than ``tol`` (relative).
    """
    lap = np.asarray(lap, dtype=np.float64)
    n = lap.shape[0]
    if n == 0:
        raise ContractError("empty matrix")
    if not np.allclose(lap, lap.T, atol=1e-12):
        raise ContractError("lambda_max requires a symmetric matrix")
    v = make_rng(seed, "lambda_max").standard_normal(n)
    v /= np.linalg.norm(v)
    rq = float(v @ lap @ v)
    for _ in range(max_iter):
        w = lap @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ lap @ v)
        if abs(new - rq) <= tol * max(1.0, abs(new)):
            return _polish(lap, v, new)
        rq = new
    raise EstimationError(f"power iteration did not converge in {max_iter} steps", rq)


def _polish(lap: np.ndarray, v: np.ndarray, mu: float, steps: int = 3) -> float:
    """Refine a converged estimate with Rayleigh-quotient iteration.

    The power-iteration stopping rule leaves an error that depends on the start
    vector; a few shifted solves drive it to rounding level, which keeps the
    estimate invariant under node relabeling.
    """
    eye = np.eye(lap.shape[0])
    start = mu
    for _ in range(steps):
        try:
            w = np.linalg.solve(lap - mu * eye, v)
        except np.linalg.LinAlgError:
            break  # shift is an exact eigenvalue
        norm = np.linalg.norm(w)
        if not np.isfinite(norm) or norm == 0.0:
            break
        v = w / norm
        mu = float(v @ lap @ v)
    # Never trade the converged estimate for a different eigenvalue.
    return mu if abs(mu - start) <= 1e-6 * max(1.0, abs(start)) else start


@dataclass(frozen=True)
class PropagationOperator:
    kind: str
    matrix: CsrMatrix
    order: int
    lambda_max: float | None = None
    _transpose: CsrMatrix | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.matrix.n_rows

    @property
    def transpose(self) -> CsrMatrix:
        return self._transpose if self._transpose is not None else self.matrix.transpose()


def sgc_operator(g: RoadGraph) -> np.ndarray:
    """``D~^{-1/2} (A + I) D~^{-1/2}`` as a dense matrix."""
    a = g.adjacency + np.eye(g.n_nodes)
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return dinv[:, None] * a * dinv[None, :]


def build_operator(g: RoadGraph, kind: str = "sgc_adjacency", order: int = 1) -> PropagationOperator:
    """Normalized operator whose sparsity pattern is that of ``A`` plus the diagonal."""
    if order < 0:
        raise ContractError(f"order must be >= 0, got {order}")
    pattern = (g.adjacency != 0) | np.eye(g.n_nodes, dtype=bool)
    lmax = None
    if kind == "sgc_adjacency":
        dense = sgc_operator(g)
    elif kind == "rescaled_laplacian":
        lap = normalized_laplacian(g)
        lmax = lambda_max(lap)
        dense = 2.0 * lap / lmax - np.eye(g.n_nodes)
    else:
        raise ContractError(f"unknown operator kind {kind!r}; expected one of {OPERATOR_KINDS}")
    csr = CsrMatrix.from_dense(dense, pattern)
    return PropagationOperator(kind, csr, order, lmax, csr.transpose())


def _apply_nodes(csr: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """Apply ``csr`` along axis -2 (the node axis) of ``x``."""
    moved = np.moveaxis(x, -2, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = csr.matmul_dense(flat).reshape((csr.n_rows,) + moved.shape[1:])
    return np.ascontiguousarray(np.moveaxis(out, 0, -2))


def propagate_step(x: Tensor, op: PropagationOperator) -> Tensor:
    """One differentiable application ``P x`` along the node axis."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] != op.n:
        raise ContractError(f"operator has {op.n} nodes but features have shape {x.shape}")
    out = _apply_nodes(op.matrix, x.data)
    pt = op.transpose
    return apply_op(out, (x,), lambda g: (_apply_nodes(pt, g),), "propagate")


def graph_propagation(x_emb: Tensor, op: PropagationOperator, order: int | None = None) -> list[Tensor]:
    """``[X_0, X_1, ..., X_K]`` with ``X_0 = x_emb`` and ``X_k = P X_{k-1}``.

    ``x_emb`` is ``[..., T, N, C]``; no trainable parameters are involved.
    """
    k = op.order if order is None else order
    if k < 0:
        raise ContractError(f"order must be >= 0, got {k}")
    x_emb = as_tensor(x_emb)
    if x_emb.ndim < 2 or x_emb.shape[-2] != op.n:
        raise ContractError(f"operator has {op.n} nodes but features have shape {x_emb.shape}")
    orders = [x_emb]
    with stage("propagation"):
        for _ in range(k):
            orders.append(propagate_step(orders[-1], op))
    return orders


# --- file formats -------------------------------------------------------------
def load_edge_list(path: str | Path, self_loops: bool = False) -> RoadGraph:
    """Parse ``nodes=<N>`` followed by ``src dst weight`` lines (0-based)."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror}") from exc
    n_nodes = None
    edges = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if n_nodes is None:
            if not line.startswith("nodes="):
                raise LoadError(f"{path}:{lineno}: expected header 'nodes=<N>'")
            try:
                n_nodes = int(line.split("=", 1)[1])
            except ValueError as exc:
                raise LoadError(f"{path}:{lineno}: bad node count") from exc
            continue
        parts = line.split()
        if len(parts) != 3:
            raise LoadError(f"{path}:{lineno}: expected 'src dst weight'")
        try:
            src, dst, w = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise LoadError(f"{path}:{lineno}: cannot parse {line!r}") from exc
        if not (0 <= src < n_nodes and 0 <= dst < n_nodes) or w < 0:
            raise LoadError(f"{path}:{lineno}: invalid edge {line!r}")
        edges.append((src, dst, w))
    if n_nodes is None:
        raise LoadError(f"{path}: missing 'nodes=<N>' header")
    return RoadGraph.from_edges(n_nodes, edges, self_loops)


def save_edge_list(g: RoadGraph, path: str | Path) -> None:
    lines = [f"nodes={g.n_nodes}"] + [f"{s} {d} {w!r}" for s, d, w in g.edges]
    stgt.atomic_write_text(path, "\n".join(lines) + "\n")


def load_graph(path: str | Path, self_loops: bool = False) -> RoadGraph:
    """Edge-list text, or a dense adjacency stored as STGT (``.stgt``)."""
    path = Path(path)
    if path.suffix == ".stgt":
        return RoadGraph.from_adjacency(stgt.load(path), self_loops)
    return load_edge_list(path, self_loops)


def random_graph(n_nodes: int, n_edges: int, seed: int = 0) -> RoadGraph:
    """Uniform random graph with exactly ``n_edges`` distinct undirected edges."""
    max_edges = n_nodes * (n_nodes - 1) // 2
    if n_edges > max_edges:
        raise ContractError(f"{n_edges} edges exceed the {max_edges} possible on {n_nodes} nodes")
    rng = make_rng(seed, "random_graph")
    iu, ju = np.triu_indices(n_nodes, k=1)
    pick = rng.choice(iu.size, size=n_edges, replace=False)
    weights = rng.uniform(0.5, 1.5, size=n_edges)
    edges = [(int(iu[p]), int(ju[p]), float(w)) for p, w in zip(pick, weights)]
    return RoadGraph.from_edges(n_nodes, edges)
