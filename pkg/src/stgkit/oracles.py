"""Slow, independent reference implementations used to cross-check the fast paths.

Nothing here touches the autodiff tensor or the CSR kernels: every routine
works on plain arrays with explicit Python loops, so agreement with the
production code is evidence rather than tautology.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np


def loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, p = b.shape
    if k != k2:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for r in range(k):
                acc += a[i, r] * b[r, j]
            out[i, j] = acc
    return out


def loop_softmax_rows(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        top = max(x[i])
        e = [math.exp(v - top) for v in x[i]]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def quadratic_linear_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``(Q K^T) V / n`` for 2-D ``[n, C]`` operands, the quadratic association."""
    return (q @ k.T) @ v / q.shape[0]


def loop_softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``Softmax(Q K^T / sqrt(C)) V`` for 2-D operands."""
    scores = loop_matmul(q, k.T) / math.sqrt(q.shape[1])
    return loop_matmul(loop_softmax_rows(scores), v)


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * max(1.0, float(np.abs(a).max())):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
    return np.sort(np.diag(a))


def dense_sgc(adjacency: np.ndarray) -> np.ndarray:
    """``D~^{-1/2} (A + I) D~^{-1/2}`` entry by entry."""
    n = adjacency.shape[0]
    a = [[float(adjacency[i][j]) + (1.0 if i == j else 0.0) for j in range(n)] for i in range(n)]
    deg = [sum(row) for row in a]
    return np.array([[a[i][j] / math.sqrt(deg[i] * deg[j]) for j in range(n)] for i in range(n)])


def loop_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """Masked MAE, RMSE and MAPE (percent) with one scalar loop."""
    abs_sum = sq_sum = pct_sum = 0.0
    count = 0
    for p, t in zip(np.ravel(pred).tolist(), np.ravel(truth).tolist()):
        if t == 0:
            continue
        e = p - t
        abs_sum += abs(e)
        sq_sum += e * e
        pct_sum += abs(e) / abs(t)
        count += 1
    if count == 0:
        raise ZeroDivisionError("empty mask")
    return abs_sum / count, math.sqrt(sq_sum / count), pct_sum / count * 100.0


def central_difference(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Gradient of ``f`` w.r.t. the array ``x``, perturbed in place entry by entry."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def _layer_norm_vec(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    m = sum(x) / len(x)
    var = sum((v - m) ** 2 for v in x) / len(x)
    return np.array([(v - m) / math.sqrt(var + eps) for v in x]) * gain + bias


def pipeline_forward(
    params: dict[str, np.ndarray],
    adjacency: np.ndarray,
    x: np.ndarray,
    dow: np.ndarray,
    sod: np.ndarray,
    order: int,
    steps_out: int,
    kind: str = "linear",
    use_spatial: bool = True,
    use_temporal: bool = True,
) -> np.ndarray:
    """Token-by-token forward pass for one unbatched window ``x`` ``[T, N, C_in]``.

    Uses the symmetric-normalized adjacency with self-loops as the propagation
    operator. Returns ``[S, N, C_in]``.
    """
    t_len, n, c_in = x.shape
    d = params["embed.w_data"].shape[1]
    c = 4 * d

    # embedding, one token at a time
    h0 = np.zeros((t_len, n, c))
    for t in range(t_len):
        for i in range(n):
            data = [
                sum(x[t, i, r] * params["embed.w_data"][r, j] for r in range(c_in)) + params["embed.b_data"][j]
                for j in range(d)
            ]
            h0[t, i] = np.concatenate([
                data,
                params["embed.t_w"][dow[t] - 1],
                params["embed.t_d"][sod[t] - 1],
                params["embed.x_ste"][i, t],
            ])

    # propagation orders
    p_mat = dense_sgc(adjacency)
    orders = [h0]
    for _ in range(order):
        prev = orders[-1]
        nxt = np.zeros_like(prev)
        for t in range(t_len):
            nxt[t] = loop_matmul(p_mat, prev[t])
        orders.append(nxt)

    wq, wk, wv, wo = (params[f"attn.w_{s}"] for s in "qkvo")

    def attend(h):
        mixed = np.zeros_like(h)
        q = np.stack([loop_matmul(h[t], wq) for t in range(t_len)])
        k = np.stack([loop_matmul(h[t], wk) for t in range(t_len)])
        v = np.stack([loop_matmul(h[t], wv) for t in range(t_len)])
        if use_spatial:
            for t in range(t_len):
                if kind == "linear":
                    mixed[t] += quadratic_linear_attention(q[t], k[t], v[t])
                else:
                    mixed[t] += loop_softmax_attention(q[t], k[t], v[t])
        if use_temporal:
            for i in range(n):
                if kind == "linear":
                    mixed[:, i] += quadratic_linear_attention(q[:, i], k[:, i], v[:, i])
                else:
                    mixed[:, i] += loop_softmax_attention(q[:, i], k[:, i], v[:, i])
        return np.stack([loop_matmul(mixed[t], wo) for t in range(t_len)])

    # recursive gated interaction
    p = orders[0]
    for step in range(order):
        a = attend(orders[step + 1]) if (use_spatial or use_temporal) else np.zeros_like(p)
        g = p if step == 0 else np.stack([loop_matmul(p[t], params[f"gate.{step}"]) for t in range(t_len)])
        p = a * g
    z = np.stack([loop_matmul(p[t], params["mixer.w"]) for t in range(t_len)]) + params["mixer.b"] + orders[0]

    # layer norm per token, then the per-node regression head
    out = np.zeros((steps_out, n, c_in))
    for i in range(n):
        feats = np.concatenate([
            _layer_norm_vec(z[t, i], params["norm.gain"], params["norm.bias"]) for t in range(t_len)
        ])
        flat = loop_matmul(feats[None, :], params["head.w"])[0] + params["head.b"]
        out[:, i, :] = flat.reshape(steps_out, c_in)
    return out
