"""Shared-QKV spatiotemporal attention and the recursive gated interaction.

Features are laid out ``[..., T, N, C]``. One projection triple produces
``Q, K, V`` once per call; the spatial branch attends over nodes within each
step and the temporal branch attends over steps within each node.

Two estimators are provided:

* ``softmax``: ``Softmax(Q K^T / sqrt(C)) V`` per branch, quadratic in the
  attended axis.
* ``linear``: ``Q (K^T V) / n`` per branch, where ``n`` is the length of the
  attended axis (N for spatial, T for temporal). The ``C x C`` contraction
  ``K^T V`` is formed first, so the cost is linear in ``n``. This equals the
  scaling-normalized ``(Q K^T) V / n`` exactly; it is not an approximation of
  the softmax estimator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .counting import stage
from .embedding import xavier_uniform
from .errors import ContractError
from .tensor import Tensor, as_tensor, matmul, softmax, swapaxes

ATTENTION_KINDS = ("softmax", "linear")


@dataclass
class QkvProjection:
    """The single ``w_Q, w_K, w_V`` triple plus output mixing ``w_O`` (all ``C x C``)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, zeros: bool = False) -> "QkvProjection":
        def mat():
            w = np.zeros((channels, channels)) if zeros else xavier_uniform(rng, channels, channels)
            return Tensor(w, requires_grad=True)

        return cls(mat(), mat(), mat(), mat())

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {"attn.w_q": self.w_q, "attn.w_k": self.w_k, "attn.w_v": self.w_v, "attn.w_o": self.w_o}


@dataclass
class GateStack:
    """Gates ``g_0 .. g_{K-1}`` and the final pointwise mixer.

    ``g_0`` is the identity; ``gates[i]`` holds the square map for ``g_{i+1}``.
    """

    order: int
    gates: list[Tensor]
    mixer_w: Tensor
    mixer_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, order: int, zeros: bool = False) -> "GateStack":
        if order < 0:
            raise ContractError(f"order must be >= 0, got {order}")

        def mat():
            w = np.zeros((channels, channels)) if zeros else xavier_uniform(rng, channels, channels)
            return Tensor(w, requires_grad=True)

        gates = [mat() for _ in range(max(order - 1, 0))]
        return cls(order, gates, mat(), Tensor(np.zeros(channels), requires_grad=True))

    def gate(self, n: int, p: Tensor) -> Tensor:
        if n == 0:
            return p
        return matmul(p, self.gates[n - 1])

    def mix(self, p: Tensor) -> Tensor:
        return matmul(p, self.mixer_w) + self.mixer_b

    def named(self) -> dict[str, Tensor]:
        out = {f"gate.{i + 1}": g for i, g in enumerate(self.gates)}
        out["mixer.w"] = self.mixer_w
        out["mixer.b"] = self.mixer_b
        return out


@dataclass(frozen=True)
class AttentionMode:
    kind: str = "linear"
    use_spatial: bool = True
    use_temporal: bool = True
    no_attention: bool = field(default=False)

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ContractError(f"attention kind must be one of {ATTENTION_KINDS}, got {self.kind!r}")
        if not (self.use_spatial or self.use_temporal) and not self.no_attention:
            raise ContractError(
                "both attention branches disabled; pass no_attention=True to request that ablation"
            )
        if self.no_attention and (self.use_spatial or self.use_temporal):
            raise ContractError("no_attention=True requires both branches disabled")

    @classmethod
    def ablation(cls, kind: str = "linear", spatial: bool = True, temporal: bool = True) -> "AttentionMode":
        return cls(kind, spatial, temporal, no_attention=not (spatial or temporal))


def _check_h(h: Tensor, proj: QkvProjection) -> None:
    if h.ndim < 3:
        raise ContractError(f"attention input must be [..., T, N, C], got {h.shape}")
    if h.shape[-1] != proj.channels:
        raise ContractError(f"input has {h.shape[-1]} channels, projection expects {proj.channels}")


def qkv(h: Tensor, proj: QkvProjection) -> tuple[Tensor, Tensor, Tensor]:
    with stage("attention.projection"):
        return matmul(h, proj.w_q), matmul(h, proj.w_k), matmul(h, proj.w_v)


def spatial_softmax(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / np.sqrt(q.shape[-1])
    with stage("attention.spatial"):
        a = softmax(matmul(q, swapaxes(k, -1, -2)) * scale, axis=-1)
        return matmul(a, v)


def temporal_softmax(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / np.sqrt(q.shape[-1])
    qn, kn, vn = (swapaxes(t, -3, -2) for t in (q, k, v))
    with stage("attention.temporal"):
        a = softmax(matmul(qn, swapaxes(kn, -1, -2)) * scale, axis=-1)
        return swapaxes(matmul(a, vn), -3, -2)


def spatial_linear(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    n = q.shape[-2]
    with stage("attention.spatial"):
        kv = matmul(swapaxes(k, -1, -2), v)
        return matmul(q, kv) * (1.0 / n)


def temporal_linear(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    t = q.shape[-3]
    qn, kn, vn = (swapaxes(x, -3, -2) for x in (q, k, v))
    with stage("attention.temporal"):
        kv = matmul(swapaxes(kn, -1, -2), vn)
        return swapaxes(matmul(qn, kv) * (1.0 / t), -3, -2)


def attention_weights(h: Tensor, proj: QkvProjection) -> tuple[np.ndarray, np.ndarray]:
    """Softmax score matrices: spatial ``[..., T, N, N]`` and temporal ``[..., N, T, T]``."""
    h = as_tensor(h)
    _check_h(h, proj)
    q, k, _ = qkv(h, proj)
    scale = 1.0 / np.sqrt(q.shape[-1])
    a_s = softmax(matmul(q, swapaxes(k, -1, -2)) * scale, axis=-1)
    qn, kn = swapaxes(q, -3, -2), swapaxes(k, -3, -2)
    a_t = softmax(matmul(qn, swapaxes(kn, -1, -2)) * scale, axis=-1)
    return a_s.numpy(), a_t.numpy()


def _combine(h: Tensor, proj: QkvProjection, use_spatial: bool, use_temporal: bool, spatial, temporal) -> Tensor:
    h = as_tensor(h)
    _check_h(h, proj)
    if not (use_spatial or use_temporal):
        return Tensor(np.zeros(h.shape))
    q, k, v = qkv(h, proj)
    mixed = None
    if use_spatial:
        mixed = spatial(q, k, v)
    if use_temporal:
        out_t = temporal(q, k, v)
        mixed = out_t if mixed is None else mixed + out_t
    with stage("attention.output"):
        return matmul(mixed, proj.w_o)


def st_attention_softmax(
    h: Tensor, proj: QkvProjection, use_spatial: bool = True, use_temporal: bool = True
) -> Tensor:
    """``(Softmax_s + Softmax_t) W_O`` with one shared ``Q, K, V``."""
    return _combine(h, proj, use_spatial, use_temporal, spatial_softmax, temporal_softmax)


def st_attention_linear(
    h: Tensor, proj: QkvProjection, use_spatial: bool = True, use_temporal: bool = True
) -> Tensor:
    """``(Q_t (K_t^T V_t) / N + Q_n (K_n^T V_n) / T) W_O`` with one shared ``Q, K, V``."""
    return _combine(h, proj, use_spatial, use_temporal, spatial_linear, temporal_linear)


def st_attention(h: Tensor, proj: QkvProjection, mode: AttentionMode) -> Tensor:
    fn = st_attention_linear if mode.kind == "linear" else st_attention_softmax
    return fn(h, proj, mode.use_spatial, mode.use_temporal)


def recursive_interaction(
    orders: list[Tensor], proj: QkvProjection, gates: GateStack, mode: AttentionMode
) -> Tensor:
    """``mixer(p_K) + X_0`` with ``p_0 = X_0`` and ``p_{n+1} = a(X_{n+1}) * g_n(p_n)``."""
    if len(orders) != gates.order + 1:
        raise ContractError(f"got {len(orders)} propagation orders, gate stack expects {gates.order + 1}")
    shape = orders[0].shape
    for i, x in enumerate(orders):
        if x.shape != shape:
            raise ContractError(f"order {i} has shape {x.shape}, order 0 has {shape}")
    p = orders[0]
    for n in range(gates.order):
        a = st_attention(orders[n + 1], proj, mode)
        with stage("interaction"):
            p = a * gates.gate(n, p)
    with stage("interaction"):
        mixed = gates.mix(p)
    return mixed + orders[0]
