"""Input embedding: feature projection, weekly/daily cycle tables, learned positional tensor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calendar import StWindow, validate_calendar
from .errors import ContractError
from .tensor import Tensor, broadcast_to, concat, gather_rows, matmul, transpose


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class EmbeddingTables:
    w_data: Tensor  # [C_in, d]
    b_data: Tensor  # [d]
    t_w: Tensor  # [7, d]
    t_d: Tensor  # [steps_per_day, d]
    x_ste: Tensor  # [N, T, d]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        c_in: int,
        d: int,
        n_nodes: int,
        steps: int,
        steps_per_day: int,
        zeros: bool = False,
    ) -> "EmbeddingTables":
        bound = 1.0 / np.sqrt(d)

        def table(*shape):
            if zeros:
                return Tensor(np.zeros(shape), requires_grad=True)
            return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

        w = np.zeros((c_in, d)) if zeros else xavier_uniform(rng, c_in, d)
        return cls(
            w_data=Tensor(w, requires_grad=True),
            b_data=Tensor(np.zeros(d), requires_grad=True),
            t_w=table(7, d),
            t_d=table(steps_per_day, d),
            x_ste=table(n_nodes, steps, d),
        )

    @property
    def d(self) -> int:
        return self.w_data.shape[1]

    def named(self) -> dict[str, Tensor]:
        return {
            "embed.w_data": self.w_data,
            "embed.b_data": self.b_data,
            "embed.t_w": self.t_w,
            "embed.t_d": self.t_d,
            "embed.x_ste": self.x_ste,
        }


def embed(window: StWindow, tables: EmbeddingTables) -> Tensor:
    """``[..., T, N, 4d]`` = projected data || weekly || daily || positional.

    Cycle embeddings depend only on the step and are shared by all nodes.
    """
    x = np.asarray(window.x, dtype=np.float64)
    dow = np.asarray(window.day_of_week)
    sod = np.asarray(window.step_of_day)
    if x.ndim < 3:
        raise ContractError(f"window readings must be [..., T, N, C_in], got {x.shape}")
    *lead, t, n, c_in = x.shape
    if dow.shape != (*lead, t) or sod.shape != (*lead, t):
        raise ContractError(f"calendar shape {dow.shape}/{sod.shape} != {(*lead, t)}")
    if c_in != tables.w_data.shape[0]:
        raise ContractError(f"readings have {c_in} channels, projection expects {tables.w_data.shape[0]}")
    n_ste, t_ste, d = tables.x_ste.shape
    if (n_ste, t_ste) != (n, t):
        raise ContractError(f"positional table is for N={n_ste}, T={t_ste}; window has N={n}, T={t}")
    validate_calendar(dow, sod, tables.t_d.shape[0])

    out_shape = (*lead, t, n, d)
    x_data = matmul(Tensor(x), tables.w_data) + tables.b_data
    per_step = (*lead, t, 1, d)
    x_w = broadcast_to(gather_rows(tables.t_w, dow - 1).reshape(per_step), out_shape)
    x_d = broadcast_to(gather_rows(tables.t_d, sod - 1).reshape(per_step), out_shape)
    x_ste = broadcast_to(transpose(tables.x_ste, (1, 0, 2)), out_shape)
    return concat([x_data, x_w, x_d, x_ste], axis=-1)
