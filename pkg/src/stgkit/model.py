"""Single-layer spatiotemporal graph transformer: config, parameters, forward pass, checkpoints."""
from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import stgt
from .attention import AttentionMode, GateStack, QkvProjection, recursive_interaction
from .calendar import StWindow, steps_per_day
from .embedding import EmbeddingTables, embed, xavier_uniform
from .errors import CheckpointFormatError, ConfigError, ContractError, DataError
from .graph import OPERATOR_KINDS, PropagationOperator, RoadGraph, build_operator, graph_propagation
from .metrics import NormStats
from .rng import make_rng
from .tensor import Tensor, layer_norm, matmul, reshape, transpose


@dataclass
class StgConfig:
    steps_in: int = 12
    steps_out: int = 12
    d: int = 8
    order: int = 3
    c_in: int = 1
    attn_mode: str = "linear"
    use_spatial: bool = True
    use_temporal: bool = True
    use_graph: bool = True
    operator_kind: str = "sgc_adjacency"
    interval_minutes: int = 5
    learning_rate: float = 1e-3
    lr_milestones: str = ""  # comma-separated epochs at which the rate is multiplied by lr_decay
    lr_decay: float = 0.5
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 20
    min_delta: float = 1e-4
    clip_norm: float = 5.0
    eval_batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def channels(self) -> int:
        return 4 * self.d

    @property
    def effective_order(self) -> int:
        return self.order if self.use_graph else 0

    @property
    def attention_mode(self) -> AttentionMode:
        return AttentionMode.ablation(self.attn_mode, self.use_spatial, self.use_temporal)

    def validate(self) -> None:
        if self.steps_in < 1 or self.steps_out < 1:
            raise ConfigError("steps_in and steps_out must be >= 1")
        if self.order < 0 or self.d < 1 or self.c_in < 1:
            raise ConfigError("order must be >= 0; d and c_in >= 1")
        if self.attn_mode not in ("softmax", "linear"):
            raise ConfigError(f"attn_mode must be 'softmax' or 'linear', got {self.attn_mode!r}")
        if self.operator_kind not in OPERATOR_KINDS:
            raise ConfigError(f"operator_kind must be one of {OPERATOR_KINDS}")
        if self.batch_size < 1 or self.eval_batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("batch sizes must be >= 1; max_epochs and patience >= 0")
        if self.learning_rate < 0 or self.clip_norm <= 0:
            raise ConfigError("learning_rate must be >= 0 and clip_norm > 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        self.milestones()
        try:
            steps_per_day(self.interval_minutes)
        except DataError as exc:
            raise ConfigError(str(exc)) from exc

    def milestones(self) -> tuple[int, ...]:
        try:
            marks = tuple(int(m) for m in self.lr_milestones.split(",") if m.strip())
        except ValueError as exc:
            raise ConfigError(f"lr_milestones must be comma-separated epochs, got {self.lr_milestones!r}") from exc
        if any(m < 1 for m in marks) or list(marks) != sorted(set(marks)):
            raise ConfigError(f"lr_milestones must be increasing positive epochs, got {self.lr_milestones!r}")
        return marks

    def learning_rate_at(self, epoch: int) -> float:
        """Rate for the 0-based ``epoch``: decayed once per milestone already reached."""
        return self.learning_rate * self.lr_decay ** sum(epoch >= m for m in self.milestones())

    # --- flat key = value text ---------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "StgConfig | None" = None) -> "StgConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        current = {f.name: getattr(base, f.name) for f in fields(cls)} if base else {}
        for key, raw in values.items():
            current[key] = _parse_value(key, types[key], raw)
        return cls(**current)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "StgConfig":
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = value
        return cls.from_mapping(values)

    @classmethod
    def load(cls, path: str | Path) -> "StgConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))


def _parse_value(key: str, typ, raw):
    if not isinstance(raw, str):
        return raw
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {name}") from exc
    return raw


@dataclass
class StgModel:
    config: StgConfig
    graph: RoadGraph
    op: PropagationOperator
    tables: EmbeddingTables
    proj: QkvProjection
    gates: GateStack
    norm_gain: Tensor
    norm_bias: Tensor
    head_w: Tensor  # [T * C, S * c_in]
    head_b: Tensor  # [S * c_in]

    @classmethod
    def create(cls, config: StgConfig, graph: RoadGraph, zeros: bool = False) -> "StgModel":
        """Fresh parameters drawn from ``config.seed``; ``zeros=True`` gives an all-zero model."""
        c, k = config.channels, config.effective_order
        op = build_operator(graph, config.operator_kind, k)
        tables = EmbeddingTables.init(
            make_rng(config.seed, "init.embedding"), config.c_in, config.d, graph.n_nodes,
            config.steps_in, steps_per_day(config.interval_minutes), zeros=zeros,
        )
        proj = QkvProjection.init(make_rng(config.seed, "init.attention"), c, zeros=zeros)
        gates = GateStack.init(make_rng(config.seed, "init.gates"), c, k, zeros=zeros)
        fan_in, fan_out = config.steps_in * c, config.steps_out * config.c_in
        head = (
            np.zeros((fan_in, fan_out)) if zeros
            else xavier_uniform(make_rng(config.seed, "init.head"), fan_in, fan_out)
        )
        gain = np.zeros(c) if zeros else np.ones(c)
        return cls(
            config, graph, op, tables, proj, gates,
            Tensor(gain, requires_grad=True), Tensor(np.zeros(c), requires_grad=True),
            Tensor(head, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True),
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.tables.named())
        out.update(self.proj.named())
        out.update(self.gates.named())
        out["norm.gain"] = self.norm_gain
        out["norm.bias"] = self.norm_bias
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.numpy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise CheckpointFormatError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for name, tensor in params.items():
            if state[name].shape != tensor.shape:
                raise CheckpointFormatError(
                    f"parameter {name}: stored shape {state[name].shape} != {tensor.shape}"
                )
            tensor.set_data(state[name])


def count_params(model: StgModel) -> int:
    return int(sum(p.size for p in model.parameters()))


def block(model: StgModel, x_emb: Tensor) -> Tensor:
    """Propagation, recursive attention interaction, residual and layer norm."""
    orders = graph_propagation(x_emb, model.op, model.config.effective_order)
    z = recursive_interaction(orders, model.proj, model.gates, model.config.attention_mode)
    return layer_norm(z, model.norm_gain, model.norm_bias)


def forward(model: StgModel, window: StWindow) -> Tensor:
    """Normalized-space forecast ``[..., S, N, c_in]`` for normalized inputs ``[..., T, N, c_in]``."""
    cfg = model.config
    x = np.asarray(window.x)
    if x.ndim < 3 or x.shape[-3:] != (cfg.steps_in, model.graph.n_nodes, cfg.c_in):
        raise ContractError(
            f"window shape {x.shape} does not match T={cfg.steps_in}, "
            f"N={model.graph.n_nodes}, C_in={cfg.c_in}"
        )
    lead = x.shape[:-3]
    h = block(model, embed(window, model.tables))  # [..., T, N, C]
    nd = len(lead)
    per_node = transpose(h, tuple(range(nd)) + (nd + 1, nd, nd + 2))  # [..., N, T, C]
    flat = reshape(per_node, (*lead, model.graph.n_nodes, cfg.steps_in * cfg.channels))
    out = matmul(flat, model.head_w) + model.head_b  # [..., N, S * c_in]
    out = reshape(out, (*lead, model.graph.n_nodes, cfg.steps_out, cfg.c_in))
    return transpose(out, tuple(range(nd)) + (nd + 1, nd, nd + 2))


# --- checkpoints ----------------------------------------------------------------------
def _fmt_floats(values: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(values))


_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path: str | Path, model: StgModel, stats: NormStats | None, extra: dict | None = None) -> None:
    """Zip container: ``manifest.txt`` plus one STGT member per named tensor; written atomically."""
    manifest = [f"config.{f.name} = {getattr(model.config, f.name)}" for f in fields(model.config)]
    if stats is not None:
        manifest.append(f"norm.mu = {_fmt_floats(stats.mu)}")
        manifest.append(f"norm.sigma = {_fmt_floats(stats.sigma)}")
    manifest.append(f"param_count = {count_params(model)}")
    manifest.append(f"seed = {model.config.seed}")
    for key, value in (extra or {}).items():
        manifest.append(f"extra.{key} = {value}")
    members = [("manifest.txt", ("\n".join(manifest) + "\n").encode("utf-8")),
               ("tensors/graph.adjacency.stgt", stgt.dumps(model.graph.adjacency))]
    members += [(f"tensors/{name}.stgt", stgt.dumps(t.data)) for name, t in model.named_parameters().items()]
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in members:
            # A fixed member timestamp keeps identical models byte-identical on disk.
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_EPOCH), payload)
    stgt.atomic_write_bytes(path, buf.getvalue())


@dataclass
class Checkpoint:
    model: StgModel
    stats: NormStats | None
    manifest: dict[str, str]


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointFormatError(f"{path}: not a checkpoint container ({exc})") from exc
    with zf:
        names = set(zf.namelist())
        if "manifest.txt" not in names:
            raise CheckpointFormatError(f"{path}: missing manifest.txt")
        manifest: dict[str, str] = {}
        for line in zf.read("manifest.txt").decode("utf-8").splitlines():
            if line.strip():
                key, value = (s.strip() for s in line.split("=", 1))
                manifest[key] = value
        tensors = {
            n[len("tensors/"):-len(".stgt")]: stgt.loads(zf.read(n), f"{path}:{n}")
            for n in names if n.startswith("tensors/") and n.endswith(".stgt")
        }
    cfg_values = {k[len("config."):]: v for k, v in manifest.items() if k.startswith("config.")}
    config = StgConfig.from_mapping(cfg_values)
    if "graph.adjacency" not in tensors:
        raise CheckpointFormatError(f"{path}: missing graph adjacency")
    graph = RoadGraph.from_adjacency(tensors.pop("graph.adjacency"))
    model = StgModel.create(config, graph, zeros=True)
    model.load_state(tensors)
    stats = None
    if "norm.mu" in manifest and "norm.sigma" in manifest:
        mu = np.array([float(v) for v in manifest["norm.mu"].split(",")])
        sigma = np.array([float(v) for v in manifest["norm.sigma"].split(",")])
        stats = NormStats(mu, sigma)
    return Checkpoint(model, stats, manifest)
