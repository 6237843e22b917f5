"""Datasets on disk, synthetic traffic generation and sliding windows.

A dataset directory holds::

    manifest.txt     key = value lines (interval_minutes, start, readings, graph)
    readings.stgt    [steps, N, C_in] STGT tensor   (or readings.csv, long form)
    graph.txt        edge list: 'nodes=<N>' then 'src dst weight'
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from . import stgt
from .calendar import StWindow, calendar_arrays, steps_per_day
from .errors import ConfigError, ContractError, LoadError
from .graph import RoadGraph, load_graph, save_edge_list
from .rng import make_rng

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
TIME_FORMAT = "%Y-%m-%dT%H:%M:%S"


def split_bounds(n_steps: int) -> dict[str, tuple[int, int]]:
    """Chronological 6:2:2 split; validation and test get ``floor(0.2 n)`` each, train the rest."""
    n_val = n_test = (2 * n_steps) // 10
    n_train = n_steps - n_val - n_test
    return {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, n_steps),
    }


@dataclass
class StDataset:
    readings: np.ndarray  # [steps, N, C_in]
    day_of_week: np.ndarray  # [steps], 1..7
    step_of_day: np.ndarray  # [steps], 1..steps_per_day
    graph: RoadGraph
    interval_minutes: int
    start: datetime

    def __post_init__(self):
        if self.readings.ndim != 3:
            raise ContractError(f"readings must be [steps, N, C_in], got {self.readings.shape}")
        if self.readings.shape[1] != self.graph.n_nodes:
            raise ContractError(
                f"readings have {self.readings.shape[1]} nodes, graph has {self.graph.n_nodes}"
            )

    @classmethod
    def from_readings(cls, readings, graph: RoadGraph, interval_minutes: int, start: datetime) -> "StDataset":
        readings = np.ascontiguousarray(np.asarray(readings, dtype=np.float64))
        if readings.ndim == 2:
            readings = readings[:, :, None]
        dow, sod = calendar_arrays(start, readings.shape[0], interval_minutes)
        return cls(readings, dow, sod, graph, interval_minutes, start)

    @property
    def n_steps(self) -> int:
        return self.readings.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.readings.shape[1]

    @property
    def steps_per_day(self) -> int:
        return steps_per_day(self.interval_minutes)

    @property
    def splits(self) -> dict[str, tuple[int, int]]:
        return split_bounds(self.n_steps)

    def split(self, name: str) -> np.ndarray:
        lo, hi = self.bounds(name)
        return self.readings[lo:hi]

    def bounds(self, name: str) -> tuple[int, int]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; expected one of {SPLITS}")
        return self.splits[name]


# --- windows ------------------------------------------------------------------------
def window_starts(ds: StDataset, split: str, steps_in: int, steps_out: int) -> np.ndarray:
    """First index of every window whose inputs and targets lie inside ``split``."""
    lo, hi = ds.bounds(split)
    if hi - lo < steps_in + steps_out:
        raise ConfigError(
            f"{split} split has {hi - lo} steps, fewer than T + S = {steps_in + steps_out}"
        )
    return np.arange(lo, hi - steps_in - steps_out + 1)


def make_windows(ds: StDataset, split: str, steps_in: int, steps_out: int) -> list[tuple[StWindow, np.ndarray]]:
    """Stride-1 windows as views into ``ds.readings`` (no copies)."""
    out = []
    for i in window_starts(ds, split, steps_in, steps_out):
        w = StWindow(
            ds.readings[i : i + steps_in],
            ds.day_of_week[i : i + steps_in],
            ds.step_of_day[i : i + steps_in],
        )
        out.append((w, ds.readings[i + steps_in : i + steps_in + steps_out]))
    return out


def gather_batch(
    ds: StDataset, starts: np.ndarray, steps_in: int, steps_out: int, readings: np.ndarray | None = None
) -> tuple[StWindow, np.ndarray]:
    """Stack windows starting at ``starts``: inputs ``[B, T, N, C]``, targets ``[B, S, N, C]``.

    ``readings`` substitutes a transformed copy (e.g. normalized) for the inputs.
    """
    src = ds.readings if readings is None else readings
    idx_in = starts[:, None] + np.arange(steps_in)[None, :]
    idx_out = starts[:, None] + steps_in + np.arange(steps_out)[None, :]
    window = StWindow(src[idx_in], ds.day_of_week[idx_in], ds.step_of_day[idx_in])
    return window, ds.readings[idx_out]


# --- synthetic data ------------------------------------------------------------------
@dataclass
class SynthSpec:
    """Desk-scale traffic generator settings.

    Each node follows a commute-shaped daily profile (two weekday peaks, one
    broad weekend hump) scaled by a per-node level. On top sits a Gaussian
    deviation field of nominal amplitude ``noise`` built from two parts:

    * a network-wide AR(1) factor with lag-one correlation ``persistence``
      carrying a ``common_share`` of the variance;
    * a local field that spreads along the road graph. Each step it is
      averaged with the neighbours through ``(1 - alpha) I + alpha W``
      (``W`` the row-normalized adjacency with self-loops), damped by
      ``local_persistence`` and refreshed with fresh per-node shocks.

    Because disturbances travel between neighbours, recent readings at
    adjacent sensors carry information about a node's near future.
    """

    n_nodes: int = 20
    days: int = 28
    interval_minutes: int = 5
    radius: float = 0.3
    alpha: float = 0.6
    noise: float = 5.0
    persistence: float = 0.995
    local_persistence: float = 0.95
    common_share: float = 0.3
    missing_rate: float = 0.02
    level_low: float = 60.0
    level_high: float = 150.0
    seed: int = 7
    start: str = "2024-01-01T00:00:00"

    def validate(self) -> None:
        if self.n_nodes < 1 or self.days < 1:
            raise ConfigError("n_nodes and days must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.noise < 0 or not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError("noise must be >= 0 and missing_rate in [0, 1)")
        if not (-1.0 < self.persistence < 1.0 and -1.0 < self.local_persistence < 1.0):
            raise ConfigError("persistence and local_persistence must lie in (-1, 1)")
        if not 0.0 <= self.common_share <= 1.0:
            raise ConfigError("common_share must lie in [0, 1]")
        steps_per_day(self.interval_minutes)


def daily_profile(hours: np.ndarray, weekend: np.ndarray) -> np.ndarray:
    """Relative demand in (0, 1]: morning and evening peaks on weekdays, a midday hump on weekends."""
    def bump(center, width):
        return np.exp(-0.5 * ((hours - center) / width) ** 2)

    weekday = 0.25 + 0.75 * bump(8.0, 1.3) + 0.65 * bump(17.5, 1.7) + 0.25 * bump(12.5, 3.0)
    weekend_curve = 0.25 + 0.55 * bump(13.5, 3.2)
    return np.where(weekend, weekend_curve, weekday)


def random_geometric_graph(n_nodes: int, radius: float, rng: np.random.Generator) -> RoadGraph:
    pos = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    adj = np.where((dist < radius) & (dist > 0), np.exp(-((dist / radius) ** 2)), 0.0)
    graph = RoadGraph.from_adjacency(adj)
    if graph.n_edges == 0:
        log.warning("radius %.3f connects no node pairs; graph has no edges", radius)
    return graph


def diffusion_matrix(graph: RoadGraph, alpha: float) -> np.ndarray:
    a = graph.adjacency + np.eye(graph.n_nodes)
    w = a / a.sum(axis=1, keepdims=True)
    return (1.0 - alpha) * np.eye(graph.n_nodes) + alpha * w


def synth(spec: SynthSpec) -> StDataset:
    """Generate a dataset; identical specs give bitwise-identical data."""
    spec.validate()
    spd = steps_per_day(spec.interval_minutes)
    n_steps = spec.days * spd
    start = datetime.strptime(spec.start, TIME_FORMAT)
    graph = random_geometric_graph(spec.n_nodes, spec.radius, make_rng(spec.seed, "synth.graph"))
    dow, sod = calendar_arrays(start, n_steps, spec.interval_minutes)

    hours = (sod - 1) * spec.interval_minutes / 60.0
    curve = daily_profile(hours, dow >= 6)
    levels = make_rng(spec.seed, "synth.levels").uniform(spec.level_low, spec.level_high, spec.n_nodes)
    base = curve[:, None] * levels[None, :]

    rng = make_rng(spec.seed, "synth.noise")
    shocks = rng.standard_normal((n_steps, spec.n_nodes + 1))
    spread = diffusion_matrix(graph, spec.alpha)
    rho_c, rho_l = spec.persistence, spec.local_persistence
    common, local = 0.0, np.zeros(spec.n_nodes)
    field_ = np.empty((n_steps, spec.n_nodes))
    for t in range(n_steps):
        common = rho_c * common + np.sqrt(1.0 - rho_c**2) * shocks[t, 0]
        local = rho_l * (spread @ local) + np.sqrt(1.0 - rho_l**2) * shocks[t, 1:]
        field_[t] = np.sqrt(spec.common_share) * common + np.sqrt(1.0 - spec.common_share) * local
    deviation = spec.noise * field_

    values = np.maximum(base + deviation, 0.0)
    if spec.missing_rate > 0:
        missing = make_rng(spec.seed, "synth.missing").random(values.shape) < spec.missing_rate
        values = np.where(missing, 0.0, values)
    return StDataset(values[:, :, None], dow, sod, graph, spec.interval_minutes, start)


# --- persistence ----------------------------------------------------------------------
def save_dataset(ds: StDataset, directory: str | Path, fmt: str = "stgt") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if fmt == "stgt":
        readings_name = "readings.stgt"
        stgt.save(directory / readings_name, ds.readings)
    elif fmt == "csv":
        if ds.readings.shape[2] != 1:
            raise ContractError("CSV long form holds one channel per node")
        readings_name = "readings.csv"
        lines = ["timestamp,node,value"]
        step = timedelta(minutes=ds.interval_minutes)
        for t in range(ds.n_steps):
            stamp = (ds.start + t * step).strftime(TIME_FORMAT)
            for n in range(ds.n_nodes):
                lines.append(f"{stamp},{n},{float(ds.readings[t, n, 0])!r}")
        stgt.atomic_write_text(directory / readings_name, "\n".join(lines) + "\n")
    else:
        raise ConfigError(f"unknown readings format {fmt!r}")
    save_edge_list(ds.graph, directory / "graph.txt")
    manifest = {
        "interval_minutes": str(ds.interval_minutes),
        "start": ds.start.strftime(TIME_FORMAT),
        "readings": readings_name,
        "graph": "graph.txt",
    }
    stgt.atomic_write_text(
        directory / "manifest.txt", "".join(f"{k} = {v}\n" for k, v in manifest.items())
    )
    return directory


def read_kv_file(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise LoadError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise LoadError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _load_csv(path: Path, interval_minutes: int, start: datetime) -> np.ndarray:
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror}") from exc
    stamps: list[datetime] = []
    rows: list[dict[int, float]] = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["timestamp", "node", "value"]:
            raise LoadError(f"{path}:1: expected header 'timestamp,node,value'")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 3:
                raise LoadError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
            try:
                stamp = datetime.strptime(rec[0], TIME_FORMAT)
                node, value = int(rec[1]), float(rec[2])
            except ValueError as exc:
                raise LoadError(f"{path}:{lineno}: {exc}") from exc
            if not stamps or stamp != stamps[-1]:
                if stamps and stamp < stamps[-1]:
                    raise LoadError(f"{path}:{lineno}: timestamp {rec[0]} goes backwards")
                expected = start + len(stamps) * timedelta(minutes=interval_minutes)
                if stamp != expected:
                    raise LoadError(
                        f"{path}:{lineno}: timestamp {rec[0]} breaks the "
                        f"{interval_minutes}-minute grid (expected {expected.strftime(TIME_FORMAT)})"
                    )
                stamps.append(stamp)
                rows.append({})
            if node in rows[-1]:
                raise LoadError(f"{path}:{lineno}: duplicate node {node} at {rec[0]}")
            rows[-1][node] = value
    if not rows:
        raise LoadError(f"{path}: no readings")
    n_nodes = len(rows[0])
    out = np.zeros((len(rows), n_nodes, 1))
    for t, row in enumerate(rows):
        if sorted(row) != list(range(n_nodes)):
            raise LoadError(f"{path}: step {stamps[t].strftime(TIME_FORMAT)} lists nodes {sorted(row)}")
        for n, v in row.items():
            out[t, n, 0] = v
    return out


def load_dataset(directory: str | Path) -> StDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise LoadError(f"{manifest_path}: missing dataset manifest")
    manifest = read_kv_file(manifest_path)
    for key in ("interval_minutes", "start", "readings", "graph"):
        if key not in manifest:
            raise LoadError(f"{manifest_path}: missing key {key!r}")
    try:
        interval = int(manifest["interval_minutes"])
        start = datetime.strptime(manifest["start"], TIME_FORMAT)
    except ValueError as exc:
        raise LoadError(f"{manifest_path}: {exc}") from exc
    readings_path = directory / manifest["readings"]
    if readings_path.suffix == ".csv":
        readings = _load_csv(readings_path, interval, start)
    else:
        readings = stgt.load(readings_path)
        if readings.ndim == 2:
            readings = readings[:, :, None]
        if readings.ndim != 3:
            raise LoadError(f"{readings_path}: expected [steps, N, C_in], got shape {readings.shape}")
    graph = load_graph(directory / manifest["graph"])
    if graph.n_nodes != readings.shape[1]:
        raise LoadError(
            f"{readings_path}: {readings.shape[1]} nodes but graph {manifest['graph']} has {graph.n_nodes}"
        )
    return StDataset.from_readings(readings, graph, interval, start)


def synth_spec_from_dict(values: dict) -> SynthSpec:
    known = {f.name for f in fields(SynthSpec)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown synth settings: {sorted(unknown)}")
    return SynthSpec(**values)


def synth_spec_to_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
