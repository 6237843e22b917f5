"""Adam training with early stopping, chunked evaluation and checkpoint inference."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .calendar import StWindow
from .data import StDataset, gather_batch, window_starts
from .errors import CheckpointFormatError, NonFiniteError, TrainingError
from .metrics import NormStats, masked_mae_loss, masked_metrics, zscore, inverse_zscore, MetricReport
from .model import StgModel, forward, load_checkpoint, save_checkpoint
from .rng import make_rng
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction; moments live in plain arrays keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            if self.lr == 0.0:
                continue
            p.set_data(p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the raw norm."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


@dataclass
class TrainState:
    epoch: int = 0
    best_val_mae: float = float("inf")
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    stopped_early: bool = False
    optimizer: Adam | None = None
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    stats: NormStats | None = None


def fit_stats(ds: StDataset) -> NormStats:
    """Normalization statistics from the training split only."""
    return NormStats.fit(ds.split("train"))


def _loss_batch(model: StgModel, window: StWindow, target: np.ndarray, stats: NormStats) -> Tensor:
    pred = forward(model, window)
    return masked_mae_loss(pred, zscore(target, stats), target != 0)


def predict_windows(model: StgModel, ds: StDataset, starts: np.ndarray, stats: NormStats,
                    threads: int = 1, normalized: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Denormalized predictions and raw targets ``[W, S, N, C]`` for the windows at ``starts``.

    Windows are cut into fixed chunks of ``eval_batch_size`` regardless of
    ``threads``, so results are bitwise identical for any thread count.
    """
    cfg = model.config
    norm = zscore(ds.readings, stats) if normalized is None else normalized
    chunks = [starts[i : i + cfg.eval_batch_size] for i in range(0, len(starts), cfg.eval_batch_size)]

    def run(chunk):
        window, target = gather_batch(ds, chunk, cfg.steps_in, cfg.steps_out, readings=norm)
        return inverse_zscore(forward(model, window).data, stats), target

    if threads <= 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    return np.concatenate([p for p, _ in parts]), np.concatenate([t for _, t in parts])


def evaluate(model: StgModel, ds: StDataset, stats: NormStats, split: str = "test",
             threads: int = 1) -> MetricReport:
    cfg = model.config
    starts = window_starts(ds, split, cfg.steps_in, cfg.steps_out)
    pred, truth = predict_windows(model, ds, starts, stats, threads)
    return masked_metrics(pred, truth, horizon_axis=1)


def train(model: StgModel, ds: StDataset, checkpoint: str | Path | None = None,
          threads: int = 1, log_fn: Callable[[dict], None] | None = None) -> TrainState:
    """Train ``model`` in place; the best-validation parameters are restored at the end."""
    cfg = model.config
    stats = fit_stats(ds)
    norm = zscore(ds.readings, stats)
    train_starts = window_starts(ds, "train", cfg.steps_in, cfg.steps_out)
    val_starts = window_starts(ds, "val", cfg.steps_in, cfg.steps_out)
    params = model.named_parameters()
    opt = Adam(params, lr=cfg.learning_rate)
    rng = make_rng(cfg.seed, "train.shuffle")
    state = TrainState(optimizer=opt, stats=stats)
    best = model.state()

    for epoch in range(cfg.max_epochs):
        opt.lr = cfg.learning_rate_at(epoch)
        order = rng.permutation(train_starts)
        total, count = 0.0, 0
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = order[lo : lo + cfg.batch_size]
            window, target = gather_batch(ds, chunk, cfg.steps_in, cfg.steps_out, readings=norm)
            if not (target != 0).any():
                continue
            try:
                with Tape():
                    loss = _loss_batch(model, window, target, stats)
                    grads_by_tensor = backward(loss)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
            # Parameters the active configuration never reaches get a zero gradient.
            grads = {k: grads_by_tensor.get(p, np.zeros(p.shape)) for k, p in params.items()}
            clip_global_norm(grads, cfg.clip_norm)
            try:
                opt.step(grads)
            except NonFiniteError as exc:
                raise TrainingError(f"parameters diverged at epoch {epoch}, step {step}: {exc}") from exc
            total += loss.item() * len(chunk)
            count += len(chunk)
        train_loss = total / max(count, 1)

        pred, truth = predict_windows(model, ds, val_starts, stats, threads, normalized=norm)
        val_mae = masked_metrics(pred, truth).mae
        state.epoch = epoch + 1
        record = {"epoch": epoch + 1, "train_loss": train_loss, "val_mae": val_mae}
        state.history.append(record)
        if state.best_val_mae - val_mae >= cfg.min_delta or state.best_epoch < 0:
            state.best_val_mae = val_mae
            state.best_epoch = epoch + 1
            state.epochs_since_improvement = 0
            best = model.state()
            if checkpoint is not None:
                save_checkpoint(checkpoint, model, stats, {"epoch": epoch + 1, "val_mae": repr(val_mae)})
        else:
            state.epochs_since_improvement += 1
        record["best_val_mae"] = state.best_val_mae
        if log_fn is not None:
            log_fn(record)
        log.info("epoch %d train_loss %.6f val_mae %.6f", epoch + 1, train_loss, val_mae)
        if state.epochs_since_improvement > 0 and state.epochs_since_improvement >= cfg.patience:
            state.stopped_early = True
            break

    model.load_state(best)
    state.rng_state = rng.bit_generator.state
    if checkpoint is not None and cfg.max_epochs == 0:
        save_checkpoint(checkpoint, model, stats)
    return state


def predict(checkpoint: str | Path, window: StWindow) -> np.ndarray:
    """Denormalized forecast ``[..., S, N, C]`` for a raw-unit input window."""
    ckpt = load_checkpoint(checkpoint)
    if ckpt.stats is None:
        raise CheckpointFormatError(f"{checkpoint}: normalization statistics missing")
    norm = StWindow(zscore(window.x, ckpt.stats), window.day_of_week, window.step_of_day)
    return inverse_zscore(forward(ckpt.model, norm).data, ckpt.stats)
