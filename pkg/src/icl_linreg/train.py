"""Pretraining loop: Adam, decoupled weight decay, one-cycle triangle LR.

Every step consumes a freshly sampled batch (no data reuse), so a run of N
steps at batch size B sees exactly N*B unique sequences.  Batches are keyed
by step index on their own random stream, which makes interrupted runs
resumable with a bit-identical continued trajectory: restoring the latest
checkpoint restores both the parameters/optimizer moments and, implicitly,
the position of every random stream.
"""

from __future__ import annotations

import csv
import ctypes
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as model_mod
from .errors import NumericalError
from .model import ModelConfig, ModelParams
from .rng import RngHandle
from .tasks import RegressionSequence, TaskDistribution, sample_batch_arrays

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainResult",
    "loss_and_grad",
    "loss_and_grad_arrays",
    "lr_at_step",
    "adam_step",
    "train",
    "probe_stability",
]

_TASK_HIST_MAX = 1 << 12  # histogram logging cap; counting is O(B) per step


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    n_steps: int = 500_000
    peak_lr: float = 1e-3
    warmup_frac: float = 0.5
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 25_000
    grad_clip: float | None = None
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1 or self.n_steps < 1:
            raise ValueError("batch_size and n_steps must be positive")
        if not 0.0 < self.warmup_frac <= 1.0:
            raise ValueError("warmup_frac must be in (0, 1]")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0 when set")


@dataclass
class OptimizerState:
    """Adam first/second moments, mirroring parameter shapes, plus step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
        )

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], t: int) -> "OptimizerState":
        m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
        v = {k[2:]: v for k, v in arrays.items() if k.startswith("v.")}
        return cls(m=m, v=v, t=t)


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[tuple[int, float, float, float]]  # (step, loss, lr, wall_ms)
    task_histogram: np.ndarray | None = None
    out_dir: str | None = None
    final_step: int = 0


def lr_at_step(t: int, cfg: TrainConfig) -> float:
    """One-cycle triangle: linear 0 -> peak over the warmup fraction, then
    linear peak -> 0 over the remainder.  The first step already gets a
    nonzero rate (peak / warmup_steps) and the last one a near-zero rate.
    """
    N = cfg.n_steps
    if not 0 <= t < N:
        raise ValueError(f"step {t} outside [0, {N})")
    W = cfg.warmup_frac * N
    if t < W:
        return cfg.peak_lr * (t + 1) / W
    return cfg.peak_lr * (N - t) / (N - W)


def decays(name: str, arr: np.ndarray) -> bool:
    """Weight decay hits matrices only: biases, norm gains/biases, and
    positional embeddings are excluded."""
    return arr.ndim >= 2 and name != "pos_emb"


def adam_step(
    params: ModelParams,
    grads: ModelParams,
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update with decoupled weight decay."""
    t = state.t + 1
    bc1 = 1.0 - cfg.adam_beta1**t
    bc2 = 1.0 - cfg.adam_beta2**t
    new_params: ModelParams = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = cfg.adam_beta1 * state.m[name] + (1.0 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * state.v[name] + (1.0 - cfg.adam_beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p_new = p - np.asarray(lr, dtype=p.dtype) * update.astype(p.dtype, copy=False)
        if cfg.weight_decay > 0 and decays(name, p):
            p_new = p_new - np.asarray(lr * cfg.weight_decay, dtype=p.dtype) * p
        new_params[name] = p_new
        new_m[name] = m
        new_v[name] = v
    return new_params, OptimizerState(m=new_m, v=new_v, t=t)


def loss_and_grad_arrays(
    params: ModelParams, cfg: ModelConfig, xs: np.ndarray, ys: np.ndarray
) -> tuple[float, ModelParams]:
    """Mean-over-batch, mean-over-position squared error and its gradients."""
    tokens = model_mod.embed_batch(xs, ys, cfg)
    trace = model_mod.forward(params, cfg, tokens)
    err = trace.predictions - ys.astype(cfg.dtype)
    B, K = err.shape
    loss = float((err**2).mean())
    if not np.isfinite(loss):
        raise NumericalError("non-finite training loss")
    dpreds = (2.0 / (B * K)) * err
    grads = model_mod.backward(trace, params, dpreds)
    return loss, grads


def loss_and_grad(
    params: ModelParams, cfg: ModelConfig, batch: list[RegressionSequence]
) -> tuple[float, ModelParams]:
    """Loss/gradients for a list of sequences (must share K and D)."""
    if not batch:
        raise ValueError("batch must be nonempty")
    xs = np.stack([s.xs for s in batch])
    ys = np.stack([s.ys for s in batch])
    return loss_and_grad_arrays(params, cfg, xs, ys)


def _clip_global_norm(grads: ModelParams, max_norm: float) -> ModelParams:
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: (g * np.asarray(scale, dtype=g.dtype)) for k, g in grads.items()}


def _metrics_path(out_dir: str) -> str:
    return os.path.join(out_dir, "metrics.csv")


def _load_metrics(path: str, before_step: int) -> list[tuple[int, float, float, float]]:
    rows: list[tuple[int, float, float, float]] = []
    if not os.path.exists(path):
        return rows
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            step = int(row["step"])
            if step < before_step:
                rows.append((step, float(row["loss"]), float(row["lr"]), float(row["wall_ms"])))
    return rows


def _rewrite_metrics(path: str, rows: list[tuple[int, float, float, float]]) -> None:
    # Only used once per (re)start to drop rows past the resume point; the
    # log is append-only afterwards.
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "wall_ms"])
        writer.writerows(rows)


def _append_metric(path: str, row: tuple[int, float, float, float]) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(row)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dist: TaskDistribution,
    sigma2: float,
    rng: RngHandle,
    out_dir: str | None = None,
    resume: bool = True,
    step_callback=None,
) -> TrainResult:
    """Run the full optimization, streaming a fresh batch every step.

    With ``out_dir`` set, loss/lr rows land in ``metrics.csv`` every
    ``log_every`` steps and checkpoints in ``ckpt-<step>/`` on the checkpoint
    cadence (plus a final one).  If checkpoints already exist and ``resume``
    is true, training continues from the newest and reproduces the
    uninterrupted trajectory exactly.
    """
    K = model_cfg.max_pairs
    start_step = 0
    params: ModelParams | None = None
    opt: OptimizerState | None = None

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if resume:
            found = list(model_mod.iter_checkpoints(out_dir))
            if found:
                step, path = found[-1]
                params, _, step_loaded, _, opt_arrays, opt_t = model_mod.load_checkpoint(path)
                start_step = step_loaded
                opt = OptimizerState.from_arrays(opt_arrays, opt_t)

    if params is None:
        params = model_mod.init_params(model_cfg, rng.child("init"))
        opt = OptimizerState.zeros_like(params)

    track_hist = dist.is_finite and dist.tasks.shape[0] <= _TASK_HIST_MAX
    hist = np.zeros(dist.tasks.shape[0], dtype=np.int64) if track_hist else None
    if track_hist and start_step > 0:
        # Rebuild the draw histogram for already-completed steps (draws are
        # keyed by step index, so this replays indices only).
        for t in range(start_step):
            idx = rng.child(f"train-data/{t}").integers(
                0, dist.tasks.shape[0], size=train_cfg.batch_size
            )
            hist += np.bincount(idx, minlength=hist.shape[0])

    metrics: list[tuple[int, float, float, float]] = []
    if out_dir is not None:
        metrics = _load_metrics(_metrics_path(out_dir), before_step=start_step)
        _rewrite_metrics(_metrics_path(out_dir), metrics)

    for t in range(start_step, train_cfg.n_steps):
        t0 = time.perf_counter()
        idx, _, xs, ys, _ = sample_batch_arrays(
            dist, train_cfg.batch_size, K, sigma2, rng.child(f"train-data/{t}")
        )
        try:
            loss, grads = loss_and_grad_arrays(params, model_cfg, xs, ys)
        except NumericalError as exc:
            raise NumericalError(f"{exc} (step {t})") from None
        if train_cfg.grad_clip is not None:
            grads = _clip_global_norm(grads, train_cfg.grad_clip)
        lr = lr_at_step(t, train_cfg)
        params, opt = adam_step(params, grads, opt, lr, train_cfg)
        if hist is not None:
            hist += np.bincount(idx, minlength=hist.shape[0])

        if t % train_cfg.log_every == 0:
            wall_ms = (time.perf_counter() - t0) * 1e3
            metrics.append((t, loss, lr, wall_ms))
            if out_dir is not None:
                _append_metric(_metrics_path(out_dir), (t, loss, lr, wall_ms))
        done = t + 1
        if out_dir is not None and (
            done % train_cfg.checkpoint_every == 0 or done == train_cfg.n_steps
        ):
            model_mod.save_checkpoint(
                os.path.join(out_dir, f"ckpt-{done:08d}"),
                params,
                model_cfg,
                step=done,
                master_seed=rng.master_seed,
                optimizer_arrays=opt.to_arrays(),
                optimizer_step=opt.t,
            )
        if step_callback is not None:
            step_callback(t, loss, params)

    return TrainResult(
        params=params,
        metrics=metrics,
        task_histogram=hist,
        out_dir=out_dir,
        final_step=train_cfg.n_steps,
    )


def probe_stability(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dist: TaskDistribution,
    sigma2: float,
    rng: RngHandle,
    n_probe_steps: int = 5000,
) -> tuple[bool, str]:
    """Short-run stability check for one candidate peak learning rate.

    Unstable means a non-finite loss or any loss exceeding 10x the running
    minimum seen so far in the probe.  The probe uses the schedule of the
    full run (same warmup shape) truncated to the probe length.
    """
    probe_cfg = replace(train_cfg, n_steps=max(2, n_probe_steps), checkpoint_every=10**9)
    running_min = np.inf
    spiked: list[str] = []

    def watch(t, loss, params):
        nonlocal running_min
        if loss > 10.0 * running_min:
            spiked.append(f"loss {loss:.4g} exceeded 10x running min {running_min:.4g} at step {t}")
            raise _ProbeSpike()
        running_min = min(running_min, loss)

    try:
        train(model_cfg, probe_cfg, dist, sigma2, rng, out_dir=None, step_callback=watch)
    except _ProbeSpike:
        return False, spiked[0]
    except NumericalError as exc:
        return False, str(exc)
    return True, "stable"


class _ProbeSpike(Exception):
    pass
