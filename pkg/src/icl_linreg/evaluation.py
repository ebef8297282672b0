"""Monte Carlo evaluation: normalized losses, prediction divergences, and
interpolation-path curves.

All comparisons run on shared evaluation sets (common random numbers): a
caller that evaluates two predictors with the same rng handle scores them on
identical sequences, so loss differences and divergence metrics come with
paired standard errors.  Reports always carry a stderr; nothing is quoted as
a bare point estimate.

Conventions: the *normalized loss* averages squared error over positions and
divides by the task dimension D; the *divergence* Delta between two
predictors averages the squared prediction gap over positions and divides by
K*D.  Both are asserted against hand-built fixtures in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import oracles
from .model import ModelConfig, ModelParams
from .rng import RngHandle
from .tasks import Task, TaskDistribution

__all__ = [
    "Predictor",
    "ZeroPredictor",
    "RidgePredictor",
    "DmmsePredictor",
    "SmmsePredictor",
    "PTPredictor",
    "EvalSet",
    "EvalReport",
    "DegenerateInterpolationError",
    "draw_eval_set",
    "eval_loss",
    "eval_loss_on_set",
    "eval_delta",
    "paired_loss_diff",
    "interpolate_tasks",
    "eval_interpolation",
    "InterpolationCurve",
    "find_threshold",
]

_PT_EVAL_BATCH = 256


class DegenerateInterpolationError(ValueError):
    """The convex combination of the endpoints has (near-)zero norm."""


class Predictor:
    """Maps a batch of sequences to one prediction per position.

    Subclasses implement ``predict(xs, ys) -> (n, K)`` in float64; the
    transformer predictor runs at its training precision internally and
    upcasts at the boundary so divergence metrics never mix precisions.
    """

    label: str = "predictor"

    def predict(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class ZeroPredictor(Predictor):
    label: str = "zero"

    def predict(self, xs, ys):
        return oracles.zero_predictions(xs)


@dataclass
class RidgePredictor(Predictor):
    sigma2: float
    label: str = "ridge"

    def predict(self, xs, ys):
        return oracles.ridge_predictions(xs, ys, self.sigma2)


@dataclass
class DmmsePredictor(Predictor):
    tasks: TaskDistribution
    sigma2: float
    label: str = "dmmse"

    def predict(self, xs, ys):
        return oracles.dmmse_predictions(xs, ys, self.tasks, self.sigma2)


@dataclass
class SmmsePredictor(Predictor):
    tasks: TaskDistribution
    sigma2: float
    epsilon2: float
    label: str = "smmse"

    def predict(self, xs, ys):
        return oracles.smmse_predictions(xs, ys, self.tasks, self.sigma2, self.epsilon2)


@dataclass
class PTPredictor(Predictor):
    params: ModelParams
    cfg: ModelConfig
    label: str = "pt"

    @classmethod
    def from_checkpoint(cls, ckpt_dir: str) -> "PTPredictor":
        params, cfg, _, _, _, _ = model_mod.load_checkpoint(ckpt_dir)
        return cls(params=params, cfg=cfg)

    def predict(self, xs, ys):
        n = xs.shape[0]
        out = np.empty(xs.shape[:2])
        for lo in range(0, n, _PT_EVAL_BATCH):
            hi = min(lo + _PT_EVAL_BATCH, n)
            tokens = model_mod.embed_batch(xs[lo:hi], ys[lo:hi], self.cfg)
            trace = model_mod.forward(self.params, self.cfg, tokens)
            out[lo:hi] = trace.predictions.astype(np.float64)
        return out


@dataclass(frozen=True)
class EvalSet:
    """A frozen Monte Carlo evaluation set, reusable across predictors."""

    ws: np.ndarray  # (n, D)
    xs: np.ndarray  # (n, K, D)
    ys: np.ndarray  # (n, K)
    noise: np.ndarray  # (n, K)
    tag: str
    seed_info: tuple[int, str]

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[2]


@dataclass(frozen=True)
class EvalReport:
    """Per-position and aggregate normalized loss with standard errors."""

    per_k_mse: np.ndarray  # (K,)
    per_k_stderr: np.ndarray  # (K,)
    aggregate: float  # mean over k of per-k MSE, divided by D
    aggregate_stderr: float
    n_sequences: int
    distribution: str
    seed_info: tuple[int, str]
    per_sequence_loss: np.ndarray = field(repr=False, default=None)  # (n,), /D


def draw_eval_set(
    dist: TaskDistribution,
    n_sequences: int,
    K: int,
    sigma2: float,
    rng: RngHandle,
    tag: str | None = None,
) -> EvalSet:
    """Fresh tasks/data/noise; identical rng handles yield identical sets."""
    if n_sequences < 2:
        raise ValueError("need n_sequences >= 2 for a stderr")
    if dist.is_finite:
        idx = rng.integers(0, dist.tasks.shape[0], size=n_sequences)
        ws = dist.tasks[idx]
    else:
        ws = rng.standard_normal((n_sequences, dist.dim))
    xs = rng.standard_normal((n_sequences, K, dist.dim))
    noise = np.sqrt(sigma2) * rng.standard_normal((n_sequences, K))
    ys = np.einsum("nkd,nd->nk", xs, ws) + noise
    if tag is None:
        tag = "pretrain" if dist.is_finite else "true"
    return EvalSet(
        ws=ws, xs=xs, ys=ys, noise=noise, tag=tag,
        seed_info=(rng.master_seed, rng.stream_label),
    )


def eval_loss_on_set(pred: Predictor, eval_set: EvalSet) -> EvalReport:
    """Score one predictor on a frozen evaluation set."""
    preds = np.asarray(pred.predict(eval_set.xs, eval_set.ys), dtype=np.float64)
    err2 = (preds - eval_set.ys) ** 2  # (n, K)
    n = err2.shape[0]
    D = eval_set.dim
    per_k = err2.mean(axis=0)
    per_k_se = err2.std(axis=0, ddof=1) / np.sqrt(n)
    per_seq = err2.mean(axis=1) / D
    return EvalReport(
        per_k_mse=per_k,
        per_k_stderr=per_k_se,
        aggregate=float(per_seq.mean()),
        aggregate_stderr=float(per_seq.std(ddof=1) / np.sqrt(n)),
        n_sequences=n,
        distribution=eval_set.tag,
        seed_info=eval_set.seed_info,
        per_sequence_loss=per_seq,
    )


def eval_loss(
    pred: Predictor,
    dist: TaskDistribution,
    n_sequences: int,
    K: int,
    sigma2: float,
    rng: RngHandle,
    tag: str | None = None,
) -> EvalReport:
    """Draw a fresh evaluation set and score one predictor on it.

    Callers comparing several predictors should draw the set once with
    :func:`draw_eval_set` and use :func:`eval_loss_on_set`, or pass handles
    with identical (seed, label) here, so that all predictors see the same
    sequences.
    """
    return eval_loss_on_set(pred, draw_eval_set(dist, n_sequences, K, sigma2, rng, tag))


def paired_loss_diff(rep_a: EvalReport, rep_b: EvalReport) -> tuple[float, float]:
    """Mean and stderr of the per-sequence loss gap (requires a shared set)."""
    if rep_a.n_sequences != rep_b.n_sequences or rep_a.seed_info != rep_b.seed_info:
        raise ValueError("paired difference requires reports from one shared eval set")
    d = rep_a.per_sequence_loss - rep_b.per_sequence_loss
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.shape[0]))


def eval_delta(
    a: Predictor,
    b: Predictor,
    dist: TaskDistribution,
    n_sequences: int,
    K: int,
    sigma2: float,
    rng: RngHandle,
) -> tuple[float, float]:
    """Mean squared prediction gap, normalized by K*D, on shared sequences."""
    s = draw_eval_set(dist, n_sequences, K, sigma2, rng)
    return delta_on_set(a, b, s)


def delta_on_set(a: Predictor, b: Predictor, eval_set: EvalSet) -> tuple[float, float]:
    pa = np.asarray(a.predict(eval_set.xs, eval_set.ys), dtype=np.float64)
    pb = np.asarray(b.predict(eval_set.xs, eval_set.ys), dtype=np.float64)
    return delta_of_predictions(pa, pb, eval_set.dim)


def delta_of_predictions(pa: np.ndarray, pb: np.ndarray, D: int) -> tuple[float, float]:
    """Divergence from precomputed prediction matrices (shared sequences)."""
    per_seq = ((pa - pb) ** 2).mean(axis=1) / D  # mean over K then /D == 1/(K D) sum
    n = per_seq.shape[0]
    return float(per_seq.mean()), float(per_seq.std(ddof=1) / np.sqrt(n))


def interpolate_tasks(w_i: Task, w_j: Task, alpha: float) -> Task:
    """Norm-fixed interpolation between two tasks.

    The direction is the convex combination ``alpha*w_i + (1-alpha)*w_j``;
    the norm is pinned to the average endpoint norm so midpoints do not
    collapse toward zero.  Near-antipodal pairs whose combination vanishes
    are rejected (resample the pair upstream).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    combo = alpha * w_i.w + (1.0 - alpha) * w_j.w
    norm = np.linalg.norm(combo)
    if norm <= 1e-8:
        raise DegenerateInterpolationError(
            f"interpolation direction has norm {norm:.3g} at alpha={alpha}"
        )
    target = 0.5 * (np.linalg.norm(w_i.w) + np.linalg.norm(w_j.w))
    return Task(target * combo / norm)


@dataclass
class InterpolationCurve:
    """Losses along interpolation paths, averaged over sampled task pairs."""

    alphas: np.ndarray  # (A,)
    labels: list[str]
    loss: np.ndarray  # (A, P)
    stderr: np.ndarray  # (A, P) stderr over pairs
    per_pair: np.ndarray = field(repr=False, default=None)  # (A, P, n_pairs)
    resample_count: int = 0

    def rows(self):
        for ai, alpha in enumerate(self.alphas):
            for pi, label in enumerate(self.labels):
                yield {
                    "alpha": float(alpha),
                    "predictor": label,
                    "loss": float(self.loss[ai, pi]),
                    "stderr": float(self.stderr[ai, pi]),
                }


def eval_interpolation(
    preds: list[Predictor],
    task_set: TaskDistribution,
    n_pairs: int,
    alpha_grid: np.ndarray,
    n_sequences_per_point: int,
    K: int,
    sigma2: float,
    rng: RngHandle,
) -> InterpolationCurve:
    """Average each predictor's normalized loss along task-pair paths.

    Pairs are sampled without replacement from the finite task set; each pair
    owns one evaluation set of inputs and noise reused at every alpha, so the
    curve is a paired comparison across the grid.  Pairs whose interpolation
    degenerates at any grid point are resampled (counted, never silent).
    """
    if not task_set.is_finite or task_set.tasks.shape[0] < 2:
        raise ValueError("interpolation requires a finite task set with >= 2 tasks")
    alpha_grid = np.asarray(alpha_grid, dtype=np.float64)
    M = task_set.tasks.shape[0]
    D = task_set.dim
    A, P = alpha_grid.shape[0], len(preds)
    per_pair = np.empty((A, P, n_pairs))
    resamples = 0

    pair_rng = rng.child("pairs")
    data_rng = rng.child("data")
    done = 0
    while done < n_pairs:
        i, j = pair_rng.generator.choice(M, size=2, replace=False)
        w_i, w_j = task_set.task(int(i)), task_set.task(int(j))
        try:
            w_alphas = [interpolate_tasks(w_i, w_j, a) for a in alpha_grid]
        except DegenerateInterpolationError:
            resamples += 1
            continue
        xs = data_rng.standard_normal((n_sequences_per_point, K, D))
        noise = np.sqrt(sigma2) * data_rng.standard_normal((n_sequences_per_point, K))
        for ai, wa in enumerate(w_alphas):
            ys = xs @ wa.w + noise
            for pi, pred in enumerate(preds):
                p = np.asarray(pred.predict(xs, ys), dtype=np.float64)
                per_pair[ai, pi, done] = ((p - ys) ** 2).mean() / D
        done += 1

    loss = per_pair.mean(axis=2)
    stderr = per_pair.std(axis=2, ddof=1) / np.sqrt(n_pairs)
    return InterpolationCurve(
        alphas=alpha_grid,
        labels=[p.label for p in preds],
        loss=loss,
        stderr=stderr,
        per_pair=per_pair,
        resample_count=resamples,
    )


def find_threshold(
    delta_curves: dict[str, list[tuple[float, float, float]]],
) -> tuple[float, float] | None:
    """Locate the significant sign flip between two divergence curves.

    Input: exactly two labelled curves of (M, delta, stderr) rows over a
    shared ascending M grid.  Returns the bracketing (M_low, M_high) around
    the first sign change of (curve_A - curve_B) where the gap exceeds the
    pooled stderr on both sides, or None when no such crossover exists.
    """
    if len(delta_curves) != 2:
        raise ValueError("find_threshold requires exactly two labelled curves")
    (label_a, curve_a), (label_b, curve_b) = sorted(delta_curves.items())
    ms_a = [row[0] for row in curve_a]
    ms_b = [row[0] for row in curve_b]
    if ms_a != ms_b:
        raise ValueError(f"curves {label_a!r} and {label_b!r} use different M grids")
    if ms_a != sorted(ms_a) or len(ms_a) < 2:
        raise ValueError("M grid must be ascending with >= 2 points")
    diff = np.array([a[1] - b[1] for a, b in zip(curve_a, curve_b)])
    pooled = np.array(
        [np.sqrt(a[2] ** 2 + b[2] ** 2) for a, b in zip(curve_a, curve_b)]
    )
    significant = np.abs(diff) > pooled
    for i in range(len(diff) - 1):
        if (
            significant[i]
            and significant[i + 1]
            and diff[i] != 0.0
            and diff[i + 1] != 0.0
            and np.sign(diff[i]) != np.sign(diff[i + 1])
        ):
            return ms_a[i], ms_a[i + 1]
    return None
