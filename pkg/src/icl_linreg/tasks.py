"""Task distributions and regression-sequence sampling.

A *task* is a latent coefficient vector ``w`` of dimension ``D``; a sequence
pairs ``K`` standard-normal inputs with noisy targets ``y_k = w.x_k + eps_k``.
The pretraining distribution is uniform over a finite set of ``M`` tasks; the
ideal distribution is the standard Gaussian over all of R^D.

Task vectors, inputs, and noise are all float64: the Bayesian baselines built
on top of these samples serve as ground truth and must not inherit noise from
reduced precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngHandle

__all__ = [
    "Task",
    "TaskDistribution",
    "RegressionSequence",
    "sample_pretrain_set",
    "sample_task",
    "sample_sequence",
    "sample_batch",
    "sample_batch_arrays",
]

FINITE = "finite_pretrain"
GAUSSIAN = "gaussian_true"


@dataclass(frozen=True)
class Task:
    """A latent regression vector."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError(f"task vector must be 1-D, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("task vector contains non-finite entries")
        object.__setattr__(self, "w", w)

    @property
    def dim(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class TaskDistribution:
    """Either a finite task set (uniform prior) or the Gaussian over all tasks.

    Finite sets store their tasks as an ``(M, D)`` matrix so that posterior
    sums over all M tasks stay a single matrix product even at M = 2**20.
    Distinctness of sampled tasks is assumed, not enforced: collisions of
    continuous draws happen with probability zero and rejection would bias
    the distribution.
    """

    kind: str
    dim: int
    tasks: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.kind == FINITE:
            if self.tasks is None:
                raise ValueError("finite distribution requires a task matrix")
            t = np.asarray(self.tasks, dtype=np.float64)
            if t.ndim != 2 or t.shape[1] != self.dim:
                raise ValueError(f"task matrix must have shape (M, {self.dim})")
            if t.shape[0] < 1:
                raise ValueError("finite distribution requires M >= 1 tasks")
            object.__setattr__(self, "tasks", t)
        elif self.kind == GAUSSIAN:
            if self.tasks is not None:
                raise ValueError("gaussian distribution carries no task list")
        else:
            raise ValueError(f"unknown distribution kind: {self.kind!r}")

    @classmethod
    def finite(cls, tasks: np.ndarray) -> "TaskDistribution":
        tasks = np.asarray(tasks, dtype=np.float64)
        return cls(kind=FINITE, dim=tasks.shape[1], tasks=tasks)

    @classmethod
    def gaussian(cls, dim: int) -> "TaskDistribution":
        return cls(kind=GAUSSIAN, dim=dim)

    @property
    def is_finite(self) -> bool:
        return self.kind == FINITE

    @property
    def num_tasks(self) -> int | None:
        """M for finite sets, None for the Gaussian."""
        return None if self.tasks is None else self.tasks.shape[0]

    def task(self, i: int) -> Task:
        if self.tasks is None:
            raise ValueError("gaussian distribution has no stored tasks")
        return Task(self.tasks[i])


@dataclass(frozen=True)
class RegressionSequence:
    """K data-target pairs sharing one latent task, plus the noise draw.

    ``ys == xs @ task.w + noise`` holds exactly as computed, so the noise
    realization is reconstructible from the other fields.
    """

    xs: np.ndarray  # (K, D)
    ys: np.ndarray  # (K,)
    task: Task
    noise: np.ndarray  # (K,)

    def __post_init__(self):
        if self.xs.ndim != 2 or self.xs.shape[0] < 1:
            raise ValueError("xs must be a (K, D) matrix with K >= 1")
        if self.ys.shape != (self.xs.shape[0],) or self.noise.shape != self.ys.shape:
            raise ValueError("ys and noise must be length-K vectors")

    @property
    def num_pairs(self) -> int:
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[1]


def sample_pretrain_set(rng: RngHandle, M: int, D: int) -> TaskDistribution:
    """Draw a finite pretraining set of M i.i.d. standard-normal tasks."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if D < 1:
        raise ValueError("D must be >= 1")
    return TaskDistribution.finite(rng.standard_normal((M, D)))


def sample_task(dist: TaskDistribution, rng: RngHandle) -> Task:
    """Uniform draw from a finite set, or a fresh Gaussian task."""
    if dist.is_finite:
        i = int(rng.integers(0, dist.tasks.shape[0]))
        return Task(dist.tasks[i])
    return Task(rng.standard_normal(dist.dim))


def sample_sequence(
    task: Task, K: int, sigma2: float, rng: RngHandle
) -> RegressionSequence:
    """Fresh inputs and noise for one task: ys = xs @ w + noise."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    xs = rng.standard_normal((K, task.dim))
    noise = np.sqrt(sigma2) * rng.standard_normal(K)
    ys = xs @ task.w + noise
    return RegressionSequence(xs=xs, ys=ys, task=task, noise=noise)


def sample_batch_arrays(
    dist: TaskDistribution, B: int, K: int, sigma2: float, rng: RngHandle
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized batch draw: (idx, ws (B,D), xs (B,K,D), ys (B,K), noise (B,K)).

    ``idx`` holds the drawn task indices for finite distributions (None for
    the Gaussian).  Draw order is fixed (tasks, then inputs, then noise) so
    batches are bit-reproducible for a given handle state.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if K < 1:
        raise ValueError("K must be >= 1")
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    if dist.is_finite:
        idx = rng.integers(0, dist.tasks.shape[0], size=B)
        ws = dist.tasks[idx]
    else:
        idx = None
        ws = rng.standard_normal((B, dist.dim))
    xs = rng.standard_normal((B, K, dist.dim))
    noise = np.sqrt(sigma2) * rng.standard_normal((B, K))
    ys = np.einsum("bkd,bd->bk", xs, ws) + noise
    return idx, ws, xs, ys, noise


def sample_batch(
    dist: TaskDistribution, B: int, K: int, sigma2: float, rng: RngHandle
) -> list[RegressionSequence]:
    """B independent sequences, each with its own task draw."""
    _, ws, xs, ys, noise = sample_batch_arrays(dist, B, K, sigma2, rng)
    return [
        RegressionSequence(xs=xs[b], ys=ys[b], task=Task(ws[b]), noise=noise[b])
        for b in range(B)
    ]
