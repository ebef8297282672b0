"""Exact Bayesian posterior-mean estimators for noisy linear regression.

Three estimators share one interface (context in, coefficient estimate out):

* ``dmmse_predict`` - posterior mean under a uniform prior over a finite task
  set: a likelihood-weighted average of the stored task vectors.
* ``ridge_predict`` - posterior mean under the standard Gaussian prior, i.e.
  ridge regression with the ridge parameter equal to the noise variance.
* ``smmse_predict`` - posterior mean under a mixture of isotropic Gaussians
  of variance ``eps2`` centered at the stored tasks; interpolates between the
  two above as ``eps2`` sweeps from 0 to infinity.

``brute_force_posterior`` integrates the posterior directly (exact finite sum
or self-normalized importance sampling) and exists purely to certify the
closed forms at small dimension.

All mixture weights are computed in log space with max-shift normalization:
raw exponents scale like ``-k * residual / (2 sigma2)`` and overflow float64
for long contexts otherwise.  The smoothed estimator additionally avoids the
raw ``|w|^2 / (2 eps2)`` cancellation (catastrophic for tiny ``eps2``) by an
algebraically equivalent form built on ``G = (I + eps2 * X'X / sigma2)^-1``:

    log-weight_i  =  -0.5 * (G w_i) . (C w_i)  +  (G w_i) . u   + const
    w_hat         =  G @ (sum_i beta_i w_i)  +  eps2 * G @ u

with ``C = X'X / sigma2`` and ``u = X'y / sigma2``.  Both lines follow from
``A^-1 = eps2 * G`` and stay finite for any input magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from .errors import NumericalError, SingularContextError
from .rng import RngHandle
from .tasks import RegressionSequence, TaskDistribution

__all__ = [
    "OracleContext",
    "EstimatorPrediction",
    "PosteriorEstimate",
    "GaussianMixturePrior",
    "dmmse_predict",
    "dmmse_weights",
    "ridge_predict",
    "smmse_predict",
    "smmse_weights",
    "optimal_epsilon_search",
    "brute_force_posterior",
    "zero_predictions",
    "ridge_predictions",
    "dmmse_predictions",
    "smmse_predictions",
]

# Fixed chunk sizes keep peak memory bounded and accumulation order (and
# therefore bit-level results) independent of the host.
_TASK_CHUNK = 1 << 14
_ELEM_BUDGET = 1 << 23

_BRUTE_FORCE_MAX_DIM = 4


@dataclass(frozen=True)
class OracleContext:
    """Observed prefix (X, y), the query point, and the noise variance."""

    X: np.ndarray  # (k-1, D); empty (0, D) when the context is bare
    y: np.ndarray  # (k-1,)
    x_query: np.ndarray  # (D,)
    sigma2: float

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        q = np.asarray(self.x_query, dtype=np.float64)
        if X.ndim != 2 or q.ndim != 1 or X.shape[1] != q.shape[0]:
            raise ValueError("X must be (k-1, D) and x_query (D,)")
        if y.shape != (X.shape[0],):
            raise ValueError("y must have one target per context row")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x_query", q)

    @property
    def k(self) -> int:
        """Position of the prediction: k-1 observed pairs precede it."""
        return self.X.shape[0] + 1

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_sequence(cls, seq: RegressionSequence, k: int, sigma2: float) -> "OracleContext":
        """Context for predicting position k (1-based) of a sequence."""
        if not 1 <= k <= seq.num_pairs:
            raise ValueError(f"k must be in [1, {seq.num_pairs}]")
        return cls(X=seq.xs[: k - 1], y=seq.ys[: k - 1], x_query=seq.xs[k - 1], sigma2=sigma2)


@dataclass(frozen=True)
class EstimatorPrediction:
    """Coefficient estimate and the implied scalar prediction at the query."""

    w_hat: np.ndarray
    y_hat: float

    @classmethod
    def from_w(cls, w_hat: np.ndarray, x_query: np.ndarray) -> "EstimatorPrediction":
        w_hat = np.asarray(w_hat, dtype=np.float64)
        return cls(w_hat=w_hat, y_hat=float(w_hat @ x_query))


@dataclass(frozen=True)
class PosteriorEstimate:
    """Brute-force posterior mean with Monte Carlo error bars.

    ``y_stderr`` / ``w_stderr`` are zero for the exact finite-sum branch.
    """

    prediction: EstimatorPrediction
    y_stderr: float
    w_stderr: np.ndarray
    n_samples: int
    ess: float = field(default=float("nan"))


@dataclass(frozen=True)
class GaussianMixturePrior:
    """Mixture of M isotropic Gaussians of variance eps2 at given centers."""

    centers: np.ndarray  # (M, D)
    eps2: float

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError("centers must be (M, D)")
        if self.eps2 <= 0:
            raise ValueError("eps2 must be > 0")
        object.__setattr__(self, "centers", c)

    def sample(self, rng: RngHandle, n: int) -> np.ndarray:
        idx = rng.integers(0, self.centers.shape[0], size=n)
        return self.centers[idx] + np.sqrt(self.eps2) * rng.standard_normal(
            (n, self.centers.shape[1])
        )


def _require_finite_tasks(tasks: TaskDistribution) -> np.ndarray:
    if not tasks.is_finite:
        raise ValueError("estimator requires a finite pretraining task set")
    return tasks.tasks


def _log_likelihoods(W: np.ndarray, ctx: OracleContext) -> np.ndarray:
    """Per-task log-likelihood exponents, chunked over the task axis."""
    M = W.shape[0]
    ll = np.empty(M)
    for lo in range(0, M, _TASK_CHUNK):
        hi = min(lo + _TASK_CHUNK, M)
        resid = W[lo:hi] @ ctx.X.T - ctx.y  # (m, k-1)
        ll[lo:hi] = (-0.5 / ctx.sigma2) * np.einsum("mj,mj->m", resid, resid)
    return ll


def dmmse_weights(ctx: OracleContext, tasks: TaskDistribution) -> np.ndarray:
    """Posterior mixture weights over the finite task set (sums to one)."""
    W = _require_finite_tasks(tasks)
    if ctx.sigma2 <= 0:
        raise ValueError("dMMSE requires sigma2 > 0")
    ll = _log_likelihoods(W, ctx)
    w = np.exp(ll - ll.max())
    return w / w.sum()


def dmmse_predict(ctx: OracleContext, tasks: TaskDistribution) -> EstimatorPrediction:
    """Posterior mean under the uniform prior on the finite task set.

    The empty context (k = 1) reduces to the plain task average; longer
    contexts weight each task by the likelihood of the observed targets.
    Computed exactly by chunked accumulation over the full task list.
    """
    W = _require_finite_tasks(tasks)
    if ctx.sigma2 <= 0:
        raise ValueError("dMMSE requires sigma2 > 0")
    ll = _log_likelihoods(W, ctx)
    shift = ll.max()
    z = 0.0
    s = np.zeros(ctx.dim)
    for lo in range(0, W.shape[0], _TASK_CHUNK):
        hi = min(lo + _TASK_CHUNK, W.shape[0])
        e = np.exp(ll[lo:hi] - shift)
        z += e.sum()
        s += e @ W[lo:hi]
    return EstimatorPrediction.from_w(s / z, ctx.x_query)


def _spd_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return cho_solve(cho_factor(A, lower=True), b)
    except LinAlgError as exc:
        raise SingularContextError(
            "normal matrix is not positive definite (rank-deficient context "
            "with sigma2 = 0?)"
        ) from exc


def ridge_predict(ctx: OracleContext) -> EstimatorPrediction:
    """Ridge regression with the ridge parameter set to the noise variance.

    Solves the D x D normal equations through a Cholesky factorization; a
    singular system (possible only at sigma2 = 0) raises rather than falling
    back to a pseudo-inverse.
    """
    if ctx.k == 1:
        return EstimatorPrediction.from_w(np.zeros(ctx.dim), ctx.x_query)
    A = ctx.X.T @ ctx.X + ctx.sigma2 * np.eye(ctx.dim)
    w_hat = _spd_solve(A, ctx.X.T @ ctx.y)
    return EstimatorPrediction.from_w(w_hat, ctx.x_query)


def _smmse_parts(ctx: OracleContext, W: np.ndarray, epsilon2: float):
    """Mixture weights and the pieces of the smoothed posterior mean.

    Returns ``(beta, G_factor, u)`` where ``beta`` are the softmax weights and
    ``w_hat = G (beta @ W) + eps2 * G u`` (G applied through its Cholesky
    factor).  One factorization serves all M centers.
    """
    if ctx.sigma2 <= 0:
        raise ValueError("sMMSE requires sigma2 > 0")
    if epsilon2 <= 0:
        raise ValueError("epsilon2 must be > 0")
    D = ctx.dim
    C = ctx.X.T @ ctx.X / ctx.sigma2
    u = ctx.X.T @ ctx.y / ctx.sigma2
    G_factor = cho_factor(np.eye(D) + epsilon2 * C, lower=True)
    M = W.shape[0]
    bt = np.empty(M)
    for lo in range(0, M, _TASK_CHUNK):
        hi = min(lo + _TASK_CHUNK, M)
        GW = cho_solve(G_factor, W[lo:hi].T).T  # (m, D)
        CW = W[lo:hi] @ C
        bt[lo:hi] = -0.5 * np.einsum("md,md->m", GW, CW) + GW @ u
    if not np.all(np.isfinite(bt)):
        raise NumericalError("non-finite sMMSE mixture exponents")
    beta = np.exp(bt - bt.max())
    beta /= beta.sum()
    return beta, G_factor, u


def smmse_weights(
    ctx: OracleContext, tasks: TaskDistribution, epsilon2: float
) -> np.ndarray:
    """Mixture weights of the smoothed estimator (sums to one)."""
    W = _require_finite_tasks(tasks)
    beta, _, _ = _smmse_parts(ctx, W, epsilon2)
    return beta


def smmse_predict(
    ctx: OracleContext, tasks: TaskDistribution, epsilon2: float
) -> EstimatorPrediction:
    """Posterior mean under the Gaussian-mixture prior at the task set.

    Uses the general closed form at every k; the empty context yields uniform
    weights and the task average without special-casing.
    """
    W = _require_finite_tasks(tasks)
    beta, G_factor, u = _smmse_parts(ctx, W, epsilon2)
    s = np.zeros(ctx.dim)
    for lo in range(0, W.shape[0], _TASK_CHUNK):
        hi = min(lo + _TASK_CHUNK, W.shape[0])
        s += beta[lo:hi] @ W[lo:hi]
    w_hat = cho_solve(G_factor, s) + epsilon2 * cho_solve(G_factor, u)
    return EstimatorPrediction.from_w(w_hat, ctx.x_query)


# ---------------------------------------------------------------------------
# Sequence-level batched prediction kernels.
#
# Evaluation needs predictions at every position k of many sequences at once;
# per-context calls would drown in Python overhead.  These kernels walk k,
# maintaining per-sequence sufficient statistics, and are the computational
# backbone of the Monte Carlo harness.  They agree with the per-context
# operations above to factorization-level rounding.
# ---------------------------------------------------------------------------


def zero_predictions(xs: np.ndarray) -> np.ndarray:
    """The zero predictor: (n, K) zeros."""
    return np.zeros(xs.shape[:2])


def ridge_predictions(xs: np.ndarray, ys: np.ndarray, sigma2: float) -> np.ndarray:
    """Ridge predictions at every position of a batch of sequences.

    xs: (n, K, D), ys: (n, K) -> (n, K).  Gram matrices grow incrementally;
    each position solves the batched D x D system.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n, K, D = xs.shape
    preds = np.zeros((n, K))
    gram = np.zeros((n, D, D))
    xty = np.zeros((n, D))
    ridge = sigma2 * np.eye(D)
    for k in range(K):
        if k > 0:
            try:
                w = np.linalg.solve(gram + ridge, xty[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise SingularContextError(
                    "singular normal matrix in batched ridge (sigma2 = 0?)"
                ) from exc
            preds[:, k] = np.einsum("nd,nd->n", w, xs[:, k, :])
        x = xs[:, k, :]
        gram += x[:, :, None] * x[:, None, :]
        xty += x * ys[:, k, None]
    return preds


def _exclusive_prefix_ll(xs, ys, Wc, sigma2):
    """Log-likelihood of each k-prefix for every task in the chunk.

    Returns (n, K, m): entry [.., k, ..] uses pairs j < k, so position 0 is 0.
    """
    P = xs @ Wc.T  # (n, K, m)
    R2 = (ys[:, :, None] - P) ** 2
    ll = np.zeros_like(R2)
    np.cumsum(R2[:, :-1, :], axis=1, out=ll[:, 1:, :])
    ll *= -0.5 / sigma2
    return ll


def dmmse_predictions(
    xs: np.ndarray, ys: np.ndarray, tasks: TaskDistribution, sigma2: float
) -> np.ndarray:
    """dMMSE predictions at every position of a batch of sequences.

    Streams over task chunks with running max-rescaled softmax accumulators,
    so arbitrarily large task sets never materialize an (n, K, M) array and
    the summation order stays fixed.
    """
    W = _require_finite_tasks(tasks)
    if sigma2 <= 0:
        raise ValueError("dMMSE requires sigma2 > 0")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n, K, D = xs.shape
    M = W.shape[0]
    preds = np.empty((n, K))
    ns = max(1, _ELEM_BUDGET // (K * min(M, _TASK_CHUNK)))
    for s_lo in range(0, n, ns):
        s_hi = min(s_lo + ns, n)
        xs_c, ys_c = xs[s_lo:s_hi], ys[s_lo:s_hi]
        nc = s_hi - s_lo
        run_max = np.full((nc, K), -np.inf)
        z = np.zeros((nc, K))
        s = np.zeros((nc, K, D))
        for m_lo in range(0, M, _TASK_CHUNK):
            m_hi = min(m_lo + _TASK_CHUNK, M)
            ll = _exclusive_prefix_ll(xs_c, ys_c, W[m_lo:m_hi], sigma2)
            new_max = np.maximum(run_max, ll.max(axis=2))
            rescale = np.exp(run_max - new_max)
            z *= rescale
            s *= rescale[:, :, None]
            e = np.exp(ll - new_max[:, :, None])
            z += e.sum(axis=2)
            s += e @ W[m_lo:m_hi]
            run_max = new_max
        w_hat = s / z[:, :, None]
        preds[s_lo:s_hi] = np.einsum("nkd,nkd->nk", w_hat, xs_c)
    return preds


def smmse_predictions(
    xs: np.ndarray,
    ys: np.ndarray,
    tasks: TaskDistribution,
    sigma2: float,
    epsilon2: float,
) -> np.ndarray:
    """Smoothed-dMMSE predictions at every position of a batch of sequences.

    Same stable formulation as :func:`smmse_predict`, batched over sequences:
    per position k each sequence owns a D x D system shared by all M centers.
    """
    W = _require_finite_tasks(tasks)
    if sigma2 <= 0:
        raise ValueError("sMMSE requires sigma2 > 0")
    if epsilon2 <= 0:
        raise ValueError("epsilon2 must be > 0")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n, K, D = xs.shape
    M = W.shape[0]
    preds = np.empty((n, K))
    eye = np.eye(D)
    C = np.zeros((n, D, D))  # X'X / sigma2, grown one pair at a time
    u = np.zeros((n, D))  # X'y / sigma2
    ns = max(1, _ELEM_BUDGET // (D * min(M, _TASK_CHUNK)))
    for k in range(K):
        for s_lo in range(0, n, ns):
            s_hi = min(s_lo + ns, n)
            nc = s_hi - s_lo
            F = eye + epsilon2 * C[s_lo:s_hi]
            Finv = np.linalg.inv(F)
            run_max = np.full(nc, -np.inf)
            z = np.zeros(nc)
            sw = np.zeros((nc, D))
            for m_lo in range(0, M, _TASK_CHUNK):
                m_hi = min(m_lo + _TASK_CHUNK, M)
                Wc = W[m_lo:m_hi]
                GW = Finv @ Wc.T  # (nc, D, m)
                CW = C[s_lo:s_hi] @ Wc.T
                bt = -0.5 * np.einsum("ndm,ndm->nm", GW, CW) + np.einsum(
                    "ndm,nd->nm", GW, u[s_lo:s_hi]
                )
                if not np.all(np.isfinite(bt)):
                    raise NumericalError("non-finite sMMSE mixture exponents")
                new_max = np.maximum(run_max, bt.max(axis=1))
                rescale = np.exp(run_max - new_max)
                z *= rescale
                sw *= rescale[:, None]
                e = np.exp(bt - new_max[:, None])
                z += e.sum(axis=1)
                sw += e @ Wc
                run_max = new_max
            mean_w = sw / z[:, None]
            w_eff = np.einsum(
                "nde,ne->nd", Finv, mean_w + epsilon2 * u[s_lo:s_hi]
            )
            preds[s_lo:s_hi, k] = np.einsum("nd,nd->n", w_eff, xs[s_lo:s_hi, k, :])
        x = xs[:, k, :]
        C += x[:, :, None] * x[:, None, :] / sigma2
        u += x * ys[:, k, None] / sigma2
    return preds


def optimal_epsilon_search(
    tasks: TaskDistribution,
    D: int,
    K: int,
    sigma2: float,
    grid: list[float],
    n_eval: int,
    rng: RngHandle,
) -> tuple[float, list[tuple[float, float, float]]]:
    """Grid search for the smoothing variance minimizing loss on fresh tasks.

    Every grid point is scored on the same Monte Carlo evaluation set (tasks
    drawn from the Gaussian over all regression vectors), so the returned
    curve is a paired comparison and its minimizer is stable run to run.
    Returns ``(eps2_star, [(eps2, normalized_loss, stderr), ...])``.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("grid must be nonempty")
    if any(g <= 0 for g in grid):
        raise ValueError("grid values must be > 0")
    if sorted(grid) != grid:
        raise ValueError("grid must be sorted ascending")
    ws = rng.standard_normal((n_eval, D))
    xs = rng.standard_normal((n_eval, K, D))
    noise = np.sqrt(sigma2) * rng.standard_normal((n_eval, K))
    ys = np.einsum("nkd,nd->nk", xs, ws) + noise
    curve = []
    for eps2 in grid:
        preds = smmse_predictions(xs, ys, tasks, sigma2, eps2)
        per_seq = ((preds - ys) ** 2).mean(axis=1) / D
        loss = float(per_seq.mean())
        stderr = float(per_seq.std(ddof=1) / np.sqrt(n_eval))
        curve.append((eps2, loss, stderr))
    best = min(range(len(grid)), key=lambda i: curve[i][1])
    return grid[best], curve


def default_epsilon_grid(n_points: int = 25) -> np.ndarray:
    """Log-spaced smoothing-variance grid bracketing both degenerate limits."""
    return np.logspace(-3, 1, n_points)


def _snis_estimate(draws_w: np.ndarray, ll: np.ndarray, x_query: np.ndarray):
    """Self-normalized importance-sampling mean of w and y with error bars."""
    wt = np.exp(ll - ll.max())
    wt /= wt.sum()
    t = draws_w @ x_query
    y_hat = float(wt @ t)
    w_hat = wt @ draws_w
    y_se = float(np.sqrt(np.sum(wt**2 * (t - y_hat) ** 2)))
    w_se = np.sqrt(np.sum(wt[:, None] ** 2 * (draws_w - w_hat) ** 2, axis=0))
    ess = float(1.0 / np.sum(wt**2))
    return w_hat, y_hat, w_se, y_se, ess


def brute_force_posterior(
    ctx: OracleContext,
    prior: TaskDistribution | GaussianMixturePrior,
    budget: int,
    rng: RngHandle | None = None,
) -> PosteriorEstimate:
    """Posterior mean by direct numeric integration; correctness witness only.

    Finite priors are summed exactly; continuous priors (Gaussian or Gaussian
    mixture) are integrated by self-normalized importance sampling with the
    prior as proposal, reporting a Monte Carlo stderr.  Restricted to D <= 4:
    prior sampling is only an adequate proposal at small dimension.
    """
    if ctx.dim > _BRUTE_FORCE_MAX_DIM:
        raise ValueError(
            f"brute-force posterior is for verification at D <= {_BRUTE_FORCE_MAX_DIM}"
        )
    if ctx.sigma2 <= 0:
        raise ValueError("brute-force posterior requires sigma2 > 0")

    if isinstance(prior, TaskDistribution) and prior.is_finite:
        W = prior.tasks
        # Plain single-pass evaluation of the finite posterior sum; kept
        # deliberately naive as an arithmetic-order witness for dmmse_predict.
        resid = W @ ctx.X.T - ctx.y
        ll = (-0.5 / ctx.sigma2) * (resid**2).sum(axis=1)
        num = np.exp(ll - logsumexp(ll))
        w_hat = num @ W
        return PosteriorEstimate(
            prediction=EstimatorPrediction.from_w(w_hat, ctx.x_query),
            y_stderr=0.0,
            w_stderr=np.zeros(ctx.dim),
            n_samples=W.shape[0],
            ess=float(W.shape[0]),
        )

    if budget < 2:
        raise ValueError("budget too small to report a stderr")
    if rng is None:
        raise ValueError("continuous priors require an rng for sampling")

    if isinstance(prior, GaussianMixturePrior):
        draws = prior.sample(rng, budget)
    elif isinstance(prior, TaskDistribution):
        draws = rng.standard_normal((budget, prior.dim))
    else:
        raise TypeError(f"unsupported prior type: {type(prior).__name__}")

    resid = draws @ ctx.X.T - ctx.y
    ll = (-0.5 / ctx.sigma2) * np.einsum("nj,nj->n", resid, resid)
    w_hat, y_hat, w_se, y_se, ess = _snis_estimate(draws, ll, ctx.x_query)
    return PosteriorEstimate(
        prediction=EstimatorPrediction(w_hat=w_hat, y_hat=y_hat),
        y_stderr=y_se,
        w_stderr=w_se,
        n_samples=budget,
        ess=ess,
    )
