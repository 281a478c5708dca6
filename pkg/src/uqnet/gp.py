"""Gaussian-process emulation of deterministic computer models.

An emulator is a Student-process surrogate with a parametric trend, a squared
exponential correlation over inputs standardized to the unit box, and a
relative nugget. Trend coefficients and the process scale are profiled out
analytically under the non-informative prior, so hyperparameter estimation
reduces to a low-dimensional MAP search over lengthscales and nugget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, optimize

from .errors import (
    CapabilityError,
    DimensionMismatchError,
    FitFailureError,
    NumericalError,
    ValidationError,
    VersionMismatchError,
)
from .moments import GaussianMoments

GP_SCHEMA_VERSION = 1

# Nugget escalation ladder used when the correlation matrix fails to factorize.
_NUGGET_LADDER = (1e-6, 1e-4)

# Relative threshold below which negative predictive variances are treated as
# rounding noise and clipped; anything more negative is a genuine bug.
_VAR_CLIP_REL = 1e-12


# ---------------------------------------------------------------------------
# Kernel


@dataclass(frozen=True)
class KernelSpec:
    """Squared exponential correlation with a relative nugget.

    ``lengthscales`` live in standardized (unit-box) input coordinates. The
    nugget is relative to the process scale: the training matrix gets
    ``nugget`` added on its diagonal and the predictive variance carries a
    ``sigma2_hat * nugget`` floor.
    """

    lengthscales: np.ndarray
    nugget: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if ls.ndim != 1 or not np.all(ls > 0) or not np.all(np.isfinite(ls)):
            raise ValidationError("lengthscales must be positive finite reals")
        if not (self.nugget >= 0.0 and np.isfinite(self.nugget)):
            raise ValidationError("nugget must be nonnegative and finite")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "nugget", float(self.nugget))

    @property
    def dim(self) -> int:
        return self.lengthscales.size


def eval_correlation(kernel: KernelSpec, x: Sequence[float], x_other: Sequence[float]) -> float:
    """Pure squared exponential correlation between two points.

    The nugget indicator term is *not* included; callers building training
    matrices add it on the diagonal.
    """
    a = np.asarray(x, dtype=float).ravel()
    b = np.asarray(x_other, dtype=float).ravel()
    if a.size != b.size or a.size != kernel.dim:
        raise DimensionMismatchError(
            "input dimensions disagree",
            x_dim=int(a.size),
            x_other_dim=int(b.size),
            kernel_dim=kernel.dim,
        )
    z = (a - b) / kernel.lengthscales
    return float(np.exp(-np.dot(z, z)))


def _cross_correlation(kernel: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """(m, n) matrix of pure correlations between rows of A and rows of B."""
    diff = A[:, None, :] - B[None, :, :]
    d2 = np.einsum("mnk,mnk->mn", diff / kernel.lengthscales, diff / kernel.lengthscales)
    return np.exp(-d2)


# ---------------------------------------------------------------------------
# Trend basis


class TrendBasis:
    """Ordered regression basis evaluated on standardized inputs.

    The artifact's standard basis is constant plus linear terms; custom
    callables are accepted for experimentation but are not serializable and
    are rejected by the linked-moment machinery.
    """

    CONSTANT_LINEAR = "constant+linear"

    def __init__(self, kind: str, functions: Sequence[Callable[[np.ndarray], float]] | None = None):
        if kind == self.CONSTANT_LINEAR:
            if functions is not None:
                raise ValidationError("constant+linear basis takes no custom functions")
        elif functions is None or len(functions) == 0:
            raise ValidationError("custom trend basis needs at least one function")
        self.kind = kind
        self.functions = tuple(functions) if functions else ()

    @classmethod
    def constant_plus_linear(cls) -> "TrendBasis":
        return cls(cls.CONSTANT_LINEAR)

    def n_terms(self, n_inputs: int) -> int:
        if self.kind == self.CONSTANT_LINEAR:
            return n_inputs + 1
        return len(self.functions)

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Basis matrix H for a batch of points, shape (m, q)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == self.CONSTANT_LINEAR:
            return np.hstack([np.ones((X.shape[0], 1)), X])
        return np.column_stack([[f(row) for row in X] for f in self.functions])


# ---------------------------------------------------------------------------
# Design


@dataclass(frozen=True)
class Design:
    """Training inputs, scalar outputs, and declared per-dimension domains."""

    X: np.ndarray
    F: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        F = np.asarray(self.F, dtype=float).ravel()
        domains = np.atleast_2d(np.asarray(self.domains, dtype=float))
        if X.shape[0] != F.size:
            raise ValidationError(
                "design rows and outputs disagree", n_rows=X.shape[0], n_outputs=F.size
            )
        if domains.shape != (X.shape[1], 2):
            raise ValidationError(
                "domains must be (p, 2)", expected=[X.shape[1], 2], got=list(domains.shape)
            )
        if np.any(domains[:, 0] >= domains[:, 1]):
            raise ValidationError("each domain needs lower < upper")
        lo, hi = domains[:, 0], domains[:, 1]
        slack = 1e-9 * (hi - lo)
        if np.any(X < lo - slack) or np.any(X > hi + slack):
            raise ValidationError("design rows fall outside declared domains")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "domains", domains)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def standardize(self, X: np.ndarray) -> np.ndarray:
        """Map natural-unit points onto the unit box."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo = self.domains[:, 0]
        width = self.domains[:, 1] - self.domains[:, 0]
        return (X - lo) / width

    @property
    def X_std(self) -> np.ndarray:
        return self.standardize(self.X)

    def drop_row(self, i: int) -> "Design":
        keep = np.arange(self.n) != i
        return Design(self.X[keep], self.F[keep], self.domains)


# ---------------------------------------------------------------------------
# Hyperparameter search configuration


@dataclass(frozen=True)
class HyperparamSearchConfig:
    """Multi-start MAP search settings for (lengthscales, nugget).

    Bounds and penalty medians are in standardized input units. Weak
    log-normal penalties keep the marginal posterior away from the
    degenerate lengthscale ridges; the nugget penalty anchors the nugget at
    small values while leaving room to absorb genuine noise.
    """

    n_restarts: int = 8
    seed: int = 0
    maxiter: int = 200
    log_delta_bounds: tuple[float, float] = (math.log(1e-2), math.log(1e2))
    # the nugget floor keeps the training matrix well conditioned, which the
    # linked-moment quadratic forms rely on
    log_nugget_bounds: tuple[float, float] = (math.log(1e-6), math.log(1.0))
    delta_penalty_median: float = 0.5
    delta_penalty_log_sd: float = 1.0
    nugget_penalty_median: float = 1e-6
    nugget_penalty_log_sd: float = 4.0
    fixed_lengthscales: tuple[float, ...] | None = None
    fixed_nugget: float | None = None


# ---------------------------------------------------------------------------
# Fitted emulator


@dataclass
class GpEmulator:
    """Fitted surrogate with cached factorizations.

    ``beta_hat`` is the generalized-least-squares trend estimate in
    standardized coordinates, ``sigma2_hat`` the profiled process scale with
    denominator n - q - 2, and ``dof = n - q`` the Student degrees of
    freedom. Instances are immutable in practice and safe to share across
    concurrent predictions.
    """

    design: Design
    trend: TrendBasis
    kernel: KernelSpec
    beta_hat: np.ndarray
    sigma2_hat: float
    dof: int
    seed: int | None = None
    map_objective: float | None = None
    restart_index: int | None = None
    _chol: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]
    _H: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]
    _P_chol: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]
    _resid_weights: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    # -- construction -------------------------------------------------------

    @classmethod
    def build(
        cls,
        design: Design,
        trend: TrendBasis,
        kernel: KernelSpec,
        *,
        seed: int | None = None,
        escalate_nugget: bool = True,
    ) -> "GpEmulator":
        """Compute GLS trend, profiled scale, and factorizations for fixed
        hyperparameters.

        On factorization failure the nugget is raised along a fixed ladder
        before the fit is declared singular.
        """
        if kernel.dim != design.p:
            raise DimensionMismatchError(
                "kernel dimension does not match design",
                kernel_dim=kernel.dim,
                design_dim=design.p,
            )
        q = trend.n_terms(design.p)
        if design.n < q + 3:
            raise ValidationError(
                "need n >= q + 3 design points", n=design.n, q=q
            )
        ladder = (kernel.nugget,) + tuple(
            v for v in _NUGGET_LADDER if v > kernel.nugget
        )
        if not escalate_nugget:
            ladder = (kernel.nugget,)
        last_err: Exception | None = None
        for nugget in ladder:
            k = replace(kernel, nugget=nugget)
            try:
                parts = _gls_parts(design, trend, k)
            except linalg.LinAlgError as err:
                last_err = err
                continue
            chol, H, P_chol, beta_hat, sigma2_hat, rw = parts
            return cls(
                design=design,
                trend=trend,
                kernel=k,
                beta_hat=beta_hat,
                sigma2_hat=sigma2_hat,
                dof=design.n - q,
                seed=seed,
                _chol=chol,
                _H=H,
                _P_chol=P_chol,
                _resid_weights=rw,
            )
        raise FitFailureError(
            "correlation matrix singular even after nugget escalation",
            lengthscales=[float(v) for v in kernel.lengthscales],
            nugget=float(kernel.nugget),
        ) from last_err

    @classmethod
    def from_parts(
        cls,
        design: Design,
        trend: TrendBasis,
        kernel: KernelSpec,
        beta_hat: np.ndarray,
        sigma2_hat: float,
        *,
        seed: int | None = None,
    ) -> "GpEmulator":
        """Rebuild factorizations for stored estimates (deserialization)."""
        q = trend.n_terms(design.p)
        chol, H, P_chol, _, _, _ = _gls_parts(design, trend, kernel)
        resid = design.F - H @ np.asarray(beta_hat, dtype=float)
        rw = linalg.cho_solve((chol, True), resid)
        return cls(
            design=design,
            trend=trend,
            kernel=kernel,
            beta_hat=np.asarray(beta_hat, dtype=float),
            sigma2_hat=float(sigma2_hat),
            dof=design.n - q,
            seed=seed,
            _chol=chol,
            _H=H,
            _P_chol=P_chol,
            _resid_weights=rw,
        )

    # -- prediction ----------------------------------------------------------

    def predict_many(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at a batch of natural-unit points."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.design.p:
            raise DimensionMismatchError(
                "prediction points have wrong dimension",
                expected=self.design.p,
                got=X.shape[1],
            )
        Xs = self.design.standardize(X)
        r = _cross_correlation(self.kernel, Xs, self.design.X_std)  # (m, n)
        h = self.trend.evaluate(Xs)  # (m, q)
        mean = h @ self.beta_hat + r @ self._resid_weights

        a_inv_rt = linalg.cho_solve((self._chol, True), r.T)  # (n, m)
        quad_r = np.einsum("mn,nm->m", r, a_inv_rt)
        g = h - a_inv_rt.T @ self._H  # (m, q)
        p_inv_gt = linalg.cho_solve((self._P_chol, True), g.T)
        quad_g = np.einsum("mq,qm->m", g, p_inv_gt)
        var = self.sigma2_hat * (1.0 + self.kernel.nugget - quad_r + quad_g)
        floor = -_VAR_CLIP_REL * self.sigma2_hat
        if var.min() < floor:
            raise NumericalError(
                "predictive variance negative beyond rounding noise",
                min_var=float(var.min()),
                sigma2_hat=self.sigma2_hat,
            )
        return mean, np.maximum(var, 0.0)

    def predict(self, x: Sequence[float]) -> GaussianMoments:
        mean, var = self.predict_many(np.asarray(x, dtype=float).reshape(1, -1))
        return GaussianMoments.scalar(mean[0], var[0])

    # -- internals exposed for moment propagation ----------------------------

    def correlation_solve(self, B: np.ndarray) -> np.ndarray:
        """(R + nugget I)^{-1} B via the cached factorization."""
        return linalg.cho_solve((self._chol, True), B)

    def trend_gram_solve(self, B: np.ndarray) -> np.ndarray:
        """(H' A^{-1} H)^{-1} B via the cached factorization."""
        return linalg.cho_solve((self._P_chol, True), B)

    @property
    def resid_weights(self) -> np.ndarray:
        """A^{-1} (F - H beta_hat)."""
        return self._resid_weights

    @property
    def basis_matrix(self) -> np.ndarray:
        return self._H

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        if self.trend.kind != TrendBasis.CONSTANT_LINEAR:
            raise CapabilityError(
                "only the constant+linear trend is serializable",
                trend=self.trend.kind,
            )
        return {
            "version": GP_SCHEMA_VERSION,
            "domains": self.design.domains.tolist(),
            "X": self.design.X.tolist(),
            "F": self.design.F.tolist(),
            "trend": self.trend.kind,
            "delta": self.kernel.lengthscales.tolist(),
            "tau2": self.kernel.nugget,
            "beta_hat": self.beta_hat.tolist(),
            "sigma2_hat": self.sigma2_hat,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GpEmulator":
        version = doc.get("version")
        if version != GP_SCHEMA_VERSION:
            raise VersionMismatchError(
                "unsupported gp document version",
                version=version,
                supported=GP_SCHEMA_VERSION,
            )
        if doc.get("trend") != TrendBasis.CONSTANT_LINEAR:
            raise CapabilityError("unsupported trend", trend=doc.get("trend"))
        design = Design(
            np.asarray(doc["X"], dtype=float),
            np.asarray(doc["F"], dtype=float),
            np.asarray(doc["domains"], dtype=float),
        )
        kernel = KernelSpec(np.asarray(doc["delta"], dtype=float), float(doc["tau2"]))
        return cls.from_parts(
            design,
            TrendBasis.constant_plus_linear(),
            kernel,
            np.asarray(doc["beta_hat"], dtype=float),
            float(doc["sigma2_hat"]),
            seed=doc.get("seed"),
        )


def _gls_parts(design: Design, trend: TrendBasis, kernel: KernelSpec):
    """Factorize R + nugget*I and solve the GLS system.

    Returns (chol, H, P_chol, beta_hat, sigma2_hat, resid_weights); raises
    ``scipy.linalg.LinAlgError`` when the correlation matrix is not SPD or the
    profiled scale collapses.
    """
    Xs = design.X_std
    A = _cross_correlation(kernel, Xs, Xs)
    A[np.diag_indices_from(A)] += kernel.nugget
    chol = linalg.cholesky(A, lower=True)
    H = trend.evaluate(Xs)
    q = H.shape[1]
    a_inv_H = linalg.cho_solve((chol, True), H)
    P = H.T @ a_inv_H
    P_chol = linalg.cholesky(0.5 * (P + P.T), lower=True)
    a_inv_F = linalg.cho_solve((chol, True), design.F)
    beta_hat = linalg.cho_solve((P_chol, True), H.T @ a_inv_F)
    resid = design.F - H @ beta_hat
    rw = linalg.cho_solve((chol, True), resid)
    denom = design.n - q - 2
    if denom <= 0:
        raise linalg.LinAlgError("nonpositive scale denominator")
    sigma2_hat = float(resid @ rw) / denom
    if not (sigma2_hat > 0 and np.isfinite(sigma2_hat)):
        raise linalg.LinAlgError("profiled scale not positive")
    return chol, H, P_chol, beta_hat, sigma2_hat, rw


# ---------------------------------------------------------------------------
# MAP hyperparameter estimation


def marginal_log_posterior(
    design: Design,
    trend: TrendBasis,
    kernel: KernelSpec,
    search: HyperparamSearchConfig = HyperparamSearchConfig(),
) -> float:
    """Integrated log-posterior of (lengthscales, nugget), up to a constant.

    Trend coefficients and the process scale are integrated out under the
    non-informative prior, leaving

        -1/2 log|A| - 1/2 log|H' A^{-1} H| - (n - q)/2 log S^2

    plus weak log-normal penalties on each lengthscale and on the nugget.
    Returns -inf when the correlation matrix fails to factorize.
    """
    Xs = design.X_std
    A = _cross_correlation(kernel, Xs, Xs)
    A[np.diag_indices_from(A)] += kernel.nugget
    try:
        chol = linalg.cholesky(A, lower=True)
    except linalg.LinAlgError:
        return -np.inf
    H = trend.evaluate(Xs)
    q = H.shape[1]
    a_inv_H = linalg.cho_solve((chol, True), H)
    P = H.T @ a_inv_H
    try:
        P_chol = linalg.cholesky(0.5 * (P + P.T), lower=True)
    except linalg.LinAlgError:
        return -np.inf
    a_inv_F = linalg.cho_solve((chol, True), design.F)
    beta = linalg.cho_solve((P_chol, True), H.T @ a_inv_F)
    resid = design.F - H @ beta
    s2 = float(resid @ linalg.cho_solve((chol, True), resid))
    if not (s2 > 0 and np.isfinite(s2)):
        return -np.inf
    log_det_A = 2.0 * np.sum(np.log(np.diag(chol)))
    log_det_P = 2.0 * np.sum(np.log(np.diag(P_chol)))
    ll = -0.5 * log_det_A - 0.5 * log_det_P - 0.5 * (design.n - q) * math.log(s2)
    return ll + _log_penalty(kernel, search)


def _log_penalty(kernel: KernelSpec, search: HyperparamSearchConfig) -> float:
    """Log-normal penalty densities evaluated at (delta, nugget)."""

    def lognorm_logpdf(x, median, log_sd):
        lx = math.log(x)
        return -lx - 0.5 * ((lx - math.log(median)) / log_sd) ** 2

    total = sum(
        lognorm_logpdf(d, search.delta_penalty_median, search.delta_penalty_log_sd)
        for d in kernel.lengthscales
    )
    if kernel.nugget > 0:
        total += lognorm_logpdf(
            kernel.nugget, search.nugget_penalty_median, search.nugget_penalty_log_sd
        )
    return total


def _start_points(p: int, search: HyperparamSearchConfig) -> np.ndarray:
    """Space-filling restart set in log-hyperparameter space."""
    rng = np.random.default_rng(search.seed)
    k = search.n_restarts
    dims = p + (0 if search.fixed_nugget is not None else 1)
    lo = np.full(dims, math.log(0.1))
    hi = np.full(dims, math.log(5.0))
    if search.fixed_nugget is None:
        lo[-1], hi[-1] = search.log_nugget_bounds[0], math.log(1e-2)
    # one stratum per restart and dimension, stratified Latin-hypercube style
    u = (rng.permuted(np.tile(np.arange(k), (dims, 1)), axis=1).T + rng.random((k, dims))) / k
    return lo + u * (hi - lo)


def fit_gp(
    design: Design,
    trend: TrendBasis | None = None,
    search: HyperparamSearchConfig = HyperparamSearchConfig(),
) -> GpEmulator:
    """MAP-fit an emulator by multi-start local optimization in log space.

    Restarts are independent; the best converged objective wins, ties broken
    by the lowest restart index. Raises ``FitFailureError`` when every restart
    lands on a singular correlation matrix.
    """
    trend = trend or TrendBasis.constant_plus_linear()
    q = trend.n_terms(design.p)
    if design.n < q + 3:
        raise ValidationError("need n >= q + 3 design points", n=design.n, q=q)

    if search.fixed_lengthscales is not None:
        kernel = KernelSpec(
            np.asarray(search.fixed_lengthscales, dtype=float),
            search.fixed_nugget or 0.0,
        )
        em = GpEmulator.build(design, trend, kernel, seed=search.seed)
        em.map_objective = marginal_log_posterior(design, trend, em.kernel, search)
        em.restart_index = 0
        return em

    def theta_to_kernel(theta: np.ndarray) -> KernelSpec:
        if search.fixed_nugget is not None:
            return KernelSpec(np.exp(theta), search.fixed_nugget)
        return KernelSpec(np.exp(theta[:-1]), math.exp(theta[-1]))

    def negative_objective(theta: np.ndarray) -> float:
        val = marginal_log_posterior(design, trend, theta_to_kernel(theta), search)
        return float("inf") if not np.isfinite(val) else -val

    bounds = [search.log_delta_bounds] * design.p
    if search.fixed_nugget is None:
        bounds.append(search.log_nugget_bounds)

    best: tuple[float, int, np.ndarray] | None = None
    for idx, start in enumerate(_start_points(design.p, search)):
        res = optimize.minimize(
            negative_objective,
            start,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": search.maxiter},
        )
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best[0]:
            best = (float(res.fun), idx, res.x.copy())
    if best is None:
        raise FitFailureError(
            "marginal posterior not finite at any restart",
            n_restarts=search.n_restarts,
        )
    fun, idx, theta = best
    em = GpEmulator.build(design, trend, theta_to_kernel(theta), seed=search.seed)
    em.map_objective = -fun
    em.restart_index = idx
    return em


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class LooRecord:
    index: int
    x: tuple[float, ...]
    observed: float
    mean: float | None
    sd: float | None
    within_two_sd: bool | None
    error: str | None = None


def loo_diagnostics(em: GpEmulator) -> list[LooRecord]:
    """Leave-one-out residual check with hyperparameters held at the full-fit
    MAP; singular folds are reported as error markers and skipped."""
    q = em.trend.n_terms(em.design.p)
    if em.design.n < q + 4:
        raise ValidationError(
            "leave-one-out needs n >= q + 4", n=em.design.n, q=q
        )
    records = []
    for i in range(em.design.n):
        x_i = em.design.X[i]
        f_i = float(em.design.F[i])
        try:
            fold = GpEmulator.build(
                em.design.drop_row(i), em.trend, em.kernel, escalate_nugget=False
            )
            pred = fold.predict(x_i)
        except (FitFailureError, NumericalError) as err:
            records.append(
                LooRecord(i, tuple(x_i), f_i, None, None, None, error=str(err))
            )
            continue
        mean, sd = pred.scalar_mean, pred.scalar_sd
        # the tiny absolute guard keeps exact fits (residual and sd both at
        # rounding level) from flagging red
        within = abs(f_i - mean) <= 2.0 * sd + 1e-12 * (1.0 + abs(f_i))
        records.append(LooRecord(i, tuple(x_i), f_i, mean, sd, bool(within)))
    return records


def rmse(predictions: Sequence[float], truth: Sequence[float]) -> float:
    """Root-mean-square error between two equal-length vectors."""
    a = np.asarray(predictions, dtype=float).ravel()
    b = np.asarray(truth, dtype=float).ravel()
    if a.size != b.size or a.size == 0:
        raise DimensionMismatchError(
            "vectors must have equal nonzero length", left=a.size, right=b.size
        )
    return float(np.sqrt(np.mean((a - b) ** 2)))
