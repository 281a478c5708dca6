"""Dynamic linear models: Kalman filtering, k-step forecasting, and MAP
estimation of the observation/evolution precisions.

The observation equation is y(t) = F(t)' theta(t) + v(t) with v ~ N(0, V);
the state evolves as theta(t) = G theta(t-1) + w(t) with w ~ N(0, W). For
this artifact G is constant (identity for the regression models) and W is a
scalar multiple of the identity.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import optimize

from .errors import (
    NumericalError,
    ValidationError,
    VersionMismatchError,
)
from .moments import GaussianMoments

DLM_SCHEMA_VERSION = 1

DIFFUSE_PRIOR_VARIANCE = 1e6


@dataclass(frozen=True)
class DlmSpec:
    """State-space structure with constant variances.

    Regression vectors F(t) are data and are passed per call rather than
    stored; G, V, W and the initial prior are structural.
    """

    n_state: int
    G: np.ndarray
    V: float
    W: np.ndarray
    m0: np.ndarray
    C0: np.ndarray

    def __post_init__(self):
        p = self.n_state
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        m0 = np.asarray(self.m0, dtype=float).ravel()
        C0 = np.atleast_2d(np.asarray(self.C0, dtype=float))
        for name, mat in (("G", G), ("W", W), ("C0", C0)):
            if mat.shape != (p, p):
                raise ValidationError(
                    f"{name} must be ({p}, {p})", got=list(mat.shape)
                )
        if m0.size != p:
            raise ValidationError("m0 has wrong length", got=m0.size, expected=p)
        if not self.V > 0:
            raise ValidationError("observation variance must be positive", V=self.V)
        for name, mat in (("W", W), ("C0", C0)):
            if np.abs(mat - mat.T).max() > 1e-10 * max(1.0, np.abs(mat).max()):
                raise ValidationError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(mat).min() < -1e-10 * max(1.0, np.trace(mat)):
                raise ValidationError(f"{name} must be positive semidefinite")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "C0", C0)

    @classmethod
    def random_walk(
        cls,
        n_state: int,
        V: float,
        w: float,
        m0: np.ndarray | None = None,
        C0: np.ndarray | None = None,
    ) -> "DlmSpec":
        """Identity-evolution spec with W = w * I and a diffuse default prior."""
        eye = np.eye(n_state)
        return cls(
            n_state=n_state,
            G=eye,
            V=V,
            W=w * eye,
            m0=np.zeros(n_state) if m0 is None else m0,
            C0=DIFFUSE_PRIOR_VARIANCE * eye if C0 is None else C0,
        )


@dataclass(frozen=True)
class FilterState:
    """Posterior state moments at time t plus the last one-step forecast."""

    t: int
    m: np.ndarray
    C: np.ndarray
    forecast_mean: float | None = None
    forecast_var: float | None = None
    innovation: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=float).ravel())
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        object.__setattr__(self, "C", 0.5 * (C + C.T))


def initial_state(spec: DlmSpec) -> FilterState:
    return FilterState(t=0, m=spec.m0, C=spec.C0)


def _as_regressor(spec: DlmSpec, F_t: Sequence[float]) -> np.ndarray:
    F = np.asarray(F_t, dtype=float).ravel()
    if F.size != spec.n_state:
        raise ValidationError(
            "regression vector has wrong length", got=F.size, expected=spec.n_state
        )
    return F


def state_prior(spec: DlmSpec, state: FilterState, steps: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Marginal state moments (a, R) `steps` ahead of the posterior."""
    if steps < 1:
        raise ValidationError("steps must be >= 1", steps=steps)
    a = state.m.copy()
    R = state.C.copy()
    for _ in range(steps):
        a = spec.G @ a
        R = spec.G @ R @ spec.G.T + spec.W
    return a, 0.5 * (R + R.T)


def filter_step(
    spec: DlmSpec, state: FilterState, y: float | None, F_t: Sequence[float]
) -> FilterState:
    """One Kalman update; a missing observation propagates the prior."""
    F = _as_regressor(spec, F_t)
    a, R = state_prior(spec, state, 1)
    f = float(F @ a)
    Q = float(F @ R @ F + spec.V)
    if Q <= 0:
        raise NumericalError("forecast variance not positive", Q=Q, t=state.t + 1)
    if y is None or (isinstance(y, float) and math.isnan(y)):
        return FilterState(
            t=state.t + 1, m=a, C=R, forecast_mean=f, forecast_var=Q, innovation=None
        )
    e = float(y) - f
    A = (R @ F) / Q
    m = a + A * e
    C = R - Q * np.outer(A, A)
    return FilterState(
        t=state.t + 1, m=m, C=C, forecast_mean=f, forecast_var=Q, innovation=e
    )


def filter_series(
    spec: DlmSpec, ys: Sequence[float | None], F_rows: np.ndarray
) -> list[FilterState]:
    """Run the filter over a series; returns the posterior after each step."""
    F_rows = np.atleast_2d(np.asarray(F_rows, dtype=float))
    if F_rows.shape[0] != len(ys):
        raise ValidationError(
            "series and regressors disagree", n_obs=len(ys), n_rows=F_rows.shape[0]
        )
    states = []
    state = initial_state(spec)
    for y, F_t in zip(ys, F_rows):
        state = filter_step(spec, state, y, F_t)
        states.append(state)
    return states


def forecast_k(
    spec: DlmSpec,
    state: FilterState,
    horizon: int,
    F_future: Sequence[Sequence[float]],
) -> list[GaussianMoments]:
    """Forecast distributions for steps 1..horizon ahead of `state`.

    Future regression vectors are exogenous inputs and must be supplied for
    every step.
    """
    if horizon < 1:
        raise ValidationError("horizon must be >= 1", horizon=horizon)
    if len(F_future) < horizon:
        missing = list(range(len(F_future) + 1, horizon + 1))
        raise ValidationError(
            "missing future regression vectors", steps=missing, horizon=horizon
        )
    out = []
    a = state.m.copy()
    R = state.C.copy()
    for j in range(horizon):
        a = spec.G @ a
        R = spec.G @ R @ spec.G.T + spec.W
        F = _as_regressor(spec, F_future[j])
        f = float(F @ a)
        Q = float(F @ R @ F + spec.V)
        out.append(GaussianMoments.scalar(f, Q))
    return out


# ---------------------------------------------------------------------------
# Precision estimation


@dataclass(frozen=True)
class PrecisionPrior:
    """Independent Gamma priors on the precisions 1/V and 1/w."""

    shape: float = 3.0
    rate: float = 0.01

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValidationError("prior shape and rate must be positive")

    def log_density(self, precision: float) -> float:
        return (self.shape - 1.0) * math.log(precision) - self.rate * precision

    @property
    def mode(self) -> float:
        """Prior mode of the precision; finite for shape > 1."""
        return (self.shape - 1.0) / self.rate


@dataclass(frozen=True)
class PrecisionFit:
    V: float
    w: float
    objective: float
    n_starts: int


def prequential_log_likelihood(
    ys: Sequence[float], F_rows: np.ndarray, spec: DlmSpec
) -> float:
    """Sum of one-step forecast log densities from the filter."""
    total = 0.0
    state = initial_state(spec)
    for y, F_t in zip(ys, np.atleast_2d(F_rows)):
        state = filter_step(spec, state, y, F_t)
        if state.innovation is None:
            continue
        Q = state.forecast_var
        total += -0.5 * (math.log(2.0 * math.pi * Q) + state.innovation**2 / Q)
    return total


def fit_precisions(
    ys: Sequence[float],
    F_rows: np.ndarray,
    prior: PrecisionPrior = PrecisionPrior(),
    *,
    G: np.ndarray | None = None,
    m0: np.ndarray | None = None,
    C0: np.ndarray | None = None,
    fix_w: float | None = None,
    seed: int = 0,
) -> PrecisionFit:
    """MAP (V, w) by maximizing prequential likelihood plus Gamma log-priors.

    The posterior is over the precisions psi1 = 1/V and psi2 = 1/w, searched
    in log coordinates from a multi-start grid followed by local refinement.
    With ``fix_w`` the evolution variance is pinned and only V is estimated.
    """
    ys = [None if y is None or (isinstance(y, float) and math.isnan(y)) else float(y) for y in ys]
    F_rows = np.atleast_2d(np.asarray(F_rows, dtype=float))
    p = F_rows.shape[1]
    if len(ys) < p + 5:
        raise ValidationError(
            "series too short to estimate precisions", length=len(ys), n_state=p
        )
    observed = [y for y in ys if y is not None]
    y_scale = float(np.var(observed)) if len(observed) > 2 else 1.0
    if y_scale <= 0:
        y_scale = 1.0

    def build_spec(V: float, w: float) -> DlmSpec:
        eye = np.eye(p)
        return DlmSpec(
            n_state=p,
            G=eye if G is None else G,
            V=V,
            W=w * eye,
            m0=np.zeros(p) if m0 is None else m0,
            C0=DIFFUSE_PRIOR_VARIANCE * eye if C0 is None else C0,
        )

    def negative_objective(log_psi: np.ndarray) -> float:
        psi1 = math.exp(log_psi[0])
        V = 1.0 / psi1
        total = prior.log_density(psi1)
        if fix_w is None:
            psi2 = math.exp(log_psi[1])
            w = 1.0 / psi2
            total += prior.log_density(psi2)
        else:
            w = fix_w
        try:
            total += prequential_log_likelihood(ys, F_rows, build_spec(V, w))
        except NumericalError:
            return float("inf")
        return float("inf") if not np.isfinite(total) else -total

    # log-precision start grid centred on the data scale
    base = -math.log(y_scale)
    grid = [base + d for d in (-4.0, -2.0, 0.0, 2.0, 4.0)]
    starts = (
        [np.array([g]) for g in grid]
        if fix_w is not None
        else [np.array([g1, g2]) for g1 in grid for g2 in grid]
    )

    best = None
    for start in starts:
        res = optimize.minimize(negative_objective, start, method="Nelder-Mead")
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise ValidationError(
            "likelihood not finite at any start", n_starts=len(starts)
        )
    V = 1.0 / math.exp(best.x[0])
    w = fix_w if fix_w is not None else 1.0 / math.exp(best.x[1])
    return PrecisionFit(V=V, w=w, objective=-float(best.fun), n_starts=len(starts))


# ---------------------------------------------------------------------------
# Fitted artifact


@dataclass(frozen=True)
class Dlm:
    """A fitted regression DLM ready for forecasting.

    Holds the structural spec, the regressor naming/scaling metadata needed
    to build future regression vectors, and the filter posterior at the end
    of the fitted series.
    """

    spec: DlmSpec
    regressor_names: tuple[str, ...]
    scale_factors: tuple[float, ...]
    state: FilterState
    data_digest: str = ""

    def __post_init__(self):
        if len(self.regressor_names) != self.spec.n_state:
            raise ValidationError(
                "one regressor name per state dimension",
                names=len(self.regressor_names),
                n_state=self.spec.n_state,
            )
        if len(self.scale_factors) != self.spec.n_state:
            raise ValidationError(
                "one scale factor per state dimension",
                factors=len(self.scale_factors),
                n_state=self.spec.n_state,
            )

    @property
    def w(self) -> float:
        return float(self.spec.W[0, 0]) if self.spec.n_state else 0.0

    def with_state(self, state: FilterState) -> "Dlm":
        return replace(self, state=state)

    def to_dict(self) -> dict:
        return {
            "version": DLM_SCHEMA_VERSION,
            "regressor_names": list(self.regressor_names),
            "scale_factors": list(self.scale_factors),
            "V": self.spec.V,
            "w": self.w,
            "m": self.state.m.tolist(),
            "C": self.state.C.tolist(),
            "t": self.state.t,
            "data_digest": self.data_digest,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Dlm":
        version = doc.get("version")
        if version != DLM_SCHEMA_VERSION:
            raise VersionMismatchError(
                "unsupported dlm document version",
                version=version,
                supported=DLM_SCHEMA_VERSION,
            )
        names = tuple(doc["regressor_names"])
        spec = DlmSpec.random_walk(len(names), float(doc["V"]), float(doc["w"]))
        state = FilterState(
            t=int(doc["t"]),
            m=np.asarray(doc["m"], dtype=float),
            C=np.asarray(doc["C"], dtype=float),
        )
        return cls(
            spec=spec,
            regressor_names=names,
            scale_factors=tuple(float(s) for s in doc["scale_factors"]),
            state=state,
            data_digest=doc.get("data_digest", ""),
        )


def series_digest(ys: Sequence[float], F_rows: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(ys, dtype=float).tobytes())
    h.update(np.asarray(F_rows, dtype=float).tobytes())
    return h.hexdigest()[:16]


def fit_dlm(
    ys: Sequence[float],
    F_rows: np.ndarray,
    regressor_names: Sequence[str],
    scale_factors: Sequence[float] | None = None,
    prior: PrecisionPrior = PrecisionPrior(),
    seed: int = 0,
) -> Dlm:
    """Estimate precisions, run the filter over the series, and package the
    result for persistence and graph propagation."""
    F_rows = np.atleast_2d(np.asarray(F_rows, dtype=float))
    fit = fit_precisions(ys, F_rows, prior, seed=seed)
    spec = DlmSpec.random_walk(F_rows.shape[1], fit.V, fit.w)
    states = filter_series(spec, ys, F_rows)
    if scale_factors is None:
        scale_factors = [1.0] * F_rows.shape[1]
    return Dlm(
        spec=spec,
        regressor_names=tuple(regressor_names),
        scale_factors=tuple(float(s) for s in scale_factors),
        state=states[-1],
        data_digest=series_digest([0.0 if y is None else y for y in ys], F_rows),
    )
