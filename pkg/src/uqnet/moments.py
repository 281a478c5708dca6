"""Gaussian first/second-moment summaries passed between model components."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

# Diagonal entries more negative than -RELATIVE_DIAG_TOL * trace are rejected;
# smaller negatives are rounding noise and get clipped to zero.
_DIAG_TOL = 1e-10
_CORR_TOL = 1e-10


@dataclass(frozen=True)
class GaussianMoments:
    """Mean vector and covariance matrix of a (possibly 1-D) Gaussian belief.

    The covariance is symmetrized on construction; asymmetry or negative
    diagonal entries beyond rounding noise raise ``NumericalError``.
    """

    mean: np.ndarray
    cov: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = self.cov
        if cov is None:
            cov = np.zeros((mean.size, mean.size))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise NumericalError(
                "moment shapes inconsistent",
                mean_shape=list(mean.shape),
                cov_shape=list(cov.shape),
            )
        scale = max(np.abs(cov).max(), 1.0)
        if np.abs(cov - cov.T).max() > 1e-8 * scale:
            raise NumericalError("covariance not symmetric")
        cov = 0.5 * (cov + cov.T)
        diag = np.diag(cov).copy()
        floor = -_DIAG_TOL * max(np.trace(cov), 1.0)
        if diag.min() < floor:
            raise NumericalError("negative variance", min_diag=float(diag.min()))
        if diag.min() < 0.0:
            np.fill_diagonal(cov, np.maximum(diag, 0.0))
        sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
        denom = np.outer(sd, sd)
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(denom > 0, cov / denom, 0.0)
        if np.abs(corr).max() > 1.0 + _CORR_TOL:
            raise NumericalError(
                "correlation out of range", max_abs_corr=float(np.abs(corr).max())
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def scalar(cls, mean: float, var: float) -> "GaussianMoments":
        return cls(np.array([float(mean)]), np.array([[float(var)]]))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def scalar_mean(self) -> float:
        if self.dim != 1:
            raise NumericalError("not a scalar belief", dim=self.dim)
        return float(self.mean[0])

    @property
    def scalar_var(self) -> float:
        if self.dim != 1:
            raise NumericalError("not a scalar belief", dim=self.dim)
        return float(self.cov[0, 0])

    @property
    def scalar_sd(self) -> float:
        return float(np.sqrt(self.scalar_var))

    def two_sd_interval(self) -> tuple[float, float]:
        m, s = self.scalar_mean, self.scalar_sd
        return (m - 2.0 * s, m + 2.0 * s)
