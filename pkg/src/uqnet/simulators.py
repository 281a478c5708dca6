"""Toy stand-ins for the two computer models plus the space-filling design
generator used to train their emulators.

The heating model follows a degree-days energy balance; the dispatch model
serves all demand with whichever heating technology is cheaper per kWh of
delivered heat. Both are deterministic and cheap, which keeps emulator
training data reproducible.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

HEAT_DOMAINS = {
    "hdd": (200.0, 1200.0),
    "efficiency": (0.5, 1.0),
    "transmission": (10.0, 25.0),
}

DISPATCH_DOMAINS = {
    "demand": (48_000.0, 1_450_000.0),
    "gas_price": (1.0, 5.0),
    "elec_price": (4.0, 25.0),
    "boiler_efficiency": (0.3, 1.0),
    "heat_pump_cop": (2.0, 6.0),
}


@dataclass(frozen=True)
class HeatDemandParams:
    """Inputs of the quarterly heating-demand model.

    hdd: heating degree days over the quarter (K*day)
    efficiency: efficiency of the heating equipment
    transmission: global building transmission coefficient (kW/K)
    baseline: year-round base load (kWh/quarter)
    """

    hdd: float
    efficiency: float
    transmission: float
    baseline: float = 0.0

    def __post_init__(self):
        if self.efficiency <= 0:
            raise ValidationError("efficiency must be positive", efficiency=self.efficiency)


@dataclass(frozen=True)
class DispatchParams:
    """Inputs of the quarterly least-cost dispatch model."""

    demand: float
    gas_price: float
    elec_price: float
    boiler_efficiency: float
    heat_pump_cop: float

    def __post_init__(self):
        if self.boiler_efficiency <= 0 or self.heat_pump_cop <= 0:
            raise ValidationError("efficiencies must be positive")


def heating_demand(p: HeatDemandParams) -> float:
    """Seasonal heating demand in kWh per quarter.

    transmission (kW/K) times degree days (K*day) times 24 h/day gives the
    heat requirement in kWh; dividing by equipment efficiency converts to
    delivered energy.
    """
    return p.transmission * p.hdd * 24.0 / p.efficiency + p.baseline


def dispatch_cost(p: DispatchParams) -> float:
    """Quarterly operating cost in pounds under least-cost dispatch.

    Unit heat costs (p/kWh) are gas_price/boiler_efficiency for the boiler
    and elec_price/cop for the heat pump; all demand is served by the cheaper
    technology, ties going to the heat pump.
    """
    unit_gas = p.gas_price / p.boiler_efficiency
    unit_hp = p.elec_price / p.heat_pump_cop
    unit = unit_hp if unit_hp <= unit_gas else unit_gas
    return p.demand * unit / 100.0


def heat_demand_from_row(x: Sequence[float], baseline: float = 0.0) -> float:
    return heating_demand(
        HeatDemandParams(hdd=x[0], efficiency=x[1], transmission=x[2], baseline=baseline)
    )


def dispatch_cost_from_row(x: Sequence[float]) -> float:
    return dispatch_cost(
        DispatchParams(
            demand=x[0],
            gas_price=x[1],
            elec_price=x[2],
            boiler_efficiency=x[3],
            heat_pump_cop=x[4],
        )
    )


# ---------------------------------------------------------------------------
# Latin hypercube designs


def _min_sq_dist(D2: np.ndarray) -> float:
    off = D2 + np.diag(np.full(D2.shape[0], np.inf))
    return float(off.min())


def lhc_design(
    n: int,
    domains: Sequence[tuple[float, float]],
    seed: int,
    *,
    maximin_iters: int | None = None,
) -> np.ndarray:
    """Maximin-improved Latin hypercube, deterministic per seed.

    Starts from a stratified hypercube (one point per axis stratum in every
    dimension) and then greedily accepts random within-column swaps that
    increase the minimum pairwise distance in unit coordinates, for a fixed
    iteration budget.
    """
    if n < 2:
        raise ValidationError("need at least two design points", n=n)
    domains = np.atleast_2d(np.asarray(domains, dtype=float))
    if domains.ndim != 2 or domains.shape[1] != 2:
        raise ValidationError("domains must be (p, 2)")
    if np.any(domains[:, 0] >= domains[:, 1]):
        raise ValidationError("degenerate domain: lower must be < upper")
    d = domains.shape[0]
    rng = np.random.default_rng(seed)
    # one uniform draw per stratum, shuffled independently per dimension
    U = np.empty((n, d))
    for j in range(d):
        U[:, j] = (rng.permutation(n) + rng.random(n)) / n

    if maximin_iters is None:
        maximin_iters = 50 * n

    def rows_sq_dist(idx: int) -> np.ndarray:
        diff = U - U[idx]
        row = np.einsum("nk,nk->n", diff, diff)
        row[idx] = 0.0
        return row

    diff = U[:, None, :] - U[None, :, :]
    D2 = np.einsum("ijk,ijk->ij", diff, diff)
    best = _min_sq_dist(D2)
    for _ in range(maximin_iters):
        i, k = rng.choice(n, size=2, replace=False)
        j = int(rng.integers(d))
        old_rows = (D2[i].copy(), D2[k].copy())
        U[i, j], U[k, j] = U[k, j], U[i, j]
        for idx in (i, k):
            row = rows_sq_dist(idx)
            D2[idx, :] = row
            D2[:, idx] = row
        score = _min_sq_dist(D2)
        if score > best:
            best = score
        else:
            U[i, j], U[k, j] = U[k, j], U[i, j]
            D2[i, :] = old_rows[0]
            D2[:, i] = old_rows[0]
            D2[k, :] = old_rows[1]
            D2[:, k] = old_rows[1]
    lo = domains[:, 0]
    width = domains[:, 1] - domains[:, 0]
    return lo + U * width


def run_ensemble(X: np.ndarray, simulator) -> np.ndarray:
    """Evaluate a deterministic simulator over design rows."""
    return np.array([simulator(row) for row in np.atleast_2d(X)], dtype=float)


def write_ensemble_csv(
    path_or_buf, X: np.ndarray, outputs: np.ndarray, input_names: Sequence[str], output_name: str
) -> None:
    """Emit one design point per row with a header naming inputs and output."""
    X = np.atleast_2d(X)
    if X.shape[1] != len(input_names):
        raise ValidationError(
            "one name per input column", columns=X.shape[1], names=len(input_names)
        )
    if X.shape[0] != len(outputs):
        raise ValidationError("one output per design row")

    def _write(fh):
        writer = csv.writer(fh)
        writer.writerow(list(input_names) + [output_name])
        for row, y in zip(X, outputs):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(y))])

    if isinstance(path_or_buf, io.TextIOBase):
        _write(path_or_buf)
    else:
        with open(path_or_buf, "w", newline="") as fh:
            _write(fh)
