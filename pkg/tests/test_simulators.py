import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uqnet.errors import ValidationError
from uqnet.simulators import (
    DISPATCH_DOMAINS,
    HEAT_DOMAINS,
    DispatchParams,
    HeatDemandParams,
    dispatch_cost,
    heating_demand,
    lhc_design,
    run_ensemble,
    write_ensemble_csv,
)


# ---------------------------------------------------------------------------
# Heating demand


def test_heating_demand_lower_corner():
    p = HeatDemandParams(hdd=200, efficiency=1.0, transmission=10)
    assert heating_demand(p) == pytest.approx(48_000.0)


def test_heating_demand_upper_corner_near_bound():
    p = HeatDemandParams(hdd=1200, efficiency=0.5, transmission=25)
    got = heating_demand(p)
    assert got == pytest.approx(1_440_000.0)
    assert abs(got - 1_450_000.0) / 1_450_000.0 < 0.01


def test_heating_demand_efficiency_halves_seasonal_component():
    base = HeatDemandParams(hdd=600, efficiency=0.5, transmission=15, baseline=1000)
    double = HeatDemandParams(hdd=600, efficiency=1.0, transmission=15, baseline=1000)
    assert heating_demand(double) - 1000 == pytest.approx(
        (heating_demand(base) - 1000) / 2
    )


@given(
    st.floats(200, 1200),
    st.floats(0.5, 1.0),
    st.floats(10, 25),
    st.floats(200, 1200),
    st.floats(0.5, 1.0),
    st.floats(10, 25),
)
def test_heating_demand_monotonicities(h1, e1, t1, h2, e2, t2):
    lo = HeatDemandParams(hdd=min(h1, h2), efficiency=max(e1, e2), transmission=min(t1, t2))
    hi = HeatDemandParams(hdd=max(h1, h2), efficiency=min(e1, e2), transmission=max(t1, t2))
    assert heating_demand(lo) <= heating_demand(hi) + 1e-9


def test_heating_demand_rejects_zero_efficiency():
    with pytest.raises(ValidationError):
        HeatDemandParams(hdd=500, efficiency=0.0, transmission=15)


# ---------------------------------------------------------------------------
# Dispatch


def test_dispatch_gas_wins():
    p = DispatchParams(
        demand=100_000, gas_price=3.0, elec_price=15.0, boiler_efficiency=0.9, heat_pump_cop=4.0
    )
    assert dispatch_cost(p) == pytest.approx(100_000 * (3.0 / 0.9) / 100.0)


def test_dispatch_heat_pump_wins():
    p = DispatchParams(
        demand=100_000, gas_price=3.0, elec_price=8.0, boiler_efficiency=0.9, heat_pump_cop=4.0
    )
    assert dispatch_cost(p) == pytest.approx(2_000.0)


def test_dispatch_tie_goes_to_heat_pump():
    # both unit costs 4.0; the tie rule is observable through continuity only,
    # so check the exact boundary value equals the heat-pump cost
    p = DispatchParams(
        demand=50_000, gas_price=4.0, elec_price=16.0, boiler_efficiency=1.0, heat_pump_cop=4.0
    )
    assert dispatch_cost(p) == pytest.approx(50_000 * (16.0 / 4.0) / 100.0)


def test_dispatch_price_homogeneity():
    base = DispatchParams(
        demand=250_000, gas_price=2.8, elec_price=11.0, boiler_efficiency=0.8, heat_pump_cop=3.2
    )
    shocked = DispatchParams(
        demand=250_000, gas_price=2.8 * 1.25, elec_price=11.0 * 1.25,
        boiler_efficiency=0.8, heat_pump_cop=3.2,
    )
    assert dispatch_cost(shocked) == pytest.approx(1.25 * dispatch_cost(base), rel=1e-12)


@given(
    st.floats(48_000, 1_450_000),
    st.floats(1, 5),
    st.floats(4, 25),
    st.floats(0.3, 1.0),
    st.floats(2, 6),
)
def test_dispatch_cost_is_min_of_unit_costs(demand, gas, elec, be, cop):
    p = DispatchParams(demand, gas, elec, be, cop)
    c = dispatch_cost(p)
    assert c == pytest.approx(demand * min(gas / be, elec / cop) / 100.0, rel=1e-12)


def test_dispatch_continuous_at_switching_boundary():
    demand, be, cop = 300_000.0, 0.8, 4.0
    gas = 3.2
    elec_at_boundary = gas / be * cop  # 16.0
    eps = 1e-9
    below = dispatch_cost(DispatchParams(demand, gas, elec_at_boundary - eps, be, cop))
    above = dispatch_cost(DispatchParams(demand, gas, elec_at_boundary + eps, be, cop))
    assert below == pytest.approx(above, rel=1e-6)


# ---------------------------------------------------------------------------
# Latin hypercube designs


def test_lhc_one_point_per_stratum():
    domains = list(HEAT_DOMAINS.values())
    n = 25
    X = lhc_design(n, domains, seed=3)
    for j, (lo, hi) in enumerate(domains):
        strata = np.floor((X[:, j] - lo) / (hi - lo) * n).astype(int)
        strata = np.clip(strata, 0, n - 1)
        assert sorted(strata) == list(range(n))


def test_lhc_reproducible_per_seed():
    domains = list(DISPATCH_DOMAINS.values())
    a = lhc_design(40, domains, seed=11)
    b = lhc_design(40, domains, seed=11)
    np.testing.assert_array_equal(a, b)
    c = lhc_design(40, domains, seed=12)
    assert not np.array_equal(a, c)


def test_lhc_maximin_beats_plain_random():
    domains = [(0.0, 1.0)] * 3

    def min_dist(X):
        d = X[:, None, :] - X[None, :, :]
        D2 = np.einsum("ijk,ijk->ij", d, d) + np.eye(len(X)) * 1e9
        return np.sqrt(D2.min())

    for seed in range(20):
        plain = lhc_design(30, domains, seed=seed, maximin_iters=0)
        improved = lhc_design(30, domains, seed=seed)
        assert min_dist(improved) >= min_dist(plain)


def test_lhc_rejects_degenerate_domain():
    with pytest.raises(ValidationError):
        lhc_design(10, [(0.0, 0.0)], seed=1)
    with pytest.raises(ValidationError):
        lhc_design(1, [(0.0, 1.0)], seed=1)


def test_lhc_train_validation_split_sizes():
    domains = list(HEAT_DOMAINS.values())
    X = lhc_design(100, domains, seed=5)
    assert X.shape == (100, 3)
    train, valid = X[:80], X[80:]
    assert train.shape[0] == 80 and valid.shape[0] == 20


# ---------------------------------------------------------------------------
# Ensemble emission


def test_ensemble_csv_shape():
    domains = list(HEAT_DOMAINS.values())
    X = lhc_design(10, domains, seed=2)
    F = run_ensemble(X, lambda row: row.sum())
    buf = io.StringIO()
    write_ensemble_csv(buf, X, F, list(HEAT_DOMAINS), "demand_kwh")
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "hdd,efficiency,transmission,demand_kwh"
    assert len(lines) == 11
    parts = lines[1].split(",")
    assert float(parts[3]) == pytest.approx(sum(float(v) for v in parts[:3]))
