import numpy as np
import pytest

from uqnet.dlm import Dlm, DlmSpec, FilterState
from uqnet.errors import (
    BindingError,
    CapabilityError,
    NumericalError,
    ValidationError,
)
from uqnet.gp import Design, GpEmulator, HyperparamSearchConfig, KernelSpec, TrendBasis, fit_gp
from uqnet.moments import GaussianMoments
from uqnet.network import (
    INTERCEPT,
    DlmNode,
    ExogenousNode,
    GpNode,
    NodeGraph,
    gauss_kernel_linear,
    gauss_kernel_mean,
    gauss_kernel_second,
    linked_gp_moments,
    mdm_marginal,
    propagate,
)

from oracles import gauss_hermite_expect, mc_linked_moments


def se_factor(kernel, x_i):
    def fun(pts):
        z = (pts - np.asarray(x_i)[None, :]) / kernel.lengthscales
        return np.exp(-np.sum(z**2, axis=1))

    return fun


def make_dlm(n_state, V=0.3, w=0.02, m=None, C=None, t=5) -> Dlm:
    spec = DlmSpec.random_walk(n_state, V, w)
    state = FilterState(
        t=t,
        m=np.zeros(n_state) if m is None else np.asarray(m, dtype=float),
        C=0.1 * np.eye(n_state) if C is None else np.asarray(C, dtype=float),
    )
    return Dlm(
        spec=spec,
        regressor_names=tuple(f"r{i}" for i in range(n_state)),
        scale_factors=(1.0,) * n_state,
        state=state,
    )


def smooth_emulator(seed=0, n=25, p=2):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, p))
    F = np.sin(3 * X[:, 0]) + (X[:, 1] ** 2 if p > 1 else 0.0)
    return fit_gp(
        Design(X, F, np.tile([0.0, 1.0], (p, 1))),
        search=HyperparamSearchConfig(n_restarts=4, seed=seed),
    )


# ---------------------------------------------------------------------------
# Gaussian kernel integrals


def test_kernel_mean_collapses_to_correlation():
    k = KernelSpec(np.array([0.8, 1.1]))
    law = GaussianMoments(np.array([0.4, -0.2]), np.zeros((2, 2)))
    from uqnet.gp import eval_correlation

    got = gauss_kernel_mean(k, [1.0, 0.5], law)
    assert got == pytest.approx(eval_correlation(k, [0.4, -0.2], [1.0, 0.5]), rel=1e-12)


def test_kernel_mean_known_value():
    k = KernelSpec(np.array([1.0]))
    law = GaussianMoments(np.array([0.7]), np.array([[0.5]]))
    assert gauss_kernel_mean(k, [0.7], law) == pytest.approx(1 / np.sqrt(2), rel=1e-12)


def test_kernel_integrals_match_quadrature():
    rng = np.random.default_rng(15)
    for _ in range(12):
        d = int(rng.integers(1, 4))
        k = KernelSpec(rng.uniform(0.4, 2.0, d))
        mean = rng.normal(0, 0.5, d)
        A = rng.normal(size=(d, d))
        cov = A @ A.T / d * 0.2 + 0.01 * np.eye(d)
        law = GaussianMoments(mean, cov)
        x_i = mean + rng.normal(0, 0.5, d)
        x_j = mean + rng.normal(0, 0.5, d)

        xi = gauss_kernel_mean(k, x_i, law)
        xi_q = gauss_hermite_expect(se_factor(k, x_i), mean, cov, n_nodes=90)
        assert xi == pytest.approx(xi_q, rel=1e-8, abs=1e-12)

        zeta = gauss_kernel_second(k, x_i, x_j, law)
        f_i, f_j = se_factor(k, x_i), se_factor(k, x_j)
        zeta_q = gauss_hermite_expect(lambda P: f_i(P) * f_j(P), mean, cov, n_nodes=90)
        assert zeta == pytest.approx(zeta_q, rel=1e-8, abs=1e-12)

        psi = gauss_kernel_linear(k, x_i, law)
        for coord in range(d):
            psi_q = gauss_hermite_expect(
                lambda P, c=coord: P[:, c] * f_i(P), mean, cov, n_nodes=40
            )
            assert psi[coord] == pytest.approx(psi_q, rel=1e-8, abs=1e-12)


def test_kernel_second_collapses_to_product():
    k = KernelSpec(np.array([0.9]))
    law = GaussianMoments(np.array([0.3]), np.zeros((1, 1)))
    zeta = gauss_kernel_second(k, [0.1], [0.8], law)
    xi_i = gauss_kernel_mean(k, [0.1], law)
    xi_j = gauss_kernel_mean(k, [0.8], law)
    assert zeta == pytest.approx(xi_i * xi_j, rel=1e-12)


def test_kernel_linear_symmetric_case():
    k = KernelSpec(np.array([1.3, 0.7]))
    mu = np.array([0.5, -0.4])
    law = GaussianMoments(mu, np.diag([0.2, 0.05]))
    psi = gauss_kernel_linear(k, mu, law)
    xi = gauss_kernel_mean(k, mu, law)
    np.testing.assert_allclose(psi, mu * xi, rtol=1e-12)


def test_kernel_integrals_reject_non_psd():
    k = KernelSpec(np.array([1.0, 1.0]))
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NumericalError):
        gauss_kernel_mean(k, [0.0, 0.0], GaussianMoments(np.zeros(2), bad))


def test_kernel_integrals_dimension_check():
    k = KernelSpec(np.array([1.0]))
    with pytest.raises(ValidationError):
        gauss_kernel_mean(k, [0.0], GaussianMoments(np.zeros(2), np.eye(2)))


# ---------------------------------------------------------------------------
# MDM marginalization


def test_mdm_zero_parent_variance_collapses():
    a = np.array([0.5, 1.2, -0.3])
    R = np.diag([0.2, 0.1, 0.3])
    regressors = np.array([1.0, 0.0, 2.0])
    parent = GaussianMoments.scalar(1.5, 0.0)
    belief, c = mdm_marginal(parent, a, R, 0.4, regressors, 1)
    mu_t = np.array([1.0, 1.5, 2.0])
    assert c == 0.0
    assert belief.scalar_mean == pytest.approx(mu_t @ a)
    assert belief.scalar_var == pytest.approx(mu_t @ R @ mu_t + 0.4)


def test_mdm_matches_monte_carlo():
    rng = np.random.default_rng(123)
    N = 300_000
    for _ in range(5):
        p = int(rng.integers(2, 6))
        a = rng.normal(size=p)
        Rh = rng.normal(size=(p, p))
        R = Rh @ Rh.T / p
        V = float(rng.uniform(0.1, 0.6))
        slot = int(rng.integers(0, p))
        regressors = rng.normal(size=p)
        f2, Q2 = float(rng.normal()), float(rng.uniform(0.1, 0.8))
        belief, c = mdm_marginal(
            GaussianMoments.scalar(f2, Q2), a, R, V, regressors, slot
        )
        y2 = rng.normal(f2, np.sqrt(Q2), N)
        theta = rng.multivariate_normal(a, R, N)
        Fm = np.tile(regressors, (N, 1))
        Fm[:, slot] = y2
        y3 = np.einsum("nk,nk->n", Fm, theta) + rng.normal(0, np.sqrt(V), N)
        se_mean = y3.std() / np.sqrt(N)
        assert abs(belief.scalar_mean - y3.mean()) < 4 * se_mean
        w = (y3 - y3.mean()) ** 2
        se_var = w.std() / np.sqrt(N)
        assert abs(belief.scalar_var - y3.var()) < 4 * se_var
        prod = (y2 - y2.mean()) * (y3 - y3.mean())
        se_cross = prod.std() / np.sqrt(N)
        assert abs(c - prod.mean()) < 4 * se_cross


def test_mdm_correlation_within_bounds():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = int(rng.integers(2, 5))
        a = rng.normal(size=p, scale=2.0)
        Rh = rng.normal(size=(p, p))
        R = Rh @ Rh.T / p
        Q2 = float(rng.uniform(0.01, 2.0))
        belief, c = mdm_marginal(
            GaussianMoments.scalar(rng.normal(), Q2),
            a,
            R,
            float(rng.uniform(0.05, 1.0)),
            rng.normal(size=p),
            int(rng.integers(0, p)),
        )
        corr = c / np.sqrt(Q2 * belief.scalar_var)
        assert -1.0 <= corr <= 1.0


def test_mdm_bad_slot_is_binding_error():
    with pytest.raises(BindingError):
        mdm_marginal(
            GaussianMoments.scalar(0.0, 1.0),
            np.zeros(3),
            np.eye(3),
            0.1,
            np.zeros(3),
            7,
        )


# ---------------------------------------------------------------------------
# Linked GP moments


def test_linked_degenerate_law_equals_predict():
    em = smooth_emulator(seed=1)
    law = GaussianMoments(np.array([0.4]), np.array([[0.0]]))
    linked = linked_gp_moments(em, law, [0], [0.6])
    plain = em.predict([0.4, 0.6])
    assert abs(linked.scalar_mean - plain.scalar_mean) <= 1e-10 * (1 + abs(plain.scalar_mean))
    assert abs(linked.scalar_var - plain.scalar_var) <= 1e-10 * (1 + plain.scalar_var)


def test_linked_matches_monte_carlo():
    em = smooth_emulator(seed=2)
    mean = np.array([0.5, 0.45])
    cov = np.array([[0.015, 0.004], [0.004, 0.02]])
    linked = linked_gp_moments(em, GaussianMoments(mean, cov), [0, 1], [])
    mu_mc, var_mc, se_mu, se_var = mc_linked_moments(
        em, mean, cov, [0, 1], [], n_samples=200_000, seed=99
    )
    assert abs(linked.scalar_mean - mu_mc) < 4 * se_mu
    assert abs(linked.scalar_var - var_mc) < 4 * se_var


def test_linked_exogenous_dims_ride_along():
    em = smooth_emulator(seed=3)
    law = GaussianMoments(np.array([0.3]), np.array([[0.01]]))
    linked = linked_gp_moments(em, law, [1], [0.7])
    mu_mc, var_mc, se_mu, se_var = mc_linked_moments(
        em, [0.3], [[0.01]], [1], [0.7], n_samples=200_000, seed=17
    )
    assert abs(linked.scalar_mean - mu_mc) < 4 * se_mu
    assert abs(linked.scalar_var - var_mc) < 4 * se_var


def test_linked_variance_exceeds_expected_conditional_variance():
    em = smooth_emulator(seed=4)
    law = GaussianMoments(np.array([0.5, 0.5]), 0.02 * np.eye(2))
    linked = linked_gp_moments(em, law, [0, 1], [])
    mu_mc, var_mc, _, _ = mc_linked_moments(
        em, law.mean, law.cov, [0, 1], [], n_samples=50_000, seed=1
    )
    assert linked.scalar_var >= 0.0
    # E[V[.]] alone is below the total
    assert linked.scalar_var >= 0.9 * (var_mc - mu_mc * 0)  # sanity scale
    assert linked.scalar_var > 0


def test_linked_monotone_in_parent_uncertainty():
    em = smooth_emulator(seed=6)
    base = np.array([[0.02, 0.003], [0.003, 0.015]])
    variances = []
    for alpha in (0.0, 0.5, 1.0, 2.0):
        law = GaussianMoments(np.array([0.5, 0.5]), alpha * base)
        variances.append(
            linked_gp_moments(em, law, [0, 1], []).scalar_var
        )
    assert all(b >= a - 1e-12 for a, b in zip(variances, variances[1:]))


def test_linked_requires_constant_linear_trend():
    X = np.linspace(0, 1, 8).reshape(-1, 1)
    custom = TrendBasis("custom", functions=[lambda x: 1.0, lambda x: float(x[0] ** 2)])
    em = GpEmulator.build(
        Design(X, X[:, 0] ** 2, np.array([[0.0, 1.0]])),
        custom,
        KernelSpec(np.array([0.5]), 1e-6),
    )
    with pytest.raises(CapabilityError):
        linked_gp_moments(em, GaussianMoments(np.array([0.5]), np.array([[0.01]])), [0], [])


def test_linked_input_bookkeeping_errors():
    em = smooth_emulator(seed=7)
    law = GaussianMoments(np.array([0.5]), np.array([[0.01]]))
    with pytest.raises(ValidationError):
        linked_gp_moments(em, law, [0, 1], [])
    with pytest.raises(ValidationError):
        linked_gp_moments(em, law, [0], [0.1, 0.2])


# ---------------------------------------------------------------------------
# Graph construction


def test_graph_validation_unknown_binding():
    em = smooth_emulator(seed=8)
    with pytest.raises(BindingError):
        NodeGraph(
            [ExogenousNode("x"), GpNode("y", em, ("x", "ghost"))], target="y"
        )


def test_graph_validation_cycle():
    d1 = make_dlm(2)
    d2 = make_dlm(2)
    with pytest.raises(ValidationError):
        NodeGraph(
            [
                DlmNode("a", d1, (INTERCEPT, "b")),
                DlmNode("b", d2, (INTERCEPT, "a")),
            ],
            target="a",
        )


def test_graph_validation_duplicate_and_target():
    with pytest.raises(ValidationError):
        NodeGraph([ExogenousNode("x"), ExogenousNode("x")], target="x")
    with pytest.raises(BindingError):
        NodeGraph([ExogenousNode("x")], target="nope")


def test_graph_validation_slot_counts():
    d1 = make_dlm(3)
    with pytest.raises(BindingError):
        NodeGraph(
            [ExogenousNode("x"), DlmNode("a", d1, (INTERCEPT, "x"))], target="a"
        )


def test_graph_serialization_round_trip():
    em = smooth_emulator(seed=9)
    d1 = make_dlm(2)
    graph = NodeGraph(
        [
            ExogenousNode("x"),
            DlmNode("price", d1, (INTERCEPT, "x"), model_id="m-dlm"),
            GpNode("out", em, ("price", "x"), model_id="m-gp"),
        ],
        target="out",
    )
    doc = graph.to_dict()
    models = {"m-dlm": d1, "m-gp": em}
    back = NodeGraph.from_dict(doc, models.__getitem__)
    assert back.order == graph.order
    assert back.target == "out"


# ---------------------------------------------------------------------------
# Propagation


def build_chain_graph(seed=0):
    """x -> price dlm -> cost gp, with one extra exogenous gp input."""
    rng = np.random.default_rng(seed)
    em = smooth_emulator(seed=seed, n=30)
    price = make_dlm(2, V=0.05, w=0.01, m=[0.2, 0.4], C=0.02 * np.eye(2))
    graph = NodeGraph(
        [
            ExogenousNode("x"),
            ExogenousNode("z"),
            DlmNode("price", price, (INTERCEPT, "x")),
            GpNode("cost", em, ("price", "z")),
        ],
        target="cost",
    )
    return graph


def test_propagate_zero_variance_mode_collapses_to_plain():
    graph = build_chain_graph(seed=12)
    exog = {"x": [0.5], "z": [0.6]}
    result = propagate(graph, exog, 1, zero_parent_variance=True)
    price_mean = result.moments["price"].scalar_mean
    plain = graph.nodes["cost"].emulator.predict([price_mean, 0.6])
    comp = result.moments["cost"]
    assert comp.scalar_mean == pytest.approx(plain.scalar_mean, abs=1e-10)
    assert comp.scalar_var == pytest.approx(plain.scalar_var, abs=1e-10)


def test_propagate_composite_variance_at_least_plain():
    graph = build_chain_graph(seed=13)
    exog = {"x": [0.5], "z": [0.6]}
    normal = propagate(graph, exog, 1)
    collapsed = propagate(graph, exog, 1, zero_parent_variance=True)
    assert normal.moments["cost"].scalar_var >= collapsed.moments["cost"].scalar_var
    assert (
        normal.moments["cost"].scalar_mean != collapsed.moments["cost"].scalar_mean
        or normal.moments["cost"].scalar_var >= collapsed.moments["cost"].scalar_var
    )


def test_propagate_horizon_exceeds_series():
    graph = build_chain_graph(seed=14)
    with pytest.raises(ValidationError) as err:
        propagate(graph, {"x": [0.5], "z": [0.6]}, 2)
    assert err.value.context["series"] in ("x", "z")


def test_propagate_missing_series_named():
    graph = build_chain_graph(seed=15)
    with pytest.raises(ValidationError) as err:
        propagate(graph, {"x": [0.5]}, 1)
    assert err.value.context["series"] == "z"


def test_propagate_output_shock_scales_moments():
    graph = build_chain_graph(seed=16)
    exog = {"x": [0.5], "z": [0.6]}
    base = propagate(graph, exog, 1)
    shocked = propagate(graph, exog, 1, shock_factors={"price": 1.25})
    b, s = base.moments["price"], shocked.moments["price"]
    assert s.scalar_mean == pytest.approx(1.25 * b.scalar_mean, rel=1e-12)
    assert s.scalar_var == pytest.approx(1.25**2 * b.scalar_var, rel=1e-12)


def test_propagate_consumption_shock_leaves_reported_belief():
    graph = build_chain_graph(seed=16)
    exog = {"x": [0.5], "z": [0.6]}
    base = propagate(graph, exog, 1)
    shocked = propagate(graph, exog, 1, consumption_shocks={"price": 1.25})
    assert shocked.moments["price"].scalar_mean == pytest.approx(
        base.moments["price"].scalar_mean
    )
    # downstream cost must match the output-shock run exactly
    out_shock = propagate(graph, exog, 1, shock_factors={"price": 1.25})
    assert shocked.moments["cost"].scalar_mean == pytest.approx(
        out_shock.moments["cost"].scalar_mean, rel=1e-12
    )
    assert shocked.moments["cost"].scalar_var == pytest.approx(
        out_shock.moments["cost"].scalar_var, rel=1e-12
    )


def test_propagate_end_to_end_matches_monte_carlo(case_models, case_graph_doc, case_resolver):
    from uqnet.network import NodeGraph as NG

    graph = NG.from_dict(case_graph_doc["graph"], case_resolver)
    exog_series = case_graph_doc["exog_series"]
    exog = {k: [v[-1]] for k, v in exog_series.items()}
    exog["hdd"] = [case_graph_doc["hdd_profile"][0]]
    exog.update(case_graph_doc["params"])
    result = propagate(graph, exog, 1)

    rng = np.random.default_rng(2024)
    n = 100_000
    order = result.parent_order
    mu = np.array([result.moments[p].scalar_mean for p in order])
    Sigma = result.parent_cov
    draws = rng.multivariate_normal(mu, Sigma, n)
    cost_em = case_models["models"]["op_cost"]
    pts = np.column_stack(
        [
            draws[:, order.index("heat_demand")],
            draws[:, order.index("gas_price")],
            draws[:, order.index("elec_price")],
            np.full(n, case_graph_doc["params"]["boiler_efficiency"]),
            np.full(n, case_graph_doc["params"]["heat_pump_cop"]),
        ]
    )
    m, v = cost_em.predict_many(pts)
    mc_mean = m.mean()
    mc_var = v.mean() + m.var()
    se_mean = m.std() / np.sqrt(n)
    w = v + (m - m.mean()) ** 2
    se_var = w.std() / np.sqrt(n)
    comp = result.moments["op_cost"]
    assert abs(comp.scalar_mean - mc_mean) < 5 * se_mean
    assert abs(comp.scalar_var - mc_var) < 5 * se_var
