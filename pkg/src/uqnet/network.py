"""Moment propagation over feed-forward graphs of probabilistic nodes.

Three layers live here:

* closed-form Gaussian integrals of squared exponential kernels against a
  multivariate normal input law (the building blocks of linked emulation);
* marginalization of a regression DLM whose regressor is itself a forecast
  (the multiregression coupling of chained time-series models);
* a node graph that sweeps these pieces in topological order to produce the
  composite predictive moments of a downstream quantity of interest.

Throughout, a parent belief is summarized by its first two moments and
treated as exactly Gaussian; independence between simulator-driven nodes and
price-chain nodes is encoded as zero covariance blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .dlm import Dlm, state_prior
from .errors import (
    BindingError,
    CapabilityError,
    NumericalError,
    ValidationError,
)
from .gp import GpEmulator, KernelSpec, TrendBasis
from .moments import GaussianMoments

INTERCEPT = "const"

GRAPH_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Gaussian integrals of squared exponential kernels


def _check_law(kernel: KernelSpec, law: GaussianMoments) -> tuple[np.ndarray, np.ndarray]:
    if law.dim != kernel.dim:
        raise ValidationError(
            "law dimension does not match kernel", law_dim=law.dim, kernel_dim=kernel.dim
        )
    eig_min = float(np.linalg.eigvalsh(law.cov).min())
    if eig_min < -1e-10 * max(1.0, float(np.trace(law.cov))):
        raise NumericalError("input covariance not positive semidefinite", eig_min=eig_min)
    return law.mean, law.cov


def _xi_vector(kernel: KernelSpec, points: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """E[r(X, x_i)] for each row x_i, X ~ N(mean, cov).

    With Lam = diag(1/delta^2) the integral is
    |I + 2*cov*Lam|^{-1/2} exp{-(mean-x_i)' (I + 2*cov*Lam)^{-1} Lam (mean-x_i)}.
    """
    lam = 1.0 / kernel.lengthscales**2
    K = np.eye(kernel.dim) + 2.0 * lam[:, None] * cov  # I + 2*Lam*cov
    det = np.linalg.det(K)
    M = np.linalg.solve(K, np.diag(lam))  # (2*cov + Lam^{-1})^{-1}
    M = 0.5 * (M + M.T)
    diff = mean[None, :] - np.atleast_2d(points)
    quad = np.einsum("ik,kl,il->i", diff, M, diff)
    return det**-0.5 * np.exp(-quad)


def _zeta_matrix(kernel: KernelSpec, points: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """E[r(X, x_i) r(X, x_j)] for all pairs of rows.

    The product of two squared exponential factors recombines into a single
    Gaussian factor centred at the pair midpoint with doubled precision, times
    a distance penalty exp{-1/2 (x_i-x_j)' Lam (x_i-x_j)}.
    """
    pts = np.atleast_2d(points)
    lam = 1.0 / kernel.lengthscales**2
    d = pts[:, None, :] - pts[None, :, :]
    pair_pen = np.exp(-0.5 * np.einsum("ijk,k,ijk->ij", d, lam, d))
    K = np.eye(kernel.dim) + 4.0 * lam[:, None] * cov  # I + 2*(2 Lam)*cov
    det = np.linalg.det(K)
    M = np.linalg.solve(K, 2.0 * np.diag(lam))  # (2*cov + (2 Lam)^{-1})^{-1}
    M = 0.5 * (M + M.T)
    mid = 0.5 * (pts[:, None, :] + pts[None, :, :])
    diff = mean[None, None, :] - mid
    quad = np.einsum("ijk,kl,ijl->ij", diff, M, diff)
    return pair_pen * det**-0.5 * np.exp(-quad)


def _psi_matrix(kernel: KernelSpec, points: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """E[X r(X, x_i)] stacked as rows, shape (n_points, dim).

    The tilted law N(mean, cov) * r(., x_i) is an unnormalized Gaussian whose
    mean is mean - (I + 2*cov*Lam)^{-1} 2*cov*Lam (mean - x_i); the integral
    is that mean times xi_i.
    """
    pts = np.atleast_2d(points)
    lam = 1.0 / kernel.lengthscales**2
    K = np.eye(kernel.dim) + 2.0 * cov * lam[None, :]
    T = np.linalg.solve(K, 2.0 * cov * lam[None, :])
    diff = mean[None, :] - pts
    tilted_mean = mean[None, :] - diff @ T.T
    xi = _xi_vector(kernel, pts, mean, cov)
    return xi[:, None] * tilted_mean


def gauss_kernel_mean(kernel: KernelSpec, x_i: Sequence[float], law: GaussianMoments) -> float:
    """Expected correlation E[r(X, x_i)] under X ~ N(law)."""
    mean, cov = _check_law(kernel, law)
    return float(_xi_vector(kernel, np.atleast_2d(np.asarray(x_i, dtype=float)), mean, cov)[0])


def gauss_kernel_second(
    kernel: KernelSpec, x_i: Sequence[float], x_j: Sequence[float], law: GaussianMoments
) -> float:
    """Second kernel moment E[r(X, x_i) r(X, x_j)]."""
    mean, cov = _check_law(kernel, law)
    pts = np.vstack([np.asarray(x_i, dtype=float), np.asarray(x_j, dtype=float)])
    return float(_zeta_matrix(kernel, pts, mean, cov)[0, 1])


def gauss_kernel_linear(
    kernel: KernelSpec, x_i: Sequence[float], law: GaussianMoments
) -> np.ndarray:
    """First linear kernel moment E[X r(X, x_i)], a vector."""
    mean, cov = _check_law(kernel, law)
    return _psi_matrix(kernel, np.atleast_2d(np.asarray(x_i, dtype=float)), mean, cov)[0]


# ---------------------------------------------------------------------------
# Linked GP moments


def linked_gp_moments(
    em: GpEmulator,
    parent_law: GaussianMoments,
    stochastic_dims: Sequence[int],
    exog_values: Sequence[float],
) -> GaussianMoments:
    """Two-moment normal approximation of a GP whose inputs are Gaussian.

    ``parent_law`` covers the input coordinates listed in ``stochastic_dims``
    (in that order); the remaining coordinates are fixed at ``exog_values``
    and handled as zero-variance Gaussians, so a degenerate law collapses to
    the plain emulator prediction exactly.
    """
    if em.trend.kind != TrendBasis.CONSTANT_LINEAR:
        raise CapabilityError(
            "linked moments require the constant+linear trend", trend=em.trend.kind
        )
    p = em.design.p
    stochastic_dims = list(stochastic_dims)
    if len(stochastic_dims) != parent_law.dim:
        raise ValidationError(
            "parent law does not cover the stochastic inputs",
            law_dim=parent_law.dim,
            n_stochastic=len(stochastic_dims),
        )
    if sorted(set(stochastic_dims)) != sorted(stochastic_dims):
        raise ValidationError("duplicate stochastic input coordinate")
    exog_dims = [d for d in range(p) if d not in stochastic_dims]
    if len(exog_values) != len(exog_dims):
        raise ValidationError(
            "exogenous values do not fill the remaining inputs",
            expected=len(exog_dims),
            got=len(exog_values),
        )

    eig_min = float(np.linalg.eigvalsh(parent_law.cov).min())
    if eig_min < -1e-10 * max(1.0, float(np.trace(parent_law.cov))):
        raise NumericalError(
            "parent covariance not positive semidefinite", eig_min=eig_min
        )

    mean = np.empty(p)
    cov = np.zeros((p, p))
    mean[stochastic_dims] = parent_law.mean
    for d, v in zip(exog_dims, exog_values):
        mean[d] = float(v)
    cov[np.ix_(stochastic_dims, stochastic_dims)] = parent_law.cov

    # coordinates with exactly zero variance are point masses; conditioning on
    # them is exact, so fold them out of the integral before assembly
    active = [d for d in range(p) if cov[d, d] > 0.0]
    if not active:
        return em.predict(mean)

    # all moment algebra happens in standardized coordinates
    lo = em.design.domains[:, 0]
    width = em.design.domains[:, 1] - em.design.domains[:, 0]
    mu = (mean - lo) / width
    Sigma = cov / np.outer(width, width)

    Xs = em.design.X_std
    kernel = em.kernel
    xi = _xi_vector(kernel, Xs, mu, Sigma)
    zeta = _zeta_matrix(kernel, Xs, mu, Sigma)
    psi = _psi_matrix(kernel, Xs, mu, Sigma)  # (n, p)

    u = em.resid_weights
    beta0 = float(em.beta_hat[0])
    beta1 = em.beta_hat[1:]

    mean_trend = beta0 + float(beta1 @ mu)
    mean_resid = float(xi @ u)
    mu_link = mean_trend + mean_resid

    # V[E[Y|X]] from exact central second moments; rounding in the kernel
    # moment matrices is amplified by |u| outer products, so negative values
    # up to that noise scale are clipped rather than raised
    var_trend = float(beta1 @ Sigma @ beta1)
    cov_trend_resid = float(u @ ((psi - mu[None, :] * xi[:, None]) @ beta1))
    var_resid = float(u @ (zeta - np.outer(xi, xi)) @ u)
    var_of_mean = var_trend + 2.0 * cov_trend_resid + var_resid
    noise_scale = float(np.abs(u) @ xi) ** 2 + var_trend + em.sigma2_hat
    if var_of_mean < -1e-12 * noise_scale:
        raise NumericalError("variance of conditional mean negative", value=var_of_mean)
    var_of_mean = max(var_of_mean, 0.0)

    # E[V[Y|X]] via expected quadratic forms
    n = em.design.n
    q = em.beta_hat.size
    A_inv_zeta = em.correlation_solve(zeta)
    exp_quad_r = float(np.trace(A_inv_zeta))

    # E[h h'] and E[h r'] for the trend-uncertainty term
    M_hh = np.empty((q, q))
    M_hh[0, 0] = 1.0
    M_hh[0, 1:] = mu
    M_hh[1:, 0] = mu
    M_hh[1:, 1:] = Sigma + np.outer(mu, mu)
    M_hr = np.empty((q, n))
    M_hr[0, :] = xi
    M_hr[1:, :] = psi.T

    B = em.correlation_solve(em.basis_matrix)  # (n, q)
    cross = M_hr @ B  # (q, q)
    E_gg = M_hh - cross - cross.T + B.T @ zeta @ B
    exp_quad_g = float(np.trace(em.trend_gram_solve(E_gg)))
    mean_cond_var = em.sigma2_hat * (1.0 + kernel.nugget - exp_quad_r + exp_quad_g)
    if mean_cond_var < -1e-9 * em.sigma2_hat * (1.0 + abs(exp_quad_r) + abs(exp_quad_g)):
        raise NumericalError(
            "expected conditional variance negative", value=mean_cond_var
        )
    mean_cond_var = max(mean_cond_var, 0.0)

    return GaussianMoments.scalar(mu_link, mean_cond_var + var_of_mean)


# ---------------------------------------------------------------------------
# Multiregression marginalization


def mdm_marginal(
    parent_forecast: GaussianMoments,
    prior_mean: np.ndarray,
    prior_cov: np.ndarray,
    obs_var: float,
    regressors: Sequence[float],
    parent_slot: int,
) -> tuple[GaussianMoments, float]:
    """Marginal forecast moments of a DLM whose regressor is itself random.

    ``regressors`` is the full regression vector with the parent slot value
    ignored (it is replaced by the parent forecast mean). Returns the child
    marginal belief and the cross-covariance between parent and child, which
    equals the parent-slot element of the prior state mean times the parent
    forecast variance.
    """
    a = np.asarray(prior_mean, dtype=float).ravel()
    R = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    mu_t = np.asarray(regressors, dtype=float).ravel()
    if mu_t.size != a.size or R.shape != (a.size, a.size):
        raise ValidationError(
            "regression vector and state moments disagree",
            n_regressors=mu_t.size,
            n_state=a.size,
        )
    if not 0 <= parent_slot < a.size:
        raise BindingError(
            "parent slot outside regression vector", slot=parent_slot, size=a.size
        )
    f_parent = parent_forecast.scalar_mean
    q_parent = parent_forecast.scalar_var
    mu_t = mu_t.copy()
    mu_t[parent_slot] = f_parent
    omega = np.zeros_like(R)
    omega[parent_slot, parent_slot] = q_parent

    mean = float(mu_t @ a)
    var = float(np.trace(R @ (np.outer(mu_t, mu_t) + omega)) + a @ omega @ a + obs_var)
    cross = float(a[parent_slot] * q_parent)
    return GaussianMoments.scalar(mean, var), cross


# ---------------------------------------------------------------------------
# Node graph


@dataclass(frozen=True)
class ExogenousNode:
    """A named scalar or per-step series supplied at propagation time."""

    name: str


@dataclass(frozen=True)
class DlmNode:
    """A fitted DLM plus one binding per regression-vector slot.

    Bindings are ``INTERCEPT`` or the name of another node (exogenous or
    probabilistic)."""

    name: str
    model: Dlm
    regressors: tuple[str, ...]
    model_id: str | None = None


@dataclass(frozen=True)
class GpNode:
    """A fitted emulator plus one binding per input coordinate."""

    name: str
    emulator: GpEmulator
    inputs: tuple[str, ...]
    model_id: str | None = None


Node = ExogenousNode | DlmNode | GpNode


class NodeGraph:
    """Validated feed-forward graph with a designated target node."""

    def __init__(self, nodes: Sequence[Node], target: str):
        self.nodes: dict[str, Node] = {}
        for node in nodes:
            if node.name in self.nodes:
                raise ValidationError("duplicate node name", name=node.name)
            if node.name == INTERCEPT:
                raise ValidationError("node name collides with intercept sentinel")
            self.nodes[node.name] = node
        if target not in self.nodes:
            raise BindingError("target node not defined", target=target)
        self.target = target
        self.order = self._toposort()

    @staticmethod
    def _bindings(node: Node) -> tuple[str, ...]:
        if isinstance(node, DlmNode):
            return node.regressors
        if isinstance(node, GpNode):
            return node.inputs
        return ()

    def _toposort(self) -> list[str]:
        deps: dict[str, set[str]] = {}
        for name, node in self.nodes.items():
            parents = set()
            for ref in self._bindings(node):
                if ref == INTERCEPT:
                    if isinstance(node, GpNode):
                        raise BindingError(
                            "emulator inputs cannot bind the intercept sentinel",
                            node=name,
                        )
                    continue
                if ref not in self.nodes:
                    raise BindingError(
                        "binding references unknown node", node=name, ref=ref
                    )
                parents.add(ref)
            if isinstance(node, DlmNode) and len(node.regressors) != node.model.spec.n_state:
                raise BindingError(
                    "one binding per regression slot required",
                    node=name,
                    bindings=len(node.regressors),
                    n_state=node.model.spec.n_state,
                )
            if isinstance(node, GpNode) and len(node.inputs) != node.emulator.design.p:
                raise BindingError(
                    "one binding per emulator input required",
                    node=name,
                    bindings=len(node.inputs),
                    n_inputs=node.emulator.design.p,
                )
            deps[name] = parents
        order: list[str] = []
        ready = sorted(n for n, ps in deps.items() if not ps)
        pending = {n: set(ps) for n, ps in deps.items() if ps}
        while ready:
            name = ready.pop(0)
            order.append(name)
            released = [c for c, ps in pending.items() if name in ps]
            for c in released:
                pending[c].discard(name)
                if not pending[c]:
                    ready.append(c)
                    del pending[c]
            ready.sort()
        if pending:
            raise ValidationError("graph contains a cycle", nodes=sorted(pending))
        return order

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []
        for name in self.order:
            node = self.nodes[name]
            if isinstance(node, ExogenousNode):
                nodes.append({"name": name, "type": "exogenous"})
            elif isinstance(node, DlmNode):
                nodes.append(
                    {
                        "name": name,
                        "type": "dlm",
                        "model": node.model_id or name,
                        "regressors": list(node.regressors),
                    }
                )
            else:
                nodes.append(
                    {
                        "name": name,
                        "type": "gp",
                        "model": node.model_id or name,
                        "inputs": list(node.inputs),
                    }
                )
        return {"version": GRAPH_SCHEMA_VERSION, "target": self.target, "nodes": nodes}

    @classmethod
    def from_dict(cls, doc: dict, resolve: Callable[[str], Dlm | GpEmulator]) -> "NodeGraph":
        if doc.get("version") != GRAPH_SCHEMA_VERSION:
            raise ValidationError(
                "unsupported graph document version", version=doc.get("version")
            )
        nodes: list[Node] = []
        for spec in doc.get("nodes", []):
            kind = spec.get("type")
            name = spec.get("name")
            if not name:
                raise ValidationError("node entry missing name", entry=spec)
            if kind == "exogenous":
                nodes.append(ExogenousNode(name))
            elif kind == "dlm":
                model = resolve(spec["model"])
                if not isinstance(model, Dlm):
                    raise BindingError(
                        "model reference is not a dlm", node=name, model=spec["model"]
                    )
                nodes.append(
                    DlmNode(name, model, tuple(spec["regressors"]), model_id=spec["model"])
                )
            elif kind == "gp":
                model = resolve(spec["model"])
                if not isinstance(model, GpEmulator):
                    raise BindingError(
                        "model reference is not a gp", node=name, model=spec["model"]
                    )
                nodes.append(
                    GpNode(name, model, tuple(spec["inputs"]), model_id=spec["model"])
                )
            else:
                raise ValidationError("unknown node type", node=name, type=kind)
        return cls(nodes, doc.get("target", ""))


# ---------------------------------------------------------------------------
# Propagation


@dataclass(frozen=True)
class PropagationResult:
    """Per-node beliefs plus the parent law used at the target node."""

    moments: dict[str, GaussianMoments]
    parent_order: tuple[str, ...]
    parent_cov: np.ndarray
    cross_cov: dict[tuple[str, str], float]


def _exog_value(exog: Mapping[str, object], name: str, step: int) -> float:
    if name not in exog:
        raise ValidationError("missing exogenous data", series=name)
    value = exog[name]
    if np.isscalar(value):
        return float(value)  # type: ignore[arg-type]
    seq = np.asarray(value, dtype=float).ravel()
    if step > seq.size:
        raise ValidationError(
            "horizon exceeds exogenous data", series=name, step=step, length=int(seq.size)
        )
    return float(seq[step - 1])


def propagate(
    graph: NodeGraph,
    exog: Mapping[str, object],
    step: int = 1,
    *,
    shock_factors: Mapping[str, float] | None = None,
    consumption_shocks: Mapping[str, float] | None = None,
    zero_parent_variance: bool = False,
) -> PropagationResult:
    """Sweep the graph and return every node's `step`-ahead belief.

    ``exog`` maps exogenous node names to scalars or per-step sequences
    (index 0 is one step ahead). ``shock_factors`` multiplies a node's output
    belief (mean by the factor, variance by its square) before downstream
    consumption; ``consumption_shocks`` applies the same scaling only where
    the node is consumed, leaving its reported belief untouched.
    ``zero_parent_variance`` collapses every parent law to a point mass,
    making composite and plain emulator predictions coincide.
    """
    if step < 1:
        raise ValidationError("step must be >= 1", step=step)
    shock_factors = dict(shock_factors or {})
    consumption_shocks = dict(consumption_shocks or {})
    for name in (*shock_factors, *consumption_shocks):
        if name not in graph.nodes:
            raise ValidationError("shock references unknown node", node=name)

    moments: dict[str, GaussianMoments] = {}
    cross: dict[tuple[str, str], float] = {}
    target_parent_order: tuple[str, ...] = ()
    target_parent_cov = np.zeros((0, 0))

    def consumed(ref: str) -> GaussianMoments:
        belief = moments[ref]
        gamma = consumption_shocks.get(ref)
        if gamma is None:
            return belief
        return GaussianMoments.scalar(
            gamma * belief.scalar_mean, gamma**2 * belief.scalar_var
        )

    def pair_cov(a: str, b: str) -> float:
        base = cross.get((a, b), cross.get((b, a), 0.0))
        return base * consumption_shocks.get(a, 1.0) * consumption_shocks.get(b, 1.0)

    for name in graph.order:
        node = graph.nodes[name]
        if isinstance(node, ExogenousNode):
            moments[name] = GaussianMoments.scalar(_exog_value(exog, name, step), 0.0)
            continue

        if isinstance(node, DlmNode):
            a, R = state_prior(node.model.spec, node.model.state, step)
            values = np.zeros(len(node.regressors))
            stochastic: list[tuple[int, str]] = []
            for slot, ref in enumerate(node.regressors):
                if ref == INTERCEPT:
                    values[slot] = 1.0
                    continue
                belief = consumed(ref)
                values[slot] = belief.scalar_mean
                if belief.scalar_var > 0.0 and not zero_parent_variance:
                    stochastic.append((slot, ref))
            if len(stochastic) > 1:
                raise CapabilityError(
                    "at most one stochastic regressor per dlm node is supported",
                    node=name,
                    stochastic=[ref for _, ref in stochastic],
                )
            if stochastic:
                slot, parent = stochastic[0]
                belief, c = mdm_marginal(
                    consumed(parent), a, R, node.model.spec.V, values, slot
                )
                cross[(parent, name)] = c / consumption_shocks.get(parent, 1.0)
            else:
                f = float(values @ a)
                Q = float(values @ R @ values + node.model.spec.V)
                belief = GaussianMoments.scalar(f, Q)
            gamma = shock_factors.get(name)
            if gamma is not None:
                belief = GaussianMoments.scalar(
                    gamma * belief.scalar_mean, gamma**2 * belief.scalar_var
                )
                for key in list(cross):
                    if name in key:
                        cross[key] *= gamma
            moments[name] = belief
            continue

        # GP node: split bound inputs into stochastic parents and point values
        stochastic_dims: list[int] = []
        parent_names: list[str] = []
        exog_vals: list[float] = []
        for dim, ref in enumerate(node.inputs):
            belief = consumed(ref)
            if belief.scalar_var > 0.0 and not zero_parent_variance:
                stochastic_dims.append(dim)
                parent_names.append(ref)
            else:
                exog_vals.append(belief.scalar_mean)
        if not stochastic_dims:
            point = [consumed(ref).scalar_mean for ref in node.inputs]
            belief = node.emulator.predict(point)
        else:
            k = len(parent_names)
            mu = np.array([consumed(ref).scalar_mean for ref in parent_names])
            Sigma = np.zeros((k, k))
            for i, pi in enumerate(parent_names):
                Sigma[i, i] = consumed(pi).scalar_var
                for j in range(i + 1, k):
                    Sigma[i, j] = Sigma[j, i] = pair_cov(pi, parent_names[j])
            law = GaussianMoments(mu, Sigma)
            belief = linked_gp_moments(node.emulator, law, stochastic_dims, exog_vals)
            if name == graph.target:
                target_parent_order = tuple(parent_names)
                target_parent_cov = Sigma
        gamma = shock_factors.get(name)
        if gamma is not None:
            belief = GaussianMoments.scalar(
                gamma * belief.scalar_mean, gamma**2 * belief.scalar_var
            )
        moments[name] = belief

    return PropagationResult(
        moments=moments,
        parent_order=target_parent_order,
        parent_cov=target_parent_cov,
        cross_cov=cross,
    )
