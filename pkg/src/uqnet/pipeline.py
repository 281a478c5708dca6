"""Case-study assembly: quarterly data ingestion, scenario transforms, model
persistence, and the end-to-end composite forecast run.

The flow mirrors the planning question: fit price DLMs on quarterly factor
series, train emulators for the heating-demand and dispatch simulators on
space-filling designs, wire everything into a feed-forward graph, and emit
composite vs plain-emulator cost projections per scenario.
"""

from __future__ import annotations

import csv
import io
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import dlm as dlm_mod
from . import network, simulators
from .dlm import Dlm, DlmSpec, PrecisionPrior, filter_series
from .errors import (
    CorruptModelError,
    DuplicateModelError,
    ModelNotFoundError,
    ValidationError,
    VersionMismatchError,
)
from .gp import Design, GpEmulator, HyperparamSearchConfig, fit_gp
from .moments import GaussianMoments
from .network import INTERCEPT, DlmNode, ExogenousNode, GpNode, NodeGraph, propagate

GRAPH_DOC_VERSION = 1

_QUARTER_RE = re.compile(r"^(\d{4})-Q([1-4])$")

FACTOR_SCALE = 1e-5

INGEST_SCHEMAS: dict[str, dict] = {
    "gas-factors": {
        "columns": ("gas_price", "prod", "imports", "storage", "coal"),
        "scaled": ("prod", "imports", "storage"),
    },
    "elec-factors": {
        "columns": ("elec_price", "gas_price", "ets", "offshore_wind"),
        "scaled": (),
    },
}


# ---------------------------------------------------------------------------
# Quarter arithmetic


def parse_quarter(label: str) -> tuple[int, int]:
    m = _QUARTER_RE.match(label.strip())
    if not m:
        raise ValidationError("bad quarter label, expected YYYY-Qn", label=label)
    return int(m.group(1)), int(m.group(2))


def format_quarter(year: int, q: int) -> str:
    return f"{year}-Q{q}"


def add_quarters(label: str, k: int) -> str:
    year, q = parse_quarter(label)
    idx = year * 4 + (q - 1) + k
    return format_quarter(idx // 4, idx % 4 + 1)


def quarter_range(start: str, count: int) -> list[str]:
    return [add_quarters(start, i) for i in range(count)]


# ---------------------------------------------------------------------------
# Quarterly series


@dataclass(frozen=True)
class QuarterSeries:
    """Aligned quarterly records: consecutive labels plus named columns."""

    quarters: tuple[str, ...]
    columns: dict[str, np.ndarray]
    scale_factors: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.quarters:
            raise ValidationError("series needs at least one quarter")
        for prev, cur in zip(self.quarters, self.quarters[1:]):
            if add_quarters(prev, 1) != cur:
                raise ValidationError(
                    "quarter labels must be consecutive", after=prev, got=cur
                )
        for name, vals in self.columns.items():
            vals = np.asarray(vals, dtype=float)
            if vals.shape != (len(self.quarters),):
                raise ValidationError(
                    "column length mismatch", column=name, length=int(vals.size)
                )
            self.columns[name] = vals

    def __len__(self) -> int:
        return len(self.quarters)

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise ValidationError("unknown column", column=name)
        return self.columns[name]

    def raw_column(self, name: str) -> np.ndarray:
        """Undo the declared ingest scaling."""
        return self.column(name) / self.scale_factors.get(name, 1.0)


def ingest(source, schema_name: str) -> QuarterSeries:
    """Parse and validate a quarterly factor CSV.

    ``source`` is a path or text buffer. The header must carry ``date`` plus
    the schema's columns; supply-side volumes are rescaled on ingestion and
    the factors retained as metadata.
    """
    if schema_name not in INGEST_SCHEMAS:
        raise ValidationError(
            "unknown ingest schema",
            schema=schema_name,
            known=sorted(INGEST_SCHEMAS),
        )
    schema = INGEST_SCHEMAS[schema_name]

    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            rows = list(csv.reader(fh))
    else:
        rows = list(csv.reader(source))
    if not rows:
        raise ValidationError("empty csv source")
    header = [h.strip() for h in rows[0]]
    expected = ["date", *schema["columns"]]
    if header != expected:
        raise ValidationError(
            "csv header does not match schema",
            schema=schema_name,
            expected=expected,
            got=header,
        )
    quarters: list[str] = []
    data: dict[str, list[float]] = {c: [] for c in schema["columns"]}
    seen: set[str] = set()
    for row_no, row in enumerate(rows[1:], start=2):
        if len(row) != len(expected):
            raise ValidationError(
                "wrong number of fields", row=row_no, expected=len(expected)
            )
        label = row[0].strip()
        parse_quarter(label)
        if label in seen:
            raise ValidationError("duplicated quarter label", row=row_no, label=label)
        seen.add(label)
        quarters.append(label)
        for col, cell in zip(schema["columns"], row[1:]):
            try:
                value = float(cell)
            except ValueError as err:
                raise ValidationError(
                    "unparsable number", row=row_no, column=col, value=cell
                ) from err
            data[col].append(value)

    scale_factors = {c: FACTOR_SCALE for c in schema["scaled"]}
    columns = {
        c: np.asarray(vals, dtype=float) * scale_factors.get(c, 1.0)
        for c, vals in data.items()
    }
    return QuarterSeries(tuple(quarters), columns, scale_factors)


# ---------------------------------------------------------------------------
# Scenarios


@dataclass(frozen=True)
class Scenario:
    """Named shocks applied over the forecast horizon.

    Multiplicative ``factors`` and additive ``offsets`` address series by
    name; ``param_overrides`` replace technology parameters for the whole
    scenario run.
    """

    name: str
    factors: Mapping[str, float] = field(default_factory=dict)
    offsets: Mapping[str, float] = field(default_factory=dict)
    param_overrides: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for series, fac in self.factors.items():
            if not fac > 0:
                raise ValidationError(
                    "multiplicative factors must be positive", series=series, factor=fac
                )

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Scenario":
        return cls(
            name=doc.get("name", "custom"),
            factors=dict(doc.get("factors", {})),
            offsets=dict(doc.get("offsets", {})),
            param_overrides=dict(doc.get("param_overrides", {})),
        )


SCENARIO_PRESETS: dict[str, Scenario] = {
    "scenario1": Scenario(name="scenario1"),
    "scenario2": Scenario(
        name="scenario2", factors={"gas_price": 1.25, "elec_price": 1.25}
    ),
    "scenario3": Scenario(
        name="scenario3",
        factors={
            "elec_price": 1.30,
            "gas_price": 1.65,
            "imports": 1.40,
            "storage": 0.50,
        },
    ),
}


def resolve_scenario(name_or_doc) -> Scenario:
    if isinstance(name_or_doc, Scenario):
        return name_or_doc
    if isinstance(name_or_doc, str):
        if name_or_doc not in SCENARIO_PRESETS:
            raise ValidationError(
                "unknown scenario preset",
                scenario=name_or_doc,
                known=sorted(SCENARIO_PRESETS),
            )
        return SCENARIO_PRESETS[name_or_doc]
    return Scenario.from_dict(name_or_doc)


def extend_series(values: np.ndarray, horizon: int) -> np.ndarray:
    """Append a last-observed-value carry-forward path."""
    values = np.asarray(values, dtype=float)
    return np.concatenate([values, np.full(horizon, values[-1])])


def apply_scenario(
    series_set: Mapping[str, np.ndarray],
    params: Mapping[str, float],
    scenario: Scenario,
    horizon: int,
) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Extend every series over the horizon and apply the scenario's shocks.

    Baseline future values are last-observed-value carry-forward; factors and
    offsets touch only the horizon slice. Unknown series or parameter names
    are rejected.
    """
    if horizon < 0:
        raise ValidationError("horizon must be nonnegative", horizon=horizon)
    for name in list(scenario.factors) + list(scenario.offsets):
        if name not in series_set:
            raise ValidationError("scenario references unknown series", series=name)
    for name in scenario.param_overrides:
        if name not in params:
            raise ValidationError("scenario references unknown parameter", parameter=name)
    out: dict[str, np.ndarray] = {}
    for name, values in series_set.items():
        ext = extend_series(values, horizon)
        if horizon:
            tail = slice(len(values), None)
            if name in scenario.factors:
                ext[tail] = ext[tail] * scenario.factors[name]
            if name in scenario.offsets:
                ext[tail] = ext[tail] + scenario.offsets[name]
        out[name] = ext
    new_params = dict(params)
    new_params.update(scenario.param_overrides)
    return out, new_params


# ---------------------------------------------------------------------------
# Model store


class ModelStore:
    """Directory of JSON model documents, one file per model id.

    Writes are atomic (temp file plus rename) and refuse to overwrite unless
    asked; reads validate the version field before deserializing.
    """

    KINDS = ("gp", "dlm", "graph")

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, model_id: str) -> Path:
        if not re.fullmatch(r"[A-Za-z0-9._-]+", model_id or ""):
            raise ValidationError("bad model id", model_id=model_id)
        return self.root / f"{model_id}.json"

    def exists(self, model_id: str) -> bool:
        return self._path(model_id).exists()

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.json"))

    def save(self, model_id: str, kind: str, doc: dict, *, overwrite: bool = False) -> None:
        if kind not in self.KINDS:
            raise ValidationError("unknown model kind", kind=kind)
        path = self._path(model_id)
        if path.exists() and not overwrite:
            raise DuplicateModelError("model id already exists", model_id=model_id)
        payload = {"kind": kind, **doc}
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(payload, fh, indent=1)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    def load_doc(self, model_id: str) -> dict:
        path = self._path(model_id)
        if not path.exists():
            raise ModelNotFoundError("no such model", model_id=model_id)
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (json.JSONDecodeError, UnicodeDecodeError) as err:
            raise CorruptModelError(
                "model document is not valid json", model_id=model_id
            ) from err
        if not isinstance(doc, dict) or "kind" not in doc:
            raise CorruptModelError("model document missing kind", model_id=model_id)
        return doc


def save_model(store: ModelStore, model_id: str, model, *, overwrite: bool = False) -> None:
    """Persist a fitted model under a stable id."""
    if isinstance(model, GpEmulator):
        store.save(model_id, "gp", model.to_dict(), overwrite=overwrite)
    elif isinstance(model, Dlm):
        store.save(model_id, "dlm", model.to_dict(), overwrite=overwrite)
    elif isinstance(model, dict) and model.get("kind") == "graph":
        doc = {k: v for k, v in model.items() if k != "kind"}
        store.save(model_id, "graph", doc, overwrite=overwrite)
    else:
        raise ValidationError("unsupported model object", type=type(model).__name__)


def load_model(store: ModelStore, model_id: str):
    """Load a persisted model; factorizations are recomputed, never stored."""
    doc = store.load_doc(model_id)
    kind = doc["kind"]
    body = {k: v for k, v in doc.items() if k != "kind"}
    if kind == "gp":
        return GpEmulator.from_dict(body)
    if kind == "dlm":
        return Dlm.from_dict(body)
    if kind == "graph":
        if body.get("version") != GRAPH_DOC_VERSION:
            raise VersionMismatchError(
                "unsupported graph document version",
                model_id=model_id,
                version=body.get("version"),
            )
        return doc
    raise CorruptModelError("unknown model kind", model_id=model_id, kind=kind)


# ---------------------------------------------------------------------------
# Case-study configuration


@dataclass(frozen=True)
class DesignSettings:
    n: int
    n_train: int
    seed: int

    def __post_init__(self):
        if not 2 <= self.n_train < self.n:
            raise ValidationError(
                "need 2 <= n_train < n", n=self.n, n_train=self.n_train
            )


@dataclass(frozen=True)
class HeatSettings:
    hdd_profile: tuple[float, float, float, float]
    efficiency: float
    transmission: float
    baseline: float = 0.0


@dataclass(frozen=True)
class DispatchSettings:
    boiler_efficiency: float
    heat_pump_cop: float


@dataclass(frozen=True)
class CaseStudyConfig:
    gas_csv: str
    elec_csv: str
    heat: HeatSettings
    dispatch: DispatchSettings
    heat_design: DesignSettings
    cost_design: DesignSettings
    gp_restarts: int = 8
    gp_seed: int = 7
    dlm_prior: PrecisionPrior = PrecisionPrior()
    horizon: int = 4
    price_shock_mode: str = "output"
    scenarios: tuple = ("scenario1", "scenario2", "scenario3")
    seed: int = 0

    def __post_init__(self):
        if self.price_shock_mode not in ("output", "input"):
            raise ValidationError(
                "price_shock_mode must be 'output' or 'input'",
                mode=self.price_shock_mode,
            )
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1", horizon=self.horizon)

    @classmethod
    def from_file(cls, path: str | Path) -> "CaseStudyConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as err:
            raise ValidationError("config file not found", path=str(path)) from err
        except json.JSONDecodeError as err:
            raise ValidationError("config is not valid json", path=str(path)) from err
        base = path.parent

        def respath(p: str) -> str:
            q = Path(p)
            return str(q if q.is_absolute() else base / q)

        try:
            data = doc["data"]
            designs = doc["designs"]
            heat = doc["heat"]
            dispatch = doc["dispatch"]
            return cls(
                gas_csv=respath(data["gas_csv"]),
                elec_csv=respath(data["elec_csv"]),
                heat=HeatSettings(
                    hdd_profile=tuple(heat["hdd_profile"]),
                    efficiency=float(heat["efficiency"]),
                    transmission=float(heat["transmission"]),
                    baseline=float(heat.get("baseline", 0.0)),
                ),
                dispatch=DispatchSettings(
                    boiler_efficiency=float(dispatch["boiler_efficiency"]),
                    heat_pump_cop=float(dispatch["heat_pump_cop"]),
                ),
                heat_design=DesignSettings(**designs["heat"]),
                cost_design=DesignSettings(**designs["cost"]),
                gp_restarts=int(doc.get("gp_search", {}).get("n_restarts", 8)),
                gp_seed=int(doc.get("gp_search", {}).get("seed", 7)),
                dlm_prior=PrecisionPrior(
                    shape=float(doc.get("dlm_prior", {}).get("shape", 3.0)),
                    rate=float(doc.get("dlm_prior", {}).get("rate", 0.01)),
                ),
                horizon=int(doc.get("horizon", 4)),
                price_shock_mode=doc.get("price_shock_mode", "output"),
                scenarios=tuple(doc.get("scenarios", ("scenario1", "scenario2", "scenario3"))),
                seed=int(doc.get("seed", 0)),
            )
        except KeyError as err:
            raise ValidationError("config missing key", key=str(err)) from err


GAS_REGRESSORS = ("prod", "imports", "storage", "coal")
ELEC_REGRESSORS = ("ets", "offshore_wind")

PARAM_KEYS = ("efficiency", "transmission", "boiler_efficiency", "heat_pump_cop")


def hdd_for_quarter(profile: Sequence[float], label: str) -> float:
    _, q = parse_quarter(label)
    return float(profile[q - 1])


# ---------------------------------------------------------------------------
# Model fitting


def fit_price_dlms(
    gas: QuarterSeries, elec: QuarterSeries, prior: PrecisionPrior, seed: int = 0
) -> tuple[Dlm, Dlm]:
    """Fit the gas and electricity regression DLMs on ingested factor series."""
    if gas.quarters != elec.quarters:
        raise ValidationError(
            "gas and electricity series must cover the same quarters",
            gas=[gas.quarters[0], gas.quarters[-1]],
            elec=[elec.quarters[0], elec.quarters[-1]],
        )
    n = len(gas)
    gas_F = np.column_stack(
        [np.ones(n)] + [gas.column(c) for c in GAS_REGRESSORS]
    )
    gas_model = dlm_mod.fit_dlm(
        gas.column("gas_price").tolist(),
        gas_F,
        regressor_names=(INTERCEPT, *GAS_REGRESSORS),
        scale_factors=[1.0] + [gas.scale_factors.get(c, 1.0) for c in GAS_REGRESSORS],
        prior=prior,
        seed=seed,
    )
    elec_F = np.column_stack(
        [np.ones(n), elec.column("gas_price")] + [elec.column(c) for c in ELEC_REGRESSORS]
    )
    elec_model = dlm_mod.fit_dlm(
        elec.column("elec_price").tolist(),
        elec_F,
        regressor_names=(INTERCEPT, "gas_price", *ELEC_REGRESSORS),
        scale_factors=[1.0, 1.0] + [elec.scale_factors.get(c, 1.0) for c in ELEC_REGRESSORS],
        prior=prior,
        seed=seed,
    )
    return gas_model, elec_model


def fit_simulator_emulator(
    simulator, domains: Sequence[tuple[float, float]], settings: DesignSettings,
    restarts: int, gp_seed: int,
) -> tuple[GpEmulator, tuple[np.ndarray, np.ndarray]]:
    """Train an emulator on the first n_train rows of a maximin hypercube and
    return the held-out remainder for validation."""
    X = simulators.lhc_design(settings.n, domains, settings.seed)
    F = simulators.run_ensemble(X, simulator)
    train = Design(X[: settings.n_train], F[: settings.n_train], np.asarray(domains, dtype=float))
    em = fit_gp(
        train,
        search=HyperparamSearchConfig(n_restarts=restarts, seed=gp_seed),
    )
    holdout = (X[settings.n_train :], F[settings.n_train :])
    return em, holdout


# ---------------------------------------------------------------------------
# Graph assembly


EXOG_NODES = (
    "hdd",
    "efficiency",
    "transmission",
    "boiler_efficiency",
    "heat_pump_cop",
    "prod",
    "imports",
    "storage",
    "coal",
    "ets",
    "offshore_wind",
)


def build_graph(models: Mapping[str, Dlm | GpEmulator], model_ids: Mapping[str, str] | None = None) -> NodeGraph:
    """Wire the two price DLMs and two emulators into the planning graph."""
    ids = dict(model_ids or {})
    nodes: list = [ExogenousNode(name) for name in EXOG_NODES]
    nodes.append(
        DlmNode(
            "gas_price",
            models["gas_price"],
            (INTERCEPT, *GAS_REGRESSORS),
            model_id=ids.get("gas_price"),
        )
    )
    nodes.append(
        DlmNode(
            "elec_price",
            models["elec_price"],
            (INTERCEPT, "gas_price", *ELEC_REGRESSORS),
            model_id=ids.get("elec_price"),
        )
    )
    nodes.append(
        GpNode(
            "heat_demand",
            models["heat_demand"],
            ("hdd", "efficiency", "transmission"),
            model_id=ids.get("heat_demand"),
        )
    )
    nodes.append(
        GpNode(
            "op_cost",
            models["op_cost"],
            ("heat_demand", "gas_price", "elec_price", "boiler_efficiency", "heat_pump_cop"),
            model_id=ids.get("op_cost"),
        )
    )
    return NodeGraph(nodes, target="op_cost")


def graph_document(
    graph: NodeGraph,
    quarters: Sequence[str],
    exog_series: Mapping[str, np.ndarray],
    observations: Mapping[str, np.ndarray],
    params: Mapping[str, float],
    hdd_profile: Sequence[float],
    price_shock_mode: str = "output",
) -> dict:
    """Self-contained graph document: topology, model references, and the
    baseline data needed to re-run filters and extend forecasts."""
    doc = graph.to_dict()
    return {
        "kind": "graph",
        "version": GRAPH_DOC_VERSION,
        "graph": doc,
        "quarters": list(quarters),
        "exog_series": {k: np.asarray(v, dtype=float).tolist() for k, v in exog_series.items()},
        "observations": {k: np.asarray(v, dtype=float).tolist() for k, v in observations.items()},
        "params": dict(params),
        "hdd_profile": [float(v) for v in hdd_profile],
        "price_shock_mode": price_shock_mode,
    }


# ---------------------------------------------------------------------------
# Scenario runs


@dataclass(frozen=True)
class ScenarioRun:
    """Tidy records for one scenario: composite/plain rows plus parent
    summaries."""

    scenario: str
    records: list
    parents: list


def _plain_prediction(graph: NodeGraph, result) -> GaussianMoments:
    """Plain-emulator prediction at the parent means of the target node."""
    target = graph.nodes[graph.target]
    point = [result.moments[ref].scalar_mean for ref in target.inputs]
    return target.emulator.predict(point)


def _dlm_nodes(graph: NodeGraph) -> list[str]:
    return [n for n in graph.order if isinstance(graph.nodes[n], DlmNode)]


def _regressor_row(bindings: Sequence[str], values: Mapping[str, float]) -> np.ndarray:
    return np.array(
        [1.0 if b == INTERCEPT else values[b] for b in bindings], dtype=float
    )


def run_scenario(
    graph_doc: Mapping,
    resolve,
    scenario,
    horizon: int | None = None,
    *,
    include_filter: bool = True,
    zero_parent_variance: bool = False,
) -> ScenarioRun:
    """Produce composite and plain-emulator moments for one scenario.

    One-step rows re-run the filters over the recorded history (scenario
    shocks never touch history); forecast rows extend exogenous series by
    carry-forward, apply the scenario transforms over the horizon, and
    propagate k-step moments. Price-node factors shock forecast moments
    (mode "output") or downstream consumption (mode "input").
    """
    scenario = resolve_scenario(scenario)
    if horizon is None:
        horizon = 4
    if horizon < 1:
        raise ValidationError("horizon must be >= 1", horizon=horizon)

    graph = NodeGraph.from_dict(graph_doc["graph"], resolve)
    quarters = list(graph_doc["quarters"])
    exog_series = {k: np.asarray(v, dtype=float) for k, v in graph_doc["exog_series"].items()}
    observations = {k: np.asarray(v, dtype=float) for k, v in graph_doc["observations"].items()}
    params = dict(graph_doc["params"])
    hdd_profile = graph_doc["hdd_profile"]
    mode = graph_doc.get("price_shock_mode", "output")

    price_nodes = set(_dlm_nodes(graph))
    series_factors = {k: v for k, v in scenario.factors.items() if k not in price_nodes}
    price_factors = {k: v for k, v in scenario.factors.items() if k in price_nodes}
    for name in scenario.offsets:
        if name in price_nodes:
            raise ValidationError(
                "additive offsets on model nodes are not supported", node=name
            )
    series_scenario = Scenario(
        name=scenario.name,
        factors=series_factors,
        offsets=dict(scenario.offsets),
        param_overrides=dict(scenario.param_overrides),
    )
    base_series = dict(exog_series)
    future_series, run_params = apply_scenario(base_series, params, series_scenario, horizon)

    records: list[dict] = []
    parents: list[dict] = []
    target = graph.nodes[graph.target]
    parent_names = [r for r in target.inputs if r not in EXOG_NODE_PARAMS]

    def emit(quarter: str, step_kind: str, result):
        comp = result.moments[graph.target]
        plain = _plain_prediction(graph, result)
        records.append(
            {
                "scenario": scenario.name,
                "quarter": quarter,
                "step_kind": step_kind,
                "model": "composite",
                "mean": comp.scalar_mean,
                "variance": comp.scalar_var,
            }
        )
        records.append(
            {
                "scenario": scenario.name,
                "quarter": quarter,
                "step_kind": step_kind,
                "model": "plain",
                "mean": plain.scalar_mean,
                "variance": plain.scalar_var,
            }
        )
        for node in parent_names:
            belief = result.moments[node]
            parents.append(
                {
                    "scenario": scenario.name,
                    "quarter": quarter,
                    "step_kind": step_kind,
                    "node": node,
                    "mean": belief.scalar_mean,
                    "variance": belief.scalar_var,
                }
            )

    def param_exog() -> dict:
        return {
            "efficiency": run_params["efficiency"],
            "transmission": run_params["transmission"],
            "boiler_efficiency": run_params["boiler_efficiency"],
            "heat_pump_cop": run_params["heat_pump_cop"],
        }

    dlm_names = _dlm_nodes(graph)
    if include_filter:
        # historical one-step sweep: propagate before updating with the
        # quarter's observations, then filter both price models forward
        states = {
            name: dlm_mod.initial_state(graph.nodes[name].model.spec)
            for name in dlm_names
        }
        for i, quarter in enumerate(quarters):
            nodes = []
            for name, node in graph.nodes.items():
                if isinstance(node, DlmNode):
                    nodes.append(
                        DlmNode(
                            name,
                            node.model.with_state(states[name]),
                            node.regressors,
                            model_id=node.model_id,
                        )
                    )
                else:
                    nodes.append(node)
            step_graph = NodeGraph(nodes, graph.target)
            exog_step = {k: float(v[i]) for k, v in exog_series.items()}
            exog_step["hdd"] = hdd_for_quarter(hdd_profile, quarter)
            exog_step.update(param_exog())
            result = propagate(
                step_graph, exog_step, 1, zero_parent_variance=zero_parent_variance
            )
            emit(quarter, "filter", result)
            point_values = dict(exog_step)
            for name in dlm_names:
                node = graph.nodes[name]
                row_vals = dict(point_values)
                for ref in node.regressors:
                    if ref != INTERCEPT and ref in observations:
                        row_vals[ref] = float(observations[ref][i])
                F_t = _regressor_row(node.regressors, row_vals)
                states[name] = dlm_mod.filter_step(
                    node.model.spec, states[name], float(observations[name][i]), F_t
                )
        end_states = states
    else:
        end_states = {name: graph.nodes[name].model.state for name in dlm_names}

    # k-step forecasts from the end of the history
    nodes = []
    for name, node in graph.nodes.items():
        if isinstance(node, DlmNode):
            nodes.append(
                DlmNode(
                    name,
                    node.model.with_state(end_states[name]),
                    node.regressors,
                    model_id=node.model_id,
                )
            )
        else:
            nodes.append(node)
    forecast_graph = NodeGraph(nodes, graph.target)
    last = quarters[-1]
    future_hdd = [
        hdd_for_quarter(hdd_profile, add_quarters(last, k)) for k in range(1, horizon + 1)
    ]
    exog_future: dict = {
        k: v[len(quarters) :] for k, v in future_series.items() if k in exog_series
    }
    exog_future["hdd"] = future_hdd
    exog_future.update(param_exog())
    shock_kw = (
        {"shock_factors": price_factors}
        if mode == "output"
        else {"consumption_shocks": price_factors}
    )
    for k in range(1, horizon + 1):
        result = propagate(
            forecast_graph,
            exog_future,
            k,
            zero_parent_variance=zero_parent_variance,
            **shock_kw,
        )
        emit(add_quarters(last, k), "forecast", result)

    return ScenarioRun(scenario=scenario.name, records=records, parents=parents)


EXOG_NODE_PARAMS = ("boiler_efficiency", "heat_pump_cop", "efficiency", "transmission")


# ---------------------------------------------------------------------------
# End-to-end case study


@dataclass
class CaseStudyResult:
    config: CaseStudyConfig
    records: list
    parents: list
    models: dict
    holdouts: dict
    graph_doc: dict
    quarters: tuple


MODEL_IDS = {
    "gas_price": "gas-dlm",
    "elec_price": "elec-dlm",
    "heat_demand": "heat-gp",
    "op_cost": "cost-gp",
}


def fit_case_study_models(config: CaseStudyConfig) -> tuple[dict, dict, dict]:
    """Fit the two DLMs and two emulators; returns (models, holdouts, data)."""
    gas = ingest(config.gas_csv, "gas-factors")
    elec = ingest(config.elec_csv, "elec-factors")
    gas_model, elec_model = fit_price_dlms(gas, elec, config.dlm_prior, seed=config.seed)

    heat_domains = list(simulators.HEAT_DOMAINS.values())
    heat_sim = lambda row: simulators.heat_demand_from_row(row, baseline=config.heat.baseline)
    heat_em, heat_holdout = fit_simulator_emulator(
        heat_sim, heat_domains, config.heat_design, config.gp_restarts, config.gp_seed
    )
    cost_domains = list(simulators.DISPATCH_DOMAINS.values())
    cost_em, cost_holdout = fit_simulator_emulator(
        simulators.dispatch_cost_from_row,
        cost_domains,
        config.cost_design,
        config.gp_restarts,
        config.gp_seed + 1,
    )
    models = {
        "gas_price": gas_model,
        "elec_price": elec_model,
        "heat_demand": heat_em,
        "op_cost": cost_em,
    }
    holdouts = {"heat_demand": heat_holdout, "op_cost": cost_holdout}
    data = {"gas": gas, "elec": elec}
    return models, holdouts, data


def build_case_study_graph_doc(config: CaseStudyConfig, models: dict, data: dict) -> dict:
    gas, elec = data["gas"], data["elec"]
    graph = build_graph(models, MODEL_IDS)
    exog_series = {c: gas.column(c) for c in GAS_REGRESSORS}
    exog_series.update({c: elec.column(c) for c in ELEC_REGRESSORS})
    observations = {
        "gas_price": gas.column("gas_price"),
        "elec_price": elec.column("elec_price"),
    }
    params = {
        "efficiency": config.heat.efficiency,
        "transmission": config.heat.transmission,
        "boiler_efficiency": config.dispatch.boiler_efficiency,
        "heat_pump_cop": config.dispatch.heat_pump_cop,
    }
    return graph_document(
        graph,
        gas.quarters,
        exog_series,
        observations,
        params,
        config.heat.hdd_profile,
        config.price_shock_mode,
    )


def run_case_study(
    config: CaseStudyConfig,
    store: ModelStore | None = None,
    *,
    horizon: int | None = None,
) -> CaseStudyResult:
    """Fit everything, build the graph, and run the configured scenarios."""
    models, holdouts, data = fit_case_study_models(config)
    graph_doc = build_case_study_graph_doc(config, models, data)
    if store is not None:
        for node, model_id in MODEL_IDS.items():
            save_model(store, model_id, models[node], overwrite=True)
        save_model(store, "energy-graph", graph_doc, overwrite=True)

    resolve = lambda model_id: models[
        {v: k for k, v in MODEL_IDS.items()}[model_id]
    ]
    records: list = []
    parents: list = []
    for sc in config.scenarios:
        run = run_scenario(
            graph_doc, resolve, sc, horizon or config.horizon, include_filter=True
        )
        records.extend(run.records)
        parents.extend(run.parents)
    return CaseStudyResult(
        config=config,
        records=records,
        parents=parents,
        models=models,
        holdouts=holdouts,
        graph_doc=graph_doc,
        quarters=data["gas"].quarters,
    )


RECORD_COLUMNS = ("scenario", "quarter", "step_kind", "model", "mean", "variance")


def write_records_csv(path_or_buf, records: Sequence[Mapping]) -> None:
    """Tidy CSV emission; floats use repr for lossless round-trips."""

    def _write(fh):
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    rec["scenario"],
                    rec["quarter"],
                    rec["step_kind"],
                    rec["model"],
                    repr(float(rec["mean"])),
                    repr(float(rec["variance"])),
                ]
            )

    if isinstance(path_or_buf, io.TextIOBase):
        _write(path_or_buf)
    else:
        with open(path_or_buf, "w", newline="") as fh:
            _write(fh)


def store_resolver(store: ModelStore):
    """Model-id resolver backed by a store, for graph deserialization."""

    def resolve(model_id: str):
        return load_model(store, model_id)

    return resolve
