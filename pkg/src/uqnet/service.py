"""HTTP service exposing fit, forecast, scenario, and diagnostic operations.

Responses are enveloped as {"request_id", "result"} or {"request_id",
"error": {code, message, context}}. Fits run synchronously in the worker
thread pool with a configurable timeout, so health checks stay responsive
during long fits. Endpoint documentation lives in docs/api.md and the
generated OpenAPI schema at /docs.
"""

from __future__ import annotations

import concurrent.futures
import logging
import os
import uuid
from typing import Any, Mapping

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from . import dlm as dlm_mod
from . import pipeline
from .errors import (
    DuplicateModelError,
    ModelNotFoundError,
    UqnetError,
    ValidationError,
)
from .gp import Design, GpEmulator, HyperparamSearchConfig, fit_gp, loo_diagnostics
from .network import NodeGraph
from .pipeline import ModelStore, load_model, run_scenario, save_model, store_resolver

log = logging.getLogger("uqnet.service")

DEFAULT_FIT_TIMEOUT_S = 300.0

_STATUS = {
    "validation_error": 400,
    "dimension_mismatch": 400,
    "binding_error": 400,
    "capability_error": 400,
    "fit_failure": 400,
    "version_mismatch": 400,
    "corrupt_model": 400,
    "model_not_found": 404,
    "duplicate_model": 409,
}


def _request_id(request: Request) -> str:
    return request.headers.get("x-request-id") or uuid.uuid4().hex


def _ok(request: Request, result: Any) -> JSONResponse:
    return JSONResponse({"request_id": _request_id(request), "result": result})


def _error_response(request: Request, err: UqnetError) -> JSONResponse:
    status = _STATUS.get(err.code, 500)
    return JSONResponse(
        {"request_id": _request_id(request), "error": err.to_payload()},
        status_code=status,
    )


def _require(body: Mapping, key: str):
    if key not in body:
        raise ValidationError("missing request field", field=key)
    return body[key]


def create_app(
    store_dir: str | None = None, fit_timeout_s: float = DEFAULT_FIT_TIMEOUT_S
) -> FastAPI:
    store = ModelStore(
        store_dir or os.environ.get("UQNET_STORE_DIR") or "out/store"
    )
    app = FastAPI(title="uqnet", version="0.1.0")
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=4)

    def run_with_timeout(fn, *args):
        future = pool.submit(fn, *args)
        try:
            return future.result(timeout=fit_timeout_s)
        except concurrent.futures.TimeoutError as err:
            raise UqnetError("fit exceeded the service timeout") from err

    @app.exception_handler(UqnetError)
    async def handle_uqnet_error(request: Request, err: UqnetError):
        if _STATUS.get(err.code, 500) >= 500:
            incident = uuid.uuid4().hex
            log.error("incident %s: %s", incident, err, exc_info=err)
            return JSONResponse(
                {
                    "request_id": _request_id(request),
                    "error": {"code": "internal", "message": f"incident {incident}", "context": {}},
                },
                status_code=500,
            )
        return _error_response(request, err)

    @app.exception_handler(RequestValidationError)
    async def handle_request_validation(request: Request, err: RequestValidationError):
        payload = ValidationError("request body failed validation", detail=str(err.errors()))
        return _error_response(request, payload)

    @app.exception_handler(Exception)
    async def handle_unexpected(request: Request, err: Exception):
        incident = uuid.uuid4().hex
        log.error("incident %s", incident, exc_info=err)
        return JSONResponse(
            {
                "request_id": _request_id(request),
                "error": {"code": "internal", "message": f"incident {incident}", "context": {}},
            },
            status_code=500,
        )

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/models/gp")
    def create_gp(body: dict, request: Request):
        model_id = _require(body, "model_id")
        if store.exists(model_id):
            raise DuplicateModelError("model id already exists", model_id=model_id)
        design = Design(
            np.asarray(_require(body, "X"), dtype=float),
            np.asarray(_require(body, "F"), dtype=float),
            np.asarray(_require(body, "domains"), dtype=float),
        )
        search_doc = body.get("search", {})
        search = HyperparamSearchConfig(
            n_restarts=int(search_doc.get("n_restarts", 8)),
            seed=int(search_doc.get("seed", body.get("seed", 0))),
        )
        em = run_with_timeout(fit_gp, design, None, search)
        save_model(store, model_id, em)
        return _ok(
            request,
            {
                "model_id": model_id,
                "kind": "gp",
                "lengthscales": em.kernel.lengthscales.tolist(),
                "nugget": em.kernel.nugget,
            },
        )

    @app.post("/models/dlm")
    def create_dlm(body: dict, request: Request):
        model_id = _require(body, "model_id")
        if store.exists(model_id):
            raise DuplicateModelError("model id already exists", model_id=model_id)
        y = [None if v is None else float(v) for v in _require(body, "y")]
        regressors = _require(body, "regressors")
        names = _require(body, "regressor_names")
        F_rows = np.asarray(regressors, dtype=float)
        prior_doc = body.get("prior", {})
        prior = dlm_mod.PrecisionPrior(
            shape=float(prior_doc.get("shape", 3.0)),
            rate=float(prior_doc.get("rate", 0.01)),
        )
        model = run_with_timeout(
            lambda: dlm_mod.fit_dlm(
                y,
                F_rows,
                regressor_names=names,
                scale_factors=body.get("scale_factors"),
                prior=prior,
                seed=int(body.get("seed", 0)),
            )
        )
        save_model(store, model_id, model)
        return _ok(
            request,
            {"model_id": model_id, "kind": "dlm", "V": model.spec.V, "w": model.w},
        )

    @app.get("/models/{model_id}")
    def get_model(model_id: str, request: Request):
        return _ok(request, store.load_doc(model_id))

    @app.get("/models/{model_id}/diagnostics")
    def model_diagnostics(model_id: str, request: Request):
        model = load_model(store, model_id)
        if not isinstance(model, GpEmulator):
            raise ValidationError(
                "diagnostics require a gp model", model_id=model_id
            )
        records = loo_diagnostics(model)
        return _ok(
            request,
            [
                {
                    "index": r.index,
                    "observed": r.observed,
                    "mean": r.mean,
                    "sd": r.sd,
                    "within_two_sd": r.within_two_sd,
                    "error": r.error,
                }
                for r in records
            ],
        )

    @app.post("/graphs")
    def create_graph(body: dict, request: Request):
        graph_id = _require(body, "graph_id")
        if store.exists(graph_id):
            raise DuplicateModelError("graph id already exists", graph_id=graph_id)
        doc = {k: v for k, v in body.items() if k != "graph_id"}
        doc["kind"] = "graph"
        doc.setdefault("version", pipeline.GRAPH_DOC_VERSION)
        # validate topology and model references before persisting
        NodeGraph.from_dict(_require(doc, "graph"), store_resolver(store))
        for key in ("quarters", "exog_series", "observations", "params", "hdd_profile"):
            _require(doc, key)
        save_model(store, graph_id, doc)
        return _ok(request, {"graph_id": graph_id})

    def _scenario_payload(graph_id: str, scenario, horizon: int) -> dict:
        graph_doc = load_model(store, graph_id)
        if not (isinstance(graph_doc, dict) and graph_doc.get("kind") == "graph"):
            raise ValidationError("id does not reference a graph", graph_id=graph_id)
        run = run_scenario(graph_doc, store_resolver(store), scenario, horizon)
        return {
            "scenario": run.scenario,
            "records": run.records,
            "parents": run.parents,
        }

    @app.post("/graphs/{graph_id}/forecast")
    def graph_forecast(graph_id: str, body: dict, request: Request):
        horizon = int(_require(body, "horizon"))
        if horizon < 1:
            raise ValidationError("horizon must be >= 1", horizon=horizon)
        return _ok(request, _scenario_payload(graph_id, "scenario1", horizon))

    @app.post("/graphs/{graph_id}/scenario")
    def graph_scenario(graph_id: str, body: dict, request: Request):
        horizon = int(_require(body, "horizon"))
        if horizon < 1:
            raise ValidationError("horizon must be >= 1", horizon=horizon)
        name = body.get("name")
        if name and name in pipeline.SCENARIO_PRESETS and "factors" not in body:
            scenario = name
        else:
            scenario = {
                "name": name or "custom",
                "factors": body.get("factors", {}),
                "offsets": body.get("offsets", {}),
                "param_overrides": body.get("param_overrides", {}),
            }
        return _ok(request, _scenario_payload(graph_id, scenario, horizon))

    return app


if __name__ == "__main__":
    import uvicorn

    bind = os.environ.get("UQNET_BIND_ADDR", "127.0.0.1:8200")
    host, _, port = bind.partition(":")
    uvicorn.run(create_app(), host=host or "127.0.0.1", port=int(port or 8200))
