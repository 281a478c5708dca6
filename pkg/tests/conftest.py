import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "numeric",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("numeric")

ROOT = Path(__file__).resolve().parents[1]
CONFIG_PATH = ROOT / "configs" / "case_study.json"


@pytest.fixture(scope="session")
def case_config():
    from uqnet.pipeline import CaseStudyConfig

    return CaseStudyConfig.from_file(CONFIG_PATH)


@pytest.fixture(scope="session")
def case_models(case_config):
    """Fitted case-study component models, shared across the session."""
    from uqnet.pipeline import fit_case_study_models

    models, holdouts, data = fit_case_study_models(case_config)
    return {"models": models, "holdouts": holdouts, "data": data}


@pytest.fixture(scope="session")
def case_graph_doc(case_config, case_models):
    from uqnet.pipeline import build_case_study_graph_doc

    return build_case_study_graph_doc(
        case_config, case_models["models"], case_models["data"]
    )


@pytest.fixture(scope="session")
def case_resolver(case_models):
    from uqnet.pipeline import MODEL_IDS

    id_to_node = {v: k for k, v in MODEL_IDS.items()}

    def resolve(model_id):
        return case_models["models"][id_to_node[model_id]]

    return resolve


@pytest.fixture(scope="session")
def example3():
    """The sequential two-model system: emulators for each stage plus a
    direct input-to-final-output emulator on the same budget."""
    from uqnet.gp import Design, HyperparamSearchConfig, fit_gp
    from uqnet.simulators import lhc_design

    from oracles import example3_true_f1, example3_true_f2

    n_design = 18
    x_domain = (0.0, 5.0)
    X1 = np.sort(lhc_design(n_design, [x_domain], seed=301), axis=0)
    F1 = example3_true_f1(X1[:, 0])

    y_lo, y_hi = -10.0, 4.0
    Y_design = np.sort(lhc_design(n_design, [(y_lo, y_hi)], seed=302), axis=0)
    F2 = example3_true_f2(Y_design[:, 0])

    search = HyperparamSearchConfig(n_restarts=8, seed=11)
    em1 = fit_gp(Design(X1, F1, np.array([x_domain])), search=search)
    em2 = fit_gp(Design(Y_design, F2, np.array([[y_lo, y_hi]])), search=search)
    direct = fit_gp(
        Design(X1, example3_true_f2(example3_true_f1(X1[:, 0])), np.array([x_domain])),
        search=search,
    )
    return {"em1": em1, "em2": em2, "direct": direct}
