"""Shared builders for tests and for ``scripts/make_fixtures.py``.

The fixture script records transcripts with these exact builders; the tests
replay them. Changing anything that flows into a prompt (profiles, paths,
case bodies, stub error messages) requires re-running the fixture script.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy.io

from ad_agent.codegen import write_npz
from ad_agent.info_miner import parse_doc_summary
from ad_agent.memory import LongTermCache, SessionWorkspace
from ad_agent.offline import CATALOG, doc_text, fenced, model_body
from ad_agent.processor import DatasetProfile, ExperimentConfig

TESTS = Path(__file__).resolve().parent
DATA = TESTS / "data"
STUBS = TESTS / "stubs"
TRANSCRIPTS = DATA / "transcripts"
REPAIR_DIR = DATA / "repair"

STUB_ENV = {"PYTHONPATH": str(STUBS)}
REPAIR_TIMEOUT = 2.0
SEARCH_LATENCY = 10.6
TABLE1_TOKENS = (3272, 667)

GRAPH_SIZES = {"books": 60, "disney": 54, "enron": 70, "reddit": 80, "weibo": 90}
GRID_FAILURES = {("books", "GAAN"), ("disney", "Radar"), ("reddit", "SCAN"), ("weibo", "GUIDE")}


# ---------------------------------------------------------------------------
# datasets


def cardio_like(seed: int = 0, n: int = 200, d: int = 21, n_out: int = 20) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.zeros(n, dtype=int)
    idx = rng.choice(n, n_out, replace=False)
    X[idx] += rng.uniform(2.0, 4.0, size=(n_out, d))
    y[idx] = 1
    return X, y


def write_cardio(path: Path) -> Path:
    X, y = cardio_like()
    path.parent.mkdir(parents=True, exist_ok=True)
    scipy.io.savemat(path, {"X": X, "y": y.reshape(-1, 1)})
    return path


def planted_gaussian(seed: int = 0, n: int = 500, d: int = 8, n_out: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """Standard normal inliers plus a cluster of shifted outliers."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.zeros(n, dtype=int)
    idx = rng.choice(n, n_out, replace=False)
    X[idx] = rng.normal(loc=2.5, scale=0.5, size=(n_out, d)) * rng.choice([-1, 1], size=(n_out, d))
    y[idx] = 1
    return X, y


def write_graph(path: Path, n_nodes: int, seed: int = 0, d: int = 8) -> Path:
    rng = np.random.default_rng(seed + n_nodes)
    src = np.arange(n_nodes)
    edges = np.concatenate([np.stack([src, (src + k) % n_nodes]) for k in (1, 2, 7, 11)], axis=1)
    x = rng.normal(size=(n_nodes, d))
    y = np.zeros(n_nodes, dtype=np.int64)
    y[: max(2, n_nodes // 20)] = 1
    x[y == 1] += 3.0
    path.parent.mkdir(parents=True, exist_ok=True)
    write_npz(path, {"x": x, "edge_index": edges.astype(np.int64), "y": y})
    return path


def stage_pygod_graphs(data_dir: Path) -> None:
    for name, n in GRAPH_SIZES.items():
        write_graph(data_dir / f"{name}.npz", n)


# ---------------------------------------------------------------------------
# documentation cache


def catalog_doc(library: str, model: str, now: datetime | None = None):
    return parse_doc_summary(doc_text(CATALOG[(library, model)]), model, library,
                             retrieved_at=now or datetime.now(timezone.utc))


def prewarmed_cache(path: Path | None, pairs, now: datetime | None = None) -> LongTermCache:
    cache = LongTermCache(path)
    for library, model in pairs:
        cache.store_doc(catalog_doc(library, model, now))
    return cache


# ---------------------------------------------------------------------------
# repair corpus


PROFILES = {
    "pyod": (DatasetProfile("multivariate", 200, 21, True, "mat", 0.1), "./data/cardio.mat"),
    "pygod": (DatasetProfile("graph", 60, 8, True, "graph_bundle", 0.05, n_edges=240), "./data/books.npz"),
    "tslib": (DatasetProfile("time_series", 500, 5, True, "ts_bundle", 0.1), "./data/MSL"),
}


def _body(library, model, **subs):
    """The catalogue body with textual substitutions applied (old -> new)."""
    text = model_body(CATALOG[(library, model)])
    for old, new in subs.get("replace", []):
        text = text.replace(old, new)
    for line in subs.get("insert", []):
        head, _, rest = text.partition("\n\n")
        text = f"{head}\n\n{line}\n{rest}"
    return text


@dataclass(frozen=True)
class RepairCase:
    id: str
    library: str
    model: str
    category: str
    repairable: bool
    bodies: tuple[str, ...]   # successive generator answers; later calls get the correct body


def repair_cases() -> list[RepairCase]:
    P, G, T = "pyod", "pygod", "tslib"
    c = []
    add = lambda *a: c.append(RepairCase(*a))  # noqa: E731
    # missing or bad constructor arguments
    add("01_deepsvdd_no_n_features", P, "DeepSVDD", "missing_or_bad_argument", True,
        (_body(P, "DeepSVDD", replace=[('PARAMS["n_features"] = X_train.shape[1]\n', "")]),))
    add("02_vae_unknown_kwarg", P, "VAE", "missing_or_bad_argument", True,
        (_body(P, "VAE", replace=[("VAE(**PARAMS)", "VAE(n_features=X_train.shape[1], **PARAMS)")]),))
    add("03_lunar_misspelt_param", P, "LUNAR", "missing_or_bad_argument", True,
        (_body(P, "LUNAR", insert=['PARAMS["n_neighbors"] = 10']),))
    add("04_gaan_wrong_param_name", G, "GAAN", "missing_or_bad_argument", True,
        (_body(G, "GAAN", insert=['PARAMS["epochs"] = 10']),))
    add("05_ae1svm_fit_kwarg", P, "AE1SVM", "missing_or_bad_argument", True,
        (_body(P, "AE1SVM", replace=[("detector.fit(X_train)", "detector.fit(X_train, epochs=5)")]),))
    # wrong import names
    add("06_vae_bad_module", P, "VAE", "import_error", True,
        (_body(P, "VAE", replace=[("pyod.models.vae", "pyod.models.vae_model")]),))
    add("07_ae_bad_class", P, "AE", "import_error", True,
        (_body(P, "AE", replace=[("import AutoEncoder", "import AE"), ("AutoEncoder(", "AE(")]),))
    add("08_gaan_bad_package", G, "GAAN", "import_error", True,
        (_body(G, "GAAN", replace=[("pygod.detector", "pygod.models")]),))
    add("09_timesnet_bad_module", T, "TimesNet", "import_error", True,
        (_body(T, "TimesNet", replace=[("tslib.detectors", "tslib.models")]),))
    add("10_mogaal_two_attempts", P, "MO-GAAL", "import_error", True,
        (_body(P, "MO-GAAL", replace=[("import MO_GAAL", "import MOGAAL"), ("MO_GAAL(", "MOGAAL(")]),
         _body(P, "MO-GAAL", replace=[("pyod.models.mo_gaal", "pyod.models.mogaal")])))
    # data constraint violations
    add("11_devnet_no_labels", P, "DevNet", "data_constraint_violation", True,
        (_body(P, "DevNet", replace=[("detector.fit(X_train, y_train)", "detector.fit(X_train)")]),))
    add("12_lunar_too_many_neighbours", P, "LUNAR", "data_constraint_violation", True,
        (_body(P, "LUNAR", insert=['PARAMS["n_neighbours"] = 20']),))
    add("13_timesnet_window_too_long", T, "TimesNet", "data_constraint_violation", True,
        (_body(T, "TimesNet", replace=[('PARAMS["seq_len"] = min(PARAMS["seq_len"], len(X_train))\n', "")]),))
    add("14_gaan_transposed_edges", G, "GAAN", "data_constraint_violation", True,
        (_body(G, "GAAN", replace=[("torch.tensor(edge_index_train,", "torch.tensor(edge_index_train.T,")]),))
    add("15_vae_latent_too_wide", P, "VAE", "data_constraint_violation", True,
        (_body(P, "VAE", insert=['PARAMS["latent_dim"] = 64']),))
    # dry runs that never finish
    add("16_anogan_epochs", P, "AnoGAN", "timeout", True, (_body(P, "AnoGAN", insert=['PARAMS["epochs"] = 100000']),))
    add("17_alad_epochs", P, "ALAD", "timeout", True, (_body(P, "ALAD", insert=['PARAMS["epochs"] = 100000']),))
    add("18_patchtst_two_attempts", T, "PatchTST", "timeout", True,
        (_body(T, "PatchTST", insert=['PARAMS["train_epochs"] = 100000']),
         _body(T, "PatchTST", insert=['PARAMS["train_epochs"] = 50000'])))
    # designated unrepairable: the model keeps making the same mistake
    bad_radar = _body(G, "Radar", replace=[("pygod.detector", "pygod.detector.radar_model")])
    add("19_radar_import_unrepairable", G, "Radar", "import_error", False, (bad_radar,) * 3)
    slow_done = _body(G, "DONE", insert=['PARAMS["epoch"] = 100000'])
    add("20_done_timeout_unrepairable", G, "DONE", "timeout", False, (slow_done,) * 3)
    return c


def case_workspace(case: RepairCase, now: datetime | None = None) -> SessionWorkspace:
    profile, train = PROFILES[case.library]
    ws = SessionWorkspace(session_id=case.id)
    ws.put("raw_instruction", f"Run {case.model} on {train.rsplit('/', 1)[-1]}")
    ws.put("config", ExperimentConfig((case.model,), train))
    ws.put("dataset_profile", profile)
    ws.put("supervision", "supervised" if profile.format != "ts_bundle" else "unsupervised_with_evaluation")
    ws.put("selected_library", case.library)
    ws.put("selected_models", [case.model])
    ws.put("model_docs", (case.model, catalog_doc(case.library, case.model, now)))
    return ws


def scripted_generator(bodies, correct: str):
    """Generator override answering with ``bodies`` in order, then ``correct``."""
    calls = iter(bodies)

    def answer(request):
        return fenced(next(calls, correct))

    return answer


def python_with_stubs() -> str:
    return f"env PYTHONPATH={STUBS} {sys.executable}"
