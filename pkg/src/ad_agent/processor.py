"""Processor agent: instruction parsing, dataset loading and profiling."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd
import scipy.io

from ad_agent.errors import (
    AmbiguousModality,
    CorruptFile,
    EmptyDataset,
    FeatureMismatch,
    GatewayError,
    MissingDataset,
    UnparseableInstruction,
    UnsupportedFormat,
)
from ad_agent.gateway import Gateway

logger = logging.getLogger(__name__)

DEFAULT_DATA_ROOT = "./data/"
FORMATS = ("mat", "csv", "npz", "graph_bundle", "ts_bundle")
LABEL_COLUMNS = ("label", "y")
TIME_COLUMNS = ("timestamp", "time", "date", "datetime", "ts")
TS_FILES = ("train.csv", "test.csv", "test_label.csv")


@dataclass(frozen=True)
class ExperimentConfig:
    algorithms: tuple[str, ...]
    train_path: str
    test_path: str | None = None
    user_params: dict[str, Any] = field(default_factory=dict)
    evaluate: bool = False
    optimize: bool = False
    modality_hint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        if not self.train_path:
            raise ValueError("train_path must be non-empty")
        if self.test_path is not None and self.test_path == self.train_path:
            raise ValueError("test_path must differ from train_path")
        for key in self.user_params:
            if not (isinstance(key, str) and key.isidentifier()):
                raise ValueError(f"parameter key {key!r} is not an identifier")

    @property
    def dataset_stem(self) -> str:
        return dataset_stem(self.train_path)

    def describe(self) -> str:
        return "\n".join([
            "Experiment Configuration:",
            f"  Algorithm: {list(self.algorithms)}",
            f"  Training Dataset: {self.train_path}",
            f"  Testing Dataset: {self.test_path or ''}",
            f"  Parameters: {self.user_params}",
        ])


@dataclass(frozen=True)
class DatasetProfile:
    modality: str
    n_samples: int
    n_features: int
    has_labels: bool
    format: str
    label_prevalence: float | None = None
    n_edges: int | None = None

    def __post_init__(self):
        if self.n_samples <= 0 or self.n_features <= 0:
            raise ValueError("n_samples and n_features must be positive")
        if self.format not in FORMATS:
            raise ValueError(f"unknown format {self.format!r}")
        if self.has_labels != (self.label_prevalence is not None):
            raise ValueError("label_prevalence is present iff has_labels")
        if self.label_prevalence is not None and not 0.0 <= self.label_prevalence <= 1.0:
            raise ValueError("label_prevalence must lie in [0, 1]")

    def describe(self) -> str:
        parts = [f"modality={self.modality}", f"format={self.format}", f"n_samples={self.n_samples}",
                 f"n_features={self.n_features}"]
        if self.n_edges is not None:
            parts.append(f"n_edges={self.n_edges}")
        parts.append(f"labels={'yes' if self.has_labels else 'no'}")
        if self.has_labels:
            parts.append(f"anomaly_rate={self.label_prevalence:.4f}")
        return ", ".join(parts)


def dataset_stem(path: str) -> str:
    p = Path(path.rstrip("/"))
    return p.stem if p.suffix else p.name


# ---------------------------------------------------------------------------
# instruction parsing

PARSE_SYSTEM = """You turn an anomaly-detection request into a JSON experiment configuration.
Reply with one JSON object and nothing else, using the keys:
  "algorithm": list of model names the user asked for ([] if none named),
  "dataset_train": training data file or directory exactly as written,
  "dataset_test": test data file or null,
  "parameters": object of hyperparameters the user fixed ({} if none),
  "evaluate": true if the user asks for metrics or evaluation,
  "optimize": true if the user asks for tuning or optimisation."""

_RUN = re.compile(r"^\s*(?:please\s+)?(?:run|use|apply|try)\s+(?P<models>.+?)\s+(?:on|with|for)\s+"
                  r"(?P<train>[^\s,;]+)(?:\s+and\s+(?P<test>[^\s,;]+))?", re.IGNORECASE)
_DETECT = re.compile(r"(?:detect|find|spot)\s+anomal\w*\s+(?:in|on)\s+(?P<train>[^\s,;]+)"
                     r"(?:\s+and\s+(?P<test>[^\s,;]+))?", re.IGNORECASE)
_PARAM = re.compile(r"\b(?P<key>[A-Za-z_]\w*)\s*=\s*(?P<value>\[[^\]]*\]|[^\s,;]+)")
_EVALUATE = re.compile(r"\b(evaluat\w*|metrics?|auroc|auprc|f1)\b", re.IGNORECASE)
_OPTIMIZE = re.compile(r"\b(optimi[sz]\w*|tun(?:e|ing)|hyper-?parameter\w*)\b", re.IGNORECASE)
_UNSPECIFIED = {"a model", "any model", "the best model", "a detector", "anomaly detection", "something",
                "the best detector", "a suitable model"}


def modality_hint(text: str) -> str | None:
    t = text.lower()
    if re.search(r"time[\s-]?series", t):
        return "time_series"
    if re.search(r"\bgraph\b", t):
        return "graph"
    if re.search(r"\b(tabular|multivariate)\b", t):
        return "multivariate"
    return None


def resolve_path(name: str, data_root: str = DEFAULT_DATA_ROOT) -> str:
    """Bare file names resolve under ``data_root``; explicit paths are kept as written."""
    name = name.strip().strip("'\"`").rstrip(".,;")
    if os.path.isabs(name) or name.startswith(("./", "../")) or "/" in name.rstrip("/"):
        return name
    root = data_root if data_root.endswith("/") else data_root + "/"
    return root + name


def _scalar(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        pass
    try:
        return json.loads(text.replace("'", '"'))
    except ValueError:
        return text


def rule_parse(text: str) -> dict[str, Any]:
    """Pattern fallback for 'Run <MODEL> on <FILE> [and <FILE>]' style commands."""
    m = _RUN.search(text) or _DETECT.search(text)
    if not m:
        raise UnparseableInstruction(f"no dataset path found in {text!r}")
    models_text = m.groupdict().get("models") or ""
    if models_text.lower().strip() in _UNSPECIFIED:
        models = []
    else:
        models = [s.strip() for s in re.split(r",|\band\b", models_text) if s.strip()]
    params = {g["key"]: _scalar(g["value"]) for g in _PARAM.finditer(text)}
    return {
        "algorithm": models,
        "dataset_train": m.group("train"),
        "dataset_test": m.group("test"),
        "parameters": params,
        "evaluate": bool(_EVALUATE.search(text)),
        "optimize": bool(_OPTIMIZE.search(text)),
    }


def _extract_json(content: str) -> dict:
    fenced = re.search(r"```(?:json)?\s*(\{.*?\})\s*```", content, re.DOTALL)
    blob = fenced.group(1) if fenced else content[content.find("{"):content.rfind("}") + 1]
    data = json.loads(blob)
    if not isinstance(data, dict):
        raise ValueError("configuration is not an object")
    return data


def parse_instruction(text: str, gateway: Gateway | None = None, data_root: str = DEFAULT_DATA_ROOT,
                      check_exists: bool = True) -> ExperimentConfig:
    if not text or not text.strip():
        raise UnparseableInstruction("empty instruction")
    parsed = None
    if gateway is not None:
        try:
            content = gateway.chat("processor", PARSE_SYSTEM, text.strip())
            parsed = _extract_json(content)
            if not parsed.get("dataset_train"):
                parsed = None
        except GatewayError as exc:
            logger.warning("processor LLM unavailable (%s); using the pattern parser", exc)
        except (ValueError, AttributeError) as exc:
            logger.warning("processor LLM reply not parseable (%s); using the pattern parser", exc)
    if parsed is None:
        parsed = rule_parse(text)

    algorithms = parsed.get("algorithm") or []
    if isinstance(algorithms, str):
        algorithms = [algorithms]
    train = resolve_path(str(parsed["dataset_train"]), data_root)
    test = parsed.get("dataset_test")
    test = resolve_path(str(test), data_root) if test else None
    if check_exists:
        for path in filter(None, (train, test)):
            if not os.path.exists(path):
                raise MissingDataset(f"dataset {path} does not exist")
    params = parsed.get("parameters") or {}
    return ExperimentConfig(
        algorithms=tuple(str(a).strip() for a in algorithms if str(a).strip()),
        train_path=train,
        test_path=test,
        user_params=dict(params),
        evaluate=bool(parsed.get("evaluate", False)),
        optimize=bool(parsed.get("optimize", False)),
        modality_hint=modality_hint(text),
    )


# ---------------------------------------------------------------------------
# loading


@dataclass(frozen=True)
class ModalityEvidence:
    format: str
    columns: tuple[str, ...] = ()
    timestamp_like: bool = False
    n_features: int = 0
    preview: str = ""

    @property
    def ambiguous(self) -> bool:
        return self.format == "csv" and (self.timestamp_like or self.n_features == 1)


MODALITY_SYSTEM = """You classify a CSV file for anomaly detection.
Answer with exactly one word: multivariate (independent rows) or time_series (ordered observations)."""


def infer_modality(evidence: ModalityEvidence, gateway: Gateway | None = None,
                   hint: str | None = None) -> tuple[str, dict | None]:
    """Return ``(modality, judgement)``; ``judgement`` is set when the tabular case was ambiguous."""
    forced = {"graph_bundle": "graph", "ts_bundle": "time_series", "mat": "multivariate", "npz": "multivariate"}
    if evidence.format in forced:
        return forced[evidence.format], None
    if not evidence.ambiguous:
        return "multivariate", None

    rule = "time_series"
    judgement: dict[str, Any] = {"rule": rule, "llm": None, "hint": hint}
    if hint in ("multivariate", "time_series"):
        judgement["decided_by"] = "hint"
        return hint, judgement
    if gateway is None:
        judgement["decided_by"] = "rule"
        return rule, judgement
    user = (f"Columns: {', '.join(evidence.columns)}\n"
            f"First column looks like timestamps: {'yes' if evidence.timestamp_like else 'no'}\n"
            f"Numeric feature columns: {evidence.n_features}\n"
            f"Preview:\n{evidence.preview}")
    try:
        answer = gateway.chat("processor", MODALITY_SYSTEM, user).strip().lower()
    except GatewayError as exc:
        logger.warning("modality LLM unavailable (%s); keeping the rule decision", exc)
        judgement["decided_by"] = "rule"
        return rule, judgement
    llm = "time_series" if re.search(r"time[\s_-]?series", answer) else (
        "multivariate" if "multivariate" in answer else None)
    judgement["llm"] = llm
    if llm != rule:
        raise AmbiguousModality(f"rule says {rule}, model says {llm or answer!r}; "
                                "mention 'time series' or 'tabular' in the command to disambiguate")
    judgement["decided_by"] = "rule+llm"
    return rule, judgement


def _labels(y, name: str) -> np.ndarray:
    y = np.asarray(y).ravel()
    try:
        yf = y.astype(float)
    except (TypeError, ValueError) as exc:
        raise CorruptFile(f"{name}: labels are not numeric") from exc
    if not np.isin(yf, (0.0, 1.0)).all():
        raise CorruptFile(f"{name}: labels must be 0/1, found {sorted(set(np.unique(yf).tolist()))[:5]}")
    return yf.astype(int)


def _prevalence(y: np.ndarray) -> float:
    return int(np.count_nonzero(y == 1)) / len(y)


def _timestamp_like(series: pd.Series) -> bool:
    if str(series.name).strip().lower() in TIME_COLUMNS:
        return True
    if pd.api.types.is_numeric_dtype(series):
        return False
    try:
        parsed = pd.to_datetime(series.head(20), errors="coerce", format="mixed")
    except (TypeError, ValueError):
        return False
    return bool(parsed.notna().all())


def _read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise EmptyDataset(f"{path} is empty") from exc
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc


def _split_csv(df: pd.DataFrame, path: Path) -> tuple[np.ndarray, np.ndarray | None, bool]:
    if df.empty:
        raise EmptyDataset(f"{path} has no rows")
    y = None
    if str(df.columns[-1]).strip().lower() in LABEL_COLUMNS:
        y = _labels(df.iloc[:, -1].to_numpy(), str(path))
        df = df.iloc[:, :-1]
    ts_like = len(df.columns) > 0 and _timestamp_like(df.iloc[:, 0])
    if ts_like:
        df = df.iloc[:, 1:]
    if df.shape[1] == 0:
        raise CorruptFile(f"{path}: no feature columns")
    try:
        X = df.to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise CorruptFile(f"{path}: non-numeric feature column") from exc
    return X, y, ts_like


def _load_ts_bundle(path: Path) -> tuple[dict, DatasetProfile]:
    missing = [f for f in TS_FILES[:2] if not (path / f).exists()]
    if missing:
        raise UnsupportedFormat(f"{path}: time-series directory needs {', '.join(TS_FILES)} (missing {missing})")
    train, _, _ = _split_csv(_read_csv(path / "train.csv"), path / "train.csv")
    test, _, _ = _split_csv(_read_csv(path / "test.csv"), path / "test.csv")
    if train.shape[1] != test.shape[1]:
        raise FeatureMismatch(f"{path}: train has {train.shape[1]} channels, test has {test.shape[1]}")
    data = {"train": train, "test": test}
    labels = None
    if (path / "test_label.csv").exists():
        lab = _read_csv(path / "test_label.csv")
        labels = _labels(lab.iloc[:, -1].to_numpy(), str(path / "test_label.csv"))
        if len(labels) != len(test):
            raise CorruptFile(f"{path}: {len(labels)} labels for {len(test)} test rows")
        data["test_label"] = labels
    profile = DatasetProfile("time_series", train.shape[0], train.shape[1], labels is not None, "ts_bundle",
                             _prevalence(labels) if labels is not None else None)
    return data, profile


def _load_npz(path: Path) -> tuple[dict, DatasetProfile]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if "edge_index" in arrays or "edges" in arrays:
        x = np.asarray(arrays.get("x", arrays.get("X")), dtype=float)
        if x.ndim != 2:
            raise CorruptFile(f"{path}: node features must be a 2-D array 'x'")
        if x.shape[0] == 0:
            raise EmptyDataset(f"{path} has no nodes")
        edges = np.asarray(arrays.get("edge_index", arrays.get("edges")))
        if edges.ndim != 2 or 2 not in edges.shape:
            raise CorruptFile(f"{path}: edge list must have two columns")
        if edges.shape[0] != 2:
            edges = edges.T
        if edges.size and (edges.min() < 0 or edges.max() >= x.shape[0]):
            raise CorruptFile(f"{path}: edge endpoints out of range")
        data = {"x": x, "edge_index": edges.astype(int)}
        y = None
        if "y" in arrays:
            y = _labels(arrays["y"], str(path))
            if len(y) != x.shape[0]:
                raise CorruptFile(f"{path}: {len(y)} labels for {x.shape[0]} nodes")
            data["y"] = y
        profile = DatasetProfile("graph", x.shape[0], x.shape[1], y is not None, "graph_bundle",
                                 _prevalence(y) if y is not None else None, n_edges=int(edges.shape[1]))
        return data, profile
    if "X" not in arrays:
        raise CorruptFile(f"{path}: expected arrays 'X' (and optional 'y') or 'x' + 'edge_index'")
    return _tabular(arrays["X"], arrays.get("y"), path, "npz")


def _tabular(X, y, path: Path, fmt: str) -> tuple[dict, DatasetProfile]:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise CorruptFile(f"{path}: X must be 2-D")
    if X.shape[0] == 0:
        raise EmptyDataset(f"{path} has no rows")
    data = {"X": X}
    yl = None
    if y is not None:
        yl = _labels(y, str(path))
        if len(yl) != X.shape[0]:
            raise CorruptFile(f"{path}: {len(yl)} labels for {X.shape[0]} rows")
        data["y"] = yl
    profile = DatasetProfile("multivariate", X.shape[0], X.shape[1], yl is not None, fmt,
                             _prevalence(yl) if yl is not None else None)
    return data, profile


def load_dataset(path: str | os.PathLike, gateway: Gateway | None = None,
                 hint: str | None = None) -> tuple[dict, DatasetProfile, dict | None]:
    """Read and profile a dataset without modifying it.

    Returns ``(data, profile, modality_judgement)``; the judgement is only
    produced for CSV files whose modality is ambiguous.
    """
    p = Path(path)
    if not p.exists():
        raise MissingDataset(f"dataset {p} does not exist")
    if p.is_dir():
        data, profile = _load_ts_bundle(p)
        return data, profile, None
    suffix = p.suffix.lower()
    if suffix == ".mat":
        try:
            mat = scipy.io.loadmat(p)
        except (scipy.io.matlab.MatReadError, ValueError, NotImplementedError, OSError, TypeError) as exc:
            raise CorruptFile(f"{p}: {exc}") from exc
        if "X" not in mat:
            raise CorruptFile(f"{p}: expected a matrix named 'X'")
        data, profile = _tabular(mat["X"], mat.get("y"), p, "mat")
        return data, profile, None
    if suffix == ".npz":
        data, profile = _load_npz(p)
        return data, profile, None
    if suffix == ".csv":
        df = _read_csv(p)
        X, y, ts_like = _split_csv(df, p)
        evidence = ModalityEvidence("csv", tuple(map(str, df.columns)), ts_like, X.shape[1],
                                    df.head(3).to_csv(index=False))
        modality, judgement = infer_modality(evidence, gateway, hint)
        if modality == "time_series":
            data = {"train": X, "test": X}
            if y is not None:
                data["test_label"] = y
        else:
            data = {"X": X, **({"y": y} if y is not None else {})}
        profile = DatasetProfile(modality, X.shape[0], X.shape[1], y is not None, "csv",
                                 _prevalence(y) if y is not None else None)
        return data, profile, judgement
    raise UnsupportedFormat(f"{p}: unsupported format {suffix or '(none)'}; use .mat, .csv, .npz or a "
                            "train/test/test_label directory")


def supervision_type(train: DatasetProfile, test: DatasetProfile | None) -> str:
    if train.has_labels and train.format != "ts_bundle":
        return "supervised"
    if (test is not None and test.has_labels) or (train.format == "ts_bundle" and train.has_labels):
        return "unsupervised_with_evaluation"
    return "unsupervised"


# ---------------------------------------------------------------------------


class Processor:
    def __init__(self, gateway: Gateway | None, data_root: str = DEFAULT_DATA_ROOT,
                 echo: Callable[[str], None] = print):
        self.gateway = gateway
        self.data_root = data_root
        self.echo = echo

    def run(self, ws, instruction: str) -> ExperimentConfig:
        ws.put("raw_instruction", instruction)
        config = parse_instruction(instruction, self.gateway, self.data_root)
        self.echo(config.describe())
        ws.put("config", config)
        _, profile, judgement = load_dataset(config.train_path, self.gateway, config.modality_hint)
        if judgement is not None:
            ws.put("modality_judgement", judgement)
        ws.put("dataset_profile", profile)
        test_profile = None
        if config.test_path:
            _, test_profile, _ = load_dataset(config.test_path, self.gateway, config.modality_hint or profile.modality)
            if test_profile.n_features != profile.n_features:
                raise FeatureMismatch(f"train has {profile.n_features} features, test has {test_profile.n_features}")
            ws.put("test_profile", test_profile)
        ws.put("supervision", supervision_type(profile, test_profile))
        self.echo(f"Dataset profile: {profile.describe()}")
        return config
