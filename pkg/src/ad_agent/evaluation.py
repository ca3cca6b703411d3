"""Evaluator and Optimizer agents plus the detection metrics they report."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

from ad_agent.codegen import (
    DEFAULT_TIMEOUT,
    ENV_PARAMS,
    ENV_TEST,
    ENV_TRAIN,
    GeneratedScript,
    run_script,
    stderr_excerpt,
    write_npz,
)
from ad_agent.errors import DegenerateLabels, GatewayError, ProposerFailure, RuntimeFailure
from ad_agent.gateway import Gateway
from ad_agent.info_miner import ModelDocSummary
from ad_agent.processor import dataset_stem, load_dataset

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 5
DEFAULT_ANOMALY_RATE = 0.1
DEFAULT_RESULTS_DIR = "./results"


# ---------------------------------------------------------------------------
# metrics


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{len(s)} scores for {len(y)} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    y = y.astype(int)
    if y.min(initial=1) == y.max(initial=0) or len(y) == 0:
        raise DegenerateLabels("both classes are needed")
    return s, y


def compute_auroc(scores, labels) -> float:
    """Mann-Whitney form: P(random positive outscores random negative), ties count 1/2."""
    s, y = _check(scores, labels)
    ranks = rankdata(s)  # average ranks for ties
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_auprc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of precision x recall increment."""
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    increments = np.diff(np.r_[0.0, recall])
    return float(np.sum(increments * precision))


@dataclass(frozen=True)
class ThresholdRule:
    """Binarisation rule: a fixed cut, or the (1 - anomaly_rate) score quantile."""

    anomaly_rate: float = DEFAULT_ANOMALY_RATE
    threshold: float | None = None

    def cut(self, scores: np.ndarray) -> float:
        if self.threshold is not None:
            return self.threshold
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ValueError("anomaly_rate must lie in [0, 1]")
        return float(np.percentile(scores, 100.0 * (1.0 - self.anomaly_rate)))


def f1_from_predictions(pred, labels) -> float:
    p = np.asarray(pred).ravel().astype(int)
    y = np.asarray(labels).ravel().astype(int)
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def compute_f1(scores, labels, threshold_rule: ThresholdRule | None = None) -> float:
    s, y = _check(scores, labels)
    rule = threshold_rule or ThresholdRule()
    return f1_from_predictions((s > rule.cut(s)).astype(int), y)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvaluationReport:
    model: str
    dataset: str
    n_test: int
    params: dict[str, Any] = field(default_factory=dict)
    wall_time: float = 0.0
    auroc: float | None = None
    auprc: float | None = None
    f1: float | None = None
    warnings: tuple[str, ...] = ()
    n_flagged: int | None = None

    def __post_init__(self):
        for name in ("auroc", "auprc", "f1"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def metric(self, name: str) -> float | None:
        return getattr(self, name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["warnings"] = list(self.warnings)
        return d


@dataclass(frozen=True)
class OptimizationTrial:
    index: int
    params: dict[str, Any]
    report: EvaluationReport
    proposed_by: str = "initial"
    objective: float | None = None

    def __post_init__(self):
        if self.proposed_by not in ("initial", "llm", "stub"):
            raise ValueError(f"unknown proposer {self.proposed_by!r}")
        if self.index < 0:
            raise ValueError("trial index must be >= 0")

    def to_dict(self) -> dict:
        return {"index": self.index, "params": self.params, "proposed_by": self.proposed_by,
                "objective": self.objective, "report": self.report.to_dict()}


@dataclass(frozen=True)
class RawResult:
    scores: np.ndarray
    labels_pred: np.ndarray
    metrics: dict
    wall_time: float


def run_pipeline(script: GeneratedScript, params: dict[str, Any] | None = None, train_path: str | None = None,
                 test_path: str | None = None, timeout: float = DEFAULT_TIMEOUT, interpreter_cmd: str | None = None,
                 extra_env: dict[str, str] | None = None, cwd: str | None = None) -> RawResult:
    """Run a validated script on real data (relative paths resolve against ``cwd``)."""
    env = {}
    if params is not None:
        env[ENV_PARAMS] = json.dumps(params)
    if train_path:
        env[ENV_TRAIN] = str(train_path)
    if test_path:
        env[ENV_TEST] = str(test_path)
    name = Path(script.output_path).name
    code, _out, err, result, sandbox, elapsed = run_script(
        script.source_text, name, env, timeout, interpreter_cmd, cwd=cwd or os.getcwd(), extra_env=extra_env)
    if code is None:
        raise RuntimeFailure(f"pipeline exceeded {timeout:g} s", kind="timeout")
    if code != 0:
        excerpt = stderr_excerpt(err, name, sandbox)
        raise RuntimeFailure(f"pipeline failed on real data: {excerpt.splitlines()[-1] if excerpt else code}",
                             stderr=excerpt)
    if not isinstance(result, dict) or "scores" not in result:
        raise RuntimeFailure("pipeline exited 0 without a valid result file", kind="malformed_output")
    scores = np.asarray(result["scores"], dtype=float)
    labels_pred = np.asarray(result.get("labels_pred", []), dtype=int)
    return RawResult(scores, labels_pred, result.get("metrics") or {}, elapsed)


def ground_truth(path: str) -> np.ndarray | None:
    data, _, _ = load_dataset(path, hint=None)
    for key in ("y", "test_label"):
        if key in data:
            return np.asarray(data[key]).astype(int)
    return None


def build_report(model: str, dataset: str, raw: RawResult, labels: np.ndarray | None, params: dict,
                 anomaly_rate: float) -> EvaluationReport:
    warnings: list[str] = []
    metrics: dict[str, float | None] = {"auroc": None, "auprc": None, "f1": None}
    if labels is not None:
        if len(labels) != len(raw.scores):
            raise RuntimeFailure(f"{len(raw.scores)} scores for {len(labels)} labels", kind="malformed_output")
        try:
            metrics["auroc"] = compute_auroc(raw.scores, labels)
            metrics["auprc"] = compute_auprc(raw.scores, labels)
            metrics["f1"] = compute_f1(raw.scores, labels, ThresholdRule(anomaly_rate))
        except DegenerateLabels as exc:
            warnings.append(f"metrics skipped: {exc}")
            metrics = {"auroc": None, "auprc": None, "f1": None}
        if metrics["auroc"] is not None and metrics["auroc"] < 0.5:
            warnings.append(f"AUROC {metrics['auroc']:.4f} is below chance; check the score orientation")
    return EvaluationReport(model, dataset, len(raw.scores), dict(params), raw.wall_time, **metrics,
                            warnings=tuple(warnings), n_flagged=int(np.sum(raw.labels_pred == 1)))


# ---------------------------------------------------------------------------
# proposers


class Proposer(Protocol):
    kind: str

    def propose(self, history: Sequence[OptimizationTrial], doc: ModelDocSummary, objective: str) -> dict: ...


class StubProposer:
    """Replays a fixed list of parameter updates, one per trial."""

    kind = "stub"

    def __init__(self, proposals: Sequence[dict]):
        self.proposals = list(proposals)
        self._i = 0

    def propose(self, history, doc, objective):
        if not self.proposals:
            raise ProposerFailure("no proposals configured")
        out = self.proposals[min(self._i, len(self.proposals) - 1)]
        self._i += 1
        return dict(out)


OPTIMIZER_SYSTEM = """You tune hyperparameters of an anomaly detector.
You see every trial so far (parameters and the {objective} it reached on the assessment data).
Propose the next configuration to try. Reply with one JSON object mapping parameter names to values,
using only these parameters: {names}."""

OPTIMIZER_STRICT = " Reply with the JSON object only, no prose."


class LLMProposer:
    kind = "llm"

    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def propose(self, history, doc, objective):
        names = [p.name for p in doc.init_params]
        lines = [f"Model: {doc.model} ({doc.library})", "Parameters:"]
        for p in doc.init_params:
            lines.append(f"- {p.name}: {p.type_text or '?'}" + (" (required)" if p.required
                                                                  else f", default {p.default_value!r}"))
        lines.append("Trials:")
        for t in history:
            score = "failed" if t.objective is None else f"{t.objective:.4f}"
            lines.append(f"- trial {t.index}: {json.dumps(t.params, sort_keys=True)} -> {objective} {score}")
        user = "\n".join(lines)
        system = OPTIMIZER_SYSTEM.format(objective=objective, names=", ".join(names))
        for suffix in ("", OPTIMIZER_STRICT):
            try:
                reply = self.gateway.chat("optimizer", system + suffix, user)
            except GatewayError as exc:
                raise ProposerFailure(f"optimizer call failed: {exc}") from exc
            try:
                return _json_object(reply)
            except ValueError:
                logger.warning("unparseable optimizer proposal: %r", reply[:200])
        raise ProposerFailure("optimizer reply was not a JSON object")


def _json_object(text: str) -> dict:
    m = re.search(r"```(?:json)?\s*(\{.*?\})\s*```", text, re.DOTALL)
    blob = m.group(1) if m else text[text.find("{"):text.rfind("}") + 1]
    obj = json.loads(blob)
    if not isinstance(obj, dict):
        raise ValueError("not an object")
    return obj


def _compatible(value: Any, reference: Any) -> bool:
    if reference is None:
        return True
    if isinstance(reference, bool):
        return isinstance(value, bool)
    if isinstance(reference, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    if isinstance(reference, list):
        return isinstance(value, list)
    return isinstance(value, type(reference))


def validate_proposal(proposal: dict, doc: ModelDocSummary) -> dict:
    clean = {}
    for name, value in proposal.items():
        spec = doc.param(name)
        if spec is None:
            raise ProposerFailure(f"{name!r} is not a documented parameter of {doc.model}")
        if not _compatible(value, spec.default_value):
            raise ProposerFailure(f"{name}={value!r} does not match the type of default {spec.default_value!r}")
        if isinstance(spec.default_value, int) and not isinstance(spec.default_value, bool) \
                and isinstance(value, float) and value.is_integer():
            value = int(value)
        clean[name] = value
    return clean


# ---------------------------------------------------------------------------
# assessment data


@dataclass
class Assessment:
    train_path: str | None
    test_path: str | None
    labels: np.ndarray
    description: str
    warning: str | None = None


def _split_tabular(path: str, workdir: Path, seed: int) -> tuple[str, str, np.ndarray] | None:
    data, profile, _ = load_dataset(path)
    if profile.modality != "multivariate" or "y" not in data:
        return None
    X, y = data["X"], data["y"]
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(y))
    n_val = max(1, int(round(0.2 * len(y))))
    val, fit = idx[:n_val], idx[n_val:]
    if len(np.unique(y[val])) < 2:
        return None
    train_file, val_file = workdir / "fit_part.npz", workdir / "val_part.npz"
    write_npz(train_file, {"X": X[fit], "y": y[fit]})
    write_npz(val_file, {"X": X[val], "y": y[val]})
    return str(train_file), str(val_file), y[val]


def choose_assessment(train_path: str, test_path: str | None, workdir: Path, seed: int = 0) -> Assessment:
    train_labels = ground_truth(train_path)
    test_labels = ground_truth(test_path) if test_path else None
    if train_labels is not None and test_path and test_labels is not None:
        split = _split_tabular(train_path, workdir, seed)
        if split is not None:
            tr, va, yv = split
            return Assessment(tr, va, yv, "80/20 validation split of the training data")
    if test_path and test_labels is not None:
        return Assessment(None, None, test_labels, "test set",
                          "tuning on the test set itself; reported improvements may be optimistic")
    if train_labels is not None:
        return Assessment(None, train_path, train_labels, "training set",
                          "tuning and scoring on the same labelled data; expect optimistic numbers")
    raise DegenerateLabels("hyperparameter optimisation needs labelled data")


def optimize(script: GeneratedScript, doc: ModelDocSummary, train_path: str, test_path: str | None,
             proposer: Proposer, budget: int = DEFAULT_BUDGET, objective: str = "auroc",
             anomaly_rate: float = DEFAULT_ANOMALY_RATE, timeout: float = DEFAULT_TIMEOUT,
             interpreter_cmd: str | None = None, extra_env: dict[str, str] | None = None, seed: int = 0,
             echo: Callable[[str], None] = print) -> tuple[dict, list[OptimizationTrial]]:
    """Trial 0 is the script's current configuration; returns the best params and the history."""
    base = {k: v for k, v in script.params_used.items()}
    dataset = dataset_stem(train_path)
    trials: list[OptimizationTrial] = []
    with tempfile.TemporaryDirectory(prefix="ad_agent_opt_") as tmp:
        assessment = choose_assessment(train_path, test_path, Path(tmp), seed)
        if assessment.warning:
            logger.warning(assessment.warning)
            echo(f"Warning: {assessment.warning}")
        echo(f"Assessing on: {assessment.description}")

        def trial(index: int, params: dict, kind: str) -> OptimizationTrial:
            try:
                raw = run_pipeline(script, params, assessment.train_path, assessment.test_path, timeout,
                                   interpreter_cmd, extra_env)
                report = build_report(script.model, dataset, raw, assessment.labels, params, anomaly_rate)
                value = report.metric(objective)
            except RuntimeFailure as exc:
                report = EvaluationReport(script.model, dataset, 0, dict(params), warnings=(str(exc),))
                value = None
            t = OptimizationTrial(index, dict(params), report, kind, value)
            shown = "failed" if value is None else f"{value:.4f}"
            echo(f"Trial {index} ({kind}): {json.dumps(params, sort_keys=True, default=str)} -> {objective} {shown}")
            return t

        trials.append(trial(0, base, "initial"))
        for i in range(1, budget + 1):
            try:
                try:
                    proposal = validate_proposal(proposer.propose(trials, doc, objective), doc)
                except ProposerFailure:
                    if proposer.kind != "llm":
                        raise
                    proposal = validate_proposal(proposer.propose(trials, doc, objective), doc)
            except ProposerFailure as exc:
                echo(f"Trial {i} skipped: {exc}")
                continue
            trials.append(trial(len(trials), {**base, **proposal}, proposer.kind))

    best = trials[0]
    for t in trials[1:]:
        if t.objective is not None and (best.objective is None or t.objective > best.objective):
            best = t
    return dict(best.params), trials


def best_so_far(trials: Sequence[OptimizationTrial]) -> list[float]:
    out, best = [], -math.inf
    for t in trials:
        if t.objective is not None:
            best = max(best, t.objective)
        out.append(best)
    return out


# ---------------------------------------------------------------------------


class Evaluator:
    def __init__(self, results_dir: str = DEFAULT_RESULTS_DIR, timeout: float = DEFAULT_TIMEOUT,
                 interpreter_cmd: str | None = None, extra_env: dict[str, str] | None = None,
                 echo: Callable[[str], None] = print):
        self.results_dir = results_dir
        self.timeout = timeout
        self.interpreter_cmd = interpreter_cmd
        self.extra_env = extra_env
        self.echo = echo

    def anomaly_rate(self, ws) -> float:
        profile = ws.dataset_profile
        if profile.has_labels and profile.format != "ts_bundle":
            return profile.label_prevalence
        return DEFAULT_ANOMALY_RATE

    def evaluate(self, ws, model: str, params: dict | None = None) -> EvaluationReport:
        script = ws.latest_script(model)
        config = ws.config
        self.echo(f"=== [Evaluator] Running pipeline for {model} ===")
        raw = run_pipeline(script, params, timeout=self.timeout, interpreter_cmd=self.interpreter_cmd,
                           extra_env=self.extra_env)
        labels = ground_truth(config.test_path or config.train_path)
        report = build_report(model, dataset_stem(config.train_path), raw, labels,
                              params if params is not None else script.params_used, self.anomaly_rate(ws))
        for line in summarize(report):
            self.echo(line)
        self.write(f"{model}_{report.dataset}_report.json", report.to_dict())
        self.echo(f"=== [Evaluator] Evaluation complete for {model} ===")
        return report

    def write(self, name: str, payload) -> Path:
        path = Path(self.results_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")
        return path


def summarize(report: EvaluationReport) -> list[str]:
    lines = [f"Samples scored: {report.n_test}"]
    if report.n_flagged is not None:
        lines.append(f"Flagged as anomalous: {report.n_flagged}")
    for name in ("auroc", "auprc", "f1"):
        v = report.metric(name)
        if v is not None:
            lines.append(f"{name.upper()}: {v:.4f}")
    if report.auroc is None:
        lines.append("No ground-truth labels: metrics not computed")
    lines += [f"Warning: {w}" for w in report.warnings]
    return lines


class Optimizer:
    def __init__(self, proposer: Proposer, evaluator: Evaluator, budget: int = DEFAULT_BUDGET,
                 echo: Callable[[str], None] = print):
        self.proposer = proposer
        self.evaluator = evaluator
        self.budget = budget
        self.echo = echo

    def run(self, ws, model: str, objective: str) -> tuple[dict, list[OptimizationTrial]]:
        self.echo(f"=== [Optimizer] Tuning hyperparameters for {model} ===")
        script = ws.latest_script(model)
        config = ws.config
        best, trials = optimize(script, ws.model_docs[model], config.train_path, config.test_path, self.proposer,
                                self.budget, objective, self.evaluator.anomaly_rate(ws), self.evaluator.timeout,
                                self.evaluator.interpreter_cmd, self.evaluator.extra_env, echo=self.echo)
        for t in trials:
            ws.put("optimization", (model, t))
        before, after = trials[0].objective, max((t.objective for t in trials if t.objective is not None),
                                                 default=None)
        if before is not None and after is not None:
            self.echo(f"{objective.upper()} on assessment data: {before:.4f} -> {after:.4f}")
        self.evaluator.write(f"{model}_{dataset_stem(config.train_path)}_trials.json", [t.to_dict() for t in trials])
        self.echo(f"Best parameters: {json.dumps(best, sort_keys=True, default=str)}")
        self.echo(f"=== [Optimizer] Optimization complete for {model} ===")
        return best, trials

