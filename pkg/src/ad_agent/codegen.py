"""Code Generator and Reviewer agents.

A generated pipeline is three parts: a loader preamble emitted here (dataset
paths, parameter dict, environment overrides), a model section written by the
LLM, and an epilogue emitted here that writes the result file. The Reviewer
runs the whole script in a child process against a small synthetic sample and
classifies any failure; the Generator then repairs the model section.
"""

from __future__ import annotations

import ast
import io
import json
import logging
import os
import pprint
import re
import shlex
import shutil
import signal
import subprocess
import sys
import tempfile
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ad_agent.errors import GatewayError, PipelineFailure, PromptBudgetExceeded, SandboxFailure
from ad_agent.gateway import Gateway
from ad_agent.info_miner import ModelDocSummary, render_doc_summary
from ad_agent.processor import DatasetProfile, ExperimentConfig

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = "./generated_scripts"
DEFAULT_MAX_ITERS = 3
DEFAULT_TIMEOUT = 300.0
KILL_GRACE = 5.0

ENV_DATA = "AD_AGENT_DATA_OVERRIDE"
ENV_TRAIN = "AD_AGENT_TRAIN_OVERRIDE"
ENV_TEST = "AD_AGENT_TEST_OVERRIDE"
ENV_RESULT = "AD_AGENT_RESULT_PATH"
ENV_PARAMS = "AD_AGENT_PARAMS_OVERRIDE"

CATEGORIES = ("import_error", "missing_or_bad_argument", "runtime_error", "data_constraint_violation", "timeout",
              "none")
BODY_START = "# ---- model section ----"
BODY_END = "# ---- end of model section ----"


@dataclass(frozen=True)
class GeneratedScript:
    model: str
    library: str
    source_text: str
    output_path: str
    revision: int = 0
    params_used: dict[str, Any] = field(default_factory=dict)

    @property
    def body(self) -> str:
        return extract_body(self.source_text)


@dataclass(frozen=True)
class ReviewResult:
    verdict: str
    error_category: str = "none"
    stderr_excerpt: str = ""
    fix_hint: str = ""
    duration: float = 0.0

    def __post_init__(self):
        if self.verdict not in ("pass", "fail"):
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if self.error_category not in CATEGORIES:
            raise ValueError(f"unknown category {self.error_category!r}")
        if (self.verdict == "pass") != (self.error_category == "none"):
            raise ValueError("verdict 'pass' iff error_category 'none'")

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


def output_path_for(model: str, train_path: str, out_dir: str = DEFAULT_OUT_DIR) -> str:
    from ad_agent.processor import dataset_stem

    return f"{out_dir.rstrip('/')}/{model}_{dataset_stem(train_path)}.py"


# ---------------------------------------------------------------------------
# synthetic samples


@dataclass(frozen=True)
class SyntheticSample:
    modality: str
    arrays: dict[str, np.ndarray]
    seed: int

    def write(self, directory: str | os.PathLike) -> Path:
        """Stage the sample under ``directory`` in the format the preamble loader reads."""
        directory = Path(directory)
        if self.modality == "time_series":
            target = directory / "sample_series"
            target.mkdir(parents=True, exist_ok=True)
            for name in ("train", "test"):
                _write_csv(target / f"{name}.csv", self.arrays[name])
            if "test_label" in self.arrays:
                _write_csv(target / "test_label.csv", self.arrays["test_label"].reshape(-1, 1), header=["label"])
            return target
        target = directory / "sample.npz"
        write_npz(target, self.arrays)
        return target

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        _npz_stream(buf, self.arrays)
        return buf.getvalue()


def _npz_stream(fh, arrays: dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(fh, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as out:
                np.lib.format.write_array(out, np.ascontiguousarray(arrays[name]), allow_pickle=False)


def write_npz(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    """``np.savez`` with fixed zip timestamps, so equal arrays give equal bytes."""
    with open(path, "wb") as fh:
        _npz_stream(fh, arrays)


def _write_csv(path: Path, arr: np.ndarray, header: list[str] | None = None) -> None:
    arr = np.asarray(arr)
    header = header or [f"c{i}" for i in range(arr.shape[1])]
    lines = [",".join(header)] + [",".join(repr(float(v)) if arr.dtype.kind == "f" else str(v) for v in row)
                                  for row in arr]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def make_synthetic_sample(profile: DatasetProfile, seed: int = 0, with_labels: bool | None = None) -> SyntheticSample:
    """Tiny modality-matched dataset: 16 rows, a 12-node/24-edge graph, or 32-step series."""
    rng = np.random.default_rng(seed)
    labels = profile.has_labels if with_labels is None else with_labels
    d = profile.n_features
    if profile.modality == "graph":
        n = 12
        src = np.arange(n)
        ring = np.stack([src, (src + 1) % n])
        chords = np.stack([src, (src + 5) % n])
        edges = np.concatenate([ring, chords], axis=1).astype(np.int64)
        x = rng.normal(size=(n, d))
        x[-2:] += 4.0
        arrays = {"x": x, "edge_index": edges}
        if labels:
            arrays["y"] = np.array([0] * (n - 2) + [1, 1], dtype=np.int64)
        return SyntheticSample("graph", arrays, seed)
    if profile.modality == "time_series":
        n = 32
        t = np.arange(n)[:, None]
        base = np.sin(t / 3.0 + np.arange(d)[None, :])
        train = base + 0.1 * rng.normal(size=(n, d))
        test = base + 0.1 * rng.normal(size=(n, d))
        test[20:23] += 3.0
        arrays = {"train": train, "test": test}
        if labels:
            lab = np.zeros(n, dtype=np.int64)
            lab[20:23] = 1
            arrays["test_label"] = lab
        return SyntheticSample("time_series", arrays, seed)
    n = 16
    X = rng.normal(size=(n, d))
    X[-2:] += 4.0
    arrays = {"X": X}
    if labels:
        arrays["y"] = np.array([0] * (n - 2) + [1, 1], dtype=np.int64)
    return SyntheticSample("multivariate", arrays, seed)


# ---------------------------------------------------------------------------
# script assembly

_LOADER = '''
def load_data(path):
    """Read a .mat/.npz/.csv file or a train/test/test_label directory into a dict of arrays."""
    if os.path.isdir(path):
        import pandas as pd
        out = {"train": pd.read_csv(os.path.join(path, "train.csv")).to_numpy(dtype=float),
               "test": pd.read_csv(os.path.join(path, "test.csv")).to_numpy(dtype=float)}
        label_file = os.path.join(path, "test_label.csv")
        if os.path.exists(label_file):
            out["test_label"] = pd.read_csv(label_file).to_numpy()[:, -1].astype(int)
        return out
    ext = os.path.splitext(path)[1].lower()
    if ext == ".mat":
        from scipy.io import loadmat
        mat = loadmat(path)
        out = {"X": np.asarray(mat["X"], dtype=float)}
        if "y" in mat:
            out["y"] = np.asarray(mat["y"]).ravel().astype(int)
        return out
    if ext == ".npz":
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    if ext == ".csv":
        import pandas as pd
        df = pd.read_csv(path)
        out = {}
        if str(df.columns[-1]).strip().lower() in ("label", "y"):
            out["y"] = df.iloc[:, -1].to_numpy().astype(int)
            df = df.iloc[:, :-1]
        first = df.columns[0]
        if str(first).strip().lower() in ("timestamp", "time", "date", "datetime", "ts") or df[first].dtype == object:
            df = df.iloc[:, 1:]
        out["X"] = df.to_numpy(dtype=float)
        if MODALITY == "time_series":
            out = {"train": out["X"], "test": out["X"], **({"test_label": out["y"]} if "y" in out else {})}
        return out
    raise ValueError("unsupported dataset format: " + path)
'''

_VIEWS = {
    "multivariate": '''
X_train, y_train = train["X"], train.get("y")
X_test, y_test = test["X"], test.get("y")
''',
    "graph": '''
X_train, edge_index_train, y_train = train["x"], train["edge_index"], train.get("y")
X_test, edge_index_test, y_test = test["x"], test["edge_index"], test.get("y")
''',
    "time_series": '''
X_train, y_train = train["train"], None
X_test, y_test = test["test"], test.get("test_label")
''',
}

_EPILOGUE = '''
scores = np.asarray(scores, dtype=float).ravel()
labels_pred = np.asarray(labels_pred).ravel().astype(int)
if len(scores) != len(X_test) or len(labels_pred) != len(X_test):
    raise ValueError("expected %d scores and predictions, got %d and %d" % (len(X_test), len(scores), len(labels_pred)))
result = {"scores": scores.tolist(), "labels_pred": labels_pred.tolist(), "metrics": {}}
if EVALUATE and y_test is not None and len(np.unique(y_test)) == 2:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    pos = np.asarray(y_test) == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    result["metrics"]["auroc"] = float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
result_dir = os.path.dirname(RESULT_PATH)
if result_dir:
    os.makedirs(result_dir, exist_ok=True)
with open(RESULT_PATH, "w") as fh:
    json.dump(result, fh)
print("Saved results to " + RESULT_PATH)
'''


def build_preamble(model: str, library: str, modality: str, config: ExperimentConfig, params: dict[str, Any],
                   evaluate: bool) -> str:
    from ad_agent.processor import dataset_stem

    stem = dataset_stem(config.train_path)
    test_default = config.test_path or config.train_path
    lines = [
        f"# Anomaly-detection pipeline: {model} ({library}) on {stem}",
        "import json",
        "import os",
        "",
        "import numpy as np",
        "",
        f"MODALITY = {modality!r}",
        f"TRAIN_PATH = os.environ.get({ENV_TRAIN!r}) or os.environ.get({ENV_DATA!r}) or {config.train_path!r}",
        f"TEST_PATH = os.environ.get({ENV_TEST!r}) or os.environ.get({ENV_DATA!r}) or {test_default!r}",
        f"RESULT_PATH = os.environ.get({ENV_RESULT!r}) or {f'./results/{model}_{stem}_result.json'!r}",
        f"EVALUATE = {bool(evaluate)!r}",
        "PARAMS = " + pprint.pformat(params, sort_dicts=False, width=100),
        f"PARAMS.update(json.loads(os.environ.get({ENV_PARAMS!r}) or '{{}}'))",
    ]
    return "\n".join(lines) + "\n" + _LOADER + "\n\ntrain = load_data(TRAIN_PATH)\ntest = load_data(TEST_PATH)\n" + \
        _VIEWS[modality]


def assemble(preamble: str, body: str) -> str:
    return f"{preamble}\n{BODY_START}\n{body.strip()}\n{BODY_END}\n{_EPILOGUE}"


def extract_body(source: str) -> str:
    start, end = source.find(BODY_START), source.find(BODY_END)
    if start < 0 or end < 0:
        return source
    return source[start + len(BODY_START):end].strip()


def replace_body(source: str, body: str) -> str:
    start, end = source.find(BODY_START), source.find(BODY_END)
    return source[:start] + f"{BODY_START}\n{body.strip()}\n" + source[end:]


def extract_code(content: str) -> str:
    blocks = re.findall(r"```(?:python|py)?[ \t]*\n(.*?)```", content, re.DOTALL)
    if blocks:
        return max(blocks, key=len).strip()
    return content.strip()


def _preamble_params(source: str) -> dict[str, Any]:
    try:
        tree = ast.parse(source)
    except SyntaxError:
        return {}
    for node in tree.body:
        if isinstance(node, ast.Assign) and any(isinstance(t, ast.Name) and t.id == "PARAMS" for t in node.targets):
            try:
                return dict(ast.literal_eval(node.value))
            except ValueError:
                return {}
    return {}


def params_in_body(body: str) -> set[str]:
    """Parameter names the model section adds on top of ``PARAMS``.

    Counts ``PARAMS["k"] = ...``, ``PARAMS.update(k=...)`` and explicit keywords
    of any call that also unpacks ``**PARAMS``.
    """
    try:
        tree = ast.parse(body)
    except SyntaxError:
        return set()
    names: set[str] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Subscript) and isinstance(node.value, ast.Name) and node.value.id == "PARAMS" \
                and isinstance(node.ctx, ast.Store) and isinstance(node.slice, ast.Constant):
            names.add(str(node.slice.value))
        if isinstance(node, ast.Call):
            kws = node.keywords
            unpacks = any(k.arg is None and isinstance(k.value, ast.Name) and k.value.id == "PARAMS" for k in kws)
            is_update = isinstance(node.func, ast.Attribute) and node.func.attr == "update" \
                and isinstance(node.func.value, ast.Name) and node.func.value.id == "PARAMS"
            if unpacks or is_update:
                names.update(k.arg for k in kws if k.arg is not None)
    return names


def params_used_by(source: str) -> dict[str, Any]:
    params = _preamble_params(source)
    for name in params_in_body(extract_body(source)) - set(params):
        params[name] = None
    return params


# ---------------------------------------------------------------------------
# dry run

_EXC_LINE = re.compile(r"^(?P<cls>[A-Za-z_][\w.]*(?:Error|Exception|Exit|Interrupt|Warning))(?::\s*(?P<msg>.*))?$")
_DATA_PATTERN = re.compile(r"binary|target|label|shape|size|mismatch|dimension|must be between|out of range|"
                           r"range|input|nan|infinity|sequence length|window|samples|expected \d+", re.IGNORECASE)
_ARG_PATTERN = re.compile(r"argument|keyword|positional|__init__|parameter", re.IGNORECASE)


def classify_failure(stderr: str) -> str:
    exc = None
    for line in reversed(stderr.strip().splitlines()):
        m = _EXC_LINE.match(line.strip())
        if m:
            exc = m
            break
    if exc is None:
        return "runtime_error"
    cls = exc.group("cls").rsplit(".", 1)[-1]
    msg = exc.group("msg") or ""
    if cls in ("ImportError", "ModuleNotFoundError", "NameError"):
        return "import_error"
    if cls == "AttributeError" and "module" in msg:
        return "import_error"
    if cls == "TypeError":
        return "missing_or_bad_argument" if _ARG_PATTERN.search(msg) else "runtime_error"
    if cls in ("ValueError", "RuntimeError", "AssertionError", "IndexError") and _DATA_PATTERN.search(msg):
        return "data_constraint_violation"
    return "runtime_error"


def stderr_excerpt(stderr: str, script_name: str, sandbox: str | None = None, max_lines: int = 12) -> str:
    """Script frames plus the final exception, with sandbox paths removed."""
    if sandbox:
        stderr = stderr.replace(sandbox + os.sep, "").replace(sandbox, "<sandbox>")
    lines = stderr.rstrip().splitlines()
    keep: list[str] = []
    for i, line in enumerate(lines):
        if line.strip().startswith("File ") and script_name in line:
            keep.append(line.strip())
            if i + 1 < len(lines) and not lines[i + 1].strip().startswith(("File ", "Traceback")):
                keep.append("    " + lines[i + 1].strip())
    tail_start = None
    for i in range(len(lines) - 1, -1, -1):
        if _EXC_LINE.match(lines[i].strip()):
            tail_start = i
            break
    if tail_start is None:
        tail = [ln for ln in lines[-5:]]
    else:
        tail = lines[tail_start:]
    return "\n".join(keep + [ln.rstrip() for ln in tail][-max_lines:]).strip()


def _interpreter(cmd: str | None) -> list[str]:
    return shlex.split(cmd) if cmd else [sys.executable]


def run_script(source: str, script_name: str, env_overrides: dict[str, str], timeout: float,
               interpreter_cmd: str | None = None, cwd: str | None = None,
               extra_env: dict[str, str] | None = None, stage: Callable[[Path], dict[str, str]] | None = None):
    """Execute ``source`` in a fresh temp directory; returns (returncode|None, stdout, stderr, result, sandbox, secs).

    ``returncode`` is ``None`` on timeout. ``stage`` may write inputs into the
    sandbox and return more environment variables. When ``cwd`` is given the
    child runs there instead (used for real-data runs with relative paths).
    """
    sandbox = tempfile.mkdtemp(prefix="ad_agent_run_")
    try:
        script_path = Path(sandbox) / script_name
        script_path.write_text(source, encoding="utf-8")
        env = {k: v for k, v in os.environ.items()
               if k not in (ENV_DATA, ENV_TRAIN, ENV_TEST, ENV_PARAMS, ENV_RESULT, "AD_AGENT_API_KEY")}
        env.update(extra_env or {})
        env["PYTHONDONTWRITEBYTECODE"] = "1"
        result_path = Path(sandbox) / "result.json"
        env[ENV_RESULT] = str(result_path)
        if stage is not None:
            env.update(stage(Path(sandbox)))
        env.update(env_overrides)
        argv = _interpreter(interpreter_cmd) + [str(script_path) if cwd else script_name]
        t0 = time.perf_counter()
        try:
            proc = subprocess.Popen(argv, cwd=cwd or sandbox, env=env, stdout=subprocess.PIPE,
                                    stderr=subprocess.PIPE, start_new_session=True, text=True)
        except OSError as exc:
            raise SandboxFailure(f"could not launch {argv[0]}: {exc}") from exc
        try:
            out, err = proc.communicate(timeout=timeout)
            code: int | None = proc.returncode
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            out, err = proc.communicate(timeout=KILL_GRACE)
            code = None
        elapsed = time.perf_counter() - t0
        result = None
        if result_path.exists():
            try:
                result = json.loads(result_path.read_text("utf-8"))
            except ValueError:
                result = "malformed"
        return code, out, err, result, sandbox, elapsed
    finally:
        shutil.rmtree(sandbox, ignore_errors=True)


def dry_run(script: GeneratedScript, sample: SyntheticSample, timeout: float = DEFAULT_TIMEOUT,
            interpreter_cmd: str | None = None, extra_env: dict[str, str] | None = None) -> ReviewResult:
    script_name = Path(script.output_path).name

    def stage(sandbox: Path) -> dict[str, str]:
        return {ENV_DATA: str(sample.write(sandbox))}

    code, _out, err, result, sandbox, elapsed = run_script(
        script.source_text, script_name, {}, timeout, interpreter_cmd, extra_env=extra_env, stage=stage)
    if code is None:
        return ReviewResult("fail", "timeout", f"TimeoutError: dry run exceeded {timeout:g} s", duration=elapsed)
    if code != 0:
        return ReviewResult("fail", classify_failure(err), stderr_excerpt(err, script_name, sandbox),
                            duration=elapsed)
    if result is None:
        return ReviewResult("fail", "runtime_error", "RuntimeError: script exited 0 but wrote no result file",
                            duration=elapsed)
    if result == "malformed" or not isinstance(result, dict) or "scores" not in result:
        return ReviewResult("fail", "runtime_error", "RuntimeError: result file is not valid JSON with 'scores'",
                            duration=elapsed)
    return ReviewResult("pass", "none", "", duration=elapsed)


# ---------------------------------------------------------------------------
# agents

GENERATOR_SYSTEM = """You write Python anomaly-detection code for the {library_title} library.
The script preamble (already written, do not repeat it) defines:
  PARAMS  - dict of constructor arguments (documented defaults merged with the user's values)
{views}
Write ONLY the model section: import the detector, construct it with **PARAMS, fit it on the
training data, then set `scores` (anomaly scores for the test data, higher = more anomalous) and
`labels_pred` (0/1 predictions for the test data). Return one ```python fenced block."""

_VIEW_DOCS = {
    "multivariate": "  X_train, y_train, X_test, y_test - numpy arrays (y_* may be None)",
    "graph": ("  X_train, edge_index_train, y_train, X_test, edge_index_test, y_test - node features (n x d),\n"
              "    edge index (2 x E) and node labels (may be None)"),
    "time_series": "  X_train, X_test - arrays (time x channels); y_test - per-step labels or None",
}

REPAIR_SYSTEM = """You fix the model section of a Python anomaly-detection script for {library_title}.
Keep using PARAMS and the preamble variables. Return only the corrected model section in one ```python block."""

REVIEW_SYSTEM = """You review a failed dry run of a generated anomaly-detection script.
In at most three sentences, state the cause and the concrete change the code needs."""


def _library_title(library: str) -> str:
    from ad_agent.info_miner import LIBRARY_TITLES

    return LIBRARY_TITLES.get(library, library)


class CodeGenerator:
    def __init__(self, gateway: Gateway, out_dir: str = DEFAULT_OUT_DIR, echo: Callable[[str], None] = print):
        self.gateway = gateway
        self.out_dir = out_dir
        self.echo = echo

    def _ask(self, system: str, user: str) -> str:
        try:
            return self.gateway.chat("generator", system, user)
        except GatewayError as exc:
            raise PromptBudgetExceeded(f"generator call failed: {exc}") from exc

    def generate_script(self, ws, model: str) -> GeneratedScript:
        config: ExperimentConfig = ws.config
        doc: ModelDocSummary = ws.model_docs[model]
        profile: DatasetProfile = ws.dataset_profile
        library = ws.selected_library
        params = {**doc.defaults(), **config.user_params}
        evaluate = config.evaluate and (profile.has_labels or bool(ws.test_profile and ws.test_profile.has_labels))
        preamble = build_preamble(model, library, profile.modality, config, params, evaluate)
        system = GENERATOR_SYSTEM.format(library_title=_library_title(library), views=_VIEW_DOCS[profile.modality])
        user = (f"Model: {model}\nLibrary: {library}\nDataset: {profile.describe()}\n"
                f"PARAMS = {params!r}\n\nDocumentation:\n{render_doc_summary(doc)}")
        body = extract_code(self._ask(system, user))
        source = assemble(preamble, body)
        return GeneratedScript(model, library, source, output_path_for(model, config.train_path, self.out_dir), 0,
                               params_used_by(source))

    def repair(self, script: GeneratedScript, review: ReviewResult, doc: ModelDocSummary,
               profile: DatasetProfile) -> GeneratedScript:
        system = REPAIR_SYSTEM.format(library_title=_library_title(script.library))
        param_lines = "\n".join(
            f"- {p.name}: {p.type_text or '?'}" + (" (required)" if p.required else f" = {p.default_value!r}")
            for p in doc.init_params)
        user = (f"Dataset: {profile.describe()}\n"
                f"Failure category: {review.error_category}\n"
                f"Error output:\n{review.stderr_excerpt}\n\n"
                f"Reviewer hint: {review.fix_hint or '(none)'}\n\n"
                f"Documented __init__ parameters of {script.model}:\n{param_lines}\n\n"
                f"Usage notes:\n{doc.usage_notes or '(none)'}\n\n"
                f"Failing script:\n```python\n{script.source_text}\n```")
        body = extract_code(self._ask(system, user))
        source = replace_body(script.source_text, body)
        return GeneratedScript(script.model, script.library, source, script.output_path, script.revision + 1,
                               params_used_by(source))

    def save(self, script: GeneratedScript) -> str:
        path = Path(script.output_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(script.source_text, encoding="utf-8")
        return script.output_path


class Reviewer:
    def __init__(self, gateway: Gateway | None, timeout: float = DEFAULT_TIMEOUT, interpreter_cmd: str | None = None,
                 extra_env: dict[str, str] | None = None):
        self.gateway = gateway
        self.timeout = timeout
        self.interpreter_cmd = interpreter_cmd
        self.extra_env = extra_env

    def static_check(self, script: GeneratedScript, doc: ModelDocSummary, user_params: dict) -> ReviewResult | None:
        allowed = {p.name for p in doc.init_params} | set(user_params)
        unknown = sorted(set(script.params_used) - allowed)
        if unknown:
            msg = ", ".join(repr(u) for u in unknown)
            return ReviewResult("fail", "missing_or_bad_argument",
                                f"TypeError: {script.model} got unexpected keyword argument(s) {msg} "
                                "(not in the documented __init__ parameters)")
        return None

    def hint(self, script: GeneratedScript, review: ReviewResult) -> str:
        if self.gateway is None:
            return ""
        user = (f"Model: {script.model} ({script.library})\nFailure category: {review.error_category}\n"
                f"Error output:\n{review.stderr_excerpt}\n\nModel section:\n```python\n{script.body}\n```")
        try:
            return self.gateway.chat("reviewer", REVIEW_SYSTEM, user).strip()
        except GatewayError as exc:
            logger.warning("reviewer hint unavailable: %s", exc)
            return ""

    def review(self, script: GeneratedScript, sample: SyntheticSample, doc: ModelDocSummary,
               user_params: dict) -> ReviewResult:
        result = self.static_check(script, doc, user_params)
        if result is None:
            result = dry_run(script, sample, self.timeout, self.interpreter_cmd, self.extra_env)
        if not result.passed:
            result = ReviewResult(result.verdict, result.error_category, result.stderr_excerpt,
                                  self.hint(script, result), result.duration)
        return result


def generate_validated(ws, model: str, generator: CodeGenerator, reviewer: Reviewer, max_iters: int = DEFAULT_MAX_ITERS,
                       sample: SyntheticSample | None = None, echo: Callable[[str], None] = print,
                       seed: int = 0) -> GeneratedScript:
    """Generate, dry-run and repair until a script passes or ``max_iters`` dry runs fail."""
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    doc = ws.model_docs[model]
    profile = ws.dataset_profile
    if sample is None:
        labelled = profile.has_labels or bool(ws.test_profile and ws.test_profile.has_labels)
        sample = make_synthetic_sample(profile, seed, with_labels=labelled)
    echo(f"=== [Code Generator] Generating code for {model} ===")
    script = generator.generate_script(ws, model)
    reviews: list[ReviewResult] = []
    scripts: list[GeneratedScript] = []
    while True:
        ws.put("scripts", (model, script))
        scripts.append(script)
        echo(f"=== [Code Reviewer] Validating for {model} ===")
        try:
            review = reviewer.review(script, sample, doc, ws.config.user_params)
        except SandboxFailure as exc:
            echo(f"=== [Code Reviewer] Sandbox failure for {model}: {exc} ===")
            raise PipelineFailure(model, reviews, scripts) from exc
        ws.put("reviews", (model, review))
        reviews.append(review)
        if review.passed:
            echo(f"=== [Code Reviewer] Validation completed for {model} ===")
            return script
        echo(f"=== [Code Reviewer] Validation failed for {model} ({review.error_category}) ===")
        echo(review.stderr_excerpt)
        if len(reviews) >= max_iters:
            raise PipelineFailure(model, reviews, scripts)
        echo(f"=== [Code Generator] Revising code for {model} (revision {script.revision + 1}) ===")
        script = generator.repair(script, review, doc, profile)
