"""Session runner, benchmark harness and command-line entry point."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Sequence

from ad_agent.codegen import (
    DEFAULT_MAX_ITERS,
    DEFAULT_OUT_DIR,
    DEFAULT_TIMEOUT,
    CodeGenerator,
    Reviewer,
    generate_validated,
)
from ad_agent.errors import ADAgentError, MissingMetric, PipelineFailure
from ad_agent.evaluation import DEFAULT_BUDGET, DEFAULT_RESULTS_DIR, EvaluationReport, Evaluator, LLMProposer, Optimizer
from ad_agent.gateway import Gateway, LiveBackend, PriceTable, RecordingBackend, ReplayBackend, TokenLedger
from ad_agent.info_miner import InfoMiner
from ad_agent.memory import DEFAULT_CACHE_PATH, LongTermCache, SessionWorkspace
from ad_agent.processor import DEFAULT_DATA_ROOT, Processor, load_dataset
from ad_agent.registry import Registry, default_registry
from ad_agent.selector import Selector, recommend_model

logger = logging.getLogger(__name__)

PROMPT = "Enter command (e.g., 'Run IForest on glass_train.mat and glass_test.mat'):"
SEPARATOR = "-" * 60


@dataclass
class SessionOptions:
    evaluate: bool = False
    optimize: bool = False
    llm_backend: str = "live"
    transcript: str | None = None
    cache_path: str | None = DEFAULT_CACHE_PATH
    cache_ttl_days: int = 7
    out_dir: str = DEFAULT_OUT_DIR
    data_root: str = DEFAULT_DATA_ROOT
    interpreter_cmd: str | None = None
    max_iters: int = DEFAULT_MAX_ITERS
    dry_run_timeout: float = DEFAULT_TIMEOUT
    optimizer_budget: int = DEFAULT_BUDGET
    registry_path: str | None = None
    refresh_cache: bool = False
    results_dir: str = DEFAULT_RESULTS_DIR
    extra_env: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.llm_backend not in ("live", "replay", "record"):
            raise ValueError(f"unknown backend {self.llm_backend!r}")
        if self.llm_backend in ("replay", "record") and not self.transcript:
            raise ValueError(f"--llm-backend {self.llm_backend} needs --transcript")
        if self.max_iters < 1 or self.optimizer_budget < 0 or self.cache_ttl_days < 0:
            raise ValueError("max_iters must be >= 1, budgets and TTL non-negative")


def make_gateway(options: SessionOptions) -> Gateway:
    if options.llm_backend == "replay":
        backend = ReplayBackend.from_transcript(options.transcript)
    elif options.llm_backend == "record":
        backend = RecordingBackend(LiveBackend(), options.transcript)
    else:
        backend = LiveBackend()
    return Gateway(backend, PriceTable.load())


def open_cache(options: SessionOptions) -> LongTermCache:
    return LongTermCache.load(options.cache_path, timedelta(days=options.cache_ttl_days))


@dataclass
class SessionResult:
    exit_code: int
    workspace: SessionWorkspace
    saved: dict[str, str] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    generation_time: float = 0.0
    evaluation_time: float = 0.0

    @property
    def ledger(self) -> TokenLedger:
        return self.workspace.ledger


def _stage_error(echo, stage: str, exc: Exception) -> None:
    echo(f"=== [{stage}] Failed: {type(exc).__name__}: {exc} ===")


def run_session(options: SessionOptions, instruction: str | None = None, gateway: Gateway | None = None,
                cache: LongTermCache | None = None, registry: Registry | None = None,
                echo: Callable[[str], None] = print, read: Callable[[], str] = input,
                now: datetime | None = None) -> SessionResult:
    """One command end to end. Exit code 0 iff every selected model got a validated script
    (and, when evaluation was requested, an evaluation report)."""
    registry = registry or (Registry.load(options.registry_path) if options.registry_path else default_registry())
    ws = SessionWorkspace()
    base = gateway or make_gateway(options)
    gw = base.with_ledger(ws.ledger)
    cache = cache if cache is not None else open_cache(options)
    result = SessionResult(1, ws)

    echo("=== [Main] Starting full pipeline ===")
    echo("=== [Processor] Processing user input ===")
    echo(PROMPT)
    if instruction is None:
        try:
            instruction = read()
        except EOFError:
            instruction = ""
    echo(f"User: {instruction}")
    t0 = time.perf_counter()
    try:
        config = Processor(gw, options.data_root, echo).run(ws, instruction)
    except ADAgentError as exc:
        _stage_error(echo, "Processor", exc)
        return result
    echo("=== [Processor] User input processing complete")
    echo(SEPARATOR)

    try:
        Selector(gw, registry, echo=echo).run(ws)
    except (ADAgentError, ValueError) as exc:
        _stage_error(echo, "Selector", exc)
        return result
    echo(SEPARATOR)

    library = ws.selected_library
    miner = InfoMiner(gw, cache, echo)
    for model in ws.selected_models:
        try:
            doc = miner.get_model_info(library, model, now=now, refresh=options.refresh_cache)
        except ADAgentError as exc:
            _stage_error(echo, "Info Miner", exc)
            result.failures[model] = f"documentation: {exc}"
            continue
        ws.put("model_docs", (model, doc))
    echo(SEPARATOR)

    generator = CodeGenerator(gw, options.out_dir, echo)
    reviewer = Reviewer(gw, options.dry_run_timeout, options.interpreter_cmd, options.extra_env or None)
    for model in ws.selected_models:
        if model not in ws.model_docs:
            continue
        try:
            script = generate_validated(ws, model, generator, reviewer, options.max_iters, echo=echo)
        except PipelineFailure as exc:
            _stage_error(echo, "Code Reviewer", exc)
            result.failures[model] = f"generation: {exc}"
            continue
        except ADAgentError as exc:
            _stage_error(echo, "Code Generator", exc)
            result.failures[model] = f"generation: {exc}"
            continue
        path = generator.save(script)
        result.saved[model] = path
        echo(f"=== [Code Generator] Saved code to {path} ===")
    result.generation_time = time.perf_counter() - t0

    evaluate = options.evaluate or config.evaluate
    optimize = options.optimize or config.optimize
    if (evaluate or optimize) and result.saved:
        echo(SEPARATOR)
        t1 = time.perf_counter()
        evaluator = Evaluator(options.results_dir, options.dry_run_timeout, options.interpreter_cmd,
                              options.extra_env or None, echo)
        objective = registry[library].primary_metric
        for model in result.saved:
            try:
                params = None
                if optimize:
                    params, _ = Optimizer(LLMProposer(gw), evaluator, options.optimizer_budget, echo).run(
                        ws, model, objective)
                report: EvaluationReport = evaluator.evaluate(ws, model, params)
                ws.put("evaluation", (model, report))
            except ADAgentError as exc:
                _stage_error(echo, "Optimizer" if optimize else "Evaluator", exc)
                result.failures[model] = f"evaluation: {exc}"
        result.evaluation_time = time.perf_counter() - t1

    ok = bool(ws.selected_models) and all(m in result.saved for m in ws.selected_models)
    if evaluate or optimize:
        ok = ok and all(m in ws.evaluation for m in ws.selected_models)
    result.exit_code = 0 if ok else 1
    return result


# ---------------------------------------------------------------------------
# benchmark


@dataclass(frozen=True)
class PairResult:
    dataset: str
    model: str
    success: bool
    time: float
    input_tokens: int
    output_tokens: int
    cost: float
    error: str = ""


@dataclass
class BenchmarkReport:
    library: str
    pairs_attempted: int
    pairs_succeeded: int
    success_rate: float
    mean_time: float
    mean_input_tokens: float
    mean_output_tokens: float
    mean_cost: float
    per_pair: list[PairResult] = field(default_factory=list)

    @classmethod
    def from_pairs(cls, library: str, pairs: Sequence[PairResult]) -> "BenchmarkReport":
        n = len(pairs)
        if n == 0:
            raise ValueError("no pairs were run")
        succeeded = sum(p.success for p in pairs)
        return cls(
            library=library,
            pairs_attempted=n,
            pairs_succeeded=succeeded,
            success_rate=round(100.0 * succeeded / n, 1),
            mean_time=sum(p.time for p in pairs) / n,
            mean_input_tokens=sum(p.input_tokens for p in pairs) / n,
            mean_output_tokens=sum(p.output_tokens for p in pairs) / n,
            mean_cost=sum(p.cost for p in pairs) / n,
            per_pair=list(pairs),
        )

    def table(self) -> str:
        return "\n".join([
            f"Library: {self.library}",
            f"Success rate: {self.success_rate:.1f}% ({self.pairs_succeeded}/{self.pairs_attempted})",
            f"Mean time: {self.mean_time:.1f} s",
            f"Mean tokens (input/output): {self.mean_input_tokens:,.0f} / {self.mean_output_tokens:,.0f}",
            f"Mean cost: ${self.mean_cost:.3f}",
        ])

    def write(self, out_dir: str) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        json_path, csv_path = out / f"benchmark_{self.library}.json", out / f"benchmark_{self.library}.csv"
        json_path.write_text(json.dumps(asdict(self), indent=2), encoding="utf-8")
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(PairResult.__dataclass_fields__))
            writer.writeheader()
            for p in self.per_pair:
                writer.writerow(asdict(p))
        return json_path, csv_path


def dataset_file(name: str, library: str, registry: Registry) -> str:
    fmt = registry[library].dataset_format
    if "." in name or fmt in ("", "dir"):
        return name
    return f"{name}.{fmt}"


def run_benchmark(library: str, datasets: Sequence[str], models: Sequence[str], options: SessionOptions,
                  gateway: Gateway | None = None, cache: LongTermCache | None = None,
                  registry: Registry | None = None, parallel: int = 1,
                  echo: Callable[[str], None] = print) -> BenchmarkReport:
    """Every (dataset, model) pair as its own session; failures are recorded, never fatal."""
    registry = registry or default_registry()
    spec = registry[library]
    for m in models:
        hit = registry.resolve_model(m)
        if hit is None or hit[0] != library:
            raise ValueError(f"{m} is not in the {library} roster")
    unknown = [d for d in datasets if d not in spec.datasets and Path(d).stem not in spec.datasets]
    if unknown and spec.datasets:
        raise ValueError(f"datasets not in the {library} roster: {unknown}")
    gateway = gateway or make_gateway(options)
    cache = cache if cache is not None else open_cache(options)
    pairs = [(d, m) for d in datasets for m in models]

    def one(pair: tuple[str, str]) -> PairResult:
        dataset, model = pair
        instruction = f"Run {model} on {dataset_file(dataset, library, registry)}"
        t0 = time.perf_counter()
        try:
            res = run_session(options, instruction, gateway, cache, registry, echo=lambda _line: None)
            err = "; ".join(f"{k}: {v}" for k, v in res.failures.items())
            if res.exit_code != 0 and not err:
                err = "session failed before code generation"
            ledger = res.ledger
            return PairResult(dataset, model, res.exit_code == 0, res.generation_time,
                              ledger.input_tokens, ledger.output_tokens, ledger.cost, err)
        except Exception as exc:  # a broken pair must not abort the grid
            logger.exception("pair %s/%s crashed", dataset, model)
            return PairResult(dataset, model, False, time.perf_counter() - t0, 0, 0, 0.0, f"{type(exc).__name__}: {exc}")

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = []
        for pair in pairs:
            results.append(one(pair))
            r = results[-1]
            echo(f"[{len(results)}/{len(pairs)}] {r.model} on {r.dataset}: {'ok' if r.success else 'FAILED ' + r.error}")
    return BenchmarkReport.from_pairs(library, results)


# ---------------------------------------------------------------------------
# model-selection evaluation


@dataclass(frozen=True)
class SelectionScore:
    dataset: str
    votes: tuple[str, ...]
    vote_mean: float
    best: float
    average_baseline: float


def score_votes(dataset: str, votes: Sequence[str], roster: Sequence[str],
                table: dict[tuple[str, str], float]) -> SelectionScore:
    def metric(model: str) -> float:
        try:
            return table[(dataset, model)]
        except KeyError:
            raise MissingMetric(f"no metric for {model} on {dataset}") from None

    roster_values = [metric(m) for m in roster]
    vote_values = [metric(m) for m in votes]
    if not vote_values:
        raise MissingMetric(f"no resolvable votes for {dataset}")
    return SelectionScore(dataset, tuple(votes), sum(vote_values) / len(vote_values), max(roster_values),
                          sum(roster_values) / len(roster_values))


def load_metric_table(path: str) -> dict[tuple[str, str], float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {(row["dataset"], row["model"]): float(row["metric"]) for row in csv.DictReader(fh)}


def model_selection_eval(library: str, datasets: Sequence[str], table: dict[tuple[str, str], float],
                         gateway: Gateway, n_queries: int = 3, data_root: str = DEFAULT_DATA_ROOT,
                         registry: Registry | None = None) -> list[SelectionScore]:
    registry = registry or default_registry()
    rows = []
    for dataset in datasets:
        path = data_root.rstrip("/") + "/" + dataset_file(dataset, library, registry)
        _, profile, _ = load_dataset(path)
        outcome = recommend_model(gateway, library, profile, n_queries, registry)
        rows.append(score_votes(Path(dataset).stem if "." in dataset else dataset, outcome.models,
                                registry.roster(library), table))
    return rows


def refresh_cache(cache: LongTermCache, gateway: Gateway, stale_only: bool = True, now: datetime | None = None,
                  echo: Callable[[str], None] = print) -> list[str]:
    """Re-fetch cached entries (only stale ones by default); meant for scheduled runs."""
    now = now or datetime.now(timezone.utc)
    miner = InfoMiner(gateway, cache, echo)
    refreshed = []
    for key, entry in sorted(cache.entries.items()):
        if stale_only and now - entry.retrieved_at <= cache.ttl:
            continue
        miner.get_model_info(entry.library, entry.model, now=now, refresh=True)
        refreshed.append(key)
    return refreshed


# ---------------------------------------------------------------------------
# argument parsing


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--evaluate", action="store_true", help="run the Evaluator on real data")
    p.add_argument("--optimize", action="store_true", help="tune hyperparameters before evaluating")
    p.add_argument("--llm-backend", choices=("live", "replay", "record"), default="live")
    p.add_argument("--transcript", help="JSONL transcript for replay/record")
    p.add_argument("--cache-path", default=DEFAULT_CACHE_PATH)
    p.add_argument("--cache-ttl-days", type=int, default=7)
    p.add_argument("--out-dir", default=DEFAULT_OUT_DIR)
    p.add_argument("--data-root", default=DEFAULT_DATA_ROOT)
    p.add_argument("--interpreter", help="command used to run generated scripts (default: this Python)")
    p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS)
    p.add_argument("--dry-run-timeout", type=float, default=DEFAULT_TIMEOUT)
    p.add_argument("--optimizer-budget", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--registry", help="alternative registry JSON")
    p.add_argument("--refresh-cache", action="store_true", help="ignore cached documentation")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ad-agent", description="Natural-language anomaly-detection pipelines.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    run = sub.add_parser("run", parents=[common], help="run one command")
    run.add_argument("instruction", nargs="?", help="command text; prompted for when omitted")
    bench = sub.add_parser("bench", parents=[common], help="run a dataset x model grid")
    bench.add_argument("library")
    bench.add_argument("--datasets", nargs="*", help="default: the library's roster")
    bench.add_argument("--models", nargs="*", help="default: the library's roster")
    bench.add_argument("--parallel", type=int, default=1)
    sel = sub.add_parser("select-eval", parents=[common], help="score the Selector's recommendations")
    sel.add_argument("library")
    sel.add_argument("--metrics", required=True, help="CSV with dataset,model,metric columns")
    sel.add_argument("--datasets", nargs="*")
    sel.add_argument("--queries", type=int, default=3)
    refresh = sub.add_parser("refresh-cache", parents=[common], help="re-fetch stale documentation")
    refresh.add_argument("--all", action="store_true", help="refresh every entry, not just stale ones")
    return parser


def options_from_args(args: argparse.Namespace) -> SessionOptions:
    return SessionOptions(
        evaluate=args.evaluate, optimize=args.optimize, llm_backend=args.llm_backend, transcript=args.transcript,
        cache_path=args.cache_path, cache_ttl_days=args.cache_ttl_days, out_dir=args.out_dir,
        data_root=args.data_root, interpreter_cmd=args.interpreter, max_iters=args.max_iters,
        dry_run_timeout=args.dry_run_timeout, optimizer_budget=args.optimizer_budget, registry_path=args.registry,
        refresh_cache=args.refresh_cache)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        options = options_from_args(args)
    except ValueError as exc:
        parser.error(str(exc))
    registry = Registry.load(args.registry) if args.registry else default_registry()

    try:
        if args.command == "run":
            res = run_session(options, args.instruction, registry=registry)
            ledger = res.ledger
            print(f"Tokens: {ledger.input_tokens} in / {ledger.output_tokens} out, cost ${ledger.cost:.4f}",
                  file=sys.stderr)
            return res.exit_code
        if args.command == "bench":
            spec = registry[args.library]
            report = run_benchmark(args.library, args.datasets or list(spec.datasets), args.models or list(spec.models),
                                   options, registry=registry, parallel=args.parallel)
            print(report.table())
            json_path, csv_path = report.write(options.out_dir)
            print(f"Wrote {json_path} and {csv_path}")
            return 0
        if args.command == "select-eval":
            table = load_metric_table(args.metrics)
            datasets = args.datasets or list(registry[args.library].datasets)
            rows = model_selection_eval(args.library, datasets, table, make_gateway(options), args.queries,
                                        options.data_root, registry)
            print("dataset,votes,vote_mean,best,average_baseline")
            for r in rows:
                print(f"{r.dataset},{'|'.join(r.votes)},{r.vote_mean:.4f},{r.best:.4f},{r.average_baseline:.4f}")
            return 0
        if args.command == "refresh-cache":
            done = refresh_cache(open_cache(options), make_gateway(options), stale_only=not args.all)
            print(f"Refreshed {len(done)} entr{'y' if len(done) == 1 else 'ies'}")
            return 0
    except ADAgentError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
