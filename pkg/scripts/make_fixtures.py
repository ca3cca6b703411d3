"""Regenerate the bundled test fixtures: datasets and recorded LLM transcripts.

Every transcript is recorded from the rule-based offline responder, with the
stub detector libraries on the child PYTHONPATH, so the whole run is offline
and deterministic. Run from the repository root:

    python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import contextlib
import io
import json
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import helpers  # noqa: E402
from ad_agent.cli import SessionOptions, run_benchmark, run_session  # noqa: E402
from ad_agent.codegen import CodeGenerator, Reviewer, generate_validated  # noqa: E402
from ad_agent.errors import PipelineFailure  # noqa: E402
from ad_agent.gateway import CallableBackend, Gateway, RecordingBackend  # noqa: E402
from ad_agent.offline import CATALOG, OfflineResponder, fenced, model_body  # noqa: E402
from ad_agent.registry import default_registry  # noqa: E402


@contextlib.contextmanager
def workdir():
    old = os.getcwd()
    with tempfile.TemporaryDirectory() as tmp:
        os.chdir(tmp)
        try:
            yield Path(tmp)
        finally:
            os.chdir(old)


def recorder(path: Path, responder: OfflineResponder) -> Gateway:
    if path.exists():
        path.unlink()
    return Gateway(RecordingBackend(CallableBackend(responder), path))


def vae_session(path: Path, prewarm: bool) -> None:
    with workdir() as tmp:
        helpers.write_cardio(tmp / "data" / "cardio.mat")
        cache = helpers.prewarmed_cache(None, [("pyod", "VAE")] if prewarm else [])
        gw = recorder(path, OfflineResponder(search_latency=helpers.SEARCH_LATENCY))
        opts = SessionOptions(cache_path=None, extra_env=helpers.STUB_ENV)
        with contextlib.redirect_stdout(io.StringIO()):
            res = run_session(opts, "Run VAE on cardio.mat", gateway=gw, cache=cache)
        assert res.exit_code == 0, res.failures


def rescale_tokens(path: Path, total_in: int, total_out: int) -> None:
    """Spread fixed token totals over the recorded calls in proportion to the estimates."""
    records = [json.loads(line) for line in path.read_text("utf-8").splitlines() if line.strip()]
    for field, total in (("input_tokens", total_in), ("output_tokens", total_out)):
        weights = [r["response"][field] for r in records]
        shares = [total * w // sum(weights) for w in weights]
        shares[weights.index(max(weights))] += total - sum(shares)
        for r, s in zip(records, shares):
            r["response"][field] = s
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records), encoding="utf-8")


def repair_corpus() -> None:
    helpers.REPAIR_DIR.mkdir(parents=True, exist_ok=True)
    manifest = []
    for case in helpers.repair_cases():
        path = helpers.REPAIR_DIR / f"{case.id}.jsonl"
        correct = model_body(CATALOG[(case.library, case.model)])
        responder = OfflineResponder(overrides={"generator": helpers.scripted_generator(case.bodies, correct)})
        gw = recorder(path, responder)
        ws = helpers.case_workspace(case)
        reviewer = Reviewer(gw, helpers.REPAIR_TIMEOUT, extra_env=helpers.STUB_ENV)
        with workdir():
            try:
                generate_validated(ws, case.model, CodeGenerator(gw), reviewer, max_iters=3, echo=lambda _: None)
                outcome = "repaired"
            except PipelineFailure:
                outcome = "failed"
        categories = [r.error_category for r in ws.reviews[case.model]]
        print(f"{case.id}: {outcome} after {len(categories)} review(s) {categories}")
        assert (outcome == "repaired") == case.repairable, case.id
        assert categories[0] == case.category, (case.id, categories)
        manifest.append({"id": case.id, "library": case.library, "model": case.model, "category": case.category,
                         "repairable": case.repairable, "reviews": categories})
    (helpers.REPAIR_DIR / "cases.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def pygod_grid(path: Path) -> None:
    failing = helpers.GRID_FAILURES

    def generator(request):
        user = request.messages[-1][1]
        for dataset, model in failing:
            n = helpers.GRAPH_SIZES[dataset]
            first = f"Model: {model}\n" in user and f"n_samples={n}," in user
            repair = f"pipeline: {model} (pygod) on {dataset}\n" in user
            if first or repair:
                body = model_body(CATALOG[("pygod", model)]).replace("pygod.detector", "pygod.detectors")
                return fenced(body)
        return None

    with workdir() as tmp:
        helpers.stage_pygod_graphs(tmp / "data")
        models = list(default_registry().roster("pygod"))
        cache = helpers.prewarmed_cache(None, [("pygod", m) for m in models])
        gw = recorder(path, OfflineResponder(overrides={"generator": generator}))
        opts = SessionOptions(cache_path=None, extra_env=helpers.STUB_ENV)
        report = run_benchmark("pygod", list(helpers.GRAPH_SIZES), models, opts, gateway=gw, cache=cache,
                               echo=lambda _: None)
    print(f"pygod grid: {report.pairs_succeeded}/{report.pairs_attempted}")
    assert report.pairs_succeeded == 41


def main() -> None:
    helpers.TRANSCRIPTS.mkdir(parents=True, exist_ok=True)
    helpers.write_cardio(helpers.DATA / "cardio.mat")
    vae_session(helpers.TRANSCRIPTS / "vae_cardio.jsonl", prewarm=False)
    table1 = helpers.TRANSCRIPTS / "vae_cardio_cached.jsonl"
    vae_session(table1, prewarm=True)
    rescale_tokens(table1, *helpers.TABLE1_TOKENS)
    repair_corpus()
    pygod_grid(helpers.TRANSCRIPTS / "pygod_grid.jsonl")
    print("fixtures written under", helpers.DATA, "at", datetime.now(timezone.utc).isoformat(timespec="seconds"))


if __name__ == "__main__":
    main()
