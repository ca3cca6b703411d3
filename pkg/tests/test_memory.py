import json
import threading
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings, strategies as st

import helpers
from ad_agent.errors import StageOrderViolation, TypeMismatch
from ad_agent.info_miner import ModelDocSummary, ParamSpec
from ad_agent.memory import CacheEntry, CacheMiss, LongTermCache, PersistenceWarning, SessionWorkspace
from ad_agent.processor import DatasetProfile, ExperimentConfig

NOW = datetime(2026, 3, 1, tzinfo=timezone.utc)


def doc(model="VAE", library="pyod", **kw):
    return ModelDocSummary(model, library, "desc", (ParamSpec("epoch_num", "int", 30, "epochs"),),
                           retrieved_at=kw.pop("retrieved_at", NOW), **kw)


def test_workspace_enforces_stage_order():
    ws = SessionWorkspace()
    with pytest.raises(StageOrderViolation):
        ws.put("config", ExperimentConfig(("VAE",), "./data/cardio.mat"))
    ws.put("raw_instruction", "Run VAE on cardio.mat")
    with pytest.raises(StageOrderViolation):
        ws.put("selected_library", "pyod")
    ws.put("config", ExperimentConfig(("VAE",), "./data/cardio.mat"))
    ws.put("dataset_profile", DatasetProfile("multivariate", 200, 21, True, "mat", 0.1))
    ws.put("selected_library", "pyod")
    with pytest.raises(StageOrderViolation):
        ws.put("model_docs", ("VAE", doc()))
    ws.put("selected_models", ["VAE"])
    ws.put("model_docs", ("VAE", doc()))
    assert ws.populated() >= {"raw_instruction", "config", "dataset_profile", "selected_models", "model_docs"}


def test_workspace_type_and_write_once_checks():
    ws = SessionWorkspace()
    with pytest.raises(TypeMismatch):
        ws.put("raw_instruction", 42)
    ws.put("raw_instruction", "x")
    with pytest.raises(StageOrderViolation):
        ws.put("raw_instruction", "y")
    with pytest.raises(KeyError):
        ws.put("nonsense", 1)
    ws = helpers.case_workspace(helpers.repair_cases()[0])
    with pytest.raises(TypeMismatch):
        ws.put("model_docs", "not a pair")
    with pytest.raises(StageOrderViolation):
        ws.put("model_docs", ("VAE", doc()))  # VAE was not selected
    with pytest.raises(StageOrderViolation):
        ws.put("model_docs", ("DeepSVDD", doc("DeepSVDD")))  # already set


def test_session_ledger_carries_session_id():
    ws = SessionWorkspace(session_id="abc")
    assert ws.ledger.session_id == "abc"


def test_cache_lookup_absent_fresh_stale(tmp_path):
    cache = LongTermCache(tmp_path / "c.json")
    assert cache.lookup("pyod", "VAE", NOW) == CacheMiss("absent")
    assert not CacheMiss("absent")
    cache.store_doc(doc())
    assert cache.lookup("pyod", "VAE", NOW + timedelta(days=7)) == doc()
    assert cache.lookup("pyod", "VAE", NOW + timedelta(days=7, microseconds=1)) == CacheMiss("stale")


def test_cache_round_trip_and_ttl_persisted(tmp_path):
    path = tmp_path / "c.json"
    cache = LongTermCache(path, ttl=timedelta(days=3))
    cache.store_doc(helpers.catalog_doc("pygod", "GAAN", NOW))
    cache.store_doc(helpers.catalog_doc("pyod", "DeepSVDD", NOW))
    again = LongTermCache.load(path)
    assert again.ttl == timedelta(days=3)
    assert again.entries == cache.entries
    assert again.lookup("pygod", "GAAN", NOW) == helpers.catalog_doc("pygod", "GAAN", NOW)


def test_cache_rejects_naive_timestamps():
    with pytest.raises(ValueError):
        CacheEntry("pyod", "VAE", doc(), datetime(2026, 1, 1))


def test_unreadable_cache_warns_and_starts_empty(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{broken")
    with pytest.warns(PersistenceWarning):
        cache = LongTermCache.load(path)
    assert len(cache) == 0


def test_unwritable_cache_warns_but_serves(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cache = LongTermCache(blocker / "sub" / "c.json")
    with pytest.warns(PersistenceWarning):
        cache.store_doc(doc())
    assert cache.lookup("pyod", "VAE", NOW) == doc()


def test_in_memory_cache_writes_nothing(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    LongTermCache(None).store_doc(doc())
    assert list(tmp_path.iterdir()) == []


def test_concurrent_writers_keep_file_valid(tmp_path):
    path = tmp_path / "c.json"
    cache = LongTermCache(path)
    models = [f"M{i}" for i in range(40)]
    threads = [threading.Thread(target=cache.store_doc, args=(doc(m),)) for m in models]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    data = json.loads(path.read_text())
    assert len(data["entries"]) == 40
    assert len(LongTermCache.load(path)) == 40


names = st.from_regex(r"[a-h][a-h_]{0,7}", fullmatch=True)
values = st.one_of(st.none(), st.booleans(), st.integers(-10**6, 10**6), st.floats(allow_nan=False, allow_infinity=False),
                   st.text(max_size=10), st.lists(st.integers(0, 100), max_size=4))


@settings(max_examples=50)
@given(st.dictionaries(names, values, min_size=0, max_size=6), st.integers(0, 10**7))
def test_cache_round_trip_property(tmp_path_factory, params, seconds):
    path = tmp_path_factory.mktemp("c") / "c.json"
    stamp = NOW + timedelta(seconds=seconds)
    d = ModelDocSummary("X", "pyod", "d", tuple(ParamSpec(k, "", v) for k, v in params.items()), retrieved_at=stamp)
    LongTermCache(path).store_doc(d)
    assert LongTermCache.load(path).lookup("pyod", "X", stamp) == d
