"""Short-term session workspace and the persisted long-term documentation cache."""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import uuid
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Literal

from ad_agent.errors import StageOrderViolation, TypeMismatch
from ad_agent.gateway import TokenLedger
from ad_agent.info_miner import ModelDocSummary

logger = logging.getLogger(__name__)

DEFAULT_CACHE_PATH = "./.ad_agent_cache.json"
DEFAULT_TTL = timedelta(days=7)


# ---------------------------------------------------------------------------
# short-term memory

# field -> fields that must already be populated
_PREREQS = {
    "raw_instruction": (),
    "config": ("raw_instruction",),
    "dataset_profile": ("config",),
    "test_profile": ("dataset_profile",),
    "supervision": ("dataset_profile",),
    "modality_judgement": ("config",),
    "selected_library": ("dataset_profile",),
    "selection": ("selected_library",),
    "selected_models": ("selected_library",),
    "model_docs": ("selected_models",),
    "scripts": ("selected_models",),
    "reviews": ("selected_models",),
    "evaluation": ("scripts",),
    "optimization": ("scripts",),
}
_KEYED = {"model_docs", "scripts", "reviews", "evaluation", "optimization"}
_APPEND = {"scripts", "reviews", "optimization"}
_MODEL_KEYED = {"model_docs", "scripts", "reviews", "evaluation", "optimization"}


def _expected_types() -> dict[str, tuple[type, ...]]:
    # deferred imports: these modules import memory themselves
    from ad_agent.codegen import GeneratedScript, ReviewResult
    from ad_agent.evaluation import EvaluationReport, OptimizationTrial
    from ad_agent.processor import DatasetProfile, ExperimentConfig
    from ad_agent.selector import SelectionOutcome

    return {
        "raw_instruction": (str,),
        "config": (ExperimentConfig,),
        "dataset_profile": (DatasetProfile,),
        "test_profile": (DatasetProfile,),
        "supervision": (str,),
        "modality_judgement": (dict,),
        "selected_library": (str,),
        "selection": (SelectionOutcome,),
        "selected_models": (list, tuple),
        "model_docs": (ModelDocSummary,),
        "scripts": (GeneratedScript,),
        "reviews": (ReviewResult,),
        "evaluation": (EvaluationReport,),
        "optimization": (OptimizationTrial,),
    }


@dataclass
class SessionWorkspace:
    """State shared by every agent during one session.

    Scalar fields are written once. Keyed fields take ``(model, value)``;
    ``scripts``, ``reviews`` and ``optimization`` keep every value ever put.
    """

    session_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    raw_instruction: str | None = None
    config: Any = None
    dataset_profile: Any = None
    test_profile: Any = None
    supervision: str | None = None
    modality_judgement: dict | None = None
    selected_library: str | None = None
    selection: Any = None
    selected_models: list[str] = field(default_factory=list)
    model_docs: dict[str, ModelDocSummary] = field(default_factory=dict)
    scripts: dict[str, list] = field(default_factory=dict)
    reviews: dict[str, list] = field(default_factory=dict)
    evaluation: dict[str, Any] = field(default_factory=dict)
    optimization: dict[str, list] = field(default_factory=dict)
    ledger: TokenLedger = field(default_factory=TokenLedger)

    def __post_init__(self):
        if not self.ledger.session_id:
            self.ledger.session_id = self.session_id

    def is_set(self, name: str) -> bool:
        value = getattr(self, name)
        if name in _KEYED or name == "selected_models":
            return bool(value)
        return value is not None

    def populated(self) -> set[str]:
        return {name for name in _PREREQS if self.is_set(name)}

    def put(self, name: str, value: Any) -> "SessionWorkspace":
        if name not in _PREREQS:
            raise KeyError(f"unknown workspace field {name!r}")
        for prereq in _PREREQS[name]:
            if not self.is_set(prereq):
                raise StageOrderViolation(f"{name} requires {prereq} to be set first")

        types = _expected_types()[name]
        if name in _KEYED:
            if not (isinstance(value, tuple) and len(value) == 2):
                raise TypeMismatch(f"{name} expects a (model, value) pair")
            key, item = value
            if not isinstance(item, types):
                raise TypeMismatch(f"{name}[{key}] expects {types[0].__name__}, got {type(item).__name__}")
            if name in _MODEL_KEYED and key not in self.selected_models:
                raise StageOrderViolation(f"{key!r} is not among the selected models {self.selected_models}")
            if name == "evaluation" and key not in self.scripts:
                raise StageOrderViolation(f"evaluation for {key} requires a script")
            store = getattr(self, name)
            if name in _APPEND:
                store.setdefault(key, []).append(item)
            else:
                if key in store:
                    raise StageOrderViolation(f"{name}[{key}] is already set")
                store[key] = item
            return self

        if not isinstance(value, types):
            raise TypeMismatch(f"{name} expects {types[0].__name__}, got {type(value).__name__}")
        if self.is_set(name):
            raise StageOrderViolation(f"{name} is already set")
        if name == "selected_models":
            value = list(value)
            if not value:
                raise TypeMismatch("selected_models must be non-empty")
        setattr(self, name, value)
        return self

    def latest_script(self, model: str):
        revisions = self.scripts.get(model)
        return revisions[-1] if revisions else None


def workspace_put(ws: SessionWorkspace, name: str, value: Any) -> SessionWorkspace:
    return ws.put(name, value)


# ---------------------------------------------------------------------------
# long-term memory


@dataclass(frozen=True)
class CacheEntry:
    library: str
    model: str
    doc: ModelDocSummary
    retrieved_at: datetime

    def __post_init__(self):
        if self.retrieved_at.tzinfo is None:
            raise ValueError("retrieved_at must be timezone-aware")


@dataclass(frozen=True)
class CacheMiss:
    reason: Literal["absent", "stale"]

    def __bool__(self):
        return False


class PersistenceWarning(UserWarning):
    pass


def _key(library: str, model: str) -> str:
    return f"{library}/{model}"


class LongTermCache:
    """Documentation cache persisted as one JSON file, rewritten atomically.

    Readers see an immutable snapshot; writers swap in a new dict under a lock
    and then replace the file (last writer wins across processes).
    """

    def __init__(self, storage_path: str | os.PathLike | None = DEFAULT_CACHE_PATH, ttl: timedelta = DEFAULT_TTL):
        self.storage_path = Path(storage_path) if storage_path is not None else None
        self.ttl = ttl
        self._entries: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, storage_path: str | os.PathLike | None = DEFAULT_CACHE_PATH,
             ttl: timedelta | None = None) -> "LongTermCache":
        cache = cls(storage_path, ttl or DEFAULT_TTL)
        if cache.storage_path is None or not cache.storage_path.exists():
            return cache
        try:
            data = json.loads(cache.storage_path.read_text("utf-8"))
            entries = {}
            for key, body in data.get("entries", {}).items():
                library, model = key.split("/", 1)
                doc = ModelDocSummary.from_dict(body["doc"])
                entries[key] = CacheEntry(library, model, doc, datetime.fromisoformat(body["retrieved_at"]))
        except (OSError, ValueError, KeyError) as exc:
            warnings.warn(f"ignoring unreadable cache {cache.storage_path}: {exc}", PersistenceWarning, stacklevel=2)
            return cache
        if ttl is None and "ttl_days" in data:
            cache.ttl = timedelta(days=data["ttl_days"])
        cache._entries = entries
        return cache

    @property
    def entries(self) -> dict[str, CacheEntry]:
        return self._entries

    def __len__(self):
        return len(self._entries)

    def lookup(self, library: str, model: str, now: datetime | None = None) -> ModelDocSummary | CacheMiss:
        now = now or datetime.now(timezone.utc)
        entry = self._entries.get(_key(library, model))
        if entry is None:
            return CacheMiss("absent")
        if now - entry.retrieved_at > self.ttl:
            return CacheMiss("stale")
        return entry.doc

    def store(self, entry: CacheEntry) -> None:
        with self._lock:
            entries = dict(self._entries)
            entries[_key(entry.library, entry.model)] = entry
            self._entries = entries
            self._persist(entries)

    def store_doc(self, doc: ModelDocSummary, retrieved_at: datetime | None = None) -> None:
        self.store(CacheEntry(doc.library, doc.model, doc, retrieved_at or doc.retrieved_at))

    def to_dict(self, entries: dict[str, CacheEntry] | None = None) -> dict:
        entries = self._entries if entries is None else entries
        return {
            "version": 1,
            "ttl_days": self.ttl.total_seconds() / 86400,
            "entries": {k: {"doc": e.doc.to_dict(), "retrieved_at": e.retrieved_at.isoformat()}
                        for k, e in sorted(entries.items())},
        }

    def _persist(self, entries: dict[str, CacheEntry]) -> None:
        if self.storage_path is None:
            return
        payload = self.to_dict(entries)
        tmp = None
        try:
            self.storage_path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.storage_path.parent, prefix=".cache-", suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=1)
            os.replace(tmp, self.storage_path)
        except OSError as exc:
            if tmp and os.path.exists(tmp):
                os.unlink(tmp)
            warnings.warn(f"cache not persisted to {self.storage_path}: {exc}", PersistenceWarning, stacklevel=3)


def cache_lookup(cache: LongTermCache, library: str, model: str, now: datetime | None = None):
    return cache.lookup(library, model, now)


def cache_store(cache: LongTermCache, entry: CacheEntry) -> None:
    cache.store(entry)
