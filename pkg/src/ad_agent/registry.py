"""Library rosters: which models and datasets each supported library covers.

The content lives in ``data/registry.json`` so libraries can be added without
touching code. A different manifest can be loaded with :meth:`Registry.load`.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

from ad_agent.errors import AmbiguousName

MODALITIES = ("multivariate", "graph", "time_series")
METRICS = ("auroc", "f1")


def normalize_name(name: str) -> str:
    """Case-insensitive key with hyphens, underscores and spaces dropped."""
    return re.sub(r"[-_\s]", "", name).lower()


@dataclass(frozen=True)
class ModelName:
    canonical: str
    library: str
    aliases: frozenset[str] = frozenset()


@dataclass(frozen=True)
class LibrarySpec:
    id: str
    modality: str
    models: tuple[str, ...]
    datasets: tuple[str, ...]
    primary_metric: str
    dataset_format: str = ""
    min_version: str | None = None
    excluded: dict[str, str] = field(default_factory=dict)


class Registry:
    def __init__(self, libraries: dict[str, LibrarySpec], aliases: dict[str, list[str]] | None = None):
        self.libraries = dict(libraries)
        by_modality: dict[str, str] = {}
        for lib in self.libraries.values():
            if lib.modality not in MODALITIES:
                raise ValueError(f"{lib.id}: unknown modality {lib.modality!r}")
            if lib.primary_metric not in METRICS:
                raise ValueError(f"{lib.id}: unknown metric {lib.primary_metric!r}")
            if lib.modality in by_modality:
                raise ValueError(f"modality {lib.modality} served by both {by_modality[lib.modality]} and {lib.id}")
            by_modality[lib.modality] = lib.id
        self._by_modality = by_modality

        self._index: dict[str, ModelName] = {}
        aliases = aliases or {}
        for lib in self.libraries.values():
            for canonical in lib.models:
                names = {canonical, *aliases.get(f"{lib.id}/{canonical}", ())}
                model = ModelName(canonical, lib.id, frozenset(names - {canonical}))
                for n in names:
                    key = normalize_name(n)
                    prior = self._index.get(key)
                    if prior is not None and prior != model:
                        raise AmbiguousName(f"{n!r} maps to {prior.library}/{prior.canonical} and {lib.id}/{canonical}")
                    self._index[key] = model

    @classmethod
    def from_dict(cls, d: dict) -> "Registry":
        libs, aliases = {}, {}
        for lib_id, body in d["libraries"].items():
            libs[lib_id] = LibrarySpec(
                id=lib_id,
                modality=body["modality"],
                models=tuple(body["models"]),
                datasets=tuple(body.get("datasets", ())),
                primary_metric=body["primary_metric"],
                dataset_format=body.get("dataset_format", ""),
                min_version=body.get("min_version"),
                excluded=dict(body.get("excluded", {})),
            )
            for canonical, names in body.get("aliases", {}).items():
                aliases[f"{lib_id}/{canonical}"] = list(names)
        return cls(libs, aliases)

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "Registry":
        if path is None:
            return default_registry()
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))

    def resolve_model(self, name: str) -> tuple[str, str] | None:
        """``(library, canonical)`` for a known model name, ``None`` otherwise."""
        model = self._index.get(normalize_name(name.strip().strip("`'\".")))
        if model is None:
            return None
        return model.library, model.canonical

    def excluded_reason(self, name: str) -> str | None:
        key = normalize_name(name)
        for lib in self.libraries.values():
            for excluded, reason in lib.excluded.items():
                if normalize_name(excluded) == key:
                    return f"{excluded} is excluded from {lib.id}: {reason}"
        return None

    def library_for_modality(self, modality: str) -> str:
        try:
            return self._by_modality[modality]
        except KeyError:
            raise ValueError(f"no library serves modality {modality!r}") from None

    def roster(self, library: str) -> tuple[str, ...]:
        return self.libraries[library].models

    def __getitem__(self, library: str) -> LibrarySpec:
        return self.libraries[library]

    def all_models(self):
        for lib in self.libraries.values():
            for m in lib.models:
                yield lib.id, m


@lru_cache(maxsize=1)
def default_registry() -> Registry:
    text = resources.files("ad_agent.data").joinpath("registry.json").read_text("utf-8")
    return Registry.from_dict(json.loads(text))
