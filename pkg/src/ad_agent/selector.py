"""Selector agent: library routing and LLM model recommendation."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

from ad_agent.errors import GatewayError, ModelLibraryMismatch, NoResolvableVote, UnknownModel
from ad_agent.gateway import Gateway
from ad_agent.processor import DatasetProfile
from ad_agent.registry import Registry, default_registry

logger = logging.getLogger(__name__)

RECOMMEND_SYSTEM = """You are an expert in anomaly detection model selection.
Given a dataset description and the list of models available in one library, pick the single model
most likely to give the best detection performance on this dataset.
Reply with the model name only, spelled exactly as in the list."""

REASK_SYSTEM = """Answer with exactly one name from this list and nothing else: {roster}"""


@dataclass(frozen=True)
class SelectionOutcome:
    library: str
    models: tuple[str, ...]
    recommendation_votes: tuple[tuple[str, str | None], ...] | None = None

    @property
    def selected(self) -> str:
        """Plurality winner; ties go to the earliest query."""
        if self.recommendation_votes is None:
            return self.models[0]
        counts = Counter(self.models)
        best = max(counts.values())
        return next(m for m in self.models if counts[m] == best)


def describe_profile(profile: DatasetProfile) -> str:
    lines = [f"Modality: {profile.modality}", f"Number of samples: {profile.n_samples}",
             f"Number of features: {profile.n_features}",
             f"Labels available: {'yes' if profile.has_labels else 'no'}"]
    if profile.n_edges is not None:
        lines.insert(2, f"Number of edges: {profile.n_edges}")
    if profile.label_prevalence is not None:
        lines.append(f"Anomaly rate: {profile.label_prevalence:.4f}")
    return "\n".join(lines)


def _clean_answer(raw: str) -> str:
    text = raw.strip().splitlines()[0] if raw.strip() else ""
    return re.sub(r"^(model|answer|recommendation)\s*:\s*", "", text, flags=re.IGNORECASE).strip(" `*'\".")


def select_library(ws, registry: Registry | None = None) -> str:
    registry = registry or default_registry()
    if ws.dataset_profile is None:
        raise ValueError("dataset profile is not available yet")
    library = registry.library_for_modality(ws.dataset_profile.modality)
    ws.put("selected_library", library)
    return library


def resolve_user_models(names, library: str, registry: Registry) -> list[str]:
    resolved = []
    for name in names:
        hit = registry.resolve_model(name)
        if hit is None:
            reason = registry.excluded_reason(name)
            roster = ", ".join(registry.roster(library))
            raise UnknownModel(reason or f"{name!r} is not a supported model (choose from {library}: {roster})")
        lib, canonical = hit
        if lib != library:
            raise ModelLibraryMismatch(f"{canonical} belongs to {lib}, but the data calls for {library}")
        resolved.append(canonical)
    return resolved


def recommend_model(gateway: Gateway, library: str, profile: DatasetProfile, n_queries: int = 3,
                    registry: Registry | None = None) -> SelectionOutcome:
    registry = registry or default_registry()
    roster = registry.roster(library)
    user = (f"Library: {library}\n{describe_profile(profile)}\n"
            f"Available models: {', '.join(roster)}\nWhich model do you recommend?")

    def resolve(answer: str) -> str | None:
        hit = registry.resolve_model(_clean_answer(answer))
        if hit is None or hit[0] != library:
            return None
        return hit[1]

    votes: list[tuple[str, str | None]] = []
    for _ in range(n_queries):
        raw = gateway.chat("selector", RECOMMEND_SYSTEM, user, model_id=gateway.reasoning_model)
        model = resolve(raw)
        if model is None:
            logger.info("recommendation %r is outside the %s roster; re-asking", raw, library)
            raw = gateway.chat("selector", REASK_SYSTEM.format(roster=", ".join(roster)), user,
                               model_id=gateway.reasoning_model)
            model = resolve(raw)
        votes.append((raw.strip(), model))

    resolved = tuple(m for _, m in votes if m is not None)
    if not resolved:
        raise NoResolvableVote([r for r, _ in votes])
    return SelectionOutcome(library, resolved, tuple(votes))


class Selector:
    def __init__(self, gateway: Gateway | None, registry: Registry | None = None, n_queries: int = 3,
                 echo: Callable[[str], None] = print):
        self.gateway = gateway
        self.registry = registry or default_registry()
        self.n_queries = n_queries
        self.echo = echo

    def run(self, ws) -> SelectionOutcome:
        self.echo("=== [Selector] Processing user input ===")
        self.echo("=== [Selector] Selecting package & algorithm ===")
        library = select_library(ws, self.registry)
        self.echo(f"Package name: {library}")
        if ws.config.algorithms:
            models = resolve_user_models(ws.config.algorithms, library, self.registry)
            outcome = SelectionOutcome(library, tuple(models))
            ws.put("selection", outcome)
            ws.put("selected_models", list(dict.fromkeys(models)))
        else:
            if self.gateway is None:
                raise GatewayError("model recommendation needs a language model")
            outcome = recommend_model(self.gateway, library, ws.dataset_profile, self.n_queries, self.registry)
            for i, (raw, model) in enumerate(outcome.recommendation_votes, 1):
                self.echo(f"Recommendation {i}: {raw} -> {model or 'unresolved'}")
            ws.put("selection", outcome)
            ws.put("selected_models", [outcome.selected])
        self.echo(f"Algorithm: {ws.selected_models}")
        self.echo("=== [Selector] Selection complete ===")
        return outcome
