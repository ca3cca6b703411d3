"""Model documentation: cache-first lookup, web-search fallback, and parsing.

The summariser is told to finish with a literal Python dict of ``__init__``
defaults; :func:`parse_doc_summary` reads that block plus the per-parameter
bullet sections into a :class:`ModelDocSummary`.
"""

from __future__ import annotations

import ast
import logging
import math
import re
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Any, Callable

from ad_agent.errors import DocumentationUnavailable, NoParameterBlock
from ad_agent.gateway import Gateway

logger = logging.getLogger(__name__)

LIBRARY_TITLES = {"pyod": "PyOD", "pygod": "PyGOD", "tslib": "TSLib"}
DEFAULTS_HEADING = "**Python Dictionary of `__init__` Parameters with Default Values:**"


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type_text: str = ""
    default_value: Any = None
    description: str = ""
    required: bool = False

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ValueError(f"parameter name {self.name!r} is not an identifier")
        if self.required and self.default_value is not None:
            raise ValueError(f"required parameter {self.name} cannot carry a default")

    def to_dict(self) -> dict:
        d = {"name": self.name, "type_text": self.type_text, "description": self.description,
             "required": self.required}
        if not self.required:
            d["default_value"] = self.default_value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSpec":
        return cls(d["name"], d.get("type_text", ""), d.get("default_value"), d.get("description", ""),
                   bool(d.get("required", False)))


@dataclass(frozen=True)
class ModelDocSummary:
    model: str
    library: str
    description: str = ""
    init_params: tuple[ParamSpec, ...] = ()
    attributes: tuple[tuple[str, str, str], ...] = ()
    usage_notes: str = ""
    source: str = "web"
    retrieved_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    parse_warnings: tuple[str, ...] = ()

    def __post_init__(self):
        names = [p.name for p in self.init_params]
        if len(names) != len(set(names)):
            raise ValueError("init_params names must be unique")
        if self.source not in ("cache", "web"):
            raise ValueError(f"unknown source {self.source!r}")

    def param(self, name: str) -> ParamSpec | None:
        return next((p for p in self.init_params if p.name == name), None)

    def defaults(self) -> dict[str, Any]:
        return {p.name: p.default_value for p in self.init_params if not p.required}

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "library": self.library,
            "description": self.description,
            "init_params": [p.to_dict() for p in self.init_params],
            "attributes": [list(a) for a in self.attributes],
            "usage_notes": self.usage_notes,
            "source": self.source,
            "retrieved_at": self.retrieved_at.isoformat(),
            "parse_warnings": list(self.parse_warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDocSummary":
        return cls(
            model=d["model"],
            library=d["library"],
            description=d.get("description", ""),
            init_params=tuple(ParamSpec.from_dict(p) for p in d.get("init_params", ())),
            attributes=tuple(tuple(a) for a in d.get("attributes", ())),
            usage_notes=d.get("usage_notes", ""),
            source=d.get("source", "web"),
            retrieved_at=datetime.fromisoformat(d["retrieved_at"]),
            parse_warnings=tuple(d.get("parse_warnings", ())),
        )


# ---------------------------------------------------------------------------
# parsing

_HEADING = re.compile(r"^\*\*(?P<title>[^*]+?):?\*\*:?\s*$")
_ITEM = re.compile(r"^-\s*[`'\"]*(?P<name>[A-Za-z_]\w*)[`'\"]*\s*:?\s*$")
_FIELD = re.compile(r"^\s+-\s*\*\*(?P<key>Type|Default|Description)\*\*\s*:\s?(?P<value>.*)$", re.IGNORECASE)
_FENCE = re.compile(r"```[a-zA-Z]*\n(.*?)```", re.DOTALL)


def _jsonable(value: Any) -> bool:
    if value is None or isinstance(value, (bool, int, str)):
        return True
    if isinstance(value, float):
        return math.isfinite(value)
    if isinstance(value, list):
        return all(_jsonable(v) for v in value)
    if isinstance(value, dict):
        return all(isinstance(k, str) and _jsonable(v) for k, v in value.items())
    return False


def _literal(node: ast.expr, source: str) -> Any:
    """Default value from an AST node; anything non-literal is kept as source text."""
    try:
        value = ast.literal_eval(node)
    except (ValueError, SyntaxError, TypeError):
        return ast.get_source_segment(source, node) or ast.unparse(node)
    if isinstance(value, tuple):
        value = list(value)
    if not _jsonable(value):
        return ast.unparse(node)
    return value


def parse_default_text(text: str) -> Any:
    """Parse one default as written in prose (``0.1``, ``[128, 64, 32]``, ``'relu'``)."""
    text = text.strip().rstrip(".,")
    try:
        node = ast.parse(text, mode="eval").body
    except SyntaxError:
        return text
    return _literal(node, text)


def _normalize_quotes(block: str) -> str:
    block = block.replace("‘", "'").replace("’", "'").replace("“", '"').replace("”", '"')
    block = block.replace("``", '"').replace("''", '"')
    return block.replace("`", "'")


def _brace_block(text: str, start: int) -> str | None:
    open_at = text.find("{", start)
    if open_at < 0:
        return None
    depth = 0
    for i in range(open_at, len(text)):
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
            if depth == 0:
                return text[open_at:i + 1]
    return None


def _parse_mapping(block: str) -> tuple[dict[str, Any], list[str]] | None:
    for candidate in (block, _normalize_quotes(block)):
        try:
            node = ast.parse(candidate.strip(), mode="eval").body
        except SyntaxError:
            continue
        if not isinstance(node, ast.Dict):
            return None
        mapping: dict[str, Any] = {}
        warnings: list[str] = []
        for k, v in zip(node.keys, node.values):
            if not (isinstance(k, ast.Constant) and isinstance(k.value, str)):
                warnings.append("skipped non-string key in defaults mapping")
                continue
            name = k.value
            if name in mapping:
                warnings.append(f"duplicate parameter {name!r}; keeping the later value")
            mapping[name] = _literal(v, candidate.strip())
        return mapping, warnings
    return None


def _find_defaults(raw: str) -> tuple[dict[str, Any], list[str]] | None:
    idx = raw.lower().rfind("python dictionary of")
    if idx >= 0:
        block = _brace_block(raw, idx)
        if block:
            parsed = _parse_mapping(block)
            if parsed is not None:
                return parsed
    for fenced in reversed(_FENCE.findall(raw)):
        parsed = _parse_mapping(fenced)
        if parsed is not None:
            return parsed
    return None


def _sections(raw: str) -> dict[str, list[str]]:
    """Split on bold ``**Heading:**`` lines; text before the first heading is ``""``."""
    out: dict[str, list[str]] = {"": []}
    current = ""
    for line in raw.splitlines():
        m = _HEADING.match(line.strip()) if not line.startswith((" ", "\t", "-")) else None
        if m:
            current = m.group("title").strip().lower()
            out.setdefault(current, [])
            continue
        out[current].append(line)
    return out


def _parse_items(lines: list[str], warnings: list[str]) -> dict[str, dict[str, str]]:
    items: dict[str, dict[str, str]] = {}
    current: dict[str, str] | None = None
    last_key = None
    for line in lines:
        if not line.strip():
            continue
        m = _ITEM.match(line)
        if m:
            name = m.group("name")
            if name in items:
                warnings.append(f"duplicate parameter section {name!r}; keeping the later one")
                del items[name]
            current = items[name] = {}
            last_key = None
            continue
        f = _FIELD.match(line)
        if f and current is not None:
            last_key = f.group("key").lower()
            current[last_key] = f.group("value").strip()
        elif current is not None and last_key is not None and line.startswith((" ", "\t")):
            current[last_key] = (current[last_key] + " " + line.strip()).strip()
    return items


def _coerce(value: Any, type_text: str) -> Any:
    t = type_text.strip().lower()
    if t.startswith("float") and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def parse_doc_summary(raw: str, model: str, library: str, retrieved_at: datetime | None = None,
                      source: str = "web") -> ModelDocSummary:
    found = _find_defaults(raw)
    if found is None:
        raise NoParameterBlock(f"no default-parameter mapping found for {model}")
    defaults, warnings = found
    sections = _sections(raw)

    param_lines: list[str] = []
    attr_lines: list[str] = []
    usage: list[str] = []
    for title, lines in sections.items():
        if title.startswith("parameters"):
            param_lines += lines
        elif title.startswith("attributes"):
            attr_lines += lines
        elif title.startswith(("usage", "notes", "example", "instructions")):
            usage += lines
    items = _parse_items(param_lines, warnings)
    attrs = _parse_items(attr_lines, [])

    params = []
    for name, value in defaults.items():
        if not name.isidentifier():
            warnings.append(f"ignored non-identifier parameter {name!r}")
            continue
        info = items.get(name, {})
        params.append(ParamSpec(name, info.get("type", ""), _coerce(value, info.get("type", "")),
                                info.get("description", "")))
    for name, info in items.items():
        if name in defaults:
            continue
        if "default" in info:
            value = parse_default_text(info["default"])
            params.append(ParamSpec(name, info.get("type", ""), _coerce(value, info.get("type", "")),
                                    info.get("description", "")))
        else:
            params.append(ParamSpec(name, info.get("type", ""), None, info.get("description", ""), required=True))

    for w in warnings:
        logger.warning("%s/%s: %s", library, model, w)
    description = "\n".join(sections.get("", [])).strip()
    return ModelDocSummary(
        model=model,
        library=library,
        description=description,
        init_params=tuple(params),
        attributes=tuple((n, a.get("type", ""), a.get("description", "")) for n, a in attrs.items()),
        usage_notes="\n".join(usage).strip(),
        source=source,
        retrieved_at=retrieved_at or datetime.now(timezone.utc),
        parse_warnings=tuple(warnings),
    )


def render_doc_summary(doc: ModelDocSummary) -> str:
    """Inverse of :func:`parse_doc_summary` for the fields prompts rely on."""
    lines = [doc.description or f"{doc.model} in {LIBRARY_TITLES.get(doc.library, doc.library)}.", ""]
    lines.append("**Parameters:**")
    for p in doc.init_params:
        lines.append(f"- `{p.name}`:")
        lines.append(f"  - **Type**: {p.type_text}")
        if not p.required:
            lines.append(f"  - **Default**: {p.default_value!r}")
        lines.append(f"  - **Description**: {p.description}")
    if doc.attributes:
        lines.append("**Attributes:**")
        for name, type_text, desc in doc.attributes:
            lines += [f"- `{name}`:", f"  - **Type**: {type_text}", f"  - **Description**: {desc}"]
    if doc.usage_notes:
        lines += ["**Usage:**", doc.usage_notes]
    lines.append(DEFAULTS_HEADING)
    lines.append("```python")
    lines.append("{")
    for name, value in doc.defaults().items():
        lines.append(f"    {name!r}: {value!r},")
    lines.append("}")
    lines.append("```")
    return "\n".join(lines)


# ---------------------------------------------------------------------------

SUMMARY_INSTRUCTIONS = """You are the documentation researcher of an anomaly-detection pipeline builder.
Search the official documentation, source code and tutorials for the requested model and summarise them.
Structure the answer exactly as:
1. A short description paragraph.
2. **Initialization Function (`__init__`):** one paragraph.
3. **Parameters:** one bullet per `__init__` argument, written as
   - `name`:
     - **Type**: ...
     - **Default**: ... (omit this line for required arguments)
     - **Description**: ...
4. **Attributes:** bullets in the same style.
5. **Usage:** import path and the fit / decision_function / predict calls.
6. Finish with the heading
   **Python Dictionary of `__init__` Parameters with Default Values:**
   followed by a fenced ```python block holding one dict literal of every argument that has a default."""

STRICT_SUFFIX = """
Your previous answer could not be parsed. The LAST thing in your answer MUST be a fenced ```python block
containing a single dict literal mapping each __init__ argument name (string) to its default value."""


@dataclass
class LookupStat:
    library: str
    model: str
    source: str
    latency: float
    web_search_calls: int
    cost: float


class InfoMiner:
    def __init__(self, gateway: Gateway, cache, echo: Callable[[str], None] = print):
        self.gateway = gateway
        self.cache = cache
        self.echo = echo
        self.lookups: list[LookupStat] = []

    def query_for(self, library: str, model: str) -> str:
        return f"{LIBRARY_TITLES.get(library, library)} {model} __init__ parameters"

    def get_model_info(self, library: str, model: str, now: datetime | None = None,
                       refresh: bool = False) -> ModelDocSummary:
        now = now or datetime.now(timezone.utc)
        t0 = time.perf_counter()
        if not refresh:
            hit = self.cache.lookup(library, model, now)
            if isinstance(hit, ModelDocSummary):
                self.echo(f"=== [Info Miner] Using cached documentation for {model} ===")
                doc = replace(hit, source="cache")
                self.lookups.append(LookupStat(library, model, "cache", time.perf_counter() - t0, 0, 0.0))
                self.echo(f"=== [Info Miner] Documentation retrieved for {model} ===")
                return doc

        self.echo(f"=== [Info Miner] Querying documentation for {model} ===")
        ledger = self.gateway.ledger
        n0, cost0 = len(ledger), ledger.cost
        reported_latency = 0.0
        query = self.query_for(library, model)
        doc = None
        for instructions in (SUMMARY_INSTRUCTIONS, SUMMARY_INSTRUCTIONS + STRICT_SUFFIX):
            raw, latency = self.gateway.web_search_summarize(query, instructions)
            reported_latency += latency
            self.echo(raw)
            try:
                doc = parse_doc_summary(raw, model, library, retrieved_at=now, source="web")
                break
            except NoParameterBlock:
                logger.warning("no parameter block for %s/%s; asking again with a stricter format", library, model)
        if doc is None:
            raise DocumentationUnavailable(f"could not extract parameters for {library}/{model}")

        self.cache.store_doc(doc, retrieved_at=now)
        self.echo(f"[Cache Updated] Stored new documentation for {model}")
        new = ledger.entries[n0:]
        self.lookups.append(LookupStat(library, model, "web", reported_latency + (time.perf_counter() - t0),
                                       sum(e.web_search_calls for e in new), ledger.cost - cost0))
        self.echo(f"=== [Info Miner] Documentation retrieved for {model} ===")
        return doc
