"""Extraction schema and its special-token registry."""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

ENTITY_TYPE = "entity_type"
ATTRIBUTE_KEY = "attribute_key"

TYPE_PREFIX = "ent_type_"
KEY_PREFIX = "attr_"

# Control tokens, in registry order.
PRED_ENT_NAMES = "<pred_ent_names>"
PRED_TYPE_AND_ATTR = "<pred_type_and_attribute>"
PRED_VAL = "<pred_val>"
ENT_SEP = "<ent_sep>"
BOS = "<bos>"
EOS = "<eos>"
PAD = "<pad>"
CONTROL_TOKENS = (PRED_ENT_NAMES, PRED_TYPE_AND_ATTR, PRED_VAL, ENT_SEP, BOS, EOS, PAD)


class SchemaError(ValueError):
    """Raised for invalid schema definitions or unknown schema elements."""


class SchemaMismatchError(SchemaError):
    """Raised when inputs were produced under different schema versions."""


def _normalize(name: str) -> str:
    return unicodedata.normalize("NFC", name).strip().lower()


def slugify(name: str) -> str:
    """Lowercase and collapse every run of non-alphanumerics into ``_``."""
    slug = re.sub(r"[\W_]+", "_", _normalize(name))
    return slug.strip("_")


@dataclass(frozen=True)
class SchemaDef:
    entity_types: tuple[str, ...]
    attribute_keys: tuple[str, ...]
    version: str = "1"

    def __post_init__(self):
        object.__setattr__(self, "entity_types", tuple(self.entity_types))
        object.__setattr__(self, "attribute_keys", tuple(self.attribute_keys))
        for kind, names in (("entity_types", self.entity_types), ("attribute_keys", self.attribute_keys)):
            if not names:
                raise SchemaError(f"{kind} must be non-empty")
            seen: dict[str, str] = {}
            for name in names:
                if not isinstance(name, str) or not name.strip():
                    raise SchemaError(f"{kind} contains an empty name")
                norm = _normalize(name)
                if norm in seen:
                    raise SchemaError(f"duplicate name in {kind}: {seen[norm]!r} and {name!r}")
                seen[norm] = name

    @classmethod
    def from_dict(cls, data: Mapping) -> "SchemaDef":
        try:
            return cls(
                entity_types=tuple(data["entity_types"]),
                attribute_keys=tuple(data["attribute_keys"]),
                version=str(data["version"]),
            )
        except KeyError as exc:
            raise SchemaError(f"schema file is missing field {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path: str | Path) -> "SchemaDef":
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        # A compiled registry carries its source definition.
        if "definition" in data:
            data = data["definition"]
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "entity_types": list(self.entity_types),
            "attribute_keys": list(self.attribute_keys),
        }


@dataclass(frozen=True)
class SchemaElement:
    kind: str  # ENTITY_TYPE or ATTRIBUTE_KEY
    name: str


@dataclass(frozen=True)
class CompiledSchema:
    """Immutable bijection between schema elements and special tokens."""

    definition: SchemaDef
    type_tokens: Mapping[str, str]
    key_tokens: Mapping[str, str]
    control_tokens: tuple[str, ...] = CONTROL_TOKENS
    _reverse: Mapping[str, SchemaElement] = field(default_factory=dict, repr=False, compare=False)

    @property
    def version(self) -> str:
        return self.definition.version

    @property
    def entity_types(self) -> tuple[str, ...]:
        return self.definition.entity_types

    @property
    def attribute_keys(self) -> tuple[str, ...]:
        return self.definition.attribute_keys

    @property
    def element_tokens(self) -> tuple[str, ...]:
        """Type tokens then key tokens, in declaration order."""
        return tuple(self.type_tokens.values()) + tuple(self.key_tokens.values())

    @property
    def special_tokens(self) -> tuple[str, ...]:
        return self.control_tokens + self.element_tokens

    def key_index(self, key: str) -> int:
        return self.attribute_keys.index(self.canonical_key(key))

    def canonical_type(self, name: str) -> str:
        return self.decode_token(self.lookup_token(name, ENTITY_TYPE)).name

    def canonical_key(self, name: str) -> str:
        return self.decode_token(self.lookup_token(name, ATTRIBUTE_KEY)).name

    def lookup_token(self, element: str, kind: str | None = None) -> str:
        norm = _normalize(element)
        if kind in (None, ENTITY_TYPE):
            for name, tok in self.type_tokens.items():
                if _normalize(name) == norm:
                    return tok
        if kind in (None, ATTRIBUTE_KEY):
            for name, tok in self.key_tokens.items():
                if _normalize(name) == norm:
                    return tok
        raise SchemaError(f"unknown schema element: {element!r}")

    def decode_token(self, token: str) -> SchemaElement:
        try:
            return self._reverse[token]
        except KeyError:
            raise SchemaError(f"not a registered schema token: {token!r}") from None

    def is_type_token(self, token: str) -> bool:
        elem = self._reverse.get(token)
        return elem is not None and elem.kind == ENTITY_TYPE

    def check_version(self, other_version: str) -> None:
        if other_version != self.version:
            raise SchemaMismatchError(
                f"schema version mismatch: {other_version!r} vs {self.version!r}"
            )

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "definition": self.definition.to_dict(),
            "type_tokens": dict(self.type_tokens),
            "key_tokens": dict(self.key_tokens),
            "control_tokens": list(self.control_tokens),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def compile_schema(definition: SchemaDef) -> CompiledSchema:
    """Assign every entity type and attribute key a unique special token.

    Raises SchemaError when two display names map to the same slug.
    """
    owners: dict[str, str] = {tok: "control token" for tok in CONTROL_TOKENS}
    type_tokens: dict[str, str] = {}
    key_tokens: dict[str, str] = {}
    reverse: dict[str, SchemaElement] = {}
    for kind, prefix, names, out in (
        (ENTITY_TYPE, TYPE_PREFIX, definition.entity_types, type_tokens),
        (ATTRIBUTE_KEY, KEY_PREFIX, definition.attribute_keys, key_tokens),
    ):
        for name in names:
            slug = slugify(name)
            if not slug:
                raise SchemaError(f"name {name!r} has no alphanumeric characters")
            token = prefix + slug
            if token in owners:
                raise SchemaError(
                    f"slug collision on {slug!r}: {owners[token]!r} and {name!r}"
                )
            owners[token] = name
            out[name] = token
            reverse[token] = SchemaElement(kind, name)
    return CompiledSchema(
        definition=definition,
        type_tokens=MappingProxyType(type_tokens),
        key_tokens=MappingProxyType(key_tokens),
        _reverse=MappingProxyType(reverse),
    )


def lookup_token(schema: CompiledSchema, element: str) -> str:
    return schema.lookup_token(element)


def decode_token(schema: CompiledSchema, token: str) -> SchemaElement:
    return schema.decode_token(token)


def load_compiled(path: str | Path) -> CompiledSchema:
    """Load either a schema definition or a compiled registry and (re)compile it."""
    compiled = compile_schema(SchemaDef.load(path))
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if "type_tokens" in data and (
        data["type_tokens"] != dict(compiled.type_tokens) or data["key_tokens"] != dict(compiled.key_tokens)
    ):
        raise SchemaError(f"{path}: stored registry does not match its definition")
    return compiled


def default_schema_def() -> SchemaDef:
    """The bundled 6G technique schema."""
    path = Path(__file__).with_name("data") / "schema_6gtech.json"
    return SchemaDef.load(path)


def default_schema() -> CompiledSchema:
    return compile_schema(default_schema_def())


@dataclass
class SavingsReport:
    rows: list[dict]  # element, kind, baseline_tokens, special_tokens, ratio
    mean_ratio: float

    def to_dict(self) -> dict:
        return {"elements": self.rows, "mean_ratio": self.mean_ratio}


def token_savings(schema: CompiledSchema, tokenize) -> SavingsReport:
    """Compare spelled-out token counts against one special token per element.

    ``tokenize`` maps a display name to a list of pieces (e.g. SubwordSplitter.split).
    """
    rows = []
    for kind, names in ((ENTITY_TYPE, schema.entity_types), (ATTRIBUTE_KEY, schema.attribute_keys)):
        for name in names:
            n = len(tokenize(name))
            rows.append({
                "element": name,
                "kind": kind,
                "token": schema.lookup_token(name, kind),
                "baseline_tokens": n,
                "special_tokens": 1,
                "ratio": float(n),
            })
    mean = sum(r["ratio"] for r in rows) / len(rows)
    return SavingsReport(rows, mean)


def stage2_token_counts(entity_type: str, keys: Sequence[str], tokenize) -> tuple[int, int]:
    """(special, spelled-out) stage-2 output lengths for one entity, EOS included.

    The spelled-out form needs a separator after the type and between keys so
    multi-word names stay parseable: ``type SEP key1 SEP key2 EOS``.
    """
    special = 1 + len(keys) + 1
    spelled = len(tokenize(entity_type)) + 1 + sum(len(tokenize(k)) for k in keys) + max(len(keys) - 1, 0) + 1
    return special, spelled


def stage2_efficiency(entities: Iterable, tokenize) -> dict:
    """Mean stage-2 output tokens per entity under both representations."""
    counts = [stage2_token_counts(e.entity_type, list(e.attributes), tokenize) for e in entities]
    if not counts:
        raise ValueError("no entities to measure")
    special = sum(c[0] for c in counts) / len(counts)
    spelled = sum(c[1] for c in counts) / len(counts)
    return {"entities": len(counts), "mean_special": special, "mean_spelled": spelled,
            "ratio": spelled / special}
