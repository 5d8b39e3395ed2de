"""Structured-entity records, JSONL I/O, corpus statistics, splits and a synthetic generator."""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .schema import CompiledSchema, SchemaError
from .textproc import metric_tokens


@dataclass(frozen=True)
class StructuredEntity:
    name: str
    entity_type: str
    attributes: Mapping[str, str] = field(default_factory=dict)
    schema_version: str | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "type": self.entity_type, "attributes": dict(self.attributes)}


EntitySet = list  # ordered list[StructuredEntity]; order is presentation-only


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    text: str
    entities: tuple[StructuredEntity, ...] | None = None
    schema_version: str | None = None

    def to_dict(self) -> dict:
        out: dict = {"doc_id": self.doc_id, "text": self.text}
        if self.schema_version is not None:
            out["schema_version"] = self.schema_version
        if self.entities is not None:
            out["entities"] = [e.to_dict() for e in self.entities]
        return out


@dataclass
class ValidationIssue:
    line: int
    doc_id: str | None
    message: str

    def __str__(self) -> str:
        where = f"line {self.line}" + (f" ({self.doc_id})" if self.doc_id else "")
        return f"{where}: {self.message}"


class DatasetValidationError(ValueError):
    def __init__(self, issues: Sequence[ValidationIssue], path: str | Path | None = None):
        self.issues = list(issues)
        self.path = path
        shown = "\n".join(str(i) for i in self.issues[:20])
        more = f"\n... {len(self.issues) - 20} more" if len(self.issues) > 20 else ""
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{len(self.issues)} validation error(s):\n{shown}{more}")


def _coerce_value(value) -> str:
    # Lists of values are joined so published files with list-valued keys align.
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


def parse_record(
    obj: Mapping, schema: CompiledSchema | None, line: int = 0, require_entities: bool = True
) -> tuple[DocumentRecord | None, list[ValidationIssue]]:
    """Validate one JSON object; keys and types are canonicalized against ``schema``."""
    issues: list[ValidationIssue] = []
    doc_id = obj.get("doc_id") if isinstance(obj, Mapping) else None
    if not isinstance(obj, Mapping):
        return None, [ValidationIssue(line, None, "line is not a JSON object")]
    if not isinstance(doc_id, str) or not doc_id:
        issues.append(ValidationIssue(line, None, "missing or empty doc_id"))
        doc_id = None
    text = obj.get("text")
    if not isinstance(text, str) or not text.strip():
        issues.append(ValidationIssue(line, doc_id, "missing or empty text"))
    version = obj.get("schema_version")
    if version is not None and schema is not None and str(version) != schema.version:
        issues.append(ValidationIssue(
            line, doc_id, f"schema version {version!r} does not match {schema.version!r}"))
    raw_entities = obj.get("entities")
    entities = None
    if raw_entities is None:
        if require_entities:
            issues.append(ValidationIssue(line, doc_id, "missing entities"))
    elif not isinstance(raw_entities, list):
        issues.append(ValidationIssue(line, doc_id, "entities must be a list"))
    else:
        entities = []
        for k, ent in enumerate(raw_entities):
            if not isinstance(ent, Mapping):
                issues.append(ValidationIssue(line, doc_id, f"entity {k} is not an object"))
                continue
            name = ent.get("name")
            if not isinstance(name, str) or not name.strip():
                issues.append(ValidationIssue(line, doc_id, f"entity {k} has an empty name"))
                continue
            etype = ent.get("type", ent.get("entity_type"))
            if schema is not None:
                try:
                    etype = schema.canonical_type(str(etype))
                except SchemaError:
                    issues.append(ValidationIssue(line, doc_id, f"entity {name!r}: unknown type {etype!r}"))
                    continue
            attrs = ent.get("attributes") or {}
            if not isinstance(attrs, Mapping):
                issues.append(ValidationIssue(line, doc_id, f"entity {name!r}: attributes must be an object"))
                continue
            clean: dict[str, str] = {}
            for key, value in attrs.items():
                if schema is not None:
                    try:
                        key = schema.canonical_key(key)
                    except SchemaError:
                        issues.append(ValidationIssue(line, doc_id, f"entity {name!r}: unknown key {key!r}"))
                        continue
                clean[key] = _coerce_value(value)
            entities.append(StructuredEntity(
                name, etype, clean, schema.version if schema is not None else version))
        entities = tuple(entities)
    if issues:
        return None, issues
    return DocumentRecord(doc_id, text, entities, schema.version if schema is not None else version), []


def load_dataset(
    path: str | Path, schema: CompiledSchema | None, require_entities: bool = True
) -> list[DocumentRecord]:
    """Read a JSONL file; every problem is collected and raised together, ordered by line."""
    records: list[DocumentRecord] = []
    issues: list[ValidationIssue] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                issues.append(ValidationIssue(lineno, None, f"malformed JSON: {exc.msg}"))
                continue
            rec, errs = parse_record(obj, schema, lineno, require_entities)
            issues.extend(errs)
            if rec is None:
                continue
            if rec.doc_id in seen:
                issues.append(ValidationIssue(
                    lineno, rec.doc_id, f"duplicate doc_id (first on line {seen[rec.doc_id]})"))
                continue
            seen[rec.doc_id] = lineno
            records.append(rec)
    if issues:
        raise DatasetValidationError(issues, path)
    return records


def save_dataset(records: Iterable[DocumentRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")


_SENTENCE_END = re.compile(r"(?<=[.?!])(?:\s+|$)")


def split_sentences(text: str) -> list[str]:
    return [s for s in (p.strip() for p in _SENTENCE_END.split(text)) if s]


@dataclass
class CorpusStats:
    documents: int = 0
    sentences: int = 0
    words: int = 0
    entities: int = 0
    attribute_keys: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "documents": self.documents,
            "sentences": self.sentences,
            "words": self.words,
            "entities": self.entities,
            "attribute_keys": dict(self.attribute_keys),
        }


def stats(records: Iterable[DocumentRecord]) -> CorpusStats:
    """Sentences end at . ? ! followed by whitespace or end of text; words are
    metric tokens counted with repetition."""
    out = CorpusStats()
    keys: Counter[str] = Counter()
    for rec in records:
        out.documents += 1
        sentences = split_sentences(rec.text)
        out.sentences += len(sentences)
        out.words += sum(len(metric_tokens(s)) for s in sentences)
        for ent in rec.entities or ():
            out.entities += 1
            keys.update(ent.attributes.keys())
    out.attribute_keys = dict(sorted(keys.items()))
    return out


def split(
    records: Sequence[DocumentRecord], ratios: Sequence[float], seed: int
) -> tuple[list[DocumentRecord], ...]:
    """Shuffle deterministically and cut by largest-remainder rounding."""
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {list(ratios)}")
    n = len(records)
    exact = [r * n for r in ratios]
    sizes = [int(x) for x in exact]
    by_remainder = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in by_remainder[: n - sum(sizes)]:
        sizes[i] += 1
    order = list(range(n))
    random.Random(seed).shuffle(order)
    parts, start = [], 0
    for size in sizes:
        parts.append([records[i] for i in order[start:start + size]])
        start += size
    return tuple(parts)


# -- synthetic generator ---------------------------------------------------

SYNTH_NAMES = (
    "semantic communication",
    "integrated sensing and communication system",
    "reconfigurable intelligent surface",
    "cell free massive mimo",
    "terahertz communication",
    "federated learning",
    "digital twin network",
    "non orthogonal multiple access",
    "mobile edge computing",
    "network slicing",
    "visible light communication",
    "unmanned aerial vehicle relaying",
    "holographic beamforming",
    "satellite terrestrial integration",
    "physical layer security",
    "orbital angular momentum multiplexing",
)

SYNTH_VALUES = {
    "Functions": (
        "extract semantic information", "sense nearby targets", "steer reflected signals",
        "allocate radio resources", "predict channel states", "schedule user traffic",
        "compress transmitted features", "coordinate distributed access points",
        "detect malicious users", "offload heavy computation",
    ),
    "Components and sub-systems": (
        "a semantic encoder and decoder", "passive reflecting elements", "a central processing unit",
        "distributed access points", "a knowledge base", "radar transceivers",
        "edge servers", "a phased antenna array", "local training clients", "optical receivers",
    ),
    "Benefits": (
        "enhances security", "improves spectral efficiency", "reduces backhaul congestion",
        "lowers energy consumption", "extends network coverage", "reduces transmission latency",
        "improves positioning accuracy", "protects user privacy", "increases system throughput",
        "improves link reliability",
    ),
    "Associated technologies": (
        "beamforming design", "artificial noise", "alternating optimization",
        "deep reinforcement learning", "channel estimation", "successive interference cancellation",
        "graph neural networks", "blockchain", "convex relaxation", "transfer learning",
    ),
    "Operating frequency": (
        "the terahertz band", "the millimeter wave band", "the sub six gigahertz band",
        "the visible light spectrum", "the upper midband", "the ka band",
    ),
    "Key performance indicators": (
        "secrecy rate", "sum rate", "energy efficiency", "outage probability",
        "age of information", "bit error rate", "sensing accuracy", "end to end latency",
    ),
    "Application and deployment scenarios": (
        "smart factories", "vehicular networks", "dense urban hotspots", "remote rural areas",
        "indoor offices", "maritime communication", "disaster response", "smart healthcare",
    ),
}

_GENERIC_VALUES = (
    "adaptive control", "low complexity design", "joint optimization", "robust estimation",
    "cooperative transmission", "distributed inference",
)

SYNTH_TEMPLATES = {
    "Functions": "The proposed {name} is designed to {value} .",
    "Components and sub-systems": "In our design {name} consists of {value} .",
    "Benefits": "Results show that {name} {value} .",
    "Associated technologies": "To support {name} we further apply {value} .",
    "Operating frequency": "The considered {name} operates in {value} .",
    "Key performance indicators": "We evaluate {name} in terms of {value} .",
    "Application and deployment scenarios": "We expect {name} to be deployed in {value} .",
}
_GENERIC_TEMPLATE = "For {name} the {key} is {value} ."
_INTROS = (
    "This paper studies {names} for future 6G networks .",
    "We investigate {names} in 6G wireless systems .",
    "In this work we propose {names} for 6G .",
)
_FILLERS = (
    "Simulation results verify the effectiveness of the proposed scheme .",
    "Extensive experiments are conducted to validate the analysis .",
    "Numerical results demonstrate clear gains over existing baselines .",
)


def _finish(sentence: str) -> str:
    return sentence.replace(" .", ".")


def _join_names(names: Sequence[str]) -> str:
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def _synth_document(schema: CompiledSchema, rng: random.Random, doc_id: str):
    n_ent = rng.randint(1, 3)
    names = rng.sample(SYNTH_NAMES, n_ent)
    sentences = [rng.choice(_INTROS).format(names=_join_names(names))]
    entities = []
    n_keys_max = min(5, len(schema.attribute_keys))
    for name in names:
        etype = rng.choice(schema.entity_types)
        keys = rng.sample(schema.attribute_keys, rng.randint(min(2, n_keys_max), n_keys_max))
        keys.sort(key=schema.attribute_keys.index)
        attrs = {}
        for key in keys:
            pool = SYNTH_VALUES.get(key, _GENERIC_VALUES)
            value = rng.choice(pool)
            template = SYNTH_TEMPLATES.get(key, _GENERIC_TEMPLATE)
            sentences.append(template.format(name=name, value=value, key=key.lower()))
            attrs[key] = value
        entities.append(StructuredEntity(name, etype, attrs, schema.version))
    # Sentence order is shuffled after the intro so mention order stays name order.
    body = sentences[1:]
    rng.shuffle(body)
    if rng.random() < 0.5:
        body.append(rng.choice(_FILLERS))
    sentences = [sentences[0]] + body
    n_words = sum(len(s.replace(" .", "").replace(",", "").split()) for s in sentences)
    text = " ".join(_finish(s) for s in sentences)
    return DocumentRecord(doc_id, text, tuple(entities), schema.version), len(sentences), n_words


def synth_generate_with_counts(
    schema: CompiledSchema, n_docs: int, seed: int
) -> tuple[list[DocumentRecord], dict]:
    """Like synth_generate, also returning the generator's own sentence/word tallies."""
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    rng = random.Random(seed)
    records, n_sent, n_words = [], 0, 0
    for i in range(n_docs):
        rec, s, w = _synth_document(schema, rng, f"synth-{seed}-{i:05d}")
        records.append(rec)
        n_sent += s
        n_words += w
    return records, {"documents": n_docs, "sentences": n_sent, "words": n_words}


def synth_generate(schema: CompiledSchema, n_docs: int, seed: int) -> list[DocumentRecord]:
    """Template abstracts with 1-3 entities of 2-5 keys; every value occurs verbatim in the text."""
    return synth_generate_with_counts(schema, n_docs, seed)[0]
