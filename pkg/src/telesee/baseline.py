"""Monolithic baseline: decode every entity as one JSON string."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Sequence

import torch

from .corpus import DocumentRecord, StructuredEntity
from .model import Example, Seq2SeqModel
from .schema import CompiledSchema, slugify
from .textproc import Tokenizer, Vocabulary, detokenize, model_tokens

_OPEN = {"{": "}", "[": "]"}


def render_json(entities: Sequence[StructuredEntity]) -> str:
    payload = {"entities": [
        {"name": e.name, "type": e.entity_type, "attributes": dict(e.attributes)} for e in entities
    ]}
    return json.dumps(payload, ensure_ascii=False)


def tokens_to_json_text(tokens: Sequence[str]) -> tuple[str, bool]:
    """Rebuild JSON text from decoded pieces, repairing what a truncated or
    malformed decode leaves behind. Returns the text and whether a repair was made.

    Each open container tracks what it expects next: ``key``, ``colon``,
    ``value`` or ``next`` (a comma or the closing bracket).
    """
    parts: list[str] = []
    frames: list[list] = []  # [closer, state]
    words: list[str] = []
    in_string = False
    repaired = False
    started = False

    def value_done():
        if frames:
            frame = frames[-1]
            frame[1] = "colon" if frame[1] == "key" else "next"

    def expecting_value() -> bool:
        return (not frames and not started) or (bool(frames) and frames[-1][1] == "value")

    def close_top():
        closer, state = frames[-1]
        if state == "colon":
            parts.append(':""')
        elif state == "value" and closer == "}":
            parts.append('""')
        if parts and parts[-1] == ",":
            parts.pop()
        parts.append(closer)
        frames.pop()
        value_done()

    for tok in tokens:
        if in_string:
            if tok == '"':
                in_string = False
                if frames and frames[-1][1] == "next":
                    parts.append(",")
                    repaired = True
                    frames[-1][1] = "key" if frames[-1][0] == "}" else "value"
                if frames and frames[-1][1] in ("key", "value"):
                    parts.append(json.dumps(detokenize(words)))
                    value_done()
                else:
                    repaired = True
                words = []
            else:
                words.append(tok)
            continue
        if tok == '"':
            in_string = True
        elif tok in _OPEN:
            if expecting_value():
                parts.append(tok)
                frames.append([_OPEN[tok], "key" if tok == "{" else "value"])
                started = True
            else:
                repaired = True
        elif tok in ("}", "]"):
            if frames and frames[-1][0] == tok and frames[-1][1] in ("next", "key", "value"):
                close_top()
                if not frames:
                    break
            else:
                repaired = True
        elif tok == ":" and frames and frames[-1][1] == "colon":
            parts.append(":")
            frames[-1][1] = "value"
        elif tok == "," and frames and frames[-1][1] == "next":
            parts.append(",")
            frames[-1][1] = "key" if frames[-1][0] == "}" else "value"
        else:
            repaired = True
    if in_string and frames and frames[-1][1] in ("key", "value"):
        parts.append(json.dumps(detokenize(words)))
        value_done()
        repaired = True
    while frames:
        repaired = True
        close_top()
    return "".join(parts), repaired


def parse_json_entities(text: str, schema: CompiledSchema) -> tuple[list[StructuredEntity], list[str]]:
    flags: list[str] = []
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        return [], ["unparseable"]
    raw = data.get("entities") if isinstance(data, dict) else None
    if not isinstance(raw, list):
        return [], flags + ["no entity list"]
    key_by_slug = {slugify(k): k for k in schema.attribute_keys}
    type_by_slug = {slugify(t): t for t in schema.entity_types}
    out = []
    for ent in raw:
        if not isinstance(ent, dict) or not isinstance(ent.get("name"), str) or not ent["name"].strip():
            flags.append("invalid entity")
            continue
        etype = type_by_slug.get(slugify(str(ent.get("type", ""))))
        if etype is None:
            flags.append(f"unknown type {ent.get('type')!r}")
            continue
        attrs = {}
        raw_attrs = ent.get("attributes")
        for k, v in (raw_attrs.items() if isinstance(raw_attrs, dict) else ()):
            key = key_by_slug.get(slugify(k))
            if key is None:
                flags.append(f"unknown key {k!r}")
                continue
            attrs.setdefault(key, v if isinstance(v, str) else json.dumps(v))
        out.append(StructuredEntity(ent["name"], etype, attrs, schema.version))
    return out, flags


@dataclass
class JsonResult:
    entities: list[StructuredEntity]
    output_tokens: int
    flags: list[str]
    seconds: float


class LMJson:
    """Encoder-decoder fine-tuned to emit the whole entity set as JSON."""

    def __init__(self, model: Seq2SeqModel, schema: CompiledSchema, vocab: Vocabulary):
        if model.cfg.vocab_size != len(vocab):
            raise ValueError("model and vocabulary sizes differ")
        self.model = model
        self.schema = schema
        self.vocab = vocab
        self.tok = Tokenizer(vocab)

    def training_example(self, record: DocumentRecord) -> Example:
        target = self.tok.encode(model_tokens(render_json(record.entities or ())))
        return Example(self.tok.encode(record.text), [], target, stage=0)

    def extract(self, text: str) -> JsonResult:
        t0 = time.perf_counter()
        with torch.no_grad():
            enc = self.model.encode(self.tok.encode(text))
        out = self.model.greedy_decode(enc, [[]])[0]
        pieces = self.tok.decode(out)
        json_text, repaired = tokens_to_json_text(pieces)
        entities, flags = parse_json_entities(json_text, self.schema)
        if repaired:
            flags.insert(0, "repaired")
        if len(out) >= self.model.cfg.max_tgt_len:
            flags.insert(0, "truncated")
        return JsonResult(entities, len(out) + 1, flags, time.perf_counter() - t0)

    def predict(self, records: Sequence[DocumentRecord]) -> list[DocumentRecord]:
        return [DocumentRecord(r.doc_id, r.text, tuple(self.extract(r.text).entities), self.schema.version)
                for r in records]


def baseline_json_extract(system: LMJson, document: str) -> tuple[list[StructuredEntity], list[str]]:
    res = system.extract(document)
    return res.entities, res.flags
