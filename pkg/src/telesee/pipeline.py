"""Three-stage hierarchical decoding: entity names, then type and keys, then values.

The document is encoded once; every stage decodes against that encoding, and
all prompts inside a stage go through the shared decoder as one batch.
"""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .corpus import DocumentRecord, StructuredEntity
from .model import (
    DecodeConstraint,
    EncoderOutput,
    Example,
    ModelConfig,
    Seq2SeqModel,
    Trainer,
    init_params,
    stage_losses,
)
from .schema import (
    ATTRIBUTE_KEY,
    ENT_SEP,
    ENTITY_TYPE,
    PRED_ENT_NAMES,
    PRED_TYPE_AND_ATTR,
    PRED_VAL,
    CompiledSchema,
    SchemaError,
)
from .textproc import UNK, Tokenizer, Vocabulary, build_vocab, detokenize

log = logging.getLogger(__name__)

STAGES = (1, 2, 3)
JSON_FIELDS = ("entities", "name", "type", "attributes")


class TrainingDiverged(RuntimeError):
    pass


def model_config_for(vocab: Vocabulary, **overrides) -> ModelConfig:
    ids = dict(pad_id=vocab.pad_id, bos_id=vocab.bos_id, eos_id=vocab.eos_id)
    return ModelConfig(vocab_size=len(vocab), **{**overrides, **ids})


def vocab_for(records: Sequence[DocumentRecord], schema: CompiledSchema, min_count: int = 1,
              extra_texts: Sequence[str] = ()) -> Vocabulary:
    """Vocabulary over document texts, gold names/values, schema display names
    (spelled out by the JSON baseline) and any extra texts."""
    texts = [r.text for r in records] + list(schema.entity_types) + list(schema.attribute_keys)
    texts.append(" ".join(JSON_FIELDS))
    for r in records:
        for e in r.entities or ():
            texts.append(e.name)
            texts.extend(e.attributes.values())
    return build_vocab(list(texts) + list(extra_texts), schema, min_count)


@dataclass
class ExtractionTrace:
    doc_id: str | None = None
    encoder_calls: int = 0
    prompts: dict[int, int] = field(default_factory=lambda: {1: 0, 2: 0, 3: 0})
    prompt_tokens: dict[int, int] = field(default_factory=lambda: {1: 0, 2: 0, 3: 0})
    output_tokens: dict[int, int] = field(default_factory=lambda: {1: 0, 2: 0, 3: 0})
    seconds: dict[int, float] = field(default_factory=lambda: {0: 0.0, 1: 0.0, 2: 0.0, 3: 0.0})
    truncated: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "encoder_calls": self.encoder_calls,
            "prompts": self.prompts,
            "prompt_tokens": self.prompt_tokens,
            "output_tokens": self.output_tokens,
            "seconds": self.seconds,
            "truncated": self.truncated,
            "warnings": self.warnings,
        }


class TeleSEE:
    """Schema-guided extractor over a shared encoder-decoder."""

    def __init__(self, model: Seq2SeqModel, schema: CompiledSchema, vocab: Vocabulary):
        if model.cfg.vocab_size != len(vocab):
            raise ValueError("model and vocabulary sizes differ")
        for tok in schema.special_tokens:
            if tok not in vocab:
                raise SchemaError(f"vocabulary lacks schema token {tok!r}")
        self.model = model
        self.schema = schema
        self.vocab = vocab
        self.tok = Tokenizer(vocab)
        self.type_ids = frozenset(vocab.id(t) for t in schema.type_tokens.values())
        self.key_ids = frozenset(vocab.id(t) for t in schema.key_tokens.values())
        self.element_ids = self.type_ids | self.key_ids
        self.sep_id = vocab.id(ENT_SEP)
        self.stage2_constraint = DecodeConstraint.first_type(self.type_ids, self.element_ids, vocab.eos_id)

    # -- prompts ---------------------------------------------------------

    def stage1_prompt(self) -> list[int]:
        return [self.vocab.id(PRED_ENT_NAMES)]

    def stage2_prompt(self, name: str) -> list[int]:
        return [self.vocab.id(PRED_TYPE_AND_ATTR)] + self.tok.encode(name)

    def stage3_prompt(self, name: str, entity_type: str, key: str) -> list[int]:
        return (
            [self.vocab.id(PRED_VAL)]
            + self.tok.encode(name)
            + [self.vocab.id(self.schema.lookup_token(entity_type, ENTITY_TYPE)),
               self.vocab.id(self.schema.lookup_token(key, ATTRIBUTE_KEY))]
        )

    def source_ids(self, text: str) -> list[int]:
        return self.tok.encode(text)

    def encode(self, text: str, trace: ExtractionTrace | None = None) -> EncoderOutput:
        if trace is not None:
            trace.encoder_calls += 1
        with torch.no_grad():
            return self.model.encode(self.source_ids(text))

    # -- teacher-forcing targets ------------------------------------------

    def build_training_examples(self, record: DocumentRecord) -> list[Example]:
        """One stage-1 example, one stage-2 example per entity, one stage-3 example per (entity, key)."""
        src = self.source_ids(record.text)
        entities = list(record.entities or ())
        lowered = record.text.lower()
        order = sorted(range(len(entities)), key=lambda i: (
            lowered.find(entities[i].name.lower()) % (len(lowered) + 1), i))
        names_target: list[int] = []
        for n, i in enumerate(order):
            if n:
                names_target.append(self.sep_id)
            names_target.extend(self.tok.encode(entities[i].name))
        examples = [Example(src, self.stage1_prompt(), names_target, stage=1)]
        for i in order:
            ent = entities[i]
            try:
                type_tok = self.schema.lookup_token(ent.entity_type, ENTITY_TYPE)
                keys = sorted((self.schema.canonical_key(k) for k in ent.attributes),
                              key=self.schema.key_index)
            except SchemaError as exc:
                raise SchemaError(f"{record.doc_id}: {exc}") from None
            key_toks = [self.vocab.id(self.schema.lookup_token(k, ATTRIBUTE_KEY)) for k in keys]
            examples.append(Example(src, self.stage2_prompt(ent.name),
                                    [self.vocab.id(type_tok)] + key_toks, stage=2))
            by_key = {self.schema.canonical_key(k): v for k, v in ent.attributes.items()}
            for key in keys:
                examples.append(Example(src, self.stage3_prompt(ent.name, ent.entity_type, key),
                                        self.tok.encode(by_key[key]), stage=3))
        return examples

    # -- stages -----------------------------------------------------------

    def _decode(self, enc, prompts, constraint, batching, max_len=None):
        if batching == "parallel":
            return self.model.greedy_decode(enc, prompts, constraint, max_len)
        return [self.model.greedy_decode(enc, [p], constraint, max_len)[0] for p in prompts]

    def stage1_identify(self, enc: EncoderOutput, trace: ExtractionTrace | None = None) -> list[str]:
        out = self.model.greedy_decode(enc, [self.stage1_prompt()])[0]
        if trace is not None:
            trace.prompts[1] += 1
            trace.prompt_tokens[1] += 1
            trace.output_tokens[1] += len(out) + 1
        names, seen, piece = [], set(), []
        for tok_id in out + [self.sep_id]:
            if tok_id != self.sep_id:
                piece.append(tok_id)
                continue
            name = detokenize(self.tok.decode(piece)).strip()
            piece = []
            if not name or name.casefold() in seen:
                continue
            if UNK in name and trace is not None:
                trace.warnings.append(f"entity name contains out-of-vocabulary words: {name!r}")
            seen.add(name.casefold())
            names.append(name)
        return names

    def stage2_keys(self, enc: EncoderOutput, names: Sequence[str], batching: str = "parallel",
                    trace: ExtractionTrace | None = None) -> list[tuple[str | None, list[str]]]:
        prompts = [self.stage2_prompt(n) for n in names]
        outs = self._decode(enc, prompts, self.stage2_constraint, batching)
        results = []
        for name, prompt, out in zip(names, prompts, outs):
            if trace is not None:
                trace.prompts[2] += 1
                trace.prompt_tokens[2] += len(prompt)
                trace.output_tokens[2] += len(out) + 1
            etype, keys = None, []
            for tok_id in out:
                elem = self.schema.decode_token(self.vocab.token(tok_id))
                if elem.kind == ENTITY_TYPE:
                    if etype is None:
                        etype = elem.name
                elif elem.name not in keys:
                    keys.append(elem.name)
            if etype is None and trace is not None:
                trace.warnings.append(f"no entity type decoded for {name!r}; entity dropped")
            results.append((etype, keys))
        return results

    def stage3_values(self, enc: EncoderOutput, requests: Sequence[tuple[str, str, str]],
                      batching: str = "parallel", trace: ExtractionTrace | None = None) -> list[str]:
        """``requests`` holds (entity name, entity type, attribute key) triples."""
        prompts = [self.stage3_prompt(*r) for r in requests]
        outs = self._decode(enc, prompts, None, batching)
        if trace is not None:
            trace.prompts[3] += len(prompts)
            trace.prompt_tokens[3] += sum(len(p) for p in prompts)
            trace.output_tokens[3] += sum(len(o) + 1 for o in outs)
        return [self.tok.decode_text(o) for o in outs]

    def extract(self, text: str, batching: str = "parallel",
                doc_id: str | None = None) -> tuple[list[StructuredEntity], ExtractionTrace]:
        if batching not in ("parallel", "sequential"):
            raise ValueError(f"unknown batching mode {batching!r}")
        trace = ExtractionTrace(doc_id)
        t0 = time.perf_counter()
        enc = self.encode(text, trace)
        trace.truncated = enc.truncated
        t1 = time.perf_counter()
        names = self.stage1_identify(enc, trace)
        t2 = time.perf_counter()
        typed = self.stage2_keys(enc, names, batching, trace) if names else []
        t3 = time.perf_counter()
        kept = [(n, t, keys) for n, (t, keys) in zip(names, typed) if t is not None]
        requests = [(n, t, k) for n, t, keys in kept for k in keys]
        values = self.stage3_values(enc, requests, batching, trace) if requests else []
        t4 = time.perf_counter()
        it = iter(values)
        entities = [
            StructuredEntity(n, t, {k: next(it) for k in keys}, self.schema.version)
            for n, t, keys in kept
        ]
        trace.seconds = {0: t1 - t0, 1: t2 - t1, 2: t3 - t2, 3: t4 - t3}
        return entities, trace

    def predict(self, records: Sequence[DocumentRecord], batching: str = "parallel") -> list[DocumentRecord]:
        out = []
        for rec in records:
            ents, _ = self.extract(rec.text, batching, rec.doc_id)
            out.append(DocumentRecord(rec.doc_id, rec.text, tuple(ents), self.schema.version))
        return out


def build_training_examples(record: DocumentRecord, extractor: TeleSEE) -> list[Example]:
    return extractor.build_training_examples(record)


# -- training -----------------------------------------------------------------

@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    max_additivity_gap: float = 0.0
    skipped_steps: int = 0

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "max_additivity_gap": self.max_additivity_gap,
                "skipped_steps": self.skipped_steps}


def additivity_gap(model: Seq2SeqModel, batch: Sequence[Example]) -> float:
    """|sum of per-stage losses from one shared pass - sum of stage losses computed separately|."""
    with torch.no_grad():
        joint = stage_losses(model, batch)
        separate = {s: stage_losses(model, [ex for ex in batch if ex.stage == s])[s] for s in joint}
    return abs(float(sum(joint.values())) - float(sum(separate.values())))


def train_examples(
    model: Seq2SeqModel,
    examples: Sequence[Example],
    epochs: int,
    batch_size: int = 32,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    warmup_steps: int = 100,
    seed: int = 0,
    verify_every: int = 0,
    stop: Callable[[int, dict], bool] | None = None,
) -> TrainHistory:
    """Shuffled mini-batches mixing all stages; the step loss is the sum of stage losses.

    ``verify_every`` > 0 re-derives the stage losses from separate passes every
    that many steps and records the largest discrepancy. ``stop(epoch, row)``
    can end training early.
    """
    if not examples:
        raise ValueError("no training examples")
    rng = random.Random(seed)
    torch.manual_seed(seed)
    trainer = Trainer(model, lr=lr, weight_decay=weight_decay, warmup_steps=warmup_steps)
    history = TrainHistory()
    order = list(range(len(examples)))
    for epoch in range(1, epochs + 1):
        rng.shuffle(order)
        sums: dict[int, float] = {}
        counts: dict[int, int] = {}
        for start in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[start:start + batch_size]]
            parts: dict[int, torch.Tensor] = {}

            def loss_fn():
                parts.update(stage_losses(model, batch))
                return sum(parts.values())

            loss, applied = trainer.step(loss_fn)
            if not math.isfinite(float(loss)):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {trainer.steps}: "
                    f"{ {s: float(v) for s, v in parts.items()} }")
            for s, v in parts.items():
                sums[s] = sums.get(s, 0.0) + float(v.detach())
                counts[s] = counts.get(s, 0) + 1
            if verify_every and trainer.steps % verify_every == 0:
                history.max_additivity_gap = max(history.max_additivity_gap, additivity_gap(model, batch))
        stage_mean = {s: sums[s] / counts[s] for s in sorted(sums)}
        row = {"epoch": epoch, "stage_loss": stage_mean, "total_loss": math.fsum(stage_mean.values())}
        history.epochs.append(row)
        log.info("epoch %d loss %.4f %s", epoch, row["total_loss"], stage_mean)
        if stop is not None and stop(epoch, row):
            break
    history.skipped_steps = trainer.skipped
    return history


def train(
    extractor: TeleSEE,
    records: Sequence[DocumentRecord],
    epochs: int,
    **kwargs,
) -> TrainHistory:
    examples = [ex for rec in records for ex in extractor.build_training_examples(rec)]
    return train_examples(extractor.model, examples, epochs, **kwargs)


def new_extractor(records: Sequence[DocumentRecord], schema: CompiledSchema, vocab: Vocabulary | None = None,
                  dtype: torch.dtype = torch.float64, **cfg_overrides) -> TeleSEE:
    vocab = vocab or vocab_for(records, schema)
    model = init_params(model_config_for(vocab, **cfg_overrides), dtype)
    return TeleSEE(model, schema, vocab)
