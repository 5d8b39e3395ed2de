import json
from pathlib import Path

import pytest

from telesee.corpus import (
    DatasetValidationError, DocumentRecord, StructuredEntity, load_dataset, save_dataset, split,
    split_sentences, stats, synth_generate, synth_generate_with_counts,
)
from telesee.metric import evaluate
from telesee.model import init_params
from telesee.pipeline import TeleSEE, model_config_for, vocab_for
from telesee.textproc import build_vocab

FIXTURES = Path(__file__).parent / "fixtures"


def _write(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


def _row(doc_id, **attrs):
    return {"doc_id": doc_id, "text": "Semantic communication enhances security.",
            "entities": [{"name": "semantic communication", "type": "6G-related technique",
                          "attributes": attrs or {"Benefits": "enhances security"}}]}


def test_load_valid(schema, tmp_path):
    p = tmp_path / "d.jsonl"
    _write(p, [_row("a"), _row("b")])
    recs = load_dataset(p, schema)
    assert [r.doc_id for r in recs] == ["a", "b"]
    assert recs[0].entities[0].attributes == {"Benefits": "enhances security"}


def test_unknown_key_reported(schema, tmp_path):
    p = tmp_path / "d.jsonl"
    _write(p, [_row("a", Speed="fast")])
    with pytest.raises(DatasetValidationError) as err:
        load_dataset(p, schema)
    assert "a" in str(err.value) and "Speed" in str(err.value)
    assert err.value.issues[0].line == 1


def test_errors_are_aggregated(schema, tmp_path):
    p = tmp_path / "d.jsonl"
    bad_type = _row("c")
    bad_type["entities"][0]["type"] = "Animal"
    p.write_text("\n".join([json.dumps(_row("a")), "{not json", json.dumps(_row("a")),
                            json.dumps(bad_type)]) + "\n", encoding="utf-8")
    with pytest.raises(DatasetValidationError) as err:
        load_dataset(p, schema)
    lines = [i.line for i in err.value.issues]
    assert lines == [2, 3, 4]
    text = str(err.value)
    assert "malformed" in text and "duplicate" in text and "Animal" in text


def test_key_alignment_and_list_values(schema, tmp_path):
    p = tmp_path / "d.jsonl"
    row = _row("a")
    row["entities"][0]["attributes"] = {"benefits": ["enhances security", "saves energy"]}
    _write(p, [row])
    ent = load_dataset(p, schema)[0].entities[0]
    assert ent.attributes == {"Benefits": "enhances security, saves energy"}


def test_version_mismatch(schema, tmp_path):
    p = tmp_path / "d.jsonl"
    row = _row("a")
    row["schema_version"] = "old"
    _write(p, [row])
    with pytest.raises(DatasetValidationError, match="schema version"):
        load_dataset(p, schema)


def test_round_trip(schema, tmp_path):
    recs = synth_generate(schema, 5, seed=1)
    p = tmp_path / "s.jsonl"
    save_dataset(recs, p)
    assert load_dataset(p, schema) == recs


def test_stats_empty():
    s = stats([])
    assert (s.documents, s.sentences, s.words, s.entities) == (0, 0, 0, 0)


def test_stats_match_generator_bookkeeping(schema):
    recs, counts = synth_generate_with_counts(schema, 50, seed=9)
    s = stats(recs)
    assert (s.documents, s.sentences, s.words) == (counts["documents"], counts["sentences"], counts["words"])
    assert s.entities == sum(len(r.entities) for r in recs)
    assert sum(s.attribute_keys.values()) == sum(len(e.attributes) for r in recs for e in r.entities)


def test_stats_deterministic(schema):
    recs = synth_generate(schema, 10, seed=2)
    assert stats(recs) == stats(list(recs))


def test_sentence_rule():
    assert split_sentences("A b. C d? E! 6.5 GHz") == ["A b.", "C d?", "E!", "6.5 GHz"]


def test_split(schema):
    recs = synth_generate(schema, 10, seed=0)
    tr, dev, te = split(recs, (0.8, 0.1, 0.1), seed=7)
    assert (len(tr), len(dev), len(te)) == (8, 1, 1)
    assert split(recs, (0.8, 0.1, 0.1), seed=7) == (tr, dev, te)
    assert sorted(r.doc_id for r in tr + dev + te) == sorted(r.doc_id for r in recs)
    with pytest.raises(ValueError):
        split(recs, (0.5, 0.1), seed=0)


def test_synth_golden(schema):
    golden = json.loads((FIXTURES / "synth_n1_seed7.json").read_text(encoding="utf-8"))
    assert synth_generate(schema, 1, seed=7)[0].to_dict() == golden


def test_synth_values_verbatim(schema):
    for rec in synth_generate(schema, 100, seed=5):
        assert 1 <= len(rec.entities) <= 3
        for e in rec.entities:
            assert 2 <= len(e.attributes) <= 5
            assert e.name in rec.text
            assert all(v in rec.text for v in e.attributes.values())


def test_synth_vocab_small(schema):
    recs = synth_generate(schema, 200, seed=0)
    assert len(build_vocab((r.text for r in recs), schema, min_count=1)) < 2000


def test_validated_records_are_consumable(schema, tmp_path):
    p = tmp_path / "s.jsonl"
    save_dataset(synth_generate(schema, 5, seed=3), p)
    recs = load_dataset(p, schema)
    vocab = vocab_for(recs, schema)
    ex = TeleSEE(init_params(model_config_for(vocab, d_model=16, n_heads=2, n_layers=1, ffn_dim=16)),
                 schema, vocab)
    for r in recs:
        assert ex.build_training_examples(r)
        assert evaluate(list(r.entities), list(r.entities)).delta == 1.0


def test_record_without_entities_roundtrip():
    rec = DocumentRecord("x", "text")
    assert "entities" not in rec.to_dict()
    assert StructuredEntity("n", "t", {"k": "v"}).to_dict()["type"] == "t"
