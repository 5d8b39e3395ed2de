import json

import pytest
from hypothesis import given, strategies as st

from telesee.schema import (
    ATTRIBUTE_KEY, CONTROL_TOKENS, ENTITY_TYPE, SchemaDef, SchemaError, SchemaMismatchError,
    compile_schema, decode_token, load_compiled, lookup_token, slugify, token_savings,
)
from telesee.textproc import SubwordSplitter


def test_type_and_key_tokens(schema):
    assert lookup_token(schema, "6G-related technique") == "ent_type_6g_related_technique"
    assert lookup_token(schema, "Associated technologies") == "attr_associated_technologies"
    assert lookup_token(schema, "Benefits") == "attr_benefits"


def test_lookup_unknown(schema):
    with pytest.raises(SchemaError):
        lookup_token(schema, "Nonexistent key")


def test_decode_round_trip(schema):
    el = decode_token(schema, "attr_benefits")
    assert (el.kind, el.name) == (ATTRIBUTE_KEY, "Benefits")
    el = decode_token(schema, "ent_type_6g_related_technique")
    assert (el.kind, el.name) == (ENTITY_TYPE, "6G-related technique")
    with pytest.raises(SchemaError):
        decode_token(schema, "hello")


def test_slug_collision_names_both():
    with pytest.raises(SchemaError, match="a_b") as err:
        compile_schema(SchemaDef(("T",), ("A/B", "A B")))
    assert "A/B" in str(err.value) and "A B" in str(err.value)


def test_empty_name_rejected():
    with pytest.raises(SchemaError):
        SchemaDef(("T",), ("",))
    with pytest.raises(SchemaError):
        SchemaDef((), ("k",))


def test_closure(schema):
    assert len(schema.special_tokens) == (
        len(schema.entity_types) + len(schema.attribute_keys) + len(CONTROL_TOKENS))
    assert len(set(schema.special_tokens)) == len(schema.special_tokens)


def test_compile_is_deterministic(schema, tmp_path):
    again = compile_schema(SchemaDef(schema.entity_types, schema.attribute_keys, schema.version))
    assert again.to_dict() == schema.to_dict()
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    schema.save(a)
    again.save(b)
    assert a.read_bytes() == b.read_bytes()
    assert load_compiled(a).to_dict() == schema.to_dict()


def test_version_check(schema):
    schema.check_version(schema.version)
    with pytest.raises(SchemaMismatchError):
        schema.check_version("other")


def test_savings_five_pieces(schema):
    splitter = SubwordSplitter()
    assert splitter.split("6G-related technique") == ["▁6", "G", "-", "related", "▁technique"]
    rep = token_savings(schema, splitter.split)
    row = next(r for r in rep.rows if r["element"] == "6G-related technique")
    assert row["ratio"] == 5.0
    assert next(r for r in rep.rows if r["element"] == "Benefits")["ratio"] == 1.0
    assert all(r["ratio"] >= 1.0 for r in rep.rows)
    assert rep.mean_ratio > 1.0
    json.dumps(rep.to_dict())


names = st.text(alphabet=st.characters(categories=("L", "N", "P", "Zs")), min_size=1, max_size=20).filter(
    lambda s: slugify(s) != "")


@given(st.lists(names, min_size=1, max_size=6, unique_by=slugify),
       st.lists(names, min_size=1, max_size=6, unique_by=slugify))
def test_bijectivity(types, keys):
    compiled = compile_schema(SchemaDef(tuple(types), tuple(keys)))
    tokens = set()
    for kind, group in ((ENTITY_TYPE, types), (ATTRIBUTE_KEY, keys)):
        for name in group:
            tok = compiled.lookup_token(name, kind)
            assert compiled.decode_token(tok).name == name
            tokens.add(tok)
    assert len(tokens) == len(types) + len(keys)


def test_stage2_token_counts_worked_example():
    from telesee.schema import stage2_efficiency, stage2_token_counts
    from telesee.textproc import model_tokens
    # 6 g - related technique | SEP | functions | SEP | components and sub - systems | EOS
    assert stage2_token_counts("6G-related technique", ["Functions", "Components and sub-systems"],
                               model_tokens) == (4, 4 + 1 + 1 + 1 + 5 + 1)
    assert stage2_token_counts("6G-related technique", [], model_tokens) == (2, 6)
    with pytest.raises(ValueError):
        stage2_efficiency([], model_tokens)
