import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import pearsonr, spearmanr

from telesee.corpus import DocumentRecord, StructuredEntity, synth_generate
from telesee.metric import (
    ALL_MODES, APPROX, EXACT, MULTIPROP, NAME_KEY, MatchMode, assignment_score, assignment_total,
    attribute_accuracy, brute_force_assignment, entity_similarity, evaluate, evaluate_corpus,
    jaccard, metric_correlation, optimal_assignment, prop_similarity,
)
from telesee.schema import SchemaMismatchError

T = "6G-related technique"


def ent(name, **attrs):
    return StructuredEntity(name, T, {k.replace("_", " "): v for k, v in attrs.items()})


def test_jaccard_examples():
    s = frozenset({"semantic", "communication"})
    assert jaccard(s, s) == 1.0
    assert jaccard({"a"}, {"b"}) == 0.0
    assert jaccard(s, s | {"system"}) == pytest.approx(2 / 3, abs=1e-4)
    assert jaccard(set(), set()) == 1.0


def test_prop_similarity_examples():
    assert prop_similarity("enhances security", "security enhancement") == pytest.approx(1 / 3)
    assert prop_similarity("x y", "x y") == 1.0
    assert prop_similarity("", "x") == 0.0


def test_entity_similarity_examples():
    ref = ent("sc", Functions="a b", Benefits="c d", Components="e f")
    assert entity_similarity(ref, ref) == 1.0
    other = ent("sc", Functions="x", Benefits="y", Components="z")
    assert entity_similarity(other, ref) == pytest.approx(0.25)
    ref2 = ent("sc", Functions="a", Benefits="b")
    missing = ent("sc", Functions="a")
    assert entity_similarity(missing, ref2) == pytest.approx(2 / 3, abs=1e-4)


def test_entity_similarity_version_mismatch():
    a = StructuredEntity("x", T, {}, "v1")
    b = StructuredEntity("x", T, {}, "v2")
    with pytest.raises(SchemaMismatchError):
        entity_similarity(a, b)


def test_assignment_score_examples():
    a, b = ent("Semantic Communication"), ent("semantic communication")
    assert assignment_score(a, b, MatchMode(EXACT)) == 1.0
    j = ent("joint sensing and communication")
    i = ent("integrated sensing and communication")
    assert assignment_score(j, i, MatchMode(APPROX)) == pytest.approx(0.6)
    # name jaccard 0.6, one shared key with value jaccard 0.2 -> 0.5*0.6 + 0.5*0.2
    jp = ent("joint sensing and communication", Benefits="a")
    ip = ent("integrated sensing and communication", Benefits="a b c d e")
    assert prop_similarity("a", "a b c d e") == pytest.approx(0.2)
    assert assignment_score(jp, ip, MatchMode(MULTIPROP, 0.5)) == pytest.approx(0.4)


def test_optimal_assignment_examples():
    S = [[0.9, 0.1], [0.2, 0.8]]
    D = optimal_assignment(S)
    assert D.tolist() == [[1, 0], [0, 1]]
    assert assignment_total(S, D) == pytest.approx(1.7)
    assert optimal_assignment([[0.0]]).sum() == 0
    assert brute_force_assignment([[0.5]]).tolist() == [[1]]
    assert brute_force_assignment([[1, 1], [1, 1]]).tolist() == [[1, 0], [0, 1]]
    assert optimal_assignment([[1, 1], [1, 1]]).tolist() == [[1, 0], [0, 1]]


def test_brute_force_size_limit():
    with pytest.raises(ValueError):
        brute_force_assignment(np.full((9, 9), 0.5))


def test_random_5x6_and_3x3_definitional():
    rng = np.random.default_rng(0)
    for _ in range(50):
        S = rng.random((5, 6))
        assert assignment_total(S, optimal_assignment(S)) == pytest.approx(
            assignment_total(S, brute_force_assignment(S)), abs=1e-12)
        S3 = rng.random((3, 3))
        total = assignment_total(S3, optimal_assignment(S3))
        for perm in itertools.permutations(range(3)):
            assert total >= math.fsum(S3[i, perm[i]] for i in range(3)) - 1e-12


@st.composite
def sim_matrices(draw):
    m = draw(st.integers(0, 5))
    n = draw(st.integers(0, 5))
    # Coarse grid values create many ties, exercising the tie-break.
    vals = st.sampled_from([0.0, 0.0, 0.25, 0.5, 0.5, 1.0])
    return np.array([[draw(vals) for _ in range(n)] for _ in range(m)]).reshape(m, n)


@given(sim_matrices())
@settings(max_examples=300, deadline=None)
def test_solver_matches_brute_force_including_ties(S):
    D = optimal_assignment(S)
    B = brute_force_assignment(S)
    assert np.array_equal(D, B)
    assert (D.sum(axis=0) <= 1).all() and (D.sum(axis=1) <= 1).all()
    assert not (D.astype(bool) & (S <= 0)).any()


@given(sim_matrices(), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_secondary_tie_break_matches_brute_force(S, seed):
    T = np.random.default_rng(seed).choice([0.0, 0.5, 1.0], size=S.shape)
    D = optimal_assignment(S, T)
    assert np.array_equal(D, brute_force_assignment(S, T))
    assert assignment_total(S, D) == pytest.approx(assignment_total(S, optimal_assignment(S)), abs=1e-12)


def test_secondary_prefers_higher_entity_similarity():
    S = [[1.0, 1.0]]
    assert optimal_assignment(S).tolist() == [[1, 0]]
    assert optimal_assignment(S, [[0.5, 1.0]]).tolist() == [[0, 1]]


def test_evaluate_examples():
    e = ent("semantic communication", Functions="extract meaning", Benefits="enhances security")
    assert evaluate([e], [e]).delta == 1.0
    assert evaluate([], [e, ent("b")]).delta == 0.0
    rep = evaluate([e, ent("spurious thing", Functions="zzz")], [e], MatchMode(EXACT))
    assert rep.delta == pytest.approx(0.5)
    assert (rep.m, rep.n, rep.k) == (2, 1, 2)
    assert evaluate([], []).delta == 1.0


def test_attribute_accuracy():
    a = ent("x", Functions="a b", Benefits="c")
    assert attribute_accuracy([(a, a)]) == {NAME_KEY: 1.0, "Functions": 1.0, "Benefits": 1.0}
    pred = ent("x", Functions="a b")
    assert attribute_accuracy([(pred, a)])["Benefits"] == 0.0


def _recompute_attribute_accuracy(preds, refs):
    # Independent recomputation: plain loops over matched pairs under MultiProp.
    table = {}
    for p, r in zip(preds, refs):
        rep = evaluate(list(p.entities), list(r.entities))
        for i, j, _ in rep.per_pair:
            pe, re_ = p.entities[i], r.entities[j]
            pt, rt = set(pe.name.lower().split()), set(re_.name.lower().split())
            table.setdefault(NAME_KEY, []).append(len(pt & rt) / len(pt | rt))
            for key, v in re_.attributes.items():
                pv = set(pe.attributes.get(key, "").lower().split())
                rv = set(v.lower().split())
                table.setdefault(key, []).append(len(pv & rv) / len(pv | rv) if key in pe.attributes else 0.0)
    return {k: sum(v) / len(v) for k, v in table.items()}


def _perturb(records, seed):
    rng = np.random.default_rng(seed)
    out = []
    for r in records:
        ents = []
        for e in r.entities:
            attrs = {k: (v if rng.random() < 0.6 else v.split()[0]) for k, v in e.attributes.items()
                     if rng.random() < 0.85}
            ents.append(StructuredEntity(e.name, e.entity_type, attrs, e.schema_version))
        if ents and rng.random() < 0.3:
            ents.pop()
        out.append(DocumentRecord(r.doc_id, r.text, tuple(ents), r.schema_version))
    return out


def test_corpus_attribute_accuracy_recomputation(schema):
    refs = synth_generate(schema, 30, seed=11)
    preds = _perturb(refs, 1)
    rep = evaluate_corpus(preds, refs)
    expected = _recompute_attribute_accuracy(preds, refs)
    assert rep.per_attribute.keys() == expected.keys()
    for k, v in expected.items():
        assert rep.per_attribute[k] == pytest.approx(v, abs=1e-12)


def test_corpus_pooling(schema):
    refs = synth_generate(schema, 10, seed=4)
    preds = _perturb(refs, 2)
    doc = evaluate_corpus(preds, refs, pooling="document")
    pairs = evaluate_corpus(preds, refs, pooling="pairs")
    assert doc.mean_delta == pytest.approx(np.mean([r.delta for r in doc.documents]))
    assert pairs.mean_delta == pytest.approx(
        sum(r.matched_mass for r in doc.documents) / sum(r.k for r in doc.documents))
    with pytest.raises(ValueError):
        evaluate_corpus(preds, refs, pooling="bogus")


def test_corpus_mixed_versions(schema):
    refs = synth_generate(schema, 2, seed=4)
    preds = [DocumentRecord(r.doc_id, r.text, r.entities, "other") for r in refs]
    with pytest.raises(SchemaMismatchError):
        evaluate_corpus(preds, refs)


def test_correlation_examples():
    flat = {EXACT: 0.5, APPROX: 0.5, MULTIPROP: 0.5}
    for c in metric_correlation([flat, dict(flat)]):
        assert c.spearman == 1.0 and c.degenerate
    rising = [{EXACT: x, APPROX: x + 0.1, MULTIPROP: x * 0.9} for x in (0.1, 0.2, 0.4)]
    assert all(c.pearson > 0 for c in metric_correlation(rising))
    with pytest.raises(ValueError):
        metric_correlation([flat])


def test_correlation_recomputation():
    rng = np.random.default_rng(5)
    systems = [{EXACT: rng.random(), APPROX: rng.random(), MULTIPROP: rng.random()} for _ in range(5)]
    got = metric_correlation(systems)
    x = [s[MULTIPROP] for s in systems]
    for c, other in zip(got, (EXACT, APPROX)):
        y = [s[other] for s in systems]
        assert c.pearson == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
        rx = np.argsort(np.argsort(x))
        ry = np.argsort(np.argsort(y))
        assert c.spearman == pytest.approx(np.corrcoef(rx, ry)[0, 1], abs=1e-12)
        assert c.pearson == pytest.approx(pearsonr(x, y).statistic)
        assert c.spearman == pytest.approx(spearmanr(x, y).statistic)


# -- properties over generated entity sets -----------------------------------

WORDS = ["semantic", "communication", "sensing", "joint", "network", "edge", "secure", "rate"]
KEYS = ["Functions", "Benefits", "Operating frequency"]


@st.composite
def entities(draw, name=None):
    nm = name or " ".join(draw(st.lists(st.sampled_from(WORDS), min_size=1, max_size=3)))
    keys = draw(st.lists(st.sampled_from(KEYS), unique=True, max_size=3))
    attrs = {k: " ".join(draw(st.lists(st.sampled_from(WORDS), min_size=1, max_size=3))) for k in keys}
    return StructuredEntity(nm, T, attrs)


@st.composite
def entity_sets(draw, min_size=0):
    names = draw(st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=3).map(" ".join),
                          unique=True, min_size=min_size, max_size=5))
    return [draw(entities(name=n)) for n in names]


@given(entity_sets(min_size=1))
@settings(max_examples=100, deadline=None)
def test_identity_all_modes(E):
    for mode in ALL_MODES:
        assert evaluate(E, E, mode).delta == 1.0


@given(entity_sets(), entity_sets(), st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_range_and_permutation_invariance(P, R, rnd):
    for mode in ALL_MODES:
        base = evaluate(P, R, mode)
        assert 0.0 <= base.delta <= 1.0
        assert all(0.0 <= s <= 1.0 for _, _, s in base.per_pair)
        P2, R2 = P[:], R[:]
        rnd.shuffle(P2)
        rnd.shuffle(R2)
        other = evaluate(P2, R2, mode)
        assert other.delta == base.delta
        assert sorted(s for *_, s in other.per_pair) == sorted(s for *_, s in base.per_pair)


@given(entity_sets(min_size=1))
@settings(max_examples=100, deadline=None)
def test_symmetric_penalty(E):
    spurious = StructuredEntity("zzz unrelated", T, {"Functions": "qqq"})
    for mode in ALL_MODES:
        full = evaluate(E, E, mode).delta
        assert evaluate(E + [spurious], E, mode).delta < full
        assert evaluate(E[1:], E, mode).delta < full


@given(entity_sets(), entity_sets())
@settings(max_examples=100, deadline=None)
def test_exact_matches_admissible_under_approx(P, R):
    exact = evaluate(P, R, MatchMode(EXACT))
    S_approx = np.array([[assignment_score(p, r, MatchMode(APPROX)) for r in R] for p in P]).reshape(len(P), len(R))
    for i, j, _ in exact.per_pair:
        assert S_approx[i, j] > 0
    assert len(evaluate(P, R, MatchMode(APPROX)).per_pair) >= len(exact.per_pair)
