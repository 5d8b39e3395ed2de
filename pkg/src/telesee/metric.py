"""Set-level similarity between predicted and reference structured entities.

Pairs of entities are aligned one-to-one by an optimal assignment whose
objective depends on the match mode; the matched pairs are then scored with
the attribute-level entity similarity and averaged over ``max(m, n)``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import pearsonr, spearmanr

from .corpus import DocumentRecord, StructuredEntity
from .schema import SchemaMismatchError
from .textproc import normalize_token_set

EXACT = "exact"
APPROX = "approx"
MULTIPROP = "multiprop"
NAME_KEY = "entity name"

# Totals within this distance count as tied when choosing among optimal assignments.
TIE_TOL = 1e-12
BRUTE_FORCE_MAX = 8


@dataclass(frozen=True)
class MatchMode:
    kind: str = MULTIPROP
    name_weight: float = 0.5

    def __post_init__(self):
        if self.kind not in (EXACT, APPROX, MULTIPROP):
            raise ValueError(f"unknown match mode {self.kind!r}")
        if not 0.0 < self.name_weight < 1.0:
            raise ValueError(f"name_weight must lie in (0, 1), got {self.name_weight}")

    @property
    def label(self) -> str:
        return {EXACT: "ExactName", APPROX: "ApproxName", MULTIPROP: "MultiProp"}[self.kind]

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "label": self.label}
        if self.kind == MULTIPROP:
            out["name_weight"] = self.name_weight
        return out


ALL_MODES = (MatchMode(EXACT), MatchMode(APPROX), MatchMode(MULTIPROP))


def _jaccard_exact(a: frozenset | set, b: frozenset | set) -> Fraction:
    if not a and not b:
        return Fraction(1)
    return Fraction(len(a & b), len(a | b))


def jaccard(a: frozenset | set, b: frozenset | set) -> float:
    return float(_jaccard_exact(a, b))


def _prop_exact(pred_value: str, ref_value: str) -> Fraction:
    return _jaccard_exact(normalize_token_set(pred_value), normalize_token_set(ref_value))


def prop_similarity(pred_value: str, ref_value: str) -> float:
    return float(_prop_exact(pred_value, ref_value))


def _check_versions(e_pred: StructuredEntity, e_ref: StructuredEntity) -> None:
    a, b = e_pred.schema_version, e_ref.schema_version
    if a is not None and b is not None and a != b:
        raise SchemaMismatchError(f"entities come from schema versions {a!r} and {b!r}")


def _attribute_similarities(e_pred: StructuredEntity, e_ref: StructuredEntity) -> list[Fraction]:
    keys = list(e_ref.attributes) + [k for k in e_pred.attributes if k not in e_ref.attributes]
    sims = []
    for key in keys:
        if key in e_pred.attributes and key in e_ref.attributes:
            sims.append(_prop_exact(e_pred.attributes[key], e_ref.attributes[key]))
        else:
            sims.append(Fraction(0))
    return sims


def _entity_exact(e_pred: StructuredEntity, e_ref: StructuredEntity) -> Fraction:
    # Jaccard values are rational; exact arithmetic keeps equal totals bit-identical.
    _check_versions(e_pred, e_ref)
    sims = [_prop_exact(e_pred.name, e_ref.name)] + _attribute_similarities(e_pred, e_ref)
    return sum(sims, Fraction(0)) / len(sims)


def entity_similarity(e_pred: StructuredEntity, e_ref: StructuredEntity) -> float:
    """Mean property similarity over the name plus the union of attribute keys."""
    return float(_entity_exact(e_pred, e_ref))


def assignment_score(e_pred: StructuredEntity, e_ref: StructuredEntity, mode: MatchMode) -> float:
    if mode.kind == EXACT:
        return 1.0 if e_pred.name.strip().casefold() == e_ref.name.strip().casefold() else 0.0
    name_sim = prop_similarity(e_pred.name, e_ref.name)
    if mode.kind == APPROX:
        return name_sim
    attr = _attribute_similarities(e_pred, e_ref)
    if not attr:
        return name_sim
    return mode.name_weight * name_sim + (1.0 - mode.name_weight) * float(sum(attr, Fraction(0)) / len(attr))


def similarity_matrix(
    pred: Sequence[StructuredEntity], ref: Sequence[StructuredEntity], mode: MatchMode
) -> np.ndarray:
    S = np.zeros((len(pred), len(ref)), dtype=np.float64)
    for i, p in enumerate(pred):
        for j, r in enumerate(ref):
            _check_versions(p, r)
            S[i, j] = assignment_score(p, r, mode)
    return S


def _validate(S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError("similarity matrix must be 2-D")
    if S.size and (not np.all(np.isfinite(S)) or S.min() < 0.0 or S.max() > 1.0):
        raise ValueError("similarity values must be finite and within [0, 1]")
    return S


def assignment_total(S, D) -> float:
    S = np.asarray(S, dtype=np.float64)
    rows, cols = np.nonzero(np.asarray(D))
    return math.fsum(S[rows, cols].tolist())


def _to_matrix(shape, pairs) -> np.ndarray:
    D = np.zeros(shape, dtype=np.int8)
    for i, j in pairs:
        D[i, j] = 1
    return D


def _lsa_pairs(S: np.ndarray, rows: list[int], cols: list[int]) -> dict[int, int]:
    if not rows or not cols:
        return {}
    sub = S[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub, maximize=True)
    return {rows[a]: cols[b] for a, b in zip(r, c) if sub[a, b] > 0.0}


def _totals(levels: Sequence[np.ndarray], pairs: Iterable[tuple[int, int]]) -> tuple[float, ...]:
    pairs = list(pairs)
    return tuple(math.fsum(L[i, j] for i, j in pairs) for L in levels)


def _better(a: Sequence[float], b: Sequence[float]) -> bool:
    """Lexicographic ``a > b`` where differences within TIE_TOL count as ties."""
    for x, y in zip(a, b):
        if x > y + TIE_TOL:
            return True
        if x < y - TIE_TOL:
            return False
    return False


def _combined(S: np.ndarray, secondary: np.ndarray | None) -> np.ndarray:
    # S + eta * secondary preserves every S-optimum for small enough eta; eta is
    # shrunk until the combined optimum is verified to be S-optimal.
    if secondary is None:
        return S
    target = _totals([S], _lsa_pairs(S, list(range(S.shape[0])), list(range(S.shape[1]))).items())[0]
    eta = 1e-6
    for _ in range(8):
        W = np.where(S > 0.0, S + eta * secondary, 0.0)
        pairs = _lsa_pairs(W, list(range(S.shape[0])), list(range(S.shape[1])))
        if _totals([S], pairs.items())[0] >= target - TIE_TOL:
            return W
        eta /= 100.0
    return S


def _check_secondary(S: np.ndarray, secondary) -> np.ndarray | None:
    if secondary is None:
        return None
    T = _validate(secondary)
    if T.shape != S.shape:
        raise ValueError("secondary matrix must match the similarity matrix shape")
    return T


def optimal_assignment(S, secondary=None) -> np.ndarray:
    """Maximum-total one-to-one matching with zero-similarity pairs left unmatched.

    Ties on the total of ``S`` go to the larger total of ``secondary`` (when
    given), then to the lexicographically smallest row-to-column map, with
    unmatched sorting last.
    """
    S = _validate(S)
    T = _check_secondary(S, secondary)
    levels = [S] if T is None else [S, T]
    W = _combined(S, T)
    m, n = S.shape
    current = _lsa_pairs(W, list(range(m)), list(range(n)))
    best = _totals(levels, current.items())
    fixed: dict[int, int] = {}
    used: set[int] = set()
    for i in range(m):
        ref_col = current.get(i, n)
        rest_rows = list(range(i + 1, m))
        for j in range(ref_col):
            if j in used or S[i, j] <= 0.0:
                continue
            cols = [c for c in range(n) if c not in used and c != j]
            trial = {**fixed, i: j, **_lsa_pairs(W, rest_rows, cols)}
            if not _better(best, _totals(levels, trial.items())):
                current = trial
                break
        j = current.get(i)
        if j is not None:
            fixed[i] = j
            used.add(j)
    return _to_matrix((m, n), fixed.items())


def brute_force_assignment(S, secondary=None) -> np.ndarray:
    """Exhaustive search over every partial injection; same tie rule as the solver."""
    S = _validate(S)
    T = _check_secondary(S, secondary)
    m, n = S.shape
    if min(m, n) > BRUTE_FORCE_MAX:
        raise ValueError(f"brute force limited to min(m, n) <= {BRUTE_FORCE_MAX}")
    levels = [L.tolist() for L in ([S] if T is None else [S, T])]
    # Options per row in lexicographic order: columns ascending, then unmatched.
    options = [[j for j in range(n) if levels[0][i][j] > 0.0] + [None] for i in range(m)]
    best: list = [None, ()]
    choice: list = []
    used = [False] * n

    def visit(i: int) -> None:
        if i == m:
            pairs = [(r, c) for r, c in enumerate(choice) if c is not None]
            totals = tuple(math.fsum(L[r][c] for r, c in pairs) for L in levels)
            if best[0] is None or _better(totals, best[0]):
                best[0], best[1] = totals, tuple(choice)
            return
        for j in options[i]:
            if j is not None:
                if used[j]:
                    continue
                used[j] = True
            choice.append(j)
            visit(i + 1)
            choice.pop()
            if j is not None:
                used[j] = False

    visit(0)
    return _to_matrix((m, n), [(i, j) for i, j in enumerate(best[1]) if j is not None])


@dataclass
class EvalReport:
    delta: float
    mode: MatchMode
    per_pair: list[tuple[int, int, float]]
    per_attribute: dict[str, float]
    m: int
    n: int
    k: int
    doc_id: str | None = None

    @property
    def matched_mass(self) -> float:
        return math.fsum(p[2] for p in self.per_pair)

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "delta": self.delta,
            "mode": self.mode.to_dict(),
            "per_pair": [list(p) for p in self.per_pair],
            "per_attribute": self.per_attribute,
            "m": self.m,
            "n": self.n,
            "k": self.k,
        }


def _canonical(e: StructuredEntity) -> tuple:
    return (e.name, e.entity_type, tuple(sorted(e.attributes.items())))


def evaluate(
    pred: Sequence[StructuredEntity], ref: Sequence[StructuredEntity], mode: MatchMode = MatchMode()
) -> EvalReport:
    m, n = len(pred), len(ref)
    k = max(m, n)
    if k == 0:
        return EvalReport(1.0, mode, [], {}, 0, 0, 0)
    # Solve on a content-sorted order so the index tie-break, and hence the
    # matched pairs, do not depend on how the caller ordered the entities.
    po = sorted(range(m), key=lambda i: _canonical(pred[i]))
    ro = sorted(range(n), key=lambda j: _canonical(ref[j]))
    sp, sr = [pred[i] for i in po], [ref[j] for j in ro]
    S = similarity_matrix(sp, sr, mode)
    exact = [[_entity_exact(p, r) for r in sr] for p in sp]
    sims = np.array([[float(x) for x in row] for row in exact]).reshape(m, n)
    # Pairings tied on the mode objective go to the higher entity similarity.
    D = optimal_assignment(S, sims)
    matched = sorted((po[i], ro[j], exact[i][j]) for i, j in zip(*np.nonzero(D)))
    per_pair = [(int(i), int(j), float(x)) for i, j, x in matched]
    delta = float(sum((x for _, _, x in matched), Fraction(0)) / k)
    per_attr = attribute_accuracy([(pred[i], ref[j]) for i, j, _ in per_pair])
    return EvalReport(delta, mode, per_pair, per_attr, m, n, k)


def attribute_accuracy(
    pairs: Iterable[tuple[StructuredEntity, StructuredEntity]]
) -> dict[str, float]:
    """Mean value Jaccard per attribute key over matched pairs whose reference has the key."""
    sums: dict[str, list[float]] = defaultdict(list)
    for pred, ref in pairs:
        sums[NAME_KEY].append(prop_similarity(pred.name, ref.name))
        for key, value in ref.attributes.items():
            if key in pred.attributes:
                sums[key].append(prop_similarity(pred.attributes[key], value))
            else:
                sums[key].append(0.0)
    return {key: math.fsum(v) / len(v) for key, v in sums.items()}


@dataclass
class CorpusReport:
    mode: MatchMode
    pooling: str
    mean_delta: float
    documents: list[EvalReport]
    per_attribute: dict[str, float] = field(default_factory=dict)
    schema_version: str | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.to_dict(),
            "pooling": self.pooling,
            "mean_delta": self.mean_delta,
            "schema_version": self.schema_version,
            "per_attribute": self.per_attribute,
            "documents": [r.to_dict() for r in self.documents],
        }


def evaluate_corpus(
    preds: Sequence[DocumentRecord],
    refs: Sequence[DocumentRecord],
    mode: MatchMode = MatchMode(),
    pooling: str = "document",
    jobs: int = 1,
) -> CorpusReport:
    """Score predictions against references matched by doc_id.

    ``pooling="document"`` averages per-document deltas; ``"pairs"`` divides the
    total matched similarity by the summed ``k`` of all documents. ``jobs`` > 1
    scores documents on a thread pool; results are merged in reference order.
    """
    if pooling not in ("document", "pairs"):
        raise ValueError(f"unknown pooling {pooling!r}")
    versions = {r.schema_version for r in list(preds) + list(refs) if r.schema_version is not None}
    if len(versions) > 1:
        raise SchemaMismatchError(f"mixed schema versions: {sorted(versions)}")
    by_id = {p.doc_id: p for p in preds}

    def score(ref: DocumentRecord) -> tuple[list[StructuredEntity], EvalReport]:
        pred = by_id.get(ref.doc_id)
        pred_ents = list(pred.entities or ()) if pred is not None else []
        rep = evaluate(pred_ents, list(ref.entities or ()), mode)
        rep.doc_id = ref.doc_id
        return pred_ents, rep

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scored = list(pool.map(score, refs))
    else:
        scored = [score(ref) for ref in refs]
    reports = []
    attr_values: dict[str, list[float]] = defaultdict(list)
    for ref, (pred_ents, rep) in zip(refs, scored):
        reports.append(rep)
        for i, j, _ in rep.per_pair:
            for key, val in attribute_accuracy([(pred_ents[i], ref.entities[j])]).items():
                attr_values[key].append(val)
    if not reports:
        mean = 1.0
    elif pooling == "document":
        mean = math.fsum(r.delta for r in reports) / len(reports)
    else:
        total_k = sum(r.k for r in reports)
        mean = math.fsum(r.matched_mass for r in reports) / total_k if total_k else 1.0
    per_attr = {k: math.fsum(v) / len(v) for k, v in sorted(attr_values.items())}
    return CorpusReport(mode, pooling, mean, reports, per_attr, next(iter(versions), None))


@dataclass
class Correlation:
    x_label: str
    y_label: str
    points: list[tuple[float, float]]
    pearson: float
    spearman: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "x": self.x_label,
            "y": self.y_label,
            "points": [list(p) for p in self.points],
            "pearson": self.pearson,
            "spearman": self.spearman,
            "degenerate": self.degenerate,
        }


def _correlate(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, bool]:
    x_const = np.ptp(x) == 0.0
    y_const = np.ptp(y) == 0.0
    if x_const or y_const:
        # Undefined; identical flat series count as perfectly correlated.
        value = 1.0 if (x_const and y_const) else 0.0
        return value, value, True
    return float(pearsonr(x, y).statistic), float(spearmanr(x, y).statistic), False


def metric_correlation(systems: Sequence[Mapping[str, float]]) -> list[Correlation]:
    """Correlate MultiProp against ExactName and ApproxName across systems.

    Each item maps mode kind (``exact``/``approx``/``multiprop``) to a corpus score.
    """
    if len(systems) < 2:
        raise ValueError("correlation needs at least two systems")
    x = [float(s[MULTIPROP]) for s in systems]
    out = []
    for other, label in ((EXACT, "ExactName"), (APPROX, "ApproxName")):
        y = [float(s[other]) for s in systems]
        pearson, spearman, degenerate = _correlate(x, y)
        out.append(Correlation("MultiProp", label, list(zip(x, y)), pearson, spearman, degenerate))
    return out
