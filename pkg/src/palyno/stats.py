"""Agreement between two labelings: raw agreement, Cohen's kappa, best-match agreement."""

from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateMarginals, EmptyIntersection, ValidationError
from .ingest import LabelVector


@dataclass
class ContingencyTable:
    counts: np.ndarray
    row_labels: list
    col_labels: list
    dropped_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or np.any(self.counts < 0):
            raise ValidationError("counts must be a matrix of non-negative integers")
        if self.n < 1:
            raise ValidationError("contingency table is empty")

    @classmethod
    def from_counts(cls, counts):
        counts = np.asarray(counts)
        return cls(counts, list(range(counts.shape[0])), list(range(counts.shape[1])))

    @property
    def n(self):
        return int(self.counts.sum())

    @property
    def is_square(self):
        return self.counts.shape[0] == self.counts.shape[1]


@dataclass
class KappaResult:
    kappa: float
    p_o: float
    p_e: float
    se: float
    ci_low: float
    ci_high: float
    confidence: float = 0.95

    def to_dict(self):
        return {
            "kappa": self.kappa,
            "p_o": self.p_o,
            "p_e": self.p_e,
            "se": self.se,
            "ci": [self.ci_low, self.ci_high],
            "confidence": self.confidence,
        }


def contingency(a: LabelVector, b: LabelVector, k: int) -> ContingencyTable:
    """k x k table over the ids present in both labelings (in ``a``'s order)."""
    in_b = b.as_dict()
    common = [i for i in a.ids if i in in_b]
    if not common:
        raise EmptyIntersection("the two labelings share no ids")
    common_set = set(common)
    dropped = [i for i in a.ids if i not in common_set] + [i for i in b.ids if i not in common_set]
    in_a = a.as_dict()
    counts = np.zeros((k, k), dtype=np.int64)
    for id_ in common:
        i, j = in_a[id_], in_b[id_]
        if i >= k or j >= k:
            raise ValidationError(f"label of {id_!r} is >= k={k}")
        counts[i, j] += 1
    return ContingencyTable(counts, list(range(k)), list(range(k)), dropped)


def agreement_rate(t: ContingencyTable) -> float:
    if not t.is_square:
        raise ValidationError("agreement needs a square table")
    return float(np.trace(t.counts) / t.n)


def _z(confidence):
    return NormalDist().inv_cdf(0.5 + confidence / 2)


def kappa_confidence_interval(kappa: float, se: float, confidence: float = 0.95):
    """Normal-approximation interval ``kappa +/- z * se`` clamped to [-1, 1]."""
    half = _z(confidence) * se
    return max(-1.0, kappa - half), min(1.0, kappa + half)


def cohen_kappa(t: ContingencyTable, confidence: float = 0.95) -> KappaResult:
    """Cohen's kappa with the large-sample standard error ``sqrt(p_o (1-p_o) / (n (1-p_e)^2))``."""
    if not t.is_square:
        raise ValidationError("kappa needs a square table")
    n = t.n
    if n < 2:
        raise ValidationError("kappa needs at least 2 rated items")
    # exact integer sums, so kappa is a single correctly rounded division
    trace = int(np.trace(t.counts))
    chance = sum(int(r) * int(c) for r, c in zip(t.counts.sum(axis=1), t.counts.sum(axis=0)))
    if chance >= n * n:
        raise DegenerateMarginals("chance agreement is 1; kappa is undefined")
    p_o = trace / n
    p_e = chance / (n * n)
    kappa = (n * trace - chance) / (n * n - chance)
    se = float(np.sqrt(max(p_o * (1.0 - p_o), 0.0) / (n * (1.0 - p_e) ** 2)))
    lo, hi = kappa_confidence_interval(kappa, se, confidence)
    return KappaResult(kappa, p_o, p_e, se, lo, hi, confidence)


def _assignment_value(counts):
    if counts.size == 0:
        return 0
    r, c = linear_sum_assignment(counts, maximize=True)
    return int(counts[r, c].sum())


def best_match_table(t: ContingencyTable):
    """Optimal one-to-one relabeling of columns onto rows.

    Returns ``(mapping, matched)`` where ``mapping[i]`` is the column label
    matched to row label ``i``.  Among optimal mappings the lexicographically
    smallest is returned.
    """
    if not t.is_square:
        raise ValidationError("best-match agreement needs a square table")
    counts = t.counts
    k = counts.shape[0]
    best = _assignment_value(counts)
    mapping, free, fixed = [], list(range(k)), 0
    for i in range(k):
        for j in free:
            rest = [c for c in free if c != j]
            if fixed + counts[i, j] + _assignment_value(counts[i + 1 :][:, rest]) == best:
                mapping.append(j)
                fixed += int(counts[i, j])
                free = rest
                break
    return mapping, best


def best_match_agreement(a: LabelVector, b: LabelVector, k: int):
    """``(mapping, rate)``: best one-to-one label matching and its agreement rate."""
    t = contingency(a, b, k)
    mapping, matched = best_match_table(t)
    return mapping, matched / t.n


def evaluate(human: LabelVector, system: LabelVector, k: int, best_match: bool = False):
    """JSON-ready agreement summary of ``system`` against ``human``."""
    t = contingency(human, system, k)
    out = {"n": t.n, "dropped_ids": t.dropped_ids, "agreement": agreement_rate(t)}
    res = cohen_kappa(t)
    out.update(kappa=res.kappa, se=res.se, ci=[res.ci_low, res.ci_high], p_o=res.p_o, p_e=res.p_e)
    if best_match:
        mapping, matched = best_match_table(t)
        out.update(mapping=mapping, best_match_agreement=matched / t.n)
    return out
