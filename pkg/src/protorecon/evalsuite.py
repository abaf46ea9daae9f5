"""Reconstruction metrics, pairwise alignment, error tables, significance tests
and Ward clustering of embedding vectors."""
from __future__ import annotations

import itertools
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import FeatureTable

GAP = None


# -------------------------------------------------------------------- metrics


@dataclass
class EvalReport:
    acc: float
    ted: float
    ter: float
    fer: float
    bcfs: float
    n: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def token_edit_distance(pred: Sequence, gold: Sequence) -> int:
    """Unit-cost Levenshtein distance over whole tokens."""
    prev = list(range(len(gold) + 1))
    for i, p in enumerate(pred, 1):
        cur = [i] + [0] * len(gold)
        for j, g in enumerate(gold, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (p != g))
        prev = cur
    return prev[-1]


def token_error_rate(pred: Sequence, gold: Sequence) -> float:
    if not gold:
        raise ValueError("token error rate needs a non-empty gold sequence")
    return token_edit_distance(pred, gold) / len(gold)


def substitution_cost(a: str, b: str, table: FeatureTable) -> float:
    """Fraction of differing feature entries; 1 when either token is unknown."""
    if a == b:
        return 0.0
    va, vb = table.vectors.get(a), table.vectors.get(b)
    if va is None or vb is None:
        return 1.0
    return float(np.mean(np.asarray(va) != np.asarray(vb)))


def feature_error_rate(pred: Sequence, gold: Sequence, table: FeatureTable) -> float:
    """Minimum alignment cost with feature-fraction substitutions and unit indels, over len(gold)."""
    if not gold:
        raise ValueError("feature error rate needs a non-empty gold sequence")
    prev = [float(j) for j in range(len(gold) + 1)]
    for i, p in enumerate(pred, 1):
        cur = [float(i)] + [0.0] * len(gold)
        for j, g in enumerate(gold, 1):
            cur[j] = min(prev[j] + 1.0, cur[j - 1] + 1.0, prev[j - 1] + substitution_cost(p, g, table))
        prev = cur
    return prev[-1] / len(gold)


def accuracy(preds: Sequence[Sequence], golds: Sequence[Sequence]) -> float:
    _check_lengths(preds, golds)
    return sum(token_edit_distance(p, g) == 0 for p, g in zip(preds, golds)) / len(golds)


def _check_lengths(preds, golds):
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} gold sequences")
    if not golds:
        raise ValueError("nothing to evaluate")


def evaluate(preds: Sequence[Sequence], golds: Sequence[Sequence], table: FeatureTable) -> EvalReport:
    _check_lengths(preds, golds)
    teds = [token_edit_distance(p, g) for p, g in zip(preds, golds)]
    return EvalReport(
        acc=sum(t == 0 for t in teds) / len(teds),
        ted=float(np.mean(teds)),
        ter=float(np.mean([t / len(g) for t, g in zip(teds, golds)])),
        fer=float(np.mean([feature_error_rate(p, g, table) for p, g in zip(preds, golds)])),
        bcfs=bcubed_f(preds, golds),
        n=len(golds),
    )


# ------------------------------------------------------------------ alignment


@dataclass
class Alignment:
    columns: list = field(default_factory=list)  # (pred token or None, gold token or None)

    def pred(self) -> list:
        return [p for p, _ in self.columns if p is not GAP]

    def gold(self) -> list:
        return [g for _, g in self.columns if g is not GAP]


def align_pair(pred: Sequence, gold: Sequence, match_aware: bool = True) -> Alignment:
    """Needleman-Wunsch (match 0, mismatch 1, gap 1).

    Traceback prefers a diagonal step, then a deletion (gold token against a
    gap), then an insertion (pred token against a gap). With
    ``match_aware=False`` every substitution costs 1, so the alignment depends
    only on the two lengths.
    """
    n, m = len(pred), len(gold)
    differ = (lambda a, b: a != b) if match_aware else (lambda a, b: True)
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i, j] = min(D[i - 1, j - 1] + differ(pred[i - 1], gold[j - 1]), D[i, j - 1] + 1, D[i - 1, j] + 1)
    cols = []
    i, j = n, m
    while i or j:
        if i and j and D[i, j] == D[i - 1, j - 1] + differ(pred[i - 1], gold[j - 1]):
            cols.append((pred[i - 1], gold[j - 1]))
            i, j = i - 1, j - 1
        elif j and D[i, j] == D[i, j - 1] + 1:
            cols.append((GAP, gold[j - 1]))
            j -= 1
        else:
            cols.append((pred[i - 1], GAP))
            i -= 1
    return Alignment(cols[::-1])


_GAP_SYMBOL = ("gap",)  # distinct from every token string


def _bcubed(pred_labels: list, gold_labels: list) -> tuple[float, float]:
    pred_size = Counter(pred_labels)
    gold_size = Counter(gold_labels)
    joint = Counter(zip(pred_labels, gold_labels))
    n = len(pred_labels)
    precision = sum(joint[(p, g)] / pred_size[p] for p, g in zip(pred_labels, gold_labels)) / n
    recall = sum(joint[(p, g)] / gold_size[g] for p, g in zip(pred_labels, gold_labels)) / n
    return precision, recall


def structural_alignment(pred: Sequence, gold: Sequence) -> Alignment:
    """Identity-blind alignment used for BCFS, with any gaps at the word end.

    Because token identity never influences the columns, renaming predicted
    symbols consistently cannot change the B-cubed score.
    """
    cols = align_pair(list(pred)[::-1], list(gold)[::-1], match_aware=False).columns
    return Alignment(cols[::-1])


def bcubed_scores(preds: Sequence[Sequence], golds: Sequence[Sequence]) -> tuple[float, float, float]:
    """(precision, recall, F) over pooled alignment columns."""
    _check_lengths(preds, golds)
    if any(not g for g in golds):
        raise ValueError("gold sequences must be non-empty")
    pl, gl = [], []
    for p, g in zip(preds, golds):
        for a, b in structural_alignment(p, g).columns:
            pl.append(_GAP_SYMBOL if a is GAP else a)
            gl.append(_GAP_SYMBOL if b is GAP else b)
    precision, recall = _bcubed(pl, gl)
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


def bcubed_f(preds: Sequence[Sequence], golds: Sequence[Sequence]) -> float:
    return bcubed_scores(preds, golds)[2]


# -------------------------------------------------------------- error tables


@dataclass
class ErrorCounts:
    exchange: Counter = field(default_factory=Counter)    # (gold, pred) -> n
    insertions: Counter = field(default_factory=Counter)  # pred -> n
    deletions: Counter = field(default_factory=Counter)   # gold -> n

    @property
    def total(self) -> int:
        return sum(self.exchange.values()) + sum(self.insertions.values()) + sum(self.deletions.values())


def error_analysis(alignments: Sequence[Alignment]) -> ErrorCounts:
    out = ErrorCounts()
    for al in alignments:
        for p, g in al.columns:
            if g is GAP:
                out.insertions[p] += 1
            elif p is GAP:
                out.deletions[g] += 1
            elif p != g:
                out.exchange[(g, p)] += 1
    return out


# ------------------------------------------------------------- significance


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


EXACT_LIMIT = 12


def wilcoxon_rank_sum(xs: Sequence[float], ys: Sequence[float], alternative: str = "two-sided") -> float:
    """Rank-sum test of ``xs`` against ``ys``.

    ``alternative='greater'`` tests whether xs tend to be larger. Exact
    enumeration of all rank assignments (with midranks) when len(xs)+len(ys)
    is at most 12, otherwise a tie-corrected normal approximation.
    """
    if not len(xs) or not len(ys):
        raise ValueError("both samples must be non-empty")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    n, m = len(x), len(y)
    ranks = _midranks(np.concatenate([x, y]))
    w = ranks[:n].sum()
    mean_w = n * (n + m + 1) / 2
    slack = 1e-9
    if n + m <= EXACT_LIMIT:
        dist = np.array([ranks[list(c)].sum() for c in itertools.combinations(range(n + m), n)])
        if alternative == "greater":
            p = np.mean(dist >= w - slack)
        elif alternative == "less":
            p = np.mean(dist <= w + slack)
        else:
            p = np.mean(np.abs(dist - mean_w) >= abs(w - mean_w) - slack)
        return float(min(1.0, p))
    N = n + m
    _, counts = np.unique(ranks, return_counts=True)
    var = n * m / 12 * ((N + 1) - np.sum(counts ** 3 - counts) / (N * (N - 1)))
    if var <= 0:
        return 1.0
    z = (w - mean_w) / math.sqrt(var)
    upper = 0.5 * math.erfc(z / math.sqrt(2))
    lower = 0.5 * math.erfc(-z / math.sqrt(2))
    if alternative == "greater":
        return upper
    if alternative == "less":
        return lower
    return min(1.0, 2 * min(upper, lower))


@dataclass
class BootstrapResult:
    p: float
    ci: tuple
    observed: float


def bootstrap_mean_diff(xs: Sequence[float], ys: Sequence[float], resamples: int = 9999, seed: int = 0,
                        alternative: str = "two-sided", confidence: float = 0.99) -> BootstrapResult:
    """Percentile bootstrap of mean(xs) - mean(ys), each group resampled with replacement.

    Uses numpy's PCG64 ``default_rng(seed)``. The p-value is
    ``(1 + #resampled differences on the null side of 0) / (resamples + 1)``,
    where the null side is ``<= 0`` for 'greater', ``>= 0`` for 'less', and the
    two-sided value doubles the smaller of the two, capped at 1.
    """
    if not len(xs) or not len(ys):
        raise ValueError("both samples must be non-empty")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    x, y = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    rng = np.random.default_rng(seed)
    bx = x[rng.integers(0, len(x), size=(resamples, len(x)))].mean(axis=1)
    by = y[rng.integers(0, len(y), size=(resamples, len(y)))].mean(axis=1)
    diffs = bx - by
    lo_q, hi_q = (1 - confidence) / 2, 1 - (1 - confidence) / 2
    ci = (float(np.quantile(diffs, lo_q)), float(np.quantile(diffs, hi_q)))
    p_greater = (1 + np.sum(diffs <= 0)) / (resamples + 1)
    p_less = (1 + np.sum(diffs >= 0)) / (resamples + 1)
    if alternative == "greater":
        p = p_greater
    elif alternative == "less":
        p = p_less
    else:
        p = min(1.0, 2 * min(p_greater, p_less))
    return BootstrapResult(float(p), ci, float(x.mean() - y.mean()))


HIGHER_IS_BETTER = {"acc": True, "bcfs": True, "ted": False, "ter": False, "fer": False}


@dataclass
class SignificanceResult:
    wilcoxon_p: float
    bootstrap_p: float
    alpha: float
    significant: bool
    mean_a: float
    mean_b: float
    better: str  # "A", "B" or "tie"
    bootstrap_ci: tuple = (0.0, 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bootstrap_ci"] = list(self.bootstrap_ci)
        return d


def compare_strategies(runs_a: Sequence[float], runs_b: Sequence[float], metric: str = "acc",
                       alpha: float = 0.01, resamples: int = 9999, seed: int = 0) -> SignificanceResult:
    """Both one-sided tests in the direction of the better mean; significant iff both p < alpha."""
    if metric not in HIGHER_IS_BETTER:
        raise ValueError(f"unknown metric {metric!r}; expected one of {sorted(HIGHER_IS_BETTER)}")
    if len(runs_a) < 2 or len(runs_b) < 2:
        raise ValueError("need at least 2 runs per side")
    a, b = np.asarray(runs_a, float), np.asarray(runs_b, float)
    ma, mb = float(a.mean()), float(b.mean())
    if ma == mb:
        better = "tie"
        alt = "greater" if HIGHER_IS_BETTER[metric] else "less"
    else:
        a_better = (ma > mb) == HIGHER_IS_BETTER[metric]
        better = "A" if a_better else "B"
        alt = "greater" if ma > mb else "less"
    wp = wilcoxon_rank_sum(a, b, alt)
    boot = bootstrap_mean_diff(a, b, resamples, seed, alt)
    sig = better != "tie" and wp < alpha and boot.p < alpha
    return SignificanceResult(wp, boot.p, alpha, bool(sig), ma, mb, better, boot.ci)


# --------------------------------------------------------------- clustering


@dataclass
class Dendrogram:
    labels: list
    merges: list  # (left id, right id, height, size); ids < n are leaves, n+k is merge k

    def newick(self) -> str:
        n = len(self.labels)
        heights = [0.0] * n + [h for _, _, h, _ in self.merges]

        def render(node: int, parent_h: float) -> str:
            length = _fmt(parent_h - heights[node])
            if node < n:
                return f"{_quote(self.labels[node])}:{length}"
            left, right, h, _ = self.merges[node - n]
            return f"({render(left, h)},{render(right, h)}):{length}"

        left, right, h, _ = self.merges[-1]
        return f"({render(left, h)},{render(right, h)});"


def _fmt(x: float) -> str:
    return repr(round(float(x), 12))


def _quote(label: str) -> str:
    if re.fullmatch(r"[^\s(),:;'\[\]]+", label):
        return label
    return "'" + label.replace("'", "''") + "'"


def ward_cluster(points: dict | Sequence, labels: Sequence[str] | None = None) -> Dendrogram:
    """Agglomerative Ward clustering.

    Merge height is the increase in total within-cluster sum of squares
    (for two singletons, half their squared distance). Distances are updated
    with the Lance-Williams Ward rule; ties go to the pair whose sorted member
    labels compare smallest.
    """
    if isinstance(points, dict):
        labels = list(points)
        X = np.asarray([points[k] for k in labels], dtype=float)
    else:
        X = np.asarray(points, dtype=float)
        labels = [str(i) for i in range(len(X))] if labels is None else list(labels)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("ward clustering needs at least 2 equal-length vectors")
    if len(labels) != len(X):
        raise ValueError("one label per point is required")
    n = len(X)
    # cost[(i, j)]: increase in within-cluster sum of squares if i and j merge
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    cost = {(i, j): sq[i, j] / 2 for i in range(n) for j in range(i + 1, n)}
    size = {i: 1 for i in range(n)}
    members = {i: (labels[i],) for i in range(n)}
    active = list(range(n))
    merges = []
    nxt = n
    while len(active) > 1:
        best = min(
            ((i, j) for a, i in enumerate(active) for j in active[a + 1:]),
            key=lambda ij: (cost[ij], tuple(sorted((min(members[ij[0]]), min(members[ij[1]]))))),
        )
        i, j = best
        h = cost[best]
        ni, nj = size[i], size[j]
        merges.append((i, j, float(h), ni + nj))
        active = [k for k in active if k not in (i, j)]
        for k in active:
            nk = size[k]
            cik, cjk = cost[_key(i, k)], cost[_key(j, k)]
            cost[_key(k, nxt)] = ((ni + nk) * cik + (nj + nk) * cjk - nk * h) / (ni + nj + nk)
        size[nxt] = ni + nj
        members[nxt] = members[i] + members[j]
        active.append(nxt)
        nxt += 1
    return Dendrogram(labels, merges)


def _key(a: int, b: int) -> tuple:
    return (a, b) if a < b else (b, a)
