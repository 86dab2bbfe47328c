"""Retrieval metrics, paired significance testing, sparsity accounting,
and TREC-format run/qrels serialization.

nDCG uses exponential gain (2^grade - 1) with a log2(rank + 1) discount; the
ideal ranking sorts the query's judged grades descending. Queries without a
single relevant document are excluded from aggregation.

The paired two-tailed t-test computes its p-value through the regularized
incomplete beta function, implemented here with the continued-fraction
expansion (double precision, converged to ~1e-15; accuracy requirement is
1e-10 on the CDF).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Iterable, Sequence

from .index import RankedList
from .model import SparseVector

__all__ = [
    "dcg", "ndcg_at_k", "mrr_at_k", "evaluate_run",
    "TTestResult", "paired_ttest", "betainc_reg", "student_t_sf",
    "sparsity_stats",
    "read_run", "write_run",
    "MethodResult", "SignificanceTest", "EvalReport",
]

DEFAULT_METRIC_DEPTH = 10


# ---------------------------------------------------------------- rank metrics


def dcg(grades: Sequence[int]) -> float:
    """Discounted cumulative gain of a graded ranking, best-first order."""
    return sum((2.0 ** g - 1.0) / math.log2(rank + 1.0)
               for rank, g in enumerate(grades, start=1))


def ndcg_at_k(ranked: RankedList, judgments: dict[str, int], k: int = DEFAULT_METRIC_DEPTH) -> float:
    """Normalized DCG at depth k. Unjudged retrieved docs count as grade 0.
    Raises if the query has no relevant document (such queries are excluded
    upstream)."""
    ideal = sorted(judgments.values(), reverse=True)[:k]
    idcg = dcg(ideal)
    if idcg == 0.0:
        raise ValueError("query has no relevant documents; exclude it from aggregation")
    grades = [judgments.get(d, 0) for d in ranked.doc_ids()[:k]]
    return dcg(grades) / idcg


def mrr_at_k(ranked: RankedList, judgments: dict[str, int], k: int = DEFAULT_METRIC_DEPTH) -> float:
    """Reciprocal rank of the first relevant (grade >= 1) doc in the top k,
    0 when none appears."""
    for rank, doc_id in enumerate(ranked.doc_ids()[:k], start=1):
        if judgments.get(doc_id, 0) >= 1:
            return 1.0 / rank
    return 0.0


def evaluate_run(run: dict[str, RankedList], qrels: dict[str, dict[str, int]],
                 k: int = DEFAULT_METRIC_DEPTH) -> tuple[dict[str, float], dict[str, float]]:
    """Per-query nDCG@k and MRR@k over every judged query that has at least
    one relevant doc. A judged query missing from the run scores 0."""
    ndcg: dict[str, float] = {}
    mrr: dict[str, float] = {}
    for qid, judgments in qrels.items():
        if not any(g >= 1 for g in judgments.values()):
            continue
        ranked = run.get(qid, RankedList(query_id=qid))
        ndcg[qid] = ndcg_at_k(ranked, judgments, k)
        mrr[qid] = mrr_at_k(ranked, judgments, k)
    if not ndcg:
        raise ValueError("no judged query has a relevant document")
    return ndcg, mrr


# ---------------------------------------------------------------- significance


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    MAXIT, EPS, FPMIN = 300, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < FPMIN:
        d = FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc_reg requires positive parameters")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail2 = betainc_reg(df / 2.0, 0.5, df / (df + t * t))  # two-sided tail mass
    return tail2 / 2.0 if t >= 0 else 1.0 - tail2 / 2.0


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    mean_diff: float


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-tailed paired Student's t-test on aligned score lists.

    Zero-variance differences degenerate: p = 1 when the mean difference is
    also 0 (t = 0), else p = 0 (t = +/-inf).
    """
    if len(a) != len(b):
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    diffs = [x - y for x, y in zip(a, b)]
    mean = sum(diffs) / n
    ss = sum((d - mean) ** 2 for d in diffs)
    df = n - 1
    if ss == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, df=df, mean_diff=0.0)
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, df=df, mean_diff=mean)
    sd = math.sqrt(ss / df)
    t = mean / (sd / math.sqrt(n))
    p = betainc_reg(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(t=t, p=p, df=df, mean_diff=mean)


# ---------------------------------------------------------------- sparsity


def sparsity_stats(vectors: Iterable[SparseVector]) -> dict[str, float]:
    l0s = [v.l0() for v in vectors]
    if not l0s:
        raise ValueError("sparsity over an empty collection")
    return {
        "mean_l0": sum(l0s) / len(l0s),
        "median_l0": float(median(l0s)),
        "max_l0": float(max(l0s)),
    }


# ---------------------------------------------------------------- run files


def write_run(runs: dict[str, RankedList] | list[RankedList], path: str | Path,
              tag: str = "run") -> None:
    """TREC run lines: query_id Q0 doc_id rank score tag. Rank is regenerated
    from entry order; scores carry 6 decimal digits."""
    if isinstance(runs, dict):
        runs = [runs[qid] for qid in sorted(runs)]
    if any(" " in r.query_id or "\t" in r.query_id for r in runs):
        raise ValueError("query ids may not contain whitespace")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ranked in runs:
            for rank, (doc_id, score) in enumerate(ranked.entries, start=1):
                if " " in doc_id or "\t" in doc_id:
                    raise ValueError(f"doc id {doc_id!r} contains whitespace")
                fh.write(f"{ranked.query_id} Q0 {doc_id} {rank} {score:.6f} {tag}\n")


def read_run(path: str | Path) -> dict[str, RankedList]:
    """Parse a TREC run; entries are ordered by their rank field."""
    rows: dict[str, list[tuple[int, str, float]]] = {}
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _q0, doc_id, rank_s, score_s, _tag = parts
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad rank or score") from None
            if (qid, doc_id) in seen:
                raise ValueError(f"{path}:{lineno}: duplicate entry for ({qid}, {doc_id})")
            seen.add((qid, doc_id))
            rows.setdefault(qid, []).append((rank, doc_id, score))
    out: dict[str, RankedList] = {}
    for qid, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        out[qid] = RankedList(query_id=qid, entries=[(d, s) for _, d, s in entries])
    return out


# ---------------------------------------------------------------- reports


@dataclass
class MethodResult:
    name: str
    ndcg10: float
    mrr10: float
    per_query_ndcg: dict[str, float] = field(default_factory=dict)
    per_query_mrr: dict[str, float] = field(default_factory=dict)
    doc_sparsity: dict[str, float] | None = None
    query_sparsity: dict[str, float] | None = None

    @classmethod
    def from_run(cls, name: str, run: dict[str, RankedList], qrels: dict[str, dict[str, int]],
                 k: int = DEFAULT_METRIC_DEPTH) -> "MethodResult":
        ndcg, mrr = evaluate_run(run, qrels, k)
        n = len(ndcg)
        return cls(name=name,
                   ndcg10=sum(ndcg.values()) / n,
                   mrr10=sum(mrr.values()) / n,
                   per_query_ndcg=ndcg,
                   per_query_mrr=mrr)


@dataclass
class SignificanceTest:
    method: str
    baseline: str
    metric: str
    t: float
    p: float
    alpha: float = 0.05

    @property
    def significant(self) -> bool:
        return self.p < self.alpha


@dataclass
class EvalReport:
    dataset: str
    cutoff: int
    metric_depth: int
    methods: list[MethodResult]
    significance: list[SignificanceTest] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def method(self, name: str) -> MethodResult:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(f"no method {name!r} in report")

    def add_significance(self, method: str, baseline: str, alpha: float = 0.05) -> SignificanceTest:
        m, b = self.method(method), self.method(baseline)
        shared = sorted(m.per_query_ndcg.keys() & b.per_query_ndcg.keys())
        if len(shared) != len(m.per_query_ndcg) or len(shared) != len(b.per_query_ndcg):
            raise ValueError(f"{method} and {baseline} were evaluated on different query sets")
        result = paired_ttest([m.per_query_ndcg[q] for q in shared],
                              [b.per_query_ndcg[q] for q in shared])
        test = SignificanceTest(method=method, baseline=baseline, metric=f"ndcg{self.metric_depth}",
                                t=result.t, p=result.p, alpha=alpha)
        self.significance.append(test)
        return test

    def to_json(self) -> str:
        payload = {
            "dataset": self.dataset,
            "cutoff": self.cutoff,
            "metric_depth": self.metric_depth,
            "methods": [{
                "name": m.name,
                "ndcg10": m.ndcg10,
                "mrr10": m.mrr10,
                "per_query_ndcg": m.per_query_ndcg,
                "per_query_mrr": m.per_query_mrr,
                "doc_sparsity": m.doc_sparsity,
                "query_sparsity": m.query_sparsity,
            } for m in self.methods],
            "significance": [{
                "method": s.method, "baseline": s.baseline, "metric": s.metric,
                "t": s.t, "p": s.p, "alpha": s.alpha, "significant": s.significant,
            } for s in self.significance],
            "metadata": self.metadata,
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        methods = [MethodResult(
            name=m["name"], ndcg10=m["ndcg10"], mrr10=m["mrr10"],
            per_query_ndcg=m.get("per_query_ndcg", {}),
            per_query_mrr=m.get("per_query_mrr", {}),
            doc_sparsity=m.get("doc_sparsity"),
            query_sparsity=m.get("query_sparsity"),
        ) for m in obj["methods"]]
        significance = [SignificanceTest(
            method=s["method"], baseline=s["baseline"], metric=s["metric"],
            t=s["t"], p=s["p"], alpha=s.get("alpha", 0.05),
        ) for s in obj.get("significance", [])]
        return cls(dataset=obj["dataset"], cutoff=obj["cutoff"],
                   metric_depth=obj.get("metric_depth", DEFAULT_METRIC_DEPTH),
                   methods=methods, significance=significance,
                   metadata=obj.get("metadata", {}))

    def format_table(self) -> str:
        depth = self.metric_depth
        lines = [f"dataset: {self.dataset}   retrieval cutoff: {self.cutoff}"]
        header = f"{'method':<18} {'nDCG@' + str(depth):>10} {'MRR@' + str(depth):>10} {'doc L0':>10} {'query L0':>10}"
        lines.append(header)
        lines.append("-" * len(header))
        for m in self.methods:
            doc_l0 = f"{m.doc_sparsity['mean_l0']:.1f}" if m.doc_sparsity else "-"
            q_l0 = f"{m.query_sparsity['mean_l0']:.1f}" if m.query_sparsity else "-"
            lines.append(f"{m.name:<18} {m.ndcg10:>10.4f} {m.mrr10:>10.4f} {doc_l0:>10} {q_l0:>10}")
        if self.significance:
            lines.append("")
            for s in self.significance:
                marker = "significant" if s.significant else "not significant"
                lines.append(f"{s.method} vs {s.baseline} ({s.metric}): "
                             f"t={s.t:.3f} p={s.p:.4f} -> {marker} at alpha={s.alpha}")
        return "\n".join(lines) + "\n"
