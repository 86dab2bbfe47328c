"""Dataset container and file ingestion.

On-disk layout of a dataset directory:
    corpus.jsonl   one {"doc_id": ..., "text": ...} object per line
    queries.tsv    query_id<TAB>query_text
    qrels.trec     query_id 0 doc_id grade
    triples.tsv    query_text<TAB>pos_doc_id<TAB>neg_doc_id   (optional)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .vocab import tokenize

__all__ = [
    "TrainTriple", "Dataset", "DatasetStats",
    "load_corpus", "save_corpus", "load_queries", "save_queries",
    "load_triples", "save_triples", "load_qrels", "save_qrels",
    "load_dataset", "save_dataset", "dataset_stats",
]


@dataclass(frozen=True)
class TrainTriple:
    query: str
    pos_doc_id: str
    neg_doc_id: str

    def __post_init__(self):
        if self.pos_doc_id == self.neg_doc_id:
            raise ValueError(f"triple has identical positive and negative doc: {self.pos_doc_id}")


@dataclass
class Dataset:
    docs: dict[str, str]
    queries: dict[str, str] = field(default_factory=dict)
    qrels: dict[str, dict[str, int]] = field(default_factory=dict)
    triples: list[TrainTriple] = field(default_factory=list)

    def validate(self) -> None:
        """Referential integrity: qrels and triples may only name known docs."""
        if not self.docs:
            raise ValueError("dataset has no documents")
        dangling = sorted({d for per_q in self.qrels.values() for d in per_q} - self.docs.keys())
        if dangling:
            raise ValueError(f"qrels reference unknown docs: {dangling[:10]}")
        missing_q = sorted(self.qrels.keys() - self.queries.keys())
        if missing_q:
            raise ValueError(f"qrels reference unknown queries: {missing_q[:10]}")
        bad = sorted(({t.pos_doc_id for t in self.triples} | {t.neg_doc_id for t in self.triples})
                     - self.docs.keys())
        if bad:
            raise ValueError(f"triples reference unknown docs: {bad[:10]}")


@dataclass(frozen=True)
class DatasetStats:
    n_docs: int
    n_queries: int
    n_judgments: int
    n_triples: int
    avg_doc_tokens: float
    avg_query_tokens: float


def dataset_stats(ds: Dataset) -> DatasetStats:
    doc_lens = [len(tokenize(t)) for t in ds.docs.values()]
    q_lens = [len(tokenize(t)) for t in ds.queries.values()] or [0]
    return DatasetStats(
        n_docs=len(ds.docs),
        n_queries=len(ds.queries),
        n_judgments=sum(len(v) for v in ds.qrels.values()),
        n_triples=len(ds.triples),
        avg_doc_tokens=float(sum(doc_lens)) / max(1, len(doc_lens)),
        avg_query_tokens=float(sum(q_lens)) / max(1, len(q_lens)),
    )


def load_corpus(path: str | Path) -> dict[str, str]:
    docs: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            if not isinstance(obj, dict) or "doc_id" not in obj or "text" not in obj:
                raise ValueError(f"{path}:{lineno}: expected object with doc_id and text")
            doc_id = str(obj["doc_id"])
            if doc_id in docs:
                raise ValueError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            docs[doc_id] = str(obj["text"])
    return docs


def save_corpus(docs: dict[str, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, text in docs.items():
            fh.write(json.dumps({"doc_id": doc_id, "text": text}) + "\n")


def load_queries(path: str | Path) -> dict[str, str]:
    queries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected query_id<TAB>text, got {len(parts)} fields")
            qid, text = parts
            if qid in queries:
                raise ValueError(f"{path}:{lineno}: duplicate query id {qid!r}")
            queries[qid] = text
    return queries


def save_queries(queries: dict[str, str], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, text in queries.items():
            fh.write(f"{qid}\t{text}\n")


def load_triples(path: str | Path) -> list[TrainTriple]:
    triples: list[TrainTriple] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected query<TAB>pos_doc_id<TAB>neg_doc_id, got {len(parts)} fields"
                )
            try:
                triples.append(TrainTriple(*parts))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return triples


def save_triples(triples: list[TrainTriple], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triples:
            if "\t" in t.query:
                raise ValueError("triple query text may not contain tabs")
            fh.write(f"{t.query}\t{t.pos_doc_id}\t{t.neg_doc_id}\n")


def load_qrels(path: str | Path) -> dict[str, dict[str, int]]:
    """TREC qrels: query_id 0 doc_id grade, whitespace separated."""
    qrels: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, doc_id, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: grade {grade_s!r} is not an integer") from None
            if grade < 0:
                raise ValueError(f"{path}:{lineno}: negative grade {grade}")
            per_q = qrels.setdefault(qid, {})
            if doc_id in per_q:
                raise ValueError(f"{path}:{lineno}: duplicate judgment for ({qid}, {doc_id})")
            per_q[doc_id] = grade
    return qrels


def save_qrels(qrels: dict[str, dict[str, int]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for doc_id in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {doc_id} {qrels[qid][doc_id]}\n")


def load_dataset(dirpath: str | Path) -> Dataset:
    dirpath = Path(dirpath)
    ds = Dataset(
        docs=load_corpus(dirpath / "corpus.jsonl"),
        queries=load_queries(dirpath / "queries.tsv"),
        qrels=load_qrels(dirpath / "qrels.trec"),
    )
    triples_path = dirpath / "triples.tsv"
    if triples_path.exists():
        ds.triples = load_triples(triples_path)
    ds.validate()
    return ds


def save_dataset(ds: Dataset, dirpath: str | Path) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    save_corpus(ds.docs, dirpath / "corpus.jsonl")
    save_queries(ds.queries, dirpath / "queries.tsv")
    save_qrels(ds.qrels, dirpath / "qrels.trec")
    if ds.triples:
        save_triples(ds.triples, dirpath / "triples.tsv")
