"""Experiment orchestration: encode, index, retrieve, and report.

Report rows for one adaptation experiment on the target domain:
    bm25       frequency index + BM25 over target docs (no training)
    zeroshot   the fine-tuned source model applied to the target as-is
    composed   target-domain subset grafted onto the fine-tuned task subset
Significance is paired on per-query nDCG against both baselines.
"""

from __future__ import annotations

import logging
from pathlib import Path

from .data import Dataset
from .evaluation import (
    EvalReport, MethodResult, sparsity_stats, write_run,
)
from .index import (
    InvertedIndex, RankedList, build_frequency_index, encode_corpus,
    index_from_vectors, retrieve_bm25, retrieve_sparse, save_index,
)
from .model import EncoderWeights, SparseVector
from .params import Checkpoint, compose, save_checkpoint
from .training import PipelineSpec, finetune_ir, run_pipeline
from .vocab import Vocabulary, tokenize

__all__ = [
    "DEFAULT_CUTOFF", "encode_queries", "sparse_run", "bm25_run",
    "sparse_method", "bm25_method", "build_report", "adaptation_report",
    "run_experiment", "benchmark_variants", "sweep_k", "format_sweep_table",
]

log = logging.getLogger(__name__)

DEFAULT_CUTOFF = 100


def encode_queries(weights: EncoderWeights, queries: dict[str, str],
                   vocab: Vocabulary, batch_size: int = 32) -> dict[str, SparseVector]:
    """Sparse query vectors; a query with no content tokens encodes empty."""
    return encode_corpus(weights, queries, vocab, batch_size=batch_size)


def sparse_run(index: InvertedIndex, query_vecs: dict[str, SparseVector],
               cutoff: int) -> dict[str, RankedList]:
    return {qid: retrieve_sparse(index, vec, cutoff, query_id=qid)
            for qid, vec in query_vecs.items()}


def bm25_run(index: InvertedIndex, queries: dict[str, str], vocab: Vocabulary,
             cutoff: int) -> dict[str, RankedList]:
    return {qid: retrieve_bm25(index, text, vocab, cutoff, query_id=qid)
            for qid, text in queries.items()}


def sparse_method(name: str, weights: EncoderWeights, dataset: Dataset, vocab: Vocabulary,
                  cutoff: int) -> tuple[MethodResult, dict[str, RankedList], InvertedIndex]:
    """Index the dataset's docs with the encoder, retrieve its queries, and
    aggregate metrics plus doc/query sparsity."""
    doc_reps = encode_corpus(weights, dataset.docs, vocab)
    index = index_from_vectors(doc_reps, {d: len(tokenize(t)) for d, t in dataset.docs.items()})
    query_vecs = encode_queries(weights, dataset.queries, vocab)
    run = sparse_run(index, query_vecs, cutoff)
    method = MethodResult.from_run(name, run, dataset.qrels)
    method.doc_sparsity = sparsity_stats(doc_reps.values())
    method.query_sparsity = sparsity_stats(query_vecs.values())
    return method, run, index


def bm25_method(name: str, dataset: Dataset, vocab: Vocabulary,
                cutoff: int) -> tuple[MethodResult, dict[str, RankedList], InvertedIndex]:
    index = build_frequency_index(dataset.docs, vocab)
    run = bm25_run(index, dataset.queries, vocab, cutoff)
    return MethodResult.from_run(name, run, dataset.qrels), run, index


def build_report(named_weights: dict[str, EncoderWeights], target: Dataset, vocab: Vocabulary,
                 cutoff: int = DEFAULT_CUTOFF, dataset_name: str = "target",
                 metadata: dict | None = None, primary: str = "composed",
                 workdir: str | Path | None = None) -> EvalReport:
    """Evaluate BM25 plus each named encoder on the target queries. The
    primary method is significance-tested against every other row. With a
    workdir, indexes, run files, report.json, and report.txt are persisted."""
    if primary not in named_weights:
        raise ValueError(f"primary method {primary!r} has no weights")
    bm25_res, bm25_runs, bm25_index = bm25_method("bm25", target, vocab, cutoff)
    methods = [bm25_res]
    all_runs = {"bm25": bm25_runs}
    primary_index = None
    for name, weights in named_weights.items():
        res, runs, index = sparse_method(name, weights, target, vocab, cutoff)
        methods.append(res)
        all_runs[name] = runs
        if name == primary:
            primary_index = index

    report = EvalReport(dataset=dataset_name, cutoff=cutoff, metric_depth=10,
                        methods=methods, metadata=metadata or {})
    for m in methods:
        if m.name != primary:
            report.add_significance(primary, m.name)

    if workdir is not None:
        workdir = Path(workdir)
        runs_dir = workdir / "runs"
        runs_dir.mkdir(parents=True, exist_ok=True)
        for tag, runs in all_runs.items():
            write_run(runs, runs_dir / f"{tag}.trec", tag=tag)
        save_index(bm25_index, workdir / "indexes" / "target_frequency")
        save_index(primary_index, workdir / "indexes" / f"target_impact_{primary}")
        (workdir / "report.json").write_text(report.to_json(), encoding="utf-8")
        (workdir / "report.txt").write_text(report.format_table(), encoding="utf-8")
    return report


def adaptation_report(checkpoints: dict[str, Checkpoint], target: Dataset, vocab: Vocabulary,
                      cutoff: int = DEFAULT_CUTOFF, dataset_name: str = "target",
                      metadata: dict | None = None,
                      workdir: str | Path | None = None) -> EvalReport:
    """Standard three-row report: bm25, zeroshot (the source fine-tune as-is),
    composed (target-domain subset under that fine-tune's task subset)."""
    named = {
        "zeroshot": checkpoints["finetune_source"].weights,
        "composed": checkpoints["composed"].weights,
    }
    return build_report(named, target, vocab, cutoff=cutoff, dataset_name=dataset_name,
                        metadata=metadata, workdir=workdir)


def run_experiment(spec: PipelineSpec, source: Dataset, target: Dataset, vocab: Vocabulary,
                   cutoff: int = DEFAULT_CUTOFF,
                   workdir: str | Path | None = None) -> tuple[dict[str, Checkpoint], EvalReport]:
    """Full train-compose-evaluate pass in the selected mode."""
    checkpoints = run_pipeline(spec, source.docs, target.docs, source.triples, vocab,
                               workdir=workdir)
    metadata = {"mode": spec.mode, "seed": spec.seed, "k": spec.model.k_domain_layers,
                "pretrain_steps": spec.pretrain_steps, "finetune_steps": spec.finetune_steps}
    report = adaptation_report(checkpoints, target, vocab, cutoff=cutoff,
                               metadata=metadata, workdir=workdir)
    for line in report.format_table().splitlines():
        log.info("%s", line)
    return checkpoints, report


def benchmark_variants(spec: PipelineSpec, source: Dataset, target: Dataset, vocab: Vocabulary,
                       cutoff: int = DEFAULT_CUTOFF,
                       workdir: str | Path | None = None) -> tuple[dict[str, Checkpoint], EvalReport]:
    """Five-row comparison on the target domain from shared stages.

    Beyond the full pipeline's checkpoints, one extra fine-tune from the raw
    base fills in the ablations:
        composed        compose(target pretrain, fine-tune from source pretrain)
        zeroshot        that same fine-tune applied to the target unchanged
        wo_source       compose(target pretrain, fine-tune from base)
        wo_pretraining  fine-tune from base, applied unchanged
    All variants share the base weights, the target pretrain, and the
    fine-tuning data order, so rows differ only in the ablated ingredient.
    """
    if spec.mode != "full":
        raise ValueError(f"variant benchmark starts from mode 'full', got {spec.mode!r}")
    checkpoints = run_pipeline(spec, source.docs, target.docs, source.triples, vocab,
                               workdir=workdir)
    log_path = None
    if workdir is not None:
        (Path(workdir) / "logs").mkdir(parents=True, exist_ok=True)
        log_path = Path(workdir) / "logs" / "finetune_from_base.jsonl"
    c_base = finetune_ir(checkpoints["base"], source.triples, source.docs, vocab,
                         spec.finetune_stage(), log_path=log_path)
    wo_source = compose(checkpoints["pretrain_target"], c_base)
    checkpoints["finetune_from_base"] = c_base
    checkpoints["wo_source"] = wo_source
    if workdir is not None:
        vdir = Path(workdir) / "variants"
        save_checkpoint(c_base, vdir / "finetune_from_base")
        save_checkpoint(wo_source, vdir / "wo_source")

    named = {
        "zeroshot": checkpoints["finetune_source"].weights,
        "composed": checkpoints["composed"].weights,
        "wo_source": wo_source.weights,
        "wo_pretraining": c_base.weights,
    }
    metadata = {"mode": "full+variants", "seed": spec.seed, "k": spec.model.k_domain_layers,
                "pretrain_steps": spec.pretrain_steps, "finetune_steps": spec.finetune_steps}
    report = build_report(named, target, vocab, cutoff=cutoff, metadata=metadata,
                          workdir=workdir)
    return checkpoints, report


def sweep_k(spec: PipelineSpec, k_values: list[int], source: Dataset, target: Dataset,
            vocab: Vocabulary, cutoff: int = DEFAULT_CUTOFF,
            workdir: str | Path | None = None) -> list[dict]:
    """Rerun the pipeline per k and collect the composed row of each report.

    Every run shares ``spec.seed``, so rows differ only in where the
    domain/task boundary sits.
    """
    import dataclasses

    if len(set(k_values)) != len(k_values):
        raise ValueError("duplicate k values in sweep")
    rows: list[dict] = []
    for k in k_values:
        k_spec = dataclasses.replace(spec, model=dataclasses.replace(spec.model, k_domain_layers=k))
        sub = Path(workdir) / f"k{k}" if workdir is not None else None
        log.info("sweep: k=%d", k)
        _, report = run_experiment(k_spec, source, target, vocab, cutoff=cutoff, workdir=sub)
        composed = report.method("composed")
        rows.append({
            "k": k,
            "ndcg10": composed.ndcg10,
            "mrr10": composed.mrr10,
            "doc_mean_l0": composed.doc_sparsity["mean_l0"],
            "query_mean_l0": composed.query_sparsity["mean_l0"],
            "zeroshot_ndcg10": report.method("zeroshot").ndcg10,
            "bm25_ndcg10": report.method("bm25").ndcg10,
        })
    return rows


def format_sweep_table(rows: list[dict]) -> str:
    header = f"{'k':>3} {'nDCG@10':>10} {'MRR@10':>10} {'doc L0':>10} {'query L0':>10} {'0-shot':>10} {'bm25':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['k']:>3} {r['ndcg10']:>10.4f} {r['mrr10']:>10.4f} "
                     f"{r['doc_mean_l0']:>10.1f} {r['query_mean_l0']:>10.1f} "
                     f"{r['zeroshot_ndcg10']:>10.4f} {r['bm25_ndcg10']:>10.4f}")
    return "\n".join(lines) + "\n"
