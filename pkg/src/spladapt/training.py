"""MLM pretraining, contrastive fine-tuning, and the adaptation pipeline.

Stage semantics:
    pretrain_source / pretrain_target
        masked-language-model training of the domain subset on one corpus,
        task subset frozen; both start from the same base checkpoint.
    finetune_source
        in-batch softmax contrastive training of the task subset on source
        relevance triples, domain subset frozen.
    composed
        no training: target-domain subset grafted onto source-task subset.

Each stage owns a single seeded generator; with fixed seeds and inputs the
resulting checkpoints are bit-reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .data import TrainTriple
from .model import ModelConfig, encode_sparse_batch, init_weights, mlm_logits
from .optim import AdamState, adam_step
from .params import Checkpoint, compose, partition_parameters, save_checkpoint
from .vocab import MASK_ID, N_SPECIALS, PAD_ID, Vocabulary

__all__ = [
    "MASK_ACTIONS", "mask_tokens", "MlmBatch", "build_mlm_batch",
    "StageSpec", "pretrain_mlm", "ranking_loss", "finetune_ir",
    "PipelineSpec", "MODES", "run_pipeline",
]

log = logging.getLogger(__name__)

MODES = ("full", "wo_source", "wo_pretraining")

# per-position bookkeeping codes for mask_tokens
MASK_ACTIONS = {"none": 0, "mask": 1, "random": 2, "keep": 3}

_MASK_SPLIT = (0.8, 0.1, 0.1)


def mask_tokens(ids: np.ndarray, rng: np.random.Generator, vocab_size: int,
                mask_prob: float = 0.15) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """MLM corruption of one id sequence.

    Non-special positions are selected independently with mask_prob; a
    selected position becomes [MASK] with p=0.8, a random non-special id with
    p=0.1, or keeps its token with p=0.1. Returns (input_ids, labels,
    actions): labels hold the original id at selected positions and
    IGNORE_INDEX elsewhere.
    """
    ids = np.asarray(ids)
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError(f"mask_prob must be in [0, 1], got {mask_prob}")
    maskable = ids >= N_SPECIALS
    selected = maskable & (rng.random(ids.shape) < mask_prob)
    labels = np.where(selected, ids, ad.IGNORE_INDEX)
    input_ids = ids.copy()
    actions = np.zeros(ids.shape, dtype=np.int8)
    n_sel = int(selected.sum())
    if n_sel:
        roll = rng.random(n_sel)
        random_ids = rng.integers(N_SPECIALS, vocab_size, size=n_sel)
        sel_idx = np.flatnonzero(selected)
        for j, pos in enumerate(sel_idx):
            if roll[j] < _MASK_SPLIT[0]:
                input_ids[pos] = MASK_ID
                actions[pos] = MASK_ACTIONS["mask"]
            elif roll[j] < _MASK_SPLIT[0] + _MASK_SPLIT[1]:
                input_ids[pos] = random_ids[j]
                actions[pos] = MASK_ACTIONS["random"]
            else:
                actions[pos] = MASK_ACTIONS["keep"]
    return input_ids, labels, actions


@dataclass
class MlmBatch:
    input_ids: np.ndarray   # (B, S) int, PAD-padded
    labels: np.ndarray      # (B, S) int, IGNORE_INDEX where unsupervised
    actions: np.ndarray     # (B, S) int8 mask bookkeeping

    @property
    def n_supervised(self) -> int:
        return int((self.labels != ad.IGNORE_INDEX).sum())


def build_mlm_batch(sequences: Sequence[np.ndarray], rng: np.random.Generator,
                    vocab_size: int, mask_prob: float = 0.15) -> MlmBatch:
    """Mask each sequence and pad the batch to its longest row."""
    if not sequences:
        raise ValueError("empty batch")
    rows = [mask_tokens(seq, rng, vocab_size, mask_prob) for seq in sequences]
    S = max(len(r[0]) for r in rows)
    B = len(rows)
    input_ids = np.full((B, S), PAD_ID, dtype=np.int64)
    labels = np.full((B, S), ad.IGNORE_INDEX, dtype=np.int64)
    actions = np.zeros((B, S), dtype=np.int8)
    for b, (inp, lab, act) in enumerate(rows):
        input_ids[b, : len(inp)] = inp
        labels[b, : len(lab)] = lab
        actions[b, : len(act)] = act
    return MlmBatch(input_ids, labels, actions)


@dataclass
class StageSpec:
    """Budget and hyperparameters for one training stage."""

    stage: str
    steps: int
    batch_size: int = 16
    seed: int = 0
    lr: float = 1e-3
    mask_prob: float = 0.15
    lambda_q: float = 1e-3
    lambda_d: float = 1e-4

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class _StageLog:
    def __init__(self, path: str | Path | None):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def pretrain_mlm(base: Checkpoint, docs: Sequence[str], vocab: Vocabulary,
                 spec: StageSpec, log_path: str | Path | None = None) -> Checkpoint:
    """MLM-train the domain subset on one corpus; task subset frozen.

    With steps=0 the returned checkpoint is a byte-exact copy of base under
    the new stage tag.
    """
    if spec.stage not in ("pretrain_source", "pretrain_target"):
        raise ValueError(f"pretrain_mlm got stage {spec.stage!r}")
    if not docs:
        raise ValueError("pretraining corpus is empty")
    cfg = base.config
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"vocabulary size {len(vocab)} != model vocab_size {cfg.vocab_size}")
    part = partition_parameters(cfg)
    weights = base.weights.copy()
    cache = [vocab.encode(text, cfg.max_seq_len) for text in docs]
    if not any((seq >= N_SPECIALS).any() for seq in cache):
        raise ValueError("no document in the corpus has content tokens")
    rng = np.random.default_rng(spec.seed)
    state = AdamState.for_weights(weights.tensors, lr=spec.lr)
    stage_log = _StageLog(log_path)
    try:
        for step in range(spec.steps):
            batch = _sample_supervised_batch(cache, rng, cfg.vocab_size, spec)
            with GradTape() as tape:
                logits = mlm_logits(weights, batch.input_ids)
                loss = ad.softmax_cross_entropy(logits, batch.labels.reshape(-1))
                tape.backward(loss)
            grads = {n: t.grad for n, t in weights.tensors.items()}
            adam_step(weights.tensors, grads, state, frozen=part.task_names)
            weights.zero_grad()
            stage_log.write({"step": step, "stage": spec.stage, "loss": float(loss.data)})
            if step % 100 == 0:
                log.info("%s step %d loss %.4f", spec.stage, step, float(loss.data))
    finally:
        stage_log.close()
    return Checkpoint(weights, stage=spec.stage, parents=[base.parent_ref()])


def _sample_supervised_batch(cache: list[np.ndarray], rng: np.random.Generator,
                             vocab_size: int, spec: StageSpec, max_tries: int = 100) -> MlmBatch:
    # a draw can select nothing (small docs, low mask_prob); skip and redraw
    for _ in range(max_tries):
        idx = rng.integers(0, len(cache), size=spec.batch_size)
        batch = build_mlm_batch([cache[i] for i in idx], rng, vocab_size, spec.mask_prob)
        if batch.n_supervised > 0:
            return batch
    raise RuntimeError(f"no supervised positions after {max_tries} batch draws; "
                       f"mask_prob={spec.mask_prob} is too low for this corpus")


def _flops_term(reps: Tensor) -> Tensor:
    """Sum over terms of the squared batch-mean activation."""
    mean = ad.scale(ad.sum_axis(reps, 0), 1.0 / reps.shape[0])
    return ad.sum_all(ad.mul(mean, mean))


def ranking_loss(query_reps: Tensor, pos_reps: Tensor, neg_reps: Tensor,
                 lambda_q: float = 0.0, lambda_d: float = 0.0) -> tuple[Tensor, dict[str, float]]:
    """In-batch softmax contrastive loss plus FLOPS regularization.

    All three inputs are dense (B, V) representation batches, row-aligned by
    triple. Query i's candidates are its own positive plus every negative in
    the batch; the cross entropy target is always the positive. Returns the
    scalar loss tensor and a breakdown of its parts as floats.
    """
    B = query_reps.shape[0]
    if pos_reps.shape != query_reps.shape or neg_reps.shape != query_reps.shape:
        raise ValueError("query/pos/neg representation batches must share one shape")
    if B < 1:
        raise ValueError("empty batch")
    pos_scores = ad.reshape(ad.sum_axis(ad.mul(query_reps, pos_reps), 1), (B, 1))
    neg_scores = ad.matmul(query_reps, ad.transpose2d(neg_reps))
    scores = ad.concat_cols(pos_scores, neg_scores)  # (B, 1+B), positive is column 0
    loss = ad.softmax_cross_entropy(scores, np.zeros(B, dtype=np.int64))
    parts = {"ce": float(loss.data), "flops_term": 0.0}
    if lambda_q:
        fq = _flops_term(query_reps)
        parts["flops_term"] += lambda_q * float(fq.data)
        loss = ad.add(loss, ad.scale(fq, lambda_q))
    if lambda_d:
        fd = _flops_term(ad.concat_rows(pos_reps, neg_reps))
        parts["flops_term"] += lambda_d * float(fd.data)
        loss = ad.add(loss, ad.scale(fd, lambda_d))
    parts["total"] = float(loss.data)
    return loss, parts


def finetune_ir(pretrained: Checkpoint, triples: Sequence[TrainTriple], docs: dict[str, str],
                vocab: Vocabulary, spec: StageSpec, log_path: str | Path | None = None) -> Checkpoint:
    """Contrastive-train the task subset on relevance triples; domain frozen."""
    if spec.stage != "finetune_source":
        raise ValueError(f"finetune_ir got stage {spec.stage!r}")
    if not triples:
        raise ValueError("no training triples")
    unknown = sorted(({t.pos_doc_id for t in triples} | {t.neg_doc_id for t in triples}) - docs.keys())
    if unknown:
        raise ValueError(f"triples reference unknown docs: {unknown[:10]}")
    cfg = pretrained.config
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"vocabulary size {len(vocab)} != model vocab_size {cfg.vocab_size}")
    part = partition_parameters(cfg)
    weights = pretrained.weights.copy()
    doc_cache = {d: vocab.encode(text, cfg.max_seq_len) for d, text in docs.items()}
    query_cache = [vocab.encode(t.query, cfg.max_seq_len) for t in triples]
    for i, seq in enumerate(query_cache):
        if not (seq >= N_SPECIALS).any():
            raise ValueError(f"triple {i} has a query with no content tokens: {triples[i].query!r}")
    rng = np.random.default_rng(spec.seed)
    state = AdamState.for_weights(weights.tensors, lr=spec.lr)
    stage_log = _StageLog(log_path)
    try:
        for step in range(spec.steps):
            idx = rng.integers(0, len(triples), size=spec.batch_size)
            seqs = [query_cache[i] for i in idx]
            seqs += [doc_cache[triples[i].pos_doc_id] for i in idx]
            seqs += [doc_cache[triples[i].neg_doc_id] for i in idx]
            B = spec.batch_size
            S = max(len(s) for s in seqs)
            ids = np.full((3 * B, S), PAD_ID, dtype=np.int64)
            for r, s in enumerate(seqs):
                ids[r, : len(s)] = s
            with GradTape() as tape:
                reps = encode_sparse_batch(weights, ids)
                loss, parts = ranking_loss(
                    ad.slice_rows(reps, 0, B),
                    ad.slice_rows(reps, B, 2 * B),
                    ad.slice_rows(reps, 2 * B, 3 * B),
                    lambda_q=spec.lambda_q, lambda_d=spec.lambda_d,
                )
                tape.backward(loss)
            grads = {n: t.grad for n, t in weights.tensors.items()}
            adam_step(weights.tensors, grads, state, frozen=part.domain_names)
            weights.zero_grad()
            stage_log.write({"step": step, "stage": spec.stage,
                             "loss": parts["total"], "flops_term": parts["flops_term"]})
            if step % 100 == 0:
                log.info("%s step %d loss %.4f", spec.stage, step, parts["total"])
    finally:
        stage_log.close()
    return Checkpoint(weights, stage=spec.stage, parents=[pretrained.parent_ref()])


# ---------------------------------------------------------------- pipeline


@dataclass
class PipelineSpec:
    """One experiment: architecture, mode, and per-stage budgets."""

    model: ModelConfig
    mode: str = "full"
    seed: int = 0
    pretrain_steps: int = 1000
    finetune_steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    pretrain_lr: float | None = None   # None: use lr for pretraining too
    mask_prob: float = 0.15
    lambda_q: float = 1e-3
    lambda_d: float = 1e-4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    def pretrain_stage(self, stage: str) -> StageSpec:
        # stage seeds are derived from the experiment seed with fixed offsets
        offset = 1 if stage == "pretrain_source" else 2
        lr = self.lr if self.pretrain_lr is None else self.pretrain_lr
        return StageSpec(stage=stage, steps=self.pretrain_steps, batch_size=self.batch_size,
                         seed=self.seed + offset, lr=lr, mask_prob=self.mask_prob)

    def finetune_stage(self) -> StageSpec:
        return StageSpec(stage="finetune_source", steps=self.finetune_steps,
                         batch_size=self.batch_size, seed=self.seed + 3, lr=self.lr,
                         lambda_q=self.lambda_q, lambda_d=self.lambda_d)


def run_pipeline(spec: PipelineSpec, source_docs: dict[str, str], target_docs: dict[str, str],
                 triples: Sequence[TrainTriple], vocab: Vocabulary,
                 workdir: str | Path | None = None) -> dict[str, Checkpoint]:
    """Run the selected stages and return checkpoints keyed by stage tag.

    full:            pretrain on source and target, fine-tune from the
                     source-pretrained model, compose target-domain with
                     fine-tuned task.
    wo_source:       skip source pretraining; fine-tune starts from base;
                     composition unchanged.
    wo_pretraining:  skip both pretrains; the composed model is the
                     fine-tuned base model itself (zero-shot on target).

    With a workdir, each checkpoint lands in workdir/checkpoints/<stage> and
    each stage appends a JSONL training log under workdir/logs/.
    """
    partition_parameters(spec.model)  # validates k before any training
    ckpt_dir = log_dir = None
    if workdir is not None:
        workdir = Path(workdir)
        ckpt_dir = workdir / "checkpoints"
        log_dir = workdir / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)

    def log_path(stage: str):
        return (log_dir / f"{stage}.jsonl") if log_dir else None

    out: dict[str, Checkpoint] = {}
    base = Checkpoint(init_weights(spec.model, seed=spec.seed), stage="base")
    out["base"] = base

    if spec.mode == "full":
        log.info("pretraining on source corpus (%d docs)", len(source_docs))
        out["pretrain_source"] = pretrain_mlm(
            base, list(source_docs.values()), vocab,
            spec.pretrain_stage("pretrain_source"), log_path("pretrain_source"))
    if spec.mode in ("full", "wo_source"):
        log.info("pretraining on target corpus (%d docs)", len(target_docs))
        out["pretrain_target"] = pretrain_mlm(
            base, list(target_docs.values()), vocab,
            spec.pretrain_stage("pretrain_target"), log_path("pretrain_target"))

    finetune_init = out.get("pretrain_source", base)
    log.info("fine-tuning on %d triples from %r", len(triples), finetune_init.stage)
    out["finetune_source"] = finetune_ir(
        finetune_init, list(triples), source_docs, vocab,
        spec.finetune_stage(), log_path("finetune_source"))

    if spec.mode == "wo_pretraining":
        out["composed"] = out["finetune_source"].derive(
            "composed", parents=[out["finetune_source"].parent_ref()])
    else:
        out["composed"] = compose(out["pretrain_target"], out["finetune_source"])

    if ckpt_dir is not None:
        for stage, ckpt in out.items():
            save_checkpoint(ckpt, ckpt_dir / stage)
    return out
