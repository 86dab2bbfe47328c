"""Small post-layer-norm transformer encoder with a tied MLM head, and the
sparse document/query representations derived from it.

A representation weight for vocabulary term j is
    w_j = log(1 + relu(max_i logit_ij))
with the max over non-special positions i. log1p(relu(.)) is nondecreasing,
so it is applied after pooling; the result is identical to pooling the
transformed logits and saves a [S, V] intermediate.

The MLM output projection is tied to the token embedding matrix and is never
materialized; only its bias ("mlm.bias") is a separate parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import N_SPECIALS, PAD_ID

__all__ = [
    "ModelConfig", "EncoderWeights", "SparseVector",
    "parameter_shapes", "init_weights",
    "forward_mlm", "mlm_logits", "encode_sparse", "encode_sparse_batch",
    "sparse_from_dense", "score",
    "LN_EPS",
]

LN_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. k_domain_layers is the number of leading
    transformer layers assigned to the domain subset (validated where the
    partition is taken, so invalid k values are representable but unusable)."""

    vocab_size: int = 2000
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    max_seq_len: int = 64
    k_domain_layers: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for field_name in ("vocab_size", "n_layers", "d_model", "n_heads", "d_ffn", "max_seq_len"):
            if getattr(self, field_name) <= 0:
                raise ValueError(f"{field_name} must be positive")
        if self.vocab_size <= N_SPECIALS:
            raise ValueError(f"vocab_size must exceed the {N_SPECIALS} special tokens")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable tensor. The names are load-bearing:
    the domain/task partition and the checkpoint manifest key on them."""
    d, f, V = config.d_model, config.d_ffn, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "emb.token": (V, d),
        "emb.position": (config.max_seq_len, d),
        "mlm.bias": (V,),
    }
    for i in range(config.n_layers):
        p = f"layer.{i}."
        shapes[p + "attn.wq"] = (d, d)
        shapes[p + "attn.bq"] = (d,)
        shapes[p + "attn.wk"] = (d, d)
        shapes[p + "attn.bk"] = (d,)
        shapes[p + "attn.wv"] = (d, d)
        shapes[p + "attn.bv"] = (d,)
        shapes[p + "attn.wo"] = (d, d)
        shapes[p + "attn.bo"] = (d,)
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "ffn.w1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
    return shapes


class EncoderWeights:
    """Config plus name-keyed parameter tensors (all requires_grad)."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"weight names do not match config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()},
        )

    def astype(self, dtype) -> "EncoderWeights":
        return EncoderWeights(
            self.config,
            {n: Tensor(t.data.astype(dtype), requires_grad=True) for n, t in self.tensors.items()},
        )


def init_weights(config: ModelConfig, seed: int, dtype=np.float32) -> EncoderWeights:
    """Projection and embedding matrices ~ N(0, 0.02^2); biases zero; layer
    norm at identity. Draws happen in sorted name order, so the result is a
    pure function of (config, seed)."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in sorted(parameter_shapes(config).items()):
        leaf = name.rsplit(".", 1)[1]
        if leaf in ("gain",):
            data = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b") or leaf == "bias" or name == "mlm.bias":
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, 0.02, size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return EncoderWeights(config, tensors)


def _validate_ids(config: ModelConfig, ids: np.ndarray) -> None:
    if ids.ndim != 2:
        raise ValueError(f"token ids must be 2-D [batch, seq], got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.size == 0:
        raise ValueError("empty token id batch")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(f"token id out of range [0, {config.vocab_size})")


def _encoder_hidden(w: EncoderWeights, ids: np.ndarray) -> Tensor:
    """ids (B, S) int -> hidden states (B*S, d). [PAD] positions are blocked
    as attention keys but still produce (ignored) outputs."""
    cfg = w.config
    B, S = ids.shape
    H = cfg.n_heads
    dh = cfg.d_model // H
    flat_ids = ids.reshape(-1)
    pos_ids = np.tile(np.arange(S, dtype=np.int64), B)
    h = ad.add(ad.gather_rows(w["emb.token"], flat_ids), ad.gather_rows(w["emb.position"], pos_ids))

    dt = h.data.dtype
    key_mask = np.where(ids == PAD_ID, dt.type(-np.inf), dt.type(0.0))  # (B, S)
    key_mask = np.repeat(key_mask[:, None, None, :], H, axis=1).reshape(B * H, 1, S)

    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    def heads(x: Tensor) -> Tensor:
        # (B*S, d) -> (B*H, S, dh)
        return ad.reshape(ad.swapaxes(ad.reshape(x, (B, S, H, dh)), 1, 2), (B * H, S, dh))

    for i in range(cfg.n_layers):
        p = f"layer.{i}."
        q = heads(ad.add(ad.matmul(h, w[p + "attn.wq"]), w[p + "attn.bq"]))
        k = heads(ad.add(ad.matmul(h, w[p + "attn.wk"]), w[p + "attn.bk"]))
        v = heads(ad.add(ad.matmul(h, w[p + "attn.wv"]), w[p + "attn.bv"]))
        scores = ad.add_const(ad.scale(ad.bmm(q, ad.swapaxes(k, 1, 2)), inv_sqrt_dh), key_mask)
        ctx = ad.bmm(ad.softmax(scores), v)  # (B*H, S, dh)
        ctx = ad.reshape(ad.swapaxes(ad.reshape(ctx, (B, H, S, dh)), 1, 2), (B * S, cfg.d_model))
        attn_out = ad.add(ad.matmul(ctx, w[p + "attn.wo"]), w[p + "attn.bo"])
        h = ad.layer_norm(ad.add(h, attn_out), w[p + "ln1.gain"], w[p + "ln1.bias"], eps=LN_EPS)
        ffn = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h, w[p + "ffn.w1"]), w[p + "ffn.b1"])),
                               w[p + "ffn.w2"]), w[p + "ffn.b2"])
        h = ad.layer_norm(ad.add(h, ffn), w[p + "ln2.gain"], w[p + "ln2.bias"], eps=LN_EPS)
    return h


def mlm_logits(w: EncoderWeights, ids: np.ndarray) -> Tensor:
    """ids (B, S) -> logits (B*S, V) through the tied output projection."""
    _validate_ids(w.config, ids)
    h = _encoder_hidden(w, ids)
    return ad.add(ad.matmul(h, ad.transpose2d(w["emb.token"])), w["mlm.bias"])


def forward_mlm(w: EncoderWeights, ids: np.ndarray) -> Tensor:
    """Single sequence (S,) -> logits (S, V)."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ValueError(f"forward_mlm expects a 1-D id sequence, got shape {ids.shape}")
    return mlm_logits(w, ids[None, :])


class SparseVector:
    """Term id -> positive weight; zero-weight terms are never stored."""

    __slots__ = ("weights",)

    def __init__(self, weights: dict[int, float] | None = None):
        self.weights = {}
        if weights:
            for tid, val in weights.items():
                if val < 0:
                    raise ValueError(f"negative sparse weight {val} for term {tid}")
                if val > 0:
                    self.weights[int(tid)] = float(val)

    def l0(self) -> int:
        return len(self.weights)

    def __len__(self) -> int:
        return len(self.weights)

    def __eq__(self, other) -> bool:
        return isinstance(other, SparseVector) and self.weights == other.weights

    def items(self):
        return self.weights.items()


def score(query: SparseVector, doc: SparseVector) -> float:
    """Inner product over shared terms."""
    q, d = query.weights, doc.weights
    if len(d) < len(q):
        q, d = d, q
    return sum(val * d[tid] for tid, val in q.items() if tid in d)


def encode_sparse_batch(w: EncoderWeights, ids: np.ndarray) -> Tensor:
    """ids (B, S) -> dense representations (B, V): per-term max of MLM logits
    over non-special positions, then log1p(relu(.)). Differentiable; run it
    under a tape during training."""
    _validate_ids(w.config, ids)
    B, S = ids.shape
    content = ids >= N_SPECIALS
    if not content.any(axis=1).all():
        bad = int(np.flatnonzero(~content.any(axis=1))[0])
        raise ValueError(f"sequence {bad} has no content terms to pool over")
    logits = ad.reshape(mlm_logits(w, ids), (B, S, w.config.vocab_size))
    dt = logits.data.dtype
    pool_mask = np.where(content, dt.type(0.0), dt.type(-np.inf))[:, :, None]
    return ad.log1p_relu(ad.amax_axis(ad.add_const(logits, pool_mask), axis=1))


def sparse_from_dense(row: np.ndarray) -> SparseVector:
    """Keep strictly positive entries of a dense (V,) representation."""
    ids = np.flatnonzero(row > 0)
    return SparseVector({int(tid): float(row[tid]) for tid in ids})


def encode_sparse(w: EncoderWeights, ids: np.ndarray) -> SparseVector:
    """Single sequence (S,) -> SparseVector."""
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ValueError(f"encode_sparse expects a 1-D id sequence, got shape {ids.shape}")
    dense = encode_sparse_batch(w, ids[None, :])
    return sparse_from_dense(dense.data[0])
