"""BERT-style encoder at configurable depth/width, plus task heads.

The encoder follows the post-layer-norm original recipe: learned absolute
position embeddings, segment embeddings, multi-head self-attention with
additive masking, GELU feed-forward of width I (4H by default), dropout
0.1 in training mode only. All parameters live in a flat name -> Tensor
registry so checkpoints and the optimizer can treat the model uniformly.

``param_count`` is the closed-form budget oracle behind the named
presets; the pooler (the tanh projection of the [CLS] state) is counted
with the encoder, while the MLM/NSP pretraining heads are optional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .runtime import make_rng

# Additive attention-mask value: large enough that exp() underflows to
# exactly zero in f32, making padded positions bitwise invisible.
MASK_OFFSET = -1.0e9

INIT_STD = 0.02


class ConfigError(ValueError):
    """Invalid or inconsistent model hyperparameters."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    vocab_size: int
    max_positions: int
    intermediate_size: int | None = None
    num_segment_types: int = 2
    layer_norm_eps: float = 1e-12
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.intermediate_size is None:
            object.__setattr__(self, "intermediate_size", 4 * self.hidden_size)
        for name in ("num_layers", "hidden_size", "num_heads", "vocab_size",
                     "max_positions", "intermediate_size", "num_segment_types"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.layer_norm_eps <= 0:
            raise ConfigError(f"layer_norm_eps must be positive, got {self.layer_norm_eps}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "num_heads": self.num_heads,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "intermediate_size": self.intermediate_size,
            "num_segment_types": self.num_segment_types,
            "layer_norm_eps": self.layer_norm_eps,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


PRESETS: dict[str, ModelConfig] = {
    "bioformer-8L": ModelConfig(
        num_layers=8, hidden_size=512, num_heads=8, vocab_size=32768, max_positions=512
    ),
    "bioformer-16L": ModelConfig(
        num_layers=16, hidden_size=384, num_heads=6, vocab_size=32768, max_positions=1024
    ),
    "bert-base": ModelConfig(
        num_layers=12, hidden_size=768, num_heads=12, vocab_size=28996, max_positions=512
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        ) from None


def param_count(config: ModelConfig, include_mlm_nsp_heads: bool = False) -> int:
    """Exact parameter total from the closed-form shape inventory.

    Encoder: token/position/segment embeddings + embedding norm, per layer
    QKV/output projections with biases, two norms, and the H->I->H FFN,
    plus the [CLS] pooler. The optional term adds the MLM transform/norm/
    output-bias (output weights are tied to the token embeddings, so they
    never count twice) and the 2-way NSP classifier.
    """
    h, i, v = config.hidden_size, config.intermediate_size, config.vocab_size
    embeddings = v * h + config.max_positions * h + config.num_segment_types * h + 2 * h
    per_layer = 4 * (h * h + h) + (h * i + i) + (i * h + h) + 4 * h
    pooler = h * h + h
    total = embeddings + config.num_layers * per_layer + pooler
    if include_mlm_nsp_heads:
        total += (h * h + h) + 2 * h + v  # transform + norm + tied-output bias
        total += 2 * h + 2  # NSP classifier
    return total


def approx_millions(count: int) -> str:
    return f"≈{round(count / 1e6)}M"


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) with draws beyond 2 std resampled, as in BERT."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return out.astype(np.float32)


def _linear_params(rng, n_in: int, n_out: int, dtype) -> tuple[Tensor, Tensor]:
    w = Tensor(truncated_normal(rng, (n_in, n_out)), requires_grad=True, dtype=dtype)
    b = Tensor(np.zeros(n_out), requires_grad=True, dtype=dtype)
    return w, b


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, w), b)


def gather_rows(hidden: Tensor, flat_positions: np.ndarray) -> Tensor:
    """Select rows of the flattened (B*S, H) view by flat index."""
    b, s, h = hidden.shape
    return ag.embedding_lookup(ag.reshape(hidden, (b * s, h)), flat_positions)


class EncoderModel:
    """The encoder backbone; parameters in a flat ordered registry."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = make_rng(seed, "init")
        h, i = config.hidden_size, config.intermediate_size
        p: dict[str, Tensor] = {}

        def emb(name, rows):
            p[name] = Tensor(truncated_normal(rng, (rows, h)), requires_grad=True, dtype=dtype)

        def norm(prefix):
            p[f"{prefix}_gain"] = Tensor(np.ones(h), requires_grad=True, dtype=dtype)
            p[f"{prefix}_bias"] = Tensor(np.zeros(h), requires_grad=True, dtype=dtype)

        emb("embeddings/token", config.vocab_size)
        emb("embeddings/position", config.max_positions)
        emb("embeddings/segment", config.num_segment_types)
        norm("embeddings/norm")
        for layer in range(config.num_layers):
            pre = f"layer_{layer}"
            for proj in ("q", "k", "v", "o"):
                w, b = _linear_params(rng, h, h, dtype)
                p[f"{pre}/attn/{proj}_w"] = w
                p[f"{pre}/attn/{proj}_b"] = b
            norm(f"{pre}/attn_norm")
            w, b = _linear_params(rng, h, i, dtype)
            p[f"{pre}/ffn/in_w"], p[f"{pre}/ffn/in_b"] = w, b
            w, b = _linear_params(rng, i, h, dtype)
            p[f"{pre}/ffn/out_w"], p[f"{pre}/ffn/out_b"] = w, b
            norm(f"{pre}/ffn_norm")
        w, b = _linear_params(rng, h, h, dtype)
        p["pooler/w"], p["pooler/b"] = w, b
        self.params = p

    @property
    def token_embeddings(self) -> Tensor:
        return self.params["embeddings/token"]

    def parameter_array_total(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def forward(
        self,
        input_ids: np.ndarray,
        segment_ids: np.ndarray | None = None,
        attention_mask: np.ndarray | None = None,
        train: bool = False,
        dropout_rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Run the encoder; returns (hidden (B,S,H), pooled (B,H)).

        ``attention_mask`` is 1 for real positions and 0 for padding;
        padded positions receive no attention. Eval mode (train=False) is
        fully deterministic.
        """
        cfg = self.config
        input_ids = np.asarray(input_ids)
        if input_ids.ndim == 1:
            input_ids = input_ids[None, :]
        b, s = input_ids.shape
        if s > cfg.max_positions:
            raise ConfigError(
                f"sequence length {s} exceeds maximum positions {cfg.max_positions}"
            )
        if input_ids.size and input_ids.max() >= cfg.vocab_size:
            raise ConfigError(
                f"input id {int(input_ids.max())} out of range for "
                f"vocabulary size {cfg.vocab_size}"
            )
        if segment_ids is None:
            segment_ids = np.zeros_like(input_ids)
        segment_ids = np.asarray(segment_ids).reshape(b, s)
        if attention_mask is None:
            attention_mask = np.ones((b, s), dtype=np.float32)
        attention_mask = np.asarray(attention_mask, dtype=np.float32).reshape(b, s)
        drop = cfg.dropout_rate if train else 0.0
        if drop and dropout_rng is None:
            raise ConfigError("training-mode forward needs a dropout rng")

        pr = self.params
        x = ag.add(
            ag.add(
                ag.embedding_lookup(pr["embeddings/token"], input_ids),
                ag.embedding_lookup(pr["embeddings/position"], np.arange(s)),
            ),
            ag.embedding_lookup(pr["embeddings/segment"], segment_ids),
        )
        x = ag.layer_norm(
            x, pr["embeddings/norm_gain"], pr["embeddings/norm_bias"], cfg.layer_norm_eps
        )
        if drop:
            x = ag.dropout(x, drop, dropout_rng)

        mask_add = Tensor(
            ((1.0 - attention_mask) * MASK_OFFSET)[:, None, None, :], dtype=self.dtype
        )
        a, d = cfg.num_heads, cfg.head_dim
        inv_sqrt_d = 1.0 / math.sqrt(d)

        def split_heads(t: Tensor) -> Tensor:
            return ag.transpose(ag.reshape(t, (b, s, a, d)), (0, 2, 1, 3))

        for layer in range(cfg.num_layers):
            pre = f"layer_{layer}"
            q = split_heads(linear(x, pr[f"{pre}/attn/q_w"], pr[f"{pre}/attn/q_b"]))
            k = split_heads(linear(x, pr[f"{pre}/attn/k_w"], pr[f"{pre}/attn/k_b"]))
            v = split_heads(linear(x, pr[f"{pre}/attn/v_w"], pr[f"{pre}/attn/v_b"]))
            scores = ag.add(
                ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), inv_sqrt_d),
                mask_add,
            )
            probs = ag.softmax(scores)
            if drop:
                probs = ag.dropout(probs, drop, dropout_rng)
            context = ag.reshape(
                ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3)), (b, s, cfg.hidden_size)
            )
            attn_out = linear(context, pr[f"{pre}/attn/o_w"], pr[f"{pre}/attn/o_b"])
            if drop:
                attn_out = ag.dropout(attn_out, drop, dropout_rng)
            x = ag.layer_norm(
                ag.add(x, attn_out),
                pr[f"{pre}/attn_norm_gain"],
                pr[f"{pre}/attn_norm_bias"],
                cfg.layer_norm_eps,
            )
            ffn = linear(
                ag.gelu(linear(x, pr[f"{pre}/ffn/in_w"], pr[f"{pre}/ffn/in_b"])),
                pr[f"{pre}/ffn/out_w"],
                pr[f"{pre}/ffn/out_b"],
            )
            if drop:
                ffn = ag.dropout(ffn, drop, dropout_rng)
            x = ag.layer_norm(
                ag.add(x, ffn),
                pr[f"{pre}/ffn_norm_gain"],
                pr[f"{pre}/ffn_norm_bias"],
                cfg.layer_norm_eps,
            )

        cls_rows = gather_rows(x, np.arange(b) * s)
        pooled = ag.tanh(linear(cls_rows, pr["pooler/w"], pr["pooler/b"]))
        return x, pooled


class MlmHead:
    """Masked-token prediction: transform + norm, output tied to embeddings."""

    def __init__(self, model: EncoderModel, seed: int = 0):
        cfg = model.config
        rng = make_rng(seed, "mlm-head")
        h = cfg.hidden_size
        dtype = model.dtype
        w, b = _linear_params(rng, h, h, dtype)
        self.params = {
            "mlm/transform_w": w,
            "mlm/transform_b": b,
            "mlm/norm_gain": Tensor(np.ones(h), requires_grad=True, dtype=dtype),
            "mlm/norm_bias": Tensor(np.zeros(h), requires_grad=True, dtype=dtype),
            "mlm/output_bias": Tensor(np.zeros(cfg.vocab_size), requires_grad=True, dtype=dtype),
        }
        self._token_table = model.token_embeddings
        self._eps = cfg.layer_norm_eps

    def logits(self, hidden_rows: Tensor) -> Tensor:
        p = self.params
        t = ag.gelu(linear(hidden_rows, p["mlm/transform_w"], p["mlm/transform_b"]))
        t = ag.layer_norm(t, p["mlm/norm_gain"], p["mlm/norm_bias"], self._eps)
        return ag.add(
            ag.matmul(t, ag.transpose(self._token_table, (1, 0))), p["mlm/output_bias"]
        )


class NspHead:
    """IsNext/NotNext classifier over the pooled [CLS] state."""

    def __init__(self, model: EncoderModel, seed: int = 0):
        rng = make_rng(seed, "nsp-head")
        w, b = _linear_params(rng, model.config.hidden_size, 2, model.dtype)
        self.params = {"nsp/w": w, "nsp/b": b}

    def logits(self, pooled: Tensor) -> Tensor:
        return linear(pooled, self.params["nsp/w"], self.params["nsp/b"])


class TokenClassifierHead:
    """Per-position label logits from the last hidden layer."""

    def __init__(self, model: EncoderModel, num_labels: int, seed: int = 0):
        if num_labels < 1:
            raise ConfigError(f"num_labels must be >= 1, got {num_labels}")
        rng = make_rng(seed, "token-head")
        w, b = _linear_params(rng, model.config.hidden_size, num_labels, model.dtype)
        self.params = {"token_classifier/w": w, "token_classifier/b": b}
        self.num_labels = num_labels

    def logits(self, hidden: Tensor) -> Tensor:
        b, s, h = hidden.shape
        flat = ag.reshape(hidden, (b * s, h))
        return linear(flat, self.params["token_classifier/w"], self.params["token_classifier/b"])


class SequenceClassifierHead:
    """Whole-sequence label logits from the pooled [CLS] state."""

    def __init__(self, model: EncoderModel, num_labels: int, seed: int = 0):
        if num_labels < 1:
            raise ConfigError(f"num_labels must be >= 1, got {num_labels}")
        rng = make_rng(seed, "sequence-head")
        w, b = _linear_params(rng, model.config.hidden_size, num_labels, model.dtype)
        self.params = {"sequence_classifier/w": w, "sequence_classifier/b": b}
        self.num_labels = num_labels

    def logits(self, pooled: Tensor) -> Tensor:
        return linear(pooled, self.params["sequence_classifier/w"], self.params["sequence_classifier/b"])


class QaSpanHead:
    """Start/end position logits for extractive span answers."""

    def __init__(self, model: EncoderModel, seed: int = 0):
        rng = make_rng(seed, "qa-head")
        w, b = _linear_params(rng, model.config.hidden_size, 2, model.dtype)
        self.params = {"qa_span/w": w, "qa_span/b": b}

    def start_end_logits(self, hidden: Tensor) -> tuple[Tensor, Tensor]:
        b, s, h = hidden.shape
        proj = linear(ag.reshape(hidden, (b * s, h)), self.params["qa_span/w"], self.params["qa_span/b"])
        both = ag.transpose(proj, (1, 0))
        start = ag.reshape(ag.embedding_lookup(both, np.array([0])), (b, s))
        end = ag.reshape(ag.embedding_lookup(both, np.array([1])), (b, s))
        return start, end


@dataclass
class Heads:
    """Whichever heads a run needs; ``params()`` merges their registries."""

    mlm: MlmHead | None = None
    nsp: NspHead | None = None
    token_classifier: TokenClassifierHead | None = None
    sequence_classifier: SequenceClassifierHead | None = None
    qa_span: QaSpanHead | None = None

    @classmethod
    def for_pretraining(cls, model: EncoderModel, seed: int = 0) -> "Heads":
        return cls(mlm=MlmHead(model, seed), nsp=NspHead(model, seed))

    @classmethod
    def for_task(cls, model: EncoderModel, task: str, num_labels: int = 0, seed: int = 0) -> "Heads":
        if task == "ner":
            return cls(token_classifier=TokenClassifierHead(model, num_labels, seed))
        if task in ("re", "dc"):
            return cls(sequence_classifier=SequenceClassifierHead(model, num_labels, seed))
        if task == "qa":
            return cls(qa_span=QaSpanHead(model, seed))
        raise ConfigError(f"unknown task {task!r}; expected ner, re, dc, or qa")

    def params(self) -> dict[str, Tensor]:
        merged: dict[str, Tensor] = {}
        for head in (self.mlm, self.nsp, self.token_classifier,
                     self.sequence_classifier, self.qa_span):
            if head is not None:
                merged.update(head.params)
        return merged


def all_params(model: EncoderModel, heads: Heads | None = None) -> dict[str, Tensor]:
    merged = dict(model.params)
    if heads is not None:
        merged.update(heads.params())
    return merged


def no_decay_names(params: Iterable[str]) -> set[str]:
    """Bias and norm parameters, conventionally exempt from weight decay."""
    return {
        name
        for name in params
        if name.endswith(("_b", "_bias", "_gain", "/b")) or "norm" in name
    }
