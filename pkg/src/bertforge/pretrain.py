"""MLM+NSP pretraining loop with deterministic batching and exact resume.

Every source of randomness (batch order, dropout) is a pure function of
(seed, step), so interrupting a run at any checkpoint and resuming
reproduces the uninterrupted trajectory bit for bit at a fixed thread
count. Throughput (instances/sec) is the one logged quantity that is
wall-clock and therefore not reproducible.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .checkpoint import Checkpoint, assign_parameters, load_checkpoint, save_checkpoint
from .corpus import PretrainInstance, generate_pretraining_set, read_corpus
from .model import (
    EncoderModel,
    Heads,
    ModelConfig,
    all_params,
    gather_rows,
    no_decay_names,
)
from .optim import AdamConfig, AdamW, DivergenceError, scheduled_lr
from .runtime import make_rng
from .wordpiece import Vocabulary

logger = logging.getLogger(__name__)

METRICS_HEADER = ["step", "mlm_loss", "nsp_loss", "lr", "inst_per_sec"]


@dataclass(frozen=True)
class PretrainRunConfig:
    steps: int
    batch_size: int
    max_seq_len: int
    lr: float
    warmup_steps: int | None = None  # None: 1% of steps
    seed: int = 0
    checkpoint_every: int | None = None  # None: final checkpoint only
    dup_factor: int = 20
    masking_rate: float = 0.15
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_seq_len < 5:
            raise ValueError(f"max_seq_len must be >= 5, got {self.max_seq_len}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.warmup_steps is not None and not 1 <= self.warmup_steps <= self.steps:
            raise ValueError(
                f"warmup_steps must be in [1, steps={self.steps}], got {self.warmup_steps}"
            )
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.dup_factor < 1:
            raise ValueError(f"dup_factor must be >= 1, got {self.dup_factor}")
        if not 0.0 < self.masking_rate < 1.0:
            raise ValueError(f"masking_rate must be in (0, 1), got {self.masking_rate}")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")


# Bioformer's original pretraining ran 2M steps at batch 256 and length
# 512 on TPU hardware; recorded here for documentation, far beyond desk
# scale.
FULL_SCALE = PretrainRunConfig(
    steps=2_000_000, batch_size=256, max_seq_len=512, lr=1e-4
)


@dataclass
class Batch:
    input_ids: np.ndarray  # (B, S) int64
    segment_ids: np.ndarray  # (B, S) int64
    attention_mask: np.ndarray  # (B, S) f32
    flat_masked_positions: np.ndarray  # (M,) flattened into B*S
    mlm_labels: np.ndarray  # (M,) int64
    nsp_labels: np.ndarray  # (B,) int64

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def collate(instances: Sequence[PretrainInstance]) -> Batch:
    """Pad a list of instances to the batch's longest sequence.

    [PAD] has id 0 by vocabulary invariant, so padding is plain zeros.
    """
    if not instances:
        raise ValueError("cannot collate an empty batch")
    b = len(instances)
    s = max(len(inst.input_ids) for inst in instances)
    input_ids = np.zeros((b, s), dtype=np.int64)
    segment_ids = np.zeros((b, s), dtype=np.int64)
    mask = np.zeros((b, s), dtype=np.float32)
    flat_positions = []
    labels = []
    nsp = np.empty(b, dtype=np.int64)
    for row, inst in enumerate(instances):
        n = len(inst.input_ids)
        input_ids[row, :n] = inst.input_ids
        segment_ids[row, :n] = inst.segment_ids
        mask[row, :n] = 1.0
        flat_positions.extend(row * s + p for p in inst.masked_positions)
        labels.extend(inst.mlm_labels)
        nsp[row] = int(inst.nsp_label)
    return Batch(
        input_ids=input_ids,
        segment_ids=segment_ids,
        attention_mask=mask,
        flat_masked_positions=np.asarray(flat_positions, dtype=np.int64),
        mlm_labels=np.asarray(labels, dtype=np.int64),
        nsp_labels=nsp,
    )


class _EpochOrder:
    """Per-epoch shuffles derived from the run seed; one epoch cached."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.seed = seed
        self._epoch = -1
        self._perm: np.ndarray | None = None

    def index(self, global_position: int) -> int:
        epoch, offset = divmod(global_position, self.n)
        if epoch != self._epoch:
            self._perm = make_rng(self.seed, "epoch-order", epoch).permutation(self.n)
            self._epoch = epoch
        return int(self._perm[offset])


def batch_for_step(
    instances: Sequence[PretrainInstance], order: _EpochOrder, batch_size: int, step: int
) -> Batch:
    """The batch at ``step``; a pure function of (seed, step) via ``order``."""
    start = step * batch_size
    chosen = [instances[order.index(start + i)] for i in range(batch_size)]
    return collate(chosen)


def pretrain_losses(
    model: EncoderModel,
    heads: Heads,
    batch: Batch,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """MLM and NSP cross-entropy for one batch (graph-building).

    Returns (mlm_loss, nsp_loss, mlm_logits); the logits are over masked
    positions only, for accuracy bookkeeping.
    """
    hidden, pooled = model.forward(
        batch.input_ids,
        batch.segment_ids,
        batch.attention_mask,
        train=train,
        dropout_rng=dropout_rng,
    )
    mlm_logits = heads.mlm.logits(gather_rows(hidden, batch.flat_masked_positions))
    mlm_loss = ag.cross_entropy(mlm_logits, batch.mlm_labels)
    nsp_loss = ag.cross_entropy(heads.nsp.logits(pooled), batch.nsp_labels)
    return mlm_loss, nsp_loss, mlm_logits


def pretrain_step(
    model: EncoderModel,
    heads: Heads,
    batch: Batch,
    optimizer: AdamW,
    lr: float,
    dropout_rng: np.random.Generator,
) -> tuple[float, float]:
    """One training step; returns (mlm_loss, nsp_loss) before the update."""
    optimizer.zero_grad()
    mlm_loss, nsp_loss, _ = pretrain_losses(
        model, heads, batch, train=True, dropout_rng=dropout_rng
    )
    mlm = float(mlm_loss.data)
    nsp = float(nsp_loss.data)
    if not (np.isfinite(mlm) and np.isfinite(nsp)):
        raise DivergenceError(f"non-finite loss (mlm={mlm}, nsp={nsp})")
    ag.add(mlm_loss, nsp_loss).backward()
    optimizer.step(lr)
    return mlm, nsp


def evaluate_pretraining(
    model: EncoderModel,
    heads: Heads,
    instances: Sequence[PretrainInstance],
    batch_size: int = 32,
) -> dict:
    """Masked-position-weighted losses and top-1 accuracy, eval mode."""
    total_nll = 0.0
    total_nsp_nll = 0.0
    n_masked = 0
    n_rows = 0
    n_top1 = 0
    with no_grad():
        for at in range(0, len(instances), batch_size):
            batch = collate(instances[at : at + batch_size])
            mlm_loss, nsp_loss, mlm_logits = pretrain_losses(model, heads, batch)
            n_top1 += int((mlm_logits.data.argmax(axis=-1) == batch.mlm_labels).sum())
            m = len(batch.mlm_labels)
            total_nll += float(mlm_loss.data) * m
            total_nsp_nll += float(nsp_loss.data) * len(batch)
            n_masked += m
            n_rows += len(batch)
    return {
        "mlm_loss": total_nll / n_masked,
        "nsp_loss": total_nsp_nll / n_rows,
        "masked_top1": n_top1 / n_masked,
    }


def _format_float(x: float) -> str:
    # shortest round-trip repr of the f32 value keeps logs byte-stable
    return repr(float(np.float32(x)))


def _truncate_metrics(path: str, keep_through_step: int) -> None:
    """Drop rows logged past a checkpoint so a resumed log stays exact."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= keep_through_step]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(kept)


def optimizer_state_tensors(optimizer: AdamW) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, m in optimizer.state.m.items():
        out[f"opt/m/{name}"] = m
    for name, v in optimizer.state.v.items():
        out[f"opt/v/{name}"] = v
    return out


def restore_optimizer(optimizer: AdamW, ckpt: Checkpoint) -> None:
    for name in optimizer.state.m:
        optimizer.state.m[name][...] = ckpt.tensors[f"opt/m/{name}"]
        optimizer.state.v[name][...] = ckpt.tensors[f"opt/v/{name}"]
    optimizer.state.step = int(ckpt.extra["optimizer_step"])


def run_pretraining(
    model_config: ModelConfig,
    run_config: PretrainRunConfig,
    corpus_path: str,
    vocab_path: str,
    out_dir: str,
    resume_from: str | None = None,
    pre_segmented: bool = False,
) -> Checkpoint:
    """Full pretraining run; returns the final checkpoint.

    Writes ``metrics.csv``, periodic ``step_<k>.ckpt`` files when
    ``checkpoint_every`` is set, and ``final.ckpt`` under ``out_dir``.
    """
    cfg = run_config
    os.makedirs(out_dir, exist_ok=True)
    vocab = Vocabulary.load(vocab_path)
    if model_config.vocab_size != len(vocab):
        raise ValueError(
            f"model vocab_size {model_config.vocab_size} does not match "
            f"vocabulary file size {len(vocab)}"
        )
    docs = read_corpus(corpus_path, pre_segmented=pre_segmented)
    instances = list(
        generate_pretraining_set(
            docs,
            vocab,
            cfg.max_seq_len,
            dup_factor=cfg.dup_factor,
            masking_rate=cfg.masking_rate,
            seed=cfg.seed,
        )
    )
    logger.info("pretraining set: %d instances from %d documents", len(instances), len(docs))

    model = EncoderModel(model_config, seed=cfg.seed)
    heads = Heads.for_pretraining(model, seed=cfg.seed)
    params = all_params(model, heads)
    optimizer = AdamW(params, AdamConfig(lr=cfg.lr), no_decay=no_decay_names(params))
    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, expect_config=model_config)
        model_state = {k: v for k, v in ckpt.tensors.items() if not k.startswith("opt/")}
        assign_parameters(params, model_state)
        restore_optimizer(optimizer, ckpt)
        start_step = int(ckpt.extra["step"])
        logger.info("resumed from %s at step %d", resume_from, start_step)

    order = _EpochOrder(len(instances), cfg.seed)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    mode = "w"
    if resume_from is not None and os.path.exists(metrics_path):
        _truncate_metrics(metrics_path, start_step)
        mode = "a"

    def save(step: int, path: str) -> None:
        tensors: dict = dict(params)
        tensors.update(optimizer_state_tensors(optimizer))
        save_checkpoint(
            tensors,
            model_config,
            path,
            extra={
                "step": step,
                "optimizer_step": optimizer.state.step,
                "run_seed": cfg.seed,
            },
        )

    with open(metrics_path, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(METRICS_HEADER)
        for step in range(start_step, cfg.steps):
            lr = scheduled_lr(cfg.lr, step, cfg.steps, cfg.warmup_steps)
            batch = batch_for_step(instances, order, cfg.batch_size, step)
            began = time.perf_counter()
            mlm, nsp = pretrain_step(
                model, heads, batch, optimizer, lr, make_rng(cfg.seed, "dropout", step)
            )
            elapsed = max(time.perf_counter() - began, 1e-9)
            if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
                writer.writerow(
                    [
                        step + 1,
                        _format_float(mlm),
                        _format_float(nsp),
                        _format_float(lr),
                        f"{cfg.batch_size / elapsed:.2f}",
                    ]
                )
                f.flush()
            done = step + 1
            if cfg.checkpoint_every is not None and done % cfg.checkpoint_every == 0 and done < cfg.steps:
                save(done, os.path.join(out_dir, f"step_{done}.ckpt"))
    final_path = os.path.join(out_dir, "final.ckpt")
    save(cfg.steps, final_path)
    return load_checkpoint(final_path)
