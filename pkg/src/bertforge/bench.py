"""Compute analytics and throughput benchmarks.

Two kinds of numbers live here: an analytic multiply-accumulate model
that explains why shrinking depth and width speeds inference up, and
wall-clock measurements of a sequence-classification forward (and
training step), the workload such speed comparisons conventionally use.
Relative speedups against the Base-shape encoder are the quantity of
interest; absolute throughput depends on the machine and is only
recorded.

A depth-vs-width sweep harness rounds the module out: it briefly
pretrains and fine-tunes a grid of (layers, hidden size) cells under one
protocol and pairs up cells of roughly equal parameter count.
"""

from __future__ import annotations

import csv
import logging
import os
import platform
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .finetune import TaskDataset, TuneProtocol, finetune_task
from .model import (
    EncoderModel,
    Heads,
    ModelConfig,
    all_params,
    no_decay_names,
    param_count,
)
from .optim import AdamConfig, AdamW, DivergenceError
from .pretrain import PretrainRunConfig, run_pretraining
from .runtime import make_rng, pin_threads
from .wordpiece import Vocabulary

logger = logging.getLogger(__name__)

PHASES = ("inference", "train")

CSV_HEADER = [
    "config", "phase", "seq_len", "batch",
    "examples_per_sec", "speedup_vs_base", "threads",
]

# benchmark task: one linear layer on the pooled [CLS] state
BENCH_NUM_LABELS = 2


class BenchError(ValueError):
    pass


def estimate_macs(config: ModelConfig, seq_len: int, num_labels: int = BENCH_NUM_LABELS) -> int:
    """Per-example multiply-accumulates for classification at ``seq_len``.

    Closed form, S = seq_len, H = hidden, I = intermediate, L = layers:

        backbone  L * (4*S*H^2 + 2*S*H*I + 2*S^2*H)
        head      H^2 + H*num_labels   (pooler projection + classifier)

    With the standard I = 4H the backbone term is L*(12*S*H^2 + 2*S^2*H).
    Additions, norms, and activations are ignored; they are O(S*H) and
    irrelevant next to the matmuls.
    """
    if seq_len < 1:
        raise BenchError(f"seq_len must be >= 1, got {seq_len}")
    if seq_len > config.max_positions:
        raise BenchError(
            f"seq_len {seq_len} exceeds the config's {config.max_positions} positions"
        )
    s, h = seq_len, config.hidden_size
    i = config.intermediate_size or 4 * h
    per_layer = 4 * s * h * h + 2 * s * h * i + 2 * s * s * h
    head = h * h + h * num_labels
    return config.num_layers * per_layer + head


def mac_ratio(base: ModelConfig, other: ModelConfig, seq_len: int) -> float:
    """Predicted speedup of ``other`` over ``base`` (>1 means faster)."""
    return estimate_macs(base, seq_len) / estimate_macs(other, seq_len)


# ---------------------------------------------------------------------------
# timing


def measure(
    fn: Callable[[], None],
    repetitions: int,
    warmup: int = 1,
    timer: Callable[[], float] = time.perf_counter,
) -> list[float]:
    """Per-repetition wall times, warmup runs excluded."""
    if repetitions < 3:
        raise BenchError(f"need >= 3 timed repetitions, got {repetitions}")
    if warmup < 0:
        raise BenchError(f"warmup must be >= 0, got {warmup}")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = timer()
        fn()
        times.append(timer() - t0)
    return times


def timing_spread(rep_times: Sequence[float]) -> float:
    """(max - min) / median; above 0.10 a result is flagged unstable."""
    med = statistics.median(rep_times)
    return (max(rep_times) - min(rep_times)) / med


def warmup_shift(rep_times: Sequence[float]) -> float:
    """Relative change of the median when the first repetition is dropped."""
    med = statistics.median(rep_times)
    return abs(statistics.median(rep_times[1:]) - med) / med


def _hardware_note() -> str:
    cpu = platform.processor() or platform.machine() or "unknown cpu"
    return f"{cpu}, {os.cpu_count() or 1} logical cores"


@dataclass(frozen=True)
class BenchResult:
    config_name: str
    phase: str
    seq_len: int
    batch_size: int
    examples_per_sec: float
    duration_s: float  # sum of the timed repetitions
    rep_times: tuple[float, ...]
    threads: int
    hardware: str
    stable: bool  # repetition spread within 10% of the median

    def __post_init__(self):
        if self.phase not in PHASES:
            raise BenchError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not self.examples_per_sec > 0:
            raise BenchError("examples_per_sec must be positive")
        if len(self.rep_times) < 3:
            raise BenchError("a result needs at least 3 timed repetitions")


def _result(name, phase, seq_len, batch, times, threads) -> BenchResult:
    med = statistics.median(times)
    return BenchResult(
        config_name=name,
        phase=phase,
        seq_len=seq_len,
        batch_size=batch,
        examples_per_sec=batch / med,
        duration_s=sum(times),
        rep_times=tuple(times),
        threads=threads,
        hardware=_hardware_note(),
        stable=timing_spread(times) <= 0.10,
    )


def _inference_closure(config: ModelConfig, seq_len: int, batch: int, seed: int):
    model = EncoderModel(config, seed=seed)
    heads = Heads.for_task(model, "re", num_labels=BENCH_NUM_LABELS, seed=seed)
    rng = make_rng(seed, "bench-input")
    ids = rng.integers(0, config.vocab_size, size=(batch, seq_len), dtype=np.int64)
    mask = np.ones((batch, seq_len), dtype=np.float32)

    def step():
        with ag.no_grad():
            _, pooled = model.forward(ids, None, mask)
            heads.sequence_classifier.logits(pooled)

    return step


def _train_closure(config: ModelConfig, seq_len: int, batch: int, seed: int):
    model = EncoderModel(config, seed=seed)
    heads = Heads.for_task(model, "re", num_labels=BENCH_NUM_LABELS, seed=seed)
    params = all_params(model, heads)
    optimizer = AdamW(params, AdamConfig(lr=1e-5), no_decay=no_decay_names(params))
    rng = make_rng(seed, "bench-input")
    ids = rng.integers(0, config.vocab_size, size=(batch, seq_len), dtype=np.int64)
    mask = np.ones((batch, seq_len), dtype=np.float32)
    labels = rng.integers(0, BENCH_NUM_LABELS, size=batch, dtype=np.int64)
    drop_rng = make_rng(seed, "bench-dropout")

    def step():
        optimizer.zero_grad()
        _, pooled = model.forward(ids, None, mask, train=True, dropout_rng=drop_rng)
        loss = ag.cross_entropy(heads.sequence_classifier.logits(pooled), labels)
        loss.backward()
        optimizer.step()

    return step


def largest_train_batch(
    config: ModelConfig, seq_len: int, candidates: Sequence[int], seed: int = 0
) -> int:
    """First batch size whose training step completes without running out
    of memory; candidates are tried in the given order."""
    for batch in candidates:
        try:
            _train_closure(config, seq_len, batch, seed)()
            return batch
        except MemoryError:
            logger.info("batch %d does not fit for seq_len %d", batch, seq_len)
    raise BenchError(f"no candidate batch in {list(candidates)} fits in memory")


@dataclass(frozen=True)
class SpeedReport:
    phase: str
    seq_len: int
    base: str
    # (measurement, throughput relative to the base config)
    rows: tuple[tuple[BenchResult, float], ...]

    def result_for(self, name: str, batch: int) -> BenchResult:
        for r, _ in self.rows:
            if r.config_name == name and r.batch_size == batch:
                return r
        raise KeyError(f"no measurement for {name!r} at batch {batch}")

    def speedup_for(self, name: str, batch: int | None = None) -> float:
        hits = [
            s for r, s in self.rows
            if r.config_name == name and (batch is None or r.batch_size == batch)
        ]
        if not hits:
            raise KeyError(f"no measurement for {name!r}")
        return hits[0]


def run_speed_bench(
    configs: Mapping[str, ModelConfig],
    phase: str,
    seq_len: int = 512,
    repetitions: int = 5,
    base: str | None = None,
    inference_batches: Sequence[int] = (1, 8),
    train_batch_candidates: Sequence[int] = (32, 16, 8, 4, 2, 1),
    threads: int | None = None,
    seed: int = 0,
) -> SpeedReport:
    """Measure each config and report speedups against the base config.

    Inference runs at batch 1 plus one fixed larger batch so both
    latency- and throughput-style deployments are covered; training runs
    at the largest candidate batch that fits in memory, the way training
    throughput is conventionally reported. Unstable timings (repetition
    spread over 10%) are flagged on the result and logged.
    """
    if phase not in PHASES:
        raise BenchError(f"phase must be one of {PHASES}, got {phase!r}")
    if not configs:
        raise BenchError("no configs to benchmark")
    if base is None:
        base = next(iter(configs))
    if base not in configs:
        raise BenchError(f"base config {base!r} is not among the configs")
    for name, config in configs.items():
        if seq_len > config.max_positions:
            raise BenchError(
                f"config {name!r} supports only {config.max_positions} positions"
            )
    applied = pin_threads(threads)
    threads_used = applied if applied is not None else (os.cpu_count() or 1)

    results: dict[str, list[BenchResult]] = {}
    for name, config in configs.items():
        if phase == "inference":
            batches = list(inference_batches)
        else:
            batches = [largest_train_batch(config, seq_len, train_batch_candidates, seed)]
        per_config = []
        for batch in batches:
            closure = (
                _inference_closure(config, seq_len, batch, seed)
                if phase == "inference"
                else _train_closure(config, seq_len, batch, seed)
            )
            times = measure(closure, repetitions)
            result = _result(name, phase, seq_len, batch, times, threads_used)
            if not result.stable:
                logger.warning(
                    "unstable timing for %s at batch %d: spread %.1f%%",
                    name, batch, 100 * timing_spread(times),
                )
            per_config.append(result)
        results[name] = per_config

    rows = []
    for name, per_config in results.items():
        for i, result in enumerate(per_config):
            if phase == "inference":
                reference = results[base][i]  # same batch slot
            else:
                reference = results[base][0]  # each config at its own max batch
            rows.append((result, result.examples_per_sec / reference.examples_per_sec))
    return SpeedReport(phase=phase, seq_len=seq_len, base=base, rows=tuple(rows))


def write_bench_csv(report: SpeedReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for result, speedup in report.rows:
            writer.writerow([
                result.config_name,
                result.phase,
                result.seq_len,
                result.batch_size,
                f"{result.examples_per_sec:.6g}",
                f"{speedup:.6g}",
                result.threads,
            ])


# ---------------------------------------------------------------------------
# depth-vs-width sweep


@dataclass(frozen=True)
class SweepCell:
    depth: int
    width: int
    params: int
    dev_score: float | None  # None when every tuning cell diverged


@dataclass(frozen=True)
class SweepReport:
    task: str
    rows: tuple[SweepCell, ...]
    # ((depth_a, width_a), (depth_b, width_b), relative param difference)
    iso_pairs: tuple[tuple[tuple[int, int], tuple[int, int], float], ...]


def _heads_for_width(width: int) -> int:
    for heads in (8, 4, 2):
        if width % heads == 0:
            return heads
    return 1


def iso_parameter_pairs(
    rows: Sequence[SweepCell], tolerance: float = 0.10
) -> tuple[tuple[tuple[int, int], tuple[int, int], float], ...]:
    """Unordered cell pairs whose parameter counts differ by at most
    ``tolerance`` relative to the larger count."""
    pairs = []
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            a, b = rows[i], rows[j]
            rel = abs(a.params - b.params) / max(a.params, b.params)
            if rel <= tolerance:
                pairs.append(((a.depth, a.width), (b.depth, b.width), rel))
    return tuple(pairs)


def sweep_depth_width(
    depths: Sequence[int],
    widths: Sequence[int],
    train: TaskDataset,
    dev: TaskDataset,
    corpus_path,
    vocab_path,
    out_dir,
    budget: int,
    pretrain_config: PretrainRunConfig,
    protocol: TuneProtocol,
    max_seq_len: int = 64,
    seed: int = 0,
) -> SweepReport:
    """Grid over (layers, hidden size): brief pretraining, then the full
    fine-tuning protocol, identical for every cell.

    ``budget`` caps the per-cell parameter count; exceeding it is a
    usage error. A cell whose fine-tuning diverges is recorded with a
    missing score rather than aborting the sweep.
    """
    if not depths or not widths:
        raise BenchError("sweep needs at least one depth and one width")
    vocab = Vocabulary.load(vocab_path)
    cells = [(int(l), int(h)) for l in depths for h in widths]
    configs = {}
    for l, h in sorted(set(cells)):
        config = ModelConfig(
            num_layers=l,
            hidden_size=h,
            num_heads=_heads_for_width(h),
            vocab_size=len(vocab),
            max_positions=max(max_seq_len, pretrain_config.max_seq_len),
        )
        n = param_count(config)
        if n > budget:
            raise BenchError(
                f"cell (L={l}, H={h}) has {n} parameters, over the budget {budget}"
            )
        configs[(l, h)] = config

    rows = []
    for (l, h), config in configs.items():
        cell_dir = os.path.join(os.fspath(out_dir), f"sweep_L{l}_H{h}")
        checkpoint = run_pretraining(
            config, pretrain_config, corpus_path, vocab_path, cell_dir
        )
        try:
            result = finetune_task(
                checkpoint, train, dev, dev, vocab,
                protocol=protocol, max_seq_len=max_seq_len,
            )
            score = result.best_dev_score
        except DivergenceError as e:
            logger.warning("sweep cell (L=%d, H=%d) diverged: %s", l, h, e)
            score = None
        rows.append(SweepCell(l, h, param_count(config), score))

    rows = tuple(rows)
    return SweepReport(
        task=train.task_kind, rows=rows, iso_pairs=iso_parameter_pairs(rows)
    )


def write_sweep_csv(report: SweepReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["depth", "width", "params", "dev_score"])
        for row in report.rows:
            score = "" if row.dev_score is None else f"{row.dev_score:.6g}"
            writer.writerow([row.depth, row.width, row.params, score])
