"""Compute model, throughput measurement, and the depth/width sweep."""

import csv

import numpy as np
import pytest

from bertforge.bench import (
    CSV_HEADER,
    BenchError,
    BenchResult,
    SweepCell,
    estimate_macs,
    iso_parameter_pairs,
    largest_train_batch,
    mac_ratio,
    measure,
    run_speed_bench,
    sweep_depth_width,
    timing_spread,
    warmup_shift,
    write_bench_csv,
    write_sweep_csv,
)
from bertforge.finetune import NerSentence, TaskDataset, TuneProtocol
from bertforge.model import ModelConfig, param_count, preset
from bertforge.optim import DivergenceError
from bertforge.pretrain import PretrainRunConfig
from bertforge.wordpiece import Vocabulary, train_vocabulary

WORDS = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"]


def tiny_config(layers=1, hidden=32, heads=2):
    return ModelConfig(
        num_layers=layers, hidden_size=hidden, num_heads=heads,
        vocab_size=64, max_positions=64, dropout_rate=0.0,
    )


class TestEstimateMacs:
    def test_unit_formula(self):
        c = ModelConfig(
            num_layers=1, hidden_size=1, num_heads=1, vocab_size=1, max_positions=1
        )
        # backbone 4 + 8 + 2 = 14, head 1*1 + 1*2 = 3
        assert estimate_macs(c, 1) == 14 + 3

    @pytest.mark.parametrize("layers,hidden,seq_len", [
        (1, 8, 4), (2, 16, 32), (3, 64, 17), (12, 768, 512),
    ])
    def test_closed_form_oracle(self, layers, hidden, seq_len):
        c = ModelConfig(
            num_layers=layers, hidden_size=hidden, num_heads=1,
            vocab_size=10, max_positions=512,
        )
        expected = (
            layers * (12 * seq_len * hidden**2 + 2 * seq_len**2 * hidden)
            + hidden**2 + 2 * hidden
        )
        assert estimate_macs(c, seq_len) == expected

    def test_eight_layer_ratio(self):
        r = mac_ratio(preset("bert-base"), preset("bioformer-8L"), 512)
        assert abs(r - 3.2) < 0.1

    def test_sixteen_layer_ratio(self):
        r = mac_ratio(preset("bert-base"), preset("bioformer-16L"), 512)
        assert abs(r - 2.7) < 0.1

    def test_monotonic_in_depth(self):
        counts = [estimate_macs(tiny_config(layers=l), 32) for l in range(1, 6)]
        assert all(a < b for a, b in zip(counts, counts[1:]))

    def test_superlinear_in_seq_len(self):
        c = tiny_config(hidden=64)
        assert estimate_macs(c, 64) > 2 * estimate_macs(c, 32)

    def test_seq_len_bounds(self):
        c = tiny_config()
        with pytest.raises(BenchError, match="exceeds"):
            estimate_macs(c, 65)
        with pytest.raises(BenchError, match=">= 1"):
            estimate_macs(c, 0)


class Clock:
    """Scripted timer: returns the next instant on every call."""

    def __init__(self, instants):
        self.instants = list(instants)

    def __call__(self):
        return self.instants.pop(0)


class TestMeasure:
    def test_warmup_runs_untimed(self):
        calls = []
        clock = Clock([0.0, 1.0, 1.0, 3.0, 3.0, 6.0])
        times = measure(lambda: calls.append(1), 3, warmup=2, timer=clock)
        assert len(calls) == 5  # 2 warmup + 3 timed
        assert times == [1.0, 2.0, 3.0]

    def test_repetition_floor(self):
        with pytest.raises(BenchError, match="3 timed"):
            measure(lambda: None, 2)

    def test_negative_warmup(self):
        with pytest.raises(BenchError, match="warmup"):
            measure(lambda: None, 3, warmup=-1)

    def test_timing_spread(self):
        assert timing_spread([1.0, 1.0, 1.0]) == 0.0
        assert timing_spread([1.0, 1.1, 1.0]) == pytest.approx(0.1)

    def test_warmup_shift(self):
        assert warmup_shift([2.0, 1.0, 1.0, 1.0]) == 0.0
        assert warmup_shift([1.0, 2.0, 3.0, 4.0]) == pytest.approx(0.2)


class TestBenchResult:
    def make(self, **overrides):
        base = dict(
            config_name="c", phase="inference", seq_len=32, batch_size=1,
            examples_per_sec=10.0, duration_s=0.3, rep_times=(0.1, 0.1, 0.1),
            threads=1, hardware="test", stable=True,
        )
        base.update(overrides)
        return BenchResult(**base)

    def test_valid(self):
        assert self.make().stable

    def test_bad_phase(self):
        with pytest.raises(BenchError, match="phase"):
            self.make(phase="compile")

    def test_nonpositive_throughput(self):
        with pytest.raises(BenchError, match="positive"):
            self.make(examples_per_sec=0.0)

    def test_too_few_reps(self):
        with pytest.raises(BenchError, match="3 timed"):
            self.make(rep_times=(0.1, 0.1))


@pytest.fixture(scope="module")
def inference_report():
    configs = {"base": tiny_config(layers=2), "small": tiny_config(layers=1)}
    return run_speed_bench(
        configs, "inference", seq_len=32, repetitions=5,
        inference_batches=(1, 2), seed=0,
    )


class TestSpeedBench:
    def test_row_inventory(self, inference_report):
        assert inference_report.base == "base"
        names = [(r.config_name, r.batch_size) for r, _ in inference_report.rows]
        assert sorted(names) == [
            ("base", 1), ("base", 2), ("small", 1), ("small", 2)
        ]
        for r, _ in inference_report.rows:
            assert r.phase == "inference"
            assert r.seq_len == 32
            assert r.examples_per_sec > 0
            assert len(r.rep_times) == 5
            assert r.threads >= 1
            assert r.hardware

    def test_base_speedup_is_exactly_one(self, inference_report):
        assert inference_report.speedup_for("base", 1) == 1.0
        assert inference_report.speedup_for("base", 2) == 1.0

    def test_fewer_layers_run_faster(self, inference_report):
        assert inference_report.speedup_for("small", 1) > 1.0
        assert inference_report.speedup_for("small", 2) > 1.0

    def test_self_benchmark_near_unity(self):
        c = tiny_config()
        report = run_speed_bench(
            {"a": c, "b": c}, "inference", seq_len=32, repetitions=5,
            inference_batches=(2,), seed=0,
        )
        assert 0.5 < report.speedup_for("b", 2) < 2.0

    def test_depth_monotonicity_measured(self):
        report = run_speed_bench(
            {"shallow": tiny_config(layers=1), "deep": tiny_config(layers=4)},
            "inference", seq_len=32, repetitions=5, inference_batches=(2,),
        )
        shallow = report.result_for("shallow", 2)
        deep = report.result_for("deep", 2)
        assert deep.examples_per_sec < shallow.examples_per_sec

    def test_train_phase_uses_largest_fitting_batch(self):
        report = run_speed_bench(
            {"base": tiny_config(), "other": tiny_config(layers=2)},
            "train", seq_len=16, repetitions=3, train_batch_candidates=(2, 1),
        )
        assert [r.batch_size for r, _ in report.rows] == [2, 2]
        assert report.speedup_for("base") == 1.0
        assert all(r.phase == "train" for r, _ in report.rows)

    def test_validation(self):
        c = tiny_config()
        with pytest.raises(BenchError, match="phase"):
            run_speed_bench({"a": c}, "compile")
        with pytest.raises(BenchError, match="no configs"):
            run_speed_bench({}, "inference")
        with pytest.raises(BenchError, match="base"):
            run_speed_bench({"a": c}, "inference", base="missing")
        with pytest.raises(BenchError, match="positions"):
            run_speed_bench({"a": c}, "inference", seq_len=128)

    def test_csv_round_trip(self, inference_report, tmp_path):
        path = tmp_path / "bench.csv"
        write_bench_csv(inference_report, path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == CSV_HEADER
        assert len(rows) == 1 + len(inference_report.rows)
        for row in rows[1:]:
            assert row[1] == "inference"
            assert float(row[4]) > 0
            assert float(row[5]) > 0
            assert int(row[6]) >= 1

    def test_warmup_hygiene(self, inference_report):
        # Sub-millisecond reps on shared hardware can jitter well past the
        # 5% drift budget that the scripted-clock tests pin down, so on
        # real timings only check that no cold-start outlier survived: the
        # first rep must not be the sole slow one by a wide margin.
        for r, _ in inference_report.rows:
            shift = warmup_shift(r.rep_times)
            assert 0.0 <= shift < 0.5, (r.config_name, r.batch_size, r.rep_times)


class TestLargestTrainBatch:
    def test_first_candidate_fits(self):
        assert largest_train_batch(tiny_config(), 16, (4, 2, 1)) == 4

    def test_falls_back_on_memory_errors(self, monkeypatch):
        import bertforge.bench as bench

        original = bench._train_closure

        def tight(config, seq_len, batch, seed):
            if batch > 2:
                raise MemoryError
            return original(config, seq_len, batch, seed)

        monkeypatch.setattr(bench, "_train_closure", tight)
        assert bench.largest_train_batch(tiny_config(), 16, (8, 4, 2, 1)) == 2

    def test_nothing_fits(self, monkeypatch):
        import bertforge.bench as bench

        def never(config, seq_len, batch, seed):
            raise MemoryError

        monkeypatch.setattr(bench, "_train_closure", never)
        with pytest.raises(BenchError, match="no candidate"):
            bench.largest_train_batch(tiny_config(), 16, (2, 1))


class TestIsoParameterPairs:
    def test_pairs_within_tolerance(self):
        rows = [
            SweepCell(1, 64, 1000, 50.0),
            SweepCell(2, 45, 1050, 60.0),
            SweepCell(4, 32, 2000, 70.0),
        ]
        pairs = iso_parameter_pairs(rows)
        assert pairs == (((1, 64), (2, 45), pytest.approx(50 / 1050)),)

    def test_no_pairs(self):
        rows = [SweepCell(1, 8, 100, 1.0), SweepCell(2, 8, 200, 2.0)]
        assert iso_parameter_pairs(rows) == ()

    def test_all_equal(self):
        rows = [SweepCell(1, 8, 100, 1.0), SweepCell(2, 6, 100, 2.0)]
        assert iso_parameter_pairs(rows) == (((1, 8), (2, 6), 0.0),)


@pytest.fixture(scope="module")
def sweep_inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    rng = np.random.default_rng(0)
    docs = []
    for _ in range(4):
        docs.append(
            " ".join(" ".join(rng.choice(WORDS, size=4)) + "." for _ in range(12))
        )
    (root / "corpus.txt").write_text("\n\n".join(docs) + "\n")
    words = "\n\n".join(docs).replace(".", " ").split()
    vocab = train_vocabulary(words, target_size=40, min_frequency=1)
    vocab.save(root / "vocab.txt")

    def sentence(i):
        n = 3 + i % 2
        ws = [str(rng.choice(WORDS)) for _ in range(n)]
        if i % 2 == 0:
            ws[0] = "alpha"
        tags = tuple("B-X" if w == "alpha" else "O" for w in ws)
        return NerSentence(tuple(ws), tags)

    train = TaskDataset("ner", tuple(sentence(i) for i in range(8)), ("O", "B-X"))
    dev = TaskDataset("ner", tuple(sentence(i) for i in range(8, 12)), ("O", "B-X"))
    return root, train, dev


def small_sweep(root, train, dev, out_name, depths=(1,), widths=(16,)):
    return sweep_depth_width(
        depths, widths, train, dev,
        root / "corpus.txt", root / "vocab.txt", root / out_name,
        budget=5_000_000,
        pretrain_config=PretrainRunConfig(
            steps=2, batch_size=2, max_seq_len=32, lr=1e-3,
            warmup_steps=1, seed=3, dup_factor=1,
        ),
        protocol=TuneProtocol(
            batch_sizes=(4,), lrs=(1e-3,), max_epochs=1, seeds=(0,)
        ),
        max_seq_len=32,
    )


class TestSweep:
    def test_single_cell_table(self, sweep_inputs):
        root, train, dev = sweep_inputs
        report = small_sweep(root, train, dev, "single")
        assert report.task == "ner"
        assert len(report.rows) == 1
        row = report.rows[0]
        assert (row.depth, row.width) == (1, 16)
        vocab = Vocabulary.load(root / "vocab.txt")
        oracle = param_count(ModelConfig(
            num_layers=1, hidden_size=16, num_heads=2,
            vocab_size=len(vocab), max_positions=32,
        ))
        assert row.params == oracle
        assert row.dev_score is not None and 0.0 <= row.dev_score <= 100.0
        assert report.iso_pairs == ()

    def test_deterministic_tables(self, sweep_inputs):
        root, train, dev = sweep_inputs
        a = small_sweep(root, train, dev, "det_a")
        b = small_sweep(root, train, dev, "det_b")
        assert a.rows == b.rows
        assert a.iso_pairs == b.iso_pairs

    def test_grid_rows_sorted(self, sweep_inputs):
        root, train, dev = sweep_inputs
        report = small_sweep(root, train, dev, "grid", depths=(2, 1), widths=(16,))
        assert [(r.depth, r.width) for r in report.rows] == [(1, 16), (2, 16)]

    def test_budget_enforced(self, sweep_inputs):
        root, train, dev = sweep_inputs
        with pytest.raises(BenchError, match="budget"):
            sweep_depth_width(
                (1,), (16,), train, dev,
                root / "corpus.txt", root / "vocab.txt", root / "tight",
                budget=100,
                pretrain_config=PretrainRunConfig(
                    steps=2, batch_size=2, max_seq_len=32, lr=1e-3, warmup_steps=1
                ),
                protocol=TuneProtocol(batch_sizes=(4,), lrs=(1e-3,), max_epochs=1, seeds=(0,)),
                max_seq_len=32,
            )

    def test_divergence_recorded_not_fatal(self, sweep_inputs, monkeypatch):
        import bertforge.bench as bench

        root, train, dev = sweep_inputs

        def explodes(*args, **kwargs):
            raise DivergenceError("synthetic divergence")

        monkeypatch.setattr(bench, "finetune_task", explodes)
        report = small_sweep(root, train, dev, "diverge")
        assert report.rows[0].dev_score is None

    def test_empty_grid_rejected(self, sweep_inputs):
        root, train, dev = sweep_inputs
        with pytest.raises(BenchError, match="at least one"):
            small_sweep(root, train, dev, "empty", depths=())

    def test_sweep_csv(self, sweep_inputs, tmp_path):
        root, train, dev = sweep_inputs
        report = small_sweep(root, train, dev, "csv")
        path = tmp_path / "sweep.csv"
        write_sweep_csv(report, path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["depth", "width", "params", "dev_score"]
        assert rows[1][0] == "1" and rows[1][1] == "16"
        assert int(rows[1][2]) == report.rows[0].params
