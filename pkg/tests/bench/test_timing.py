"""Unit tests for the latency harness."""

import unittest

from dataclasses_json.undefined import UndefinedParameterError

from shishulm import BenchMode
from shishulm.bench.timing import (
    LATENCY_COLUMNS,
    BenchConfig,
    BenchError,
    compare_latency,
    reduction,
    reduction_table,
    time_model,
)
from shishulm.model.config import ModelConfig
from shishulm.model.transformer import build_model

from .. import SLOW_TESTS
from ..model.test_transformer import tiny_model


class TestBenchConfig(unittest.TestCase):
    """Test BenchConfig."""

    def test_from_dict(self):
        """Test the mode string and unknown keys."""

        cfg = BenchConfig.from_dict({"lengths": [8], "mode": "training"})
        self.assertEqual(cfg.mode, BenchMode.TRAINING)
        with self.assertRaises(UndefinedParameterError):
            BenchConfig.from_dict({"lenghts": [8]})

    def test_invalid(self):
        """Test out of range values."""

        for kwargs in [{"reps": 0}, {"warmup": -1}, {"batch_size": 0}, {"lengths": []}]:
            with self.assertRaises(BenchError, msg=str(kwargs)):
                BenchConfig(**kwargs)


class TestReduction(unittest.TestCase):
    """Test reduction and reduction_table."""

    def test_reduction(self):
        """Test the percentage and a zero parent."""

        self.assertAlmostEqual(reduction(100.0, 60.0), 40.0)
        self.assertAlmostEqual(reduction(10.0, 12.0), -20.0)
        with self.assertRaises(BenchError):
            reduction(0.0, 1.0)

    def test_table(self):
        """Test per-length reductions and mismatched lengths."""

        table = reduction_table({8: 2.0, 16: 4.0}, {8: 1.0, 16: 3.0})
        self.assertEqual(table, {8: 50.0, 16: 25.0})
        with self.assertRaises(BenchError):
            reduction_table({8: 2.0}, {16: 1.0})


class TestTimeModel(unittest.TestCase):
    """Test time_model and compare_latency."""

    def setUp(self):
        self.model = tiny_model("D D S0 S0")
        self.cfg = BenchConfig(lengths=[4, 8], warmup=1, reps=2)

    def test_rows(self):
        """Test one row per length in both modes."""

        for mode in BenchMode:
            cfg = BenchConfig(lengths=[4, 8], warmup=1, reps=2, mode=mode)
            rows = time_model(self.model, cfg)
            self.assertEqual([r.length for r in rows], [4, 8])
            for row in rows:
                self.assertEqual(row.reps, 2)
                self.assertGreater(row.mean_ms, 0.0)
                self.assertGreaterEqual(row.std_ms, 0.0)
        self.assertTrue(all(p.grad is None for p in self.model.parameters()))

    def test_too_long(self):
        """Test lengths past max_seq_len."""

        with self.assertRaises(BenchError):
            time_model(self.model, BenchConfig(lengths=[8, 17], reps=1))

    def test_compare(self):
        """Test a row per mode and length."""

        rows = compare_latency(self.model, tiny_model("S0 S0 S1 S1"), self.cfg)
        self.assertEqual(
            [(r.mode, r.length) for r in rows],
            [
                (BenchMode.INFERENCE, 4),
                (BenchMode.INFERENCE, 8),
                (BenchMode.TRAINING, 4),
                (BenchMode.TRAINING, 8),
            ],
        )
        self.assertEqual(rows[0].to_row()[0], "inference")
        for row in rows:
            values = row.to_row()
            self.assertEqual(len(values), len(LATENCY_COLUMNS))
            self.assertEqual(values[2], row.parent_timing.mean_ms)
            self.assertEqual(values[5], row.parent_timing.median_ms)
            self.assertEqual(values[6], row.shishu_timing.median_ms)
            self.assertEqual(values[8], row.shishu_timing.std_ms)
            self.assertGreater(row.shishu_timing.median_ms, 0.0)

    @unittest.skipUnless(SLOW_TESTS, "slow")
    def test_fewer_attention_layers_faster(self):
        """Test replacing attention layers with ShishuMLP layers lowers latency."""

        def model(schedule: str):
            config = ModelConfig(
                hidden_size=256,
                intermediate_size=512,
                n_layers=12,
                n_heads=8,
                n_kv_heads=2,
                vocab_size=256,
                max_seq_len=1024,
                schedule=schedule,
            )
            return build_model(config, 0)

        parent = model(" ".join(["D"] * 12))
        shishu = model("D D D D S0 S0 S1 S1 S2 S2 S3 S3")
        cfg = BenchConfig(lengths=[1024], warmup=2, reps=5)
        rows = compare_latency(parent, shishu, cfg)
        for row in rows:
            self.assertGreater(row.pct_reduction, 0.0)
