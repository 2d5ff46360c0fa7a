"""Unit tests for the training loop."""

import math
import unittest
from dataclasses import replace
from pathlib import Path
from tempfile import TemporaryDirectory

import torch
from torch.utils.data import Subset

from shishulm.model.config import ModelConfig
from shishulm.model.transformer import build_model
from shishulm.numerics.ops import cross_entropy
from shishulm.protocols.checkpoint import load_checkpoint
from shishulm.protocols.config_file import load_config
from shishulm.protocols.csv_report import CsvReport
from shishulm.train.config import RunConfig, TrainConfig, TrainError
from shishulm.train.data import CorpusDataset
from shishulm.train.optim import NonFiniteError
from shishulm.train.trainer import (
    CHECKPOINT_FILE,
    METRICS_COLUMNS,
    METRICS_FILE,
    eval_loss,
    eval_perplexity,
    train,
    train_step,
)

from .. import SLOW_TESTS, corpus_text, synthetic_corpus

CONFIG_DIR = Path(__file__).parents[2] / "configs"


def small_config(schedule: str = "D D S0 S0") -> ModelConfig:
    return ModelConfig(
        hidden_size=32,
        intermediate_size=64,
        n_layers=len(schedule.split()),
        n_heads=4,
        n_kv_heads=2,
        vocab_size=256,
        max_seq_len=64,
        schedule=schedule,
    )


def small_corpus(n_bytes: int = 20000, block_size: int = 32):
    """Train and validation blocks of a synthetic corpus."""

    return CorpusDataset.from_text(synthetic_corpus(n_bytes), block_size).split(8)


class TestTrainStep(unittest.TestCase):
    """Test train_step and evaluation."""

    def setUp(self):
        self.model = build_model(small_config(), 0).double()
        self.train_set, self.val_set = small_corpus()
        blocks = [self.train_set[i] for i in range(4)]
        self.x = torch.stack([b[0] for b in blocks])
        self.y = torch.stack([b[1] for b in blocks])

    def _grads(self):
        return {n: p.grad.clone() for n, p in self.model.named_parameters()}

    def test_accumulation(self):
        """Test two half batches give the gradient of one full batch."""

        full_loss = train_step(self.model, [(self.x, self.y)])
        full = self._grads()
        self.model.zero_grad(set_to_none=True)
        halves = [(self.x[:2], self.y[:2]), (self.x[2:], self.y[2:])]
        half_loss = train_step(self.model, halves)
        self.assertAlmostEqual(full_loss, half_loss, places=12)
        for name, grad in self._grads().items():
            self.assertLess(float((grad - full[name]).abs().max()), 1e-12, msg=name)

    def test_eval_loss(self):
        """Test the mean NLL against a direct log-probability sum."""

        loss = eval_loss(self.model, self.val_set, batch_size=3)
        total = 0.0
        count = 0
        with torch.no_grad():
            for i in range(len(self.val_set)):
                x, y = self.val_set[i]
                logp = torch.log_softmax(self.model(x[None, :])[0], dim=-1)
                total -= float(logp[torch.arange(len(y)), y].sum())
                count += len(y)
        self.assertAlmostEqual(loss, total / count, places=10)

    def test_initial_perplexity(self):
        """Test a fresh model is close to uniform over the byte vocabulary."""

        ppl = eval_perplexity(self.model, self.val_set)
        self.assertLess(abs(math.log(ppl) - math.log(256)), 0.1)
        with self.assertRaises(TrainError):
            eval_loss(self.model, Subset(self.val_set.dataset, []))

    def test_non_finite(self):
        """Test a NaN weight surfaces as NonFiniteError."""

        with torch.no_grad():
            self.model.embed.weight.fill_(float("nan"))
        with self.assertRaises(NonFiniteError) as cm:
            train_step(self.model, [(self.x, self.y)], step=3)
        self.assertEqual(cm.exception.step, 3)


class TestTrain(unittest.TestCase):
    """Test train."""

    def setUp(self):
        self.tmpdir = TemporaryDirectory()
        self.dir = Path(self.tmpdir.name)
        self.train_set, self.val_set = small_corpus()
        self.cfg = TrainConfig(
            total_steps=12,
            learning_rate=3e-3,
            batch_size=8,
            micro_batch=4,
            block_size=32,
            eval_interval=5,
            val_blocks=8,
        )

    def tearDown(self):
        self.tmpdir.cleanup()

    def _run(self, out_dir=None, cfg=None):
        model = build_model(small_config(), 0)
        rows = train(model, self.train_set, self.val_set, cfg or self.cfg, out_dir)
        return model, rows

    def test_rows(self):
        """Test one metrics row per step and the evaluation steps."""

        _, rows = self._run()
        self.assertEqual([r.step for r in rows], list(range(12)))
        evaluated = [r.step for r in rows if r.val_loss is not None]
        self.assertEqual(evaluated, [4, 9, 11])
        self.assertEqual(rows[-1].tokens_seen, 12 * 8 * 32)
        self.assertEqual(rows[0].lr, 0.0)
        self.assertTrue(all(r.wall_ms is None for r in rows))
        self.assertAlmostEqual(rows[-1].val_ppl, math.exp(rows[-1].val_loss))

    def test_deterministic(self):
        """Test two runs with the same seed give identical files."""

        first, second = self.dir / "a", self.dir / "b"
        model_a, _ = self._run(first)
        model_b, _ = self._run(second)
        self.assertEqual((first / METRICS_FILE).read_bytes(), (second / METRICS_FILE).read_bytes())
        self.assertEqual(
            (first / CHECKPOINT_FILE).read_bytes(), (second / CHECKPOINT_FILE).read_bytes()
        )
        for (name, a), (_, b) in zip(model_a.named_parameters(), model_b.named_parameters()):
            self.assertTrue(torch.equal(a, b), msg=name)

    def test_outputs(self):
        """Test the metrics file and the checkpoints."""

        cfg = replace(self.cfg, checkpoint_interval=5)
        model, _ = self._run(self.dir, cfg)
        report = CsvReport.read(self.dir / METRICS_FILE)
        self.assertEqual(report.columns, METRICS_COLUMNS)
        self.assertEqual(len(report.rows), 12)
        self.assertTrue((self.dir / "checkpoint_5.shlm").exists())
        self.assertTrue((self.dir / "checkpoint_10.shlm").exists())
        _, loaded = load_checkpoint(self.dir / CHECKPOINT_FILE)
        self.assertTrue(torch.equal(loaded.embed.weight, model.embed.weight))

    def test_loss_decreases(self):
        """Test a short run learns the byte statistics."""

        cfg = replace(self.cfg, total_steps=60, eval_interval=0)
        _, rows = self._run(cfg=cfg)
        self.assertLess(rows[-1].train_loss, rows[0].train_loss - 0.5)
        self.assertLess(rows[-1].val_loss, math.log(256) - 0.5)

    def test_too_small(self):
        """Test a training set smaller than one step."""

        with self.assertRaises(TrainError):
            self._run(cfg=replace(self.cfg, batch_size=1024, micro_batch=4))

    @unittest.skipUnless(SLOW_TESTS, "slow")
    def test_overfit_single_batch(self):
        """Test a single repeated batch is memorized."""

        train_set = Subset(self.train_set, list(range(8)))
        cfg = replace(
            self.cfg,
            total_steps=400,
            learning_rate=1e-2,
            warmup_ratio=0.0,
            weight_decay=0.0,
            eval_interval=0,
        )
        model = build_model(small_config(), 0)
        rows = train(model, train_set, None, cfg)
        self.assertLess(rows[-1].train_loss, 0.1)

    @unittest.skipUnless(SLOW_TESTS, "slow")
    def test_desk_scale(self):
        """Test the shipped tiny run beats the uniform baseline by half a nat."""

        run = load_config(CONFIG_DIR / "tiny_run.json", RunConfig)
        data = CorpusDataset.from_text(corpus_text(600_000), run.train.block_size)
        train_set, val_set = data.split(run.train.val_blocks)
        model = build_model(run.model, run.train.seed)
        rows = train(model, train_set, val_set, run.train)
        self.assertLess(rows[-1].val_loss, math.log(256) - 0.5)

        x, y = train_set[0]
        with torch.no_grad():
            loss = float(cross_entropy(model(x[None, :]), y[None, :]))
        self.assertTrue(math.isfinite(loss))
