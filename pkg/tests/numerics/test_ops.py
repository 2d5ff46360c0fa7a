"""Unit tests for the numerics ops."""

import math
import unittest

import torch

from shishulm.numerics import ops
from shishulm.numerics.ops import RngState, TensorOpError


def _grad_check(test: unittest.TestCase, f, x: torch.Tensor):
    x = x.clone().requires_grad_(True)
    f(x).backward()
    numeric = ops.finite_diff_grad(f, x.detach())
    test.assertLess(ops.relative_error(x.grad, numeric), 1e-4)


class TestMatmul(unittest.TestCase):
    """Test matmul."""

    def test_identity(self):
        """Test products with the identity."""

        eye = torch.eye(2)
        self.assertTrue(torch.equal(ops.matmul(eye, eye), eye))
        a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        self.assertTrue(torch.equal(ops.matmul(a, eye), a))

    def test_triple_loop_oracle(self):
        """Test a random product against a naive triple loop in double precision."""

        gen = torch.Generator().manual_seed(0)
        a = torch.randn(3, 4, dtype=torch.float64, generator=gen)
        b = torch.randn(4, 2, dtype=torch.float64, generator=gen)
        out = ops.matmul(a, b)
        for i in range(3):
            for j in range(2):
                expected = sum(float(a[i, k]) * float(b[k, j]) for k in range(4))
                self.assertAlmostEqual(float(out[i, j]), expected, places=12)

    def test_shape_mismatch(self):
        """Test that disagreeing inner extents raise."""

        with self.assertRaises(TensorOpError):
            ops.matmul(torch.ones(2, 3), torch.ones(2, 3))
        with self.assertRaises(TensorOpError):
            ops.matmul(torch.ones(3), torch.ones(3, 1))

    def test_gradient(self):
        """Test backprop against finite differences over 20 seeds."""

        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            a = torch.randn(3, 4, dtype=torch.float64, generator=gen)
            b = torch.randn(4, 2, dtype=torch.float64, generator=gen)
            g = torch.randn(3, 2, dtype=torch.float64, generator=gen)
            _grad_check(self, lambda t: (ops.matmul(t, b) * g).sum(), a)
            _grad_check(self, lambda t: (ops.matmul(a, t) * g).sum(), b)


class TestSilu(unittest.TestCase):
    """Test silu."""

    def test_values(self):
        """Test zero, saturation and x = 1."""

        self.assertEqual(float(ops.silu(torch.tensor(0.0))), 0.0)
        x = torch.tensor([20.0, 30.0, 50.0], dtype=torch.float64)
        self.assertLess(float((ops.silu(x) - x).abs().max()), 1e-6)
        one = float(ops.silu(torch.tensor(1.0, dtype=torch.float64)))
        self.assertAlmostEqual(one, 1.0 / (1.0 + math.exp(-1.0)), places=14)

    def test_gradient(self):
        """Test backprop against finite differences over 20 seeds."""

        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            x = torch.randn(6, dtype=torch.float64, generator=gen)
            _grad_check(self, lambda t: (ops.silu(t) * torch.arange(6.0, dtype=t.dtype)).sum(), x)


class TestRmsNorm(unittest.TestCase):
    """Test rmsnorm."""

    def test_ones(self):
        """Test that the RMS of ones is one."""

        x = torch.ones(8)
        self.assertTrue(torch.equal(ops.rmsnorm(x, torch.ones(8), 0.0), x))

    def test_scale_invariance(self):
        """Test that positive rescaling does not change the output when eps is 0."""

        gen = torch.Generator().manual_seed(1)
        weight = torch.ones(32)
        for _ in range(100):
            x = torch.randn(32, generator=gen)
            base = ops.rmsnorm(x, weight, 0.0)
            scale = max(1.0, float(base.abs().max()))
            for alpha in [0.5, 2.0, 10.0, 100.0]:
                scaled = ops.rmsnorm(alpha * x, weight, 0.0)
                self.assertLessEqual(float((scaled - base).abs().max()), 1e-6 * scale)

    def test_scalar_reference(self):
        """Test against a scalar double-precision evaluation."""

        gen = torch.Generator().manual_seed(2)
        x = torch.randn(16, generator=gen)
        weight = torch.randn(16, generator=gen)
        out = ops.rmsnorm(x, weight, 1e-5)
        values = [float(v) for v in x]
        rms = math.sqrt(sum(v * v for v in values) / len(values) + 1e-5)
        for i, v in enumerate(values):
            expected = float(weight[i]) * v / rms
            self.assertLess(abs(float(out[i]) - expected), 1e-6 * max(1.0, abs(expected)))

    def test_errors(self):
        """Test the empty axis, weight mismatch and negative eps errors."""

        with self.assertRaises(TensorOpError):
            ops.rmsnorm(torch.ones(2, 0), torch.ones(0), 1e-5)
        with self.assertRaises(TensorOpError):
            ops.rmsnorm(torch.ones(4), torch.ones(3), 1e-5)
        with self.assertRaises(TensorOpError):
            ops.rmsnorm(torch.ones(4), torch.ones(4), -1.0)
        with self.assertRaises(TensorOpError):
            ops.rmsnorm(torch.zeros(4), torch.ones(4), 0.0)

    def test_gradient(self):
        """Test backprop against finite differences over 20 seeds."""

        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            x = torch.randn(2, 5, dtype=torch.float64, generator=gen)
            w = torch.randn(5, dtype=torch.float64, generator=gen)
            g = torch.randn(2, 5, dtype=torch.float64, generator=gen)
            _grad_check(self, lambda t: (ops.rmsnorm(t, w, 1e-5) * g).sum(), x)
            _grad_check(self, lambda t: (ops.rmsnorm(x, t, 1e-5) * g).sum(), w)


class TestSoftmaxRows(unittest.TestCase):
    """Test softmax_rows."""

    def test_values(self):
        """Test the symmetric and the large-logit rows."""

        out = ops.softmax_rows(torch.zeros(3, dtype=torch.float64))
        for v in out:
            self.assertAlmostEqual(float(v), 1.0 / 3.0, places=15)
        out = ops.softmax_rows(torch.tensor([1000.0, 0.0]))
        self.assertAlmostEqual(float(out[0]), 1.0, places=7)
        self.assertLess(float(out[1]), 1e-30)

    def test_naive_oracle(self):
        """Test against a naive exp/sum in double precision."""

        gen = torch.Generator().manual_seed(3)
        x = torch.randn(4, 7, dtype=torch.float64, generator=gen)
        out = ops.softmax_rows(x)
        for i in range(4):
            exps = [math.exp(float(v)) for v in x[i]]
            total = sum(exps)
            for j in range(7):
                self.assertLess(abs(float(out[i, j]) - exps[j] / total), 1e-9)
        sums = out.sum(dim=-1)
        self.assertLess(float((sums - 1.0).abs().max()), 1e-6)
        self.assertTrue(bool(((out >= 0) & (out <= 1)).all()))

    def test_masked_row(self):
        """Test that -inf entries get zero weight."""

        out = ops.softmax_rows(torch.tensor([0.0, float("-inf"), 0.0]))
        self.assertEqual(float(out[1]), 0.0)
        self.assertAlmostEqual(float(out[0]), 0.5)

    def test_gradient(self):
        """Test backprop against finite differences over 20 seeds."""

        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            x = torch.randn(3, 4, dtype=torch.float64, generator=gen)
            g = torch.randn(3, 4, dtype=torch.float64, generator=gen)
            _grad_check(self, lambda t: (ops.softmax_rows(t) * g).sum(), x)


class TestRope(unittest.TestCase):
    """Test rope_apply."""

    def test_position_zero(self):
        """Test that position 0 is an exact identity."""

        x = torch.randn(2, 1, 8)
        self.assertTrue(torch.equal(ops.rope_apply(x, [0]), x))

    def test_pair_norms(self):
        """Test that every channel pair keeps its norm."""

        gen = torch.Generator().manual_seed(4)
        x = torch.randn(3, 10, 16, generator=gen)
        out = ops.rope_apply(x, list(range(5, 15)))
        before = x.view(3, 10, 8, 2).norm(dim=-1)
        after = out.view(3, 10, 8, 2).norm(dim=-1)
        self.assertLess(float((before - after).abs().max()), 1e-6)

    def test_scalar_oracle(self):
        """Test that pair 0 at position 1 rotates by one radian."""

        x = torch.tensor([[[0.3, -0.7, 1.0, 2.0]]], dtype=torch.float64)
        out = ops.rope_apply(x, [1], theta=10000.0)
        c, s = math.cos(1.0), math.sin(1.0)
        self.assertAlmostEqual(float(out[0, 0, 0]), 0.3 * c + 0.7 * s, places=12)
        self.assertAlmostEqual(float(out[0, 0, 1]), 0.3 * s - 0.7 * c, places=12)
        angle = 10000.0 ** (-2 / 4)
        c, s = math.cos(angle), math.sin(angle)
        self.assertAlmostEqual(float(out[0, 0, 2]), 1.0 * c - 2.0 * s, places=12)
        self.assertAlmostEqual(float(out[0, 0, 3]), 1.0 * s + 2.0 * c, places=12)

    def test_errors(self):
        """Test odd head_dim and position count mismatch."""

        with self.assertRaises(TensorOpError):
            ops.rope_apply(torch.ones(1, 2, 5), [0, 1])
        with self.assertRaises(TensorOpError):
            ops.rope_apply(torch.ones(1, 2, 4), [0])

    def test_gradient(self):
        """Test backprop against finite differences over 20 seeds."""

        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            x = torch.randn(2, 3, 4, dtype=torch.float64, generator=gen)
            g = torch.randn(2, 3, 4, dtype=torch.float64, generator=gen)
            _grad_check(self, lambda t: (ops.rope_apply(t, [2, 3, 4]) * g).sum(), x)


class TestCrossEntropy(unittest.TestCase):
    """Test cross_entropy."""

    def test_uniform(self):
        """Test that uniform logits give ln V."""

        logits = torch.zeros(2, 3, 4, dtype=torch.float64)
        loss = ops.cross_entropy(logits, torch.zeros(2, 3).long())
        self.assertAlmostEqual(float(loss), math.log(4), places=12)

    def test_margin(self):
        """Test that the loss goes to 0 as the correct logit's margin grows."""

        targets = torch.tensor([[1, 2]])
        losses = []
        for margin in [1.0, 5.0, 20.0]:
            logits = torch.zeros(1, 2, 3, dtype=torch.float64)
            logits[0, 0, 1] = margin
            logits[0, 1, 2] = margin
            losses.append(float(ops.cross_entropy(logits, targets)))
        self.assertGreater(losses[0], losses[1])
        self.assertGreater(losses[1], losses[2])
        self.assertLess(losses[2], 1e-8)

    def test_ignore_index(self):
        """Test that ignored positions are skipped."""

        logits = torch.zeros(1, 2, 4, dtype=torch.float64)
        logits[0, 1, 3] = 100.0
        targets = torch.tensor([[ops.IGNORE_INDEX, 3]])
        self.assertLess(float(ops.cross_entropy(logits, targets)), 1e-12)
        with self.assertRaises(TensorOpError):
            ops.cross_entropy(logits, torch.full((1, 2), ops.IGNORE_INDEX))

    def test_out_of_range(self):
        """Test that a target outside [0, V) raises."""

        with self.assertRaises(TensorOpError):
            ops.cross_entropy(torch.zeros(1, 2, 4), torch.tensor([[0, 4]]))
        with self.assertRaises(TensorOpError):
            ops.cross_entropy(torch.zeros(1, 2, 4), torch.tensor([[0, -3]]))

    def test_gradient(self):
        """Test backprop against finite differences over 20 seeds."""

        for seed in range(20):
            gen = torch.Generator().manual_seed(seed)
            logits = torch.randn(2, 3, 5, dtype=torch.float64, generator=gen)
            targets = torch.randint(0, 5, (2, 3), generator=gen)
            _grad_check(self, lambda t: ops.cross_entropy(t, targets), logits)

    def test_gradient_closed_form(self):
        """Test that the gradient is (softmax - onehot) / count."""

        gen = torch.Generator().manual_seed(5)
        logits = torch.randn(1, 4, 6, dtype=torch.float64, generator=gen, requires_grad=True)
        targets = torch.randint(0, 6, (1, 4), generator=gen)
        ops.cross_entropy(logits, targets).backward()
        onehot = torch.nn.functional.one_hot(targets, 6).double()
        expected = (torch.softmax(logits.detach(), dim=-1) - onehot) / 4
        self.assertLess(float((logits.grad - expected).abs().max()), 1e-12)


class TestNormalInit(unittest.TestCase):
    """Test normal_init."""

    def test_zero_std(self):
        """Test that std 0 fills with the mean."""

        out = ops.normal_init((3, 4), 0.5, 0.0, RngState(0))
        self.assertTrue(bool((out == 0.5).all()))

    def test_sample_std(self):
        """Test the empirical std of a million samples."""

        out = ops.normal_init((1000, 1000), 0.0, 0.02, RngState(7), torch.float64)
        self.assertGreaterEqual(float(out.std()), 0.0199)
        self.assertLessEqual(float(out.std()), 0.0201)
        self.assertLess(abs(float(out.mean())), 5 * 0.02 / 1000)

    def test_determinism(self):
        """Test that the same seed gives bit-identical tensors."""

        a = ops.normal_init((64, 64), 0.0, 0.02, RngState(11))
        b = ops.normal_init((64, 64), 0.0, 0.02, RngState(11))
        c = ops.normal_init((64, 64), 0.0, 0.02, RngState(12))
        self.assertTrue(torch.equal(a, b))
        self.assertFalse(torch.equal(a, c))

    def test_negative_std(self):
        """Test that a negative std raises."""

        with self.assertRaises(TensorOpError):
            ops.normal_init((2,), 0.0, -1.0, RngState(0))


class TestFiniteDiffGrad(unittest.TestCase):
    """Test finite_diff_grad."""

    def test_square(self):
        """Test the gradient of sum(x**2)."""

        x = torch.tensor([1.0, 2.0], dtype=torch.float64)
        grad = ops.finite_diff_grad(lambda t: (t**2).sum(), x)
        self.assertLess(float((grad - 2 * x).abs().max()), 1e-6)

    def test_constant(self):
        """Test that a constant function has zero gradient."""

        grad = ops.finite_diff_grad(lambda t: torch.tensor(3.0), torch.ones(4, dtype=torch.float64))
        self.assertTrue(bool((grad == 0).all()))

    def test_needs_double(self):
        """Test that single precision is refused."""

        with self.assertRaises(TensorOpError):
            ops.finite_diff_grad(lambda t: t.sum(), torch.ones(2))


class TestPerplexity(unittest.TestCase):
    """Test perplexity."""

    def test_values(self):
        """Test exp and overflow."""

        self.assertAlmostEqual(ops.perplexity(math.log(256)), 256.0)
        self.assertEqual(ops.perplexity(1e6), math.inf)
