import os
import struct
import tempfile
import unittest

import numpy as np

import htnt
from errors import ShapeError, ContractError, NonFiniteError, FormatError
from tensor import Tensor, add, sub, mul, scale, relu, matmul, softmax_rows, log_softmax_rows, concat_last_dim, \
    index_rows, stack_rows, sum_all, mean_axis, l2_rows, l1_rows, mean_rows, layer_norm_rows, transpose, reshape, \
    cross_entropy_logits, cross_entropy, backward, no_grad, finite_diff_grad, relative_error, Tape
from oracle import naive_matmul, naive_softmax


def random_tensor(rng, *dims):
    return Tensor(rng.normal(size=dims), requires_grad=True)


class TestTensor(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_construction(self):
        t = Tensor([[1, 2, 3], [4, 5, 6]])
        self.assertEqual([2, 3], t.dims)
        self.assertEqual(np.float32, t.dtype)
        self.assertRaises(ShapeError, Tensor, np.zeros((0, 3)))
        self.assertRaises(NonFiniteError, Tensor, [1.0, float('nan')])
        self.assertRaises(NonFiniteError, Tensor, [float('inf')])

    def test_matmul(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.normal(size=(4, 2))
        out = matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-5)
        self.assertEqual([1, 1], matmul(Tensor([[2.0]]), Tensor([[3.0]])).dims)
        self.assertEqual(6.0, matmul(Tensor([[2.0]]), Tensor([[3.0]])).item())
        with self.assertRaises(ShapeError) as context:
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        self.assertIn('[2, 3]', str(context.exception))
        self.assertIn('[4, 2]', str(context.exception))

    def test_batched_matmul(self):
        a = self.rng.normal(size=(5, 3, 4))
        b = self.rng.normal(size=(4, 2))
        out = matmul(Tensor(a), Tensor(b))
        self.assertEqual([5, 3, 2], out.dims)
        for i in range(5):
            np.testing.assert_allclose(out.data[i], naive_matmul(a[i], b), atol=1e-5)

    def test_softmax(self):
        probs = softmax_rows(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(probs.data, [1 / 3] * 3, atol=1e-7)
        probs = softmax_rows(Tensor([1000.0, 0.0]))
        self.assertTrue(np.all(np.isfinite(probs.data)))
        np.testing.assert_allclose(probs.data, [1.0, 0.0], atol=1e-7)
        rows = self.rng.normal(size=(6, 5)) * 10
        out = softmax_rows(Tensor(rows))
        for row, expected in zip(out.data, rows):
            np.testing.assert_allclose(row, naive_softmax(expected), atol=1e-6)
            self.assertAlmostEqual(1.0, float(row.astype(np.float64).sum()), delta=1e-6)

    def test_psi_primitives(self):
        self.assertAlmostEqual(5.0, l2_rows(Tensor([[3.0, 4.0]])).data[0], places=6)
        self.assertAlmostEqual(6.0, l1_rows(Tensor([[1.0, -2.0, 3.0]])).data[0], places=6)
        self.assertAlmostEqual(2.0, mean_rows(Tensor([[1.0, 2.0, 3.0]])).data[0], places=6)

    def test_zero_row_norm_gradient(self):
        x = Tensor(np.zeros((2, 3)), requires_grad=True)
        backward(sum_all(l2_rows(x)))
        np.testing.assert_array_equal(x.grad, np.zeros((2, 3)))

    def test_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(sum_all(mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])
        backward(sum_all(mul(x, x)))
        np.testing.assert_allclose(x.grad, [4.0, 8.0])
        x.zero_grad()
        self.assertIsNone(x.grad)

    def test_shared_subexpression(self):
        x = Tensor([3.0], requires_grad=True)
        y = scale(x, 2.0)
        backward(sum_all(add(y, y)))
        np.testing.assert_allclose(x.grad, [4.0])

    def test_backward_contract(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        self.assertRaises(ContractError, backward, mul(x, x))
        self.assertRaises(ContractError, backward, Tensor(1.0))

    def test_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = sum_all(mul(x, x))
        self.assertFalse(y.requires_grad)
        self.assertRaises(ContractError, backward, y)
        z = sum_all(mul(x, x))
        self.assertTrue(z.requires_grad)

    def test_tape_order(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = relu(x)
        loss = sum_all(y)
        tape = Tape.record(loss)
        self.assertIs(loss, tape.nodes[-1])
        self.assertLess(tape.nodes.index(x), tape.nodes.index(y))
        self.assertEqual([x], tape.leaves())

    def test_non_finite_op(self):
        self.assertRaises(NonFiniteError, scale, Tensor([3e38]), 10.0)

    def test_cross_entropy(self):
        self.assertAlmostEqual(0.0, cross_entropy(Tensor([0.0, 1.0]), 1).item(), places=6)
        self.assertAlmostEqual(-np.log(1e-12), cross_entropy(Tensor([1.0, 0.0]), 1).item(), places=3)
        self.assertRaises(ContractError, cross_entropy, Tensor([0.5, 0.2]), 0)
        self.assertRaises(IndexError, cross_entropy_logits, Tensor([0.0, 1.0]), 2)
        logits = Tensor([2.0, -1.0, 0.5])
        expected = -np.log(naive_softmax([2.0, -1.0, 0.5])[0])
        self.assertAlmostEqual(expected, cross_entropy_logits(logits, 0).item(), places=5)
        self.assertTrue(np.isfinite(cross_entropy_logits(Tensor([1000.0, -1000.0]), 1).item()))

    def test_gradients_match_finite_differences(self):
        w = random_tensor(self.rng, 4, 3)
        v = random_tensor(self.rng, 3, 5)
        cases = {
            'matmul': lambda x: sum_all(mul(matmul(x, v), matmul(x, v))),
            'softmax': lambda x: sum_all(mul(softmax_rows(x), Tensor(np.arange(12.0).reshape(4, 3)))),
            'log_softmax': lambda x: sum_all(mul(log_softmax_rows(x), Tensor(np.arange(12.0).reshape(4, 3)))),
            'l2': lambda x: sum_all(l2_rows(x)),
            'l1': lambda x: sum_all(l1_rows(x)),
            'mean': lambda x: sum_all(mul(mean_rows(x), Tensor([1.0, 2.0, 3.0, 4.0]))),
            'layer_norm': lambda x: sum_all(mul(layer_norm_rows(x), Tensor(np.arange(12.0).reshape(4, 3)))),
            'transpose': lambda x: sum_all(mul(transpose(x), Tensor(np.arange(12.0).reshape(3, 4)))),
            'reshape': lambda x: sum_all(mul(reshape(x, (2, 6)), Tensor(np.arange(12.0).reshape(2, 6)))),
            'concat': lambda x: sum_all(mul(concat_last_dim([x, scale(x, 2.0)]),
                                            Tensor(np.arange(24.0).reshape(4, 6)))),
            'index_stack': lambda x: sum_all(mul(stack_rows([index_rows(x, 2), index_rows(x, 0)]),
                                                 Tensor(np.arange(6.0).reshape(2, 3)))),
            'mean_axis': lambda x: sum_all(mul(mean_axis(x, 0), Tensor([1.0, -1.0, 2.0]))),
            'sub_relu': lambda x: sum_all(relu(sub(x, Tensor([0.1, -0.2, 0.3])))),
            'cross_entropy': lambda x: cross_entropy_logits(index_rows(x, 1), 2),
        }
        for name, f in cases.items():
            with self.subTest(op=name):
                x = Tensor(w.data, requires_grad=True)
                backward(f(x))
                numeric = finite_diff_grad(f, x, eps=1e-5)
                self.assertLess(relative_error(x.grad, numeric.data), 1e-3)

    def test_relative_error(self):
        self.assertEqual(0.0, relative_error([1.0, 2.0], [1.0, 2.0]))
        self.assertAlmostEqual(0.5, relative_error([1.0], [2.0]))
        self.assertLess(relative_error([1e-9], [0.0]), 1e-5)

    def test_matmul_associativity(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            p, q, r, s = rng.integers(1, 5, size=4)
            a = Tensor(rng.normal(size=(p, q)))
            b = Tensor(rng.normal(size=(q, r)))
            c = Tensor(rng.normal(size=(r, s)))
            np.testing.assert_allclose(matmul(matmul(a, b), c).data, matmul(a, matmul(b, c)).data, atol=1e-4)


def away_from(values, kinks, margin=1e-2):
    """Shift entries lying within margin of a kink so central differences stay on one side"""
    values = np.array(values, dtype=np.float64)
    kinks = np.broadcast_to(kinks, values.shape)
    close = np.abs(values - kinks) < margin
    return np.where(close, kinks + np.where(values >= kinks, margin, -margin), values)


def random_gradient_cases(rng):
    """One randomized instance per differentiable op: (input data, scalar function of the input)"""
    x = rng.normal(size=(4, 3))
    weights = Tensor(rng.normal(size=(4, 3)))
    right = Tensor(rng.normal(size=(3, 5)))
    offsets = rng.normal(size=3)
    row_weights = Tensor(rng.normal(size=4))
    label = int(rng.integers(0, 3))
    return {
        'matmul': (x, lambda t: sum_all(mul(matmul(t, right), matmul(t, right)))),
        'softmax': (x, lambda t: sum_all(mul(softmax_rows(t), weights))),
        'log_softmax': (x, lambda t: sum_all(mul(log_softmax_rows(t), weights))),
        'l2': (x, lambda t: sum_all(mul(l2_rows(t), row_weights))),
        'l1': (away_from(x, 0.0), lambda t: sum_all(mul(l1_rows(t), row_weights))),
        'mean_rows': (x, lambda t: sum_all(mul(mean_rows(t), Tensor([1.0, 2.0, 3.0, 4.0])))),
        'layer_norm': (x, lambda t: sum_all(mul(layer_norm_rows(t), weights))),
        'transpose': (x, lambda t: sum_all(mul(transpose(t), Tensor(weights.data.T)))),
        'reshape': (x, lambda t: sum_all(mul(reshape(t, (2, 6)), Tensor(weights.data.reshape(2, 6))))),
        'concat': (x, lambda t: sum_all(mul(concat_last_dim([t, scale(t, 2.0)]),
                                            Tensor(np.concatenate([weights.data, weights.data], axis=1))))),
        'index_stack': (x, lambda t: sum_all(mul(stack_rows([index_rows(t, 2), index_rows(t, 0)]),
                                                 Tensor(weights.data[:2])))),
        'mean_axis': (x, lambda t: sum_all(mul(mean_axis(t, 0), Tensor(offsets)))),
        'add_sub_relu': (away_from(x, offsets), lambda t: sum_all(relu(sub(add(t, weights), add(Tensor(offsets),
                                                                                              weights))))),
        'cross_entropy': (x, lambda t: cross_entropy_logits(index_rows(t, 1), label)),
    }


class TestRandomGradients(unittest.TestCase):
    def test_every_op_over_random_instances(self):
        rng = np.random.default_rng(2024)
        worst = {}
        for _ in range(100):
            for name, (data, f) in random_gradient_cases(rng).items():
                x = Tensor(data, requires_grad=True)
                backward(f(x))
                numeric = finite_diff_grad(f, x, eps=1e-5)
                worst[name] = max(worst.get(name, 0.0), relative_error(x.grad, numeric.data))
        for name, error in worst.items():
            with self.subTest(op=name):
                self.assertLess(error, 1e-3)



class TestHtnt(unittest.TestCase):
    def test_header_layout(self):
        payload = htnt.encode(np.arange(6, dtype=np.float32).reshape(2, 3))
        self.assertEqual(b'HTNT', payload[:4])
        self.assertEqual(bytes([0x01, 0x00, 2]), payload[4:7])
        self.assertEqual((2, 3), struct.unpack('<2I', payload[7:15]))
        self.assertEqual(15 + 6 * 4, len(payload))
        self.assertEqual(1.0, struct.unpack('<f', payload[19:23])[0])

    def test_decode(self):
        array = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(np.float32)
        np.testing.assert_array_equal(array, htnt.decode(htnt.encode(array)))

    def test_malformed(self):
        payload = htnt.encode(np.ones((2, 2)))
        self.assertRaises(FormatError, htnt.decode, b'XXXX' + payload[4:])
        self.assertRaises(FormatError, htnt.decode, payload[:4] + bytes([2]) + payload[5:])
        self.assertRaises(FormatError, htnt.decode, payload[:5] + bytes([1]) + payload[6:])
        self.assertRaises(FormatError, htnt.decode, payload[:-1])
        self.assertRaises(FormatError, htnt.decode, payload[:3])

    def test_files(self):
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'nested', 'x' + htnt.EXTENSION)
            htnt.save(path, Tensor([[1.0, 2.0]]))
            loaded = htnt.load(path, requires_grad=True)
            self.assertEqual([1, 2], loaded.dims)
            self.assertTrue(loaded.requires_grad)


if __name__ == '__main__':
    unittest.main()
