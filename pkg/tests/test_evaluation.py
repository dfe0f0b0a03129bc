import os
import tempfile
import unittest

import numpy as np
from PIL import Image

from errors import ShapeError, ContractError, ConfigError
from evaluation import confusion, report, dice, attention_overlap, rasterize_mask, coefficient_grid, save_heatmap, \
    dice_sweep, overlap_table, roc_curves, roc_frame, format_latency, benchmark, comparison_table, evaluate, \
    BAG_LEVEL, WORD_LEVEL, COMPARISON_COLUMNS
from hatnet_model import AttentionRecord, TilingConfig, ModelConfig, HatnetParams, WordFeatures, PRECOMPUTED
from synthetic import Sample
from tensor import Tensor


def record_of(bag_coeffs, word_coeffs=None):
    bag_coeffs = np.asarray(bag_coeffs, dtype=np.float64)
    if word_coeffs is None:
        word_coeffs = np.full((bag_coeffs.size, 2), 0.5)
    return AttentionRecord(Tensor(word_coeffs), Tensor(bag_coeffs))


def one_hot(labels, num_classes):
    return np.eye(num_classes)[labels]


class TestConfusion(unittest.TestCase):
    def test_examples(self):
        np.testing.assert_array_equal([[2, 0], [0, 2]], confusion([0, 0, 1, 1], [0, 0, 1, 1], 2).counts)
        np.testing.assert_array_equal([[0, 2], [2, 0]], confusion([1, 1, 0, 0], [0, 0, 1, 1], 2).counts)

    def test_counting_oracle(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 4, size=50)
        labels = rng.integers(0, 4, size=50)
        cm = confusion(preds, labels, 4)
        for truth in range(4):
            for guess in range(4):
                expected = sum(1 for p, t in zip(preds, labels) if p == guess and t == truth)
                self.assertEqual(expected, cm.counts[truth, guess])
        self.assertEqual(50, cm.total)
        self.assertEqual(float(np.trace(cm.counts)) / 50, cm.accuracy)

    def test_errors(self):
        self.assertRaises(ShapeError, confusion, [0, 1], [0], 2)
        self.assertRaises(IndexError, confusion, [2], [0], 2)
        self.assertRaises(IndexError, confusion, [0], [-1], 2)


class TestReport(unittest.TestCase):
    def test_perfect(self):
        labels = [0, 0, 1, 1, 2, 2]
        metrics = report(confusion(labels, labels, 3), one_hot(labels, 3), labels)
        self.assertEqual(1.0, metrics.accuracy)
        self.assertEqual(1.0, metrics.macro_f1)
        self.assertEqual(1.0, metrics.weighted_f1)
        self.assertEqual(1.0, metrics.macro_sensitivity)
        self.assertEqual(1.0, metrics.macro_specificity)
        self.assertEqual([1.0, 1.0, 1.0], metrics.auc)
        self.assertEqual(1.0, metrics.macro_auc)

    def test_constant_scores(self):
        labels = [0, 1, 1, 0, 1]
        metrics = report(confusion([0] * 5, labels, 2), np.full((5, 2), 0.5), labels)
        self.assertEqual([0.5, 0.5], metrics.auc)

    def test_hand_case(self):
        pairs = {(0, 0): 3, (0, 1): 1, (1, 0): 1, (1, 1): 2, (1, 2): 1, (2, 1): 1, (2, 2): 4}
        labels, preds = [], []
        for (truth, guess), count in pairs.items():
            labels += [truth] * count
            preds += [guess] * count
        cm = confusion(preds, labels, 3)
        np.testing.assert_array_equal([[3, 1, 0], [1, 2, 1], [0, 1, 4]], cm.counts)
        metrics = report(cm, one_hot(preds, 3), labels)
        self.assertAlmostEqual(9 / 13, metrics.accuracy, places=12)
        np.testing.assert_allclose([0.75, 0.5, 0.8], metrics.f1)
        self.assertAlmostEqual((0.75 + 0.5 + 0.8) / 3, metrics.macro_f1, delta=1e-6)
        self.assertAlmostEqual((4 * 0.75 + 4 * 0.5 + 5 * 0.8) / 13, metrics.weighted_f1, delta=1e-6)
        self.assertAlmostEqual(8 / 9, metrics.specificity[0], places=12)
        self.assertEqual([4, 4, 5], metrics.support)

    def test_binary_symmetry(self):
        rng = np.random.default_rng(1)
        labels = list(rng.integers(0, 2, size=30))
        preds = list(rng.integers(0, 2, size=30))
        metrics = report(confusion(preds, labels, 2), one_hot(preds, 2), labels)
        self.assertAlmostEqual(metrics.sensitivity[1], metrics.specificity[0], places=12)
        self.assertAlmostEqual(metrics.sensitivity[0], metrics.specificity[1], places=12)

    def test_auc_monotone_invariance(self):
        rng = np.random.default_rng(2)
        labels = list(rng.integers(0, 3, size=40))
        scores = rng.uniform(size=(40, 3))
        cm = confusion(np.argmax(scores, axis=1), labels, 3)
        plain = report(cm, scores, labels)
        transformed = report(cm, np.exp(3 * scores) + 1, labels)
        np.testing.assert_allclose(plain.auc, transformed.auc, atol=1e-12)

    def test_missing_class(self):
        labels = [0, 1, 0, 1]
        metrics = report(confusion([0, 1, 0, 2], labels, 3), one_hot([0, 1, 0, 2], 3), labels)
        self.assertEqual([2], metrics.undefined_classes)
        self.assertIsNone(metrics.sensitivity[2])
        self.assertIsNone(metrics.f1[2])
        self.assertIsNone(metrics.auc[2])
        self.assertIsNone(metrics.precision[2])
        self.assertIsNone(metrics.specificity[2])
        self.assertEqual([1.0, 1.0, None], metrics.specificity)
        self.assertAlmostEqual(1.0, metrics.macro_specificity, places=12)
        self.assertAlmostEqual((1.0 + 0.5) / 2, metrics.macro_sensitivity, places=12)
        self.assertIn('undefined_classes', metrics.to_dict())

    def test_inconsistent_inputs(self):
        labels = [0, 1]
        self.assertRaises(ShapeError, report, confusion(labels, labels, 2), np.ones((2, 3)), labels)
        self.assertRaises(ContractError, report, confusion(labels, labels, 2), np.ones((2, 2)), [1, 1])

    def test_roc_frame(self):
        labels = [0, 1, 1, 0, 2, 2]
        curves = roc_curves(one_hot(labels, 3) * 0.8 + 0.1, labels, 3)
        self.assertEqual([0, 1, 2], sorted(curves))
        frame = roc_frame(curves)
        self.assertEqual(['class', 'fpr', 'tpr', 'threshold'], list(frame.columns))
        self.assertEqual({0, 1, 2}, set(frame['class']))


class TestDice(unittest.TestCase):
    def test_examples(self):
        a = np.array([1, 1, 0, 1, 1, 0], dtype=bool)
        self.assertEqual(1.0, dice(a, a))
        self.assertEqual(0.0, dice(a, ~a))
        b = np.array([1, 1, 0, 0, 0, 0], dtype=bool)
        self.assertAlmostEqual(0.667, dice(a, b), places=3)
        self.assertEqual(dice(a, b), dice(b, a))
        self.assertEqual(1.0, dice(np.zeros(4), np.zeros(4)))
        self.assertRaises(ShapeError, dice, np.ones(3), np.ones(4))

    def test_concentrated_attention(self):
        mask = np.zeros(10, dtype=bool)
        mask[[2, 5, 7]] = True
        coeffs = np.where(mask, 0.3, 0.1 / 7)
        self.assertEqual(1.0, attention_overlap(record_of(coeffs), mask, 30))

    def test_uniform_attention(self):
        mask = np.zeros(10, dtype=bool)
        mask[[1, 4, 8, 9]] = True
        record = record_of(np.full(10, 0.1))
        self.assertAlmostEqual(2 * 1 / (1 + 4), attention_overlap(record, mask, 40))
        self.assertAlmostEqual(2 * 1 / (4 + 4), attention_overlap(record, mask, 40, restrict=False))
        self.assertEqual(1.0, attention_overlap(record, np.ones(10, dtype=bool), 100))

    def test_word_level(self):
        words = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
        record = record_of([0.5, 0.5], words)
        mask = np.array([[1, 0, 0], [0, 0, 1]], dtype=bool)
        self.assertEqual(1.0, attention_overlap(record, mask, 34, WORD_LEVEL))
        self.assertRaises(ShapeError, attention_overlap, record, np.ones(2, dtype=bool), 34, WORD_LEVEL)
        self.assertRaises(ConfigError, attention_overlap, record, mask, 34, 'pixel')

    def test_dice_sweep(self):
        mask = np.array([1, 0, 0, 1], dtype=bool)
        records = [record_of([0.4, 0.1, 0.1, 0.4]), record_of([0.25] * 4)]
        frame = dice_sweep(records, [mask, mask], [0, 1], k_values=(25, 50))
        self.assertEqual(['k_percent', 'class', 'dice'], list(frame.columns))
        self.assertEqual(4, len(frame))
        value = frame[(frame['k_percent'] == 50) & (frame['class'] == 0)]['dice'].iloc[0]
        self.assertEqual(1.0, value)
        self.assertRaises(ShapeError, dice_sweep, records, [mask], [0, 1])

    def test_overlap_table(self):
        records = [record_of([0.4, 0.1, 0.1, 0.4]), record_of([0.25] * 4)]
        masks = [np.array([1, 0, 0, 1], dtype=bool), np.zeros(4, dtype=bool)]
        table = overlap_table(records, masks, ['motif', 'blank'], [0, 1], 50)
        self.assertEqual(['name', 'class', 'dice', 'empty'], list(table.columns))
        self.assertEqual([1.0, 1.0], list(table['dice']))
        self.assertEqual([False, True], list(table['empty']))

        unrestricted = overlap_table(records, masks, ['motif', 'blank'], [0, 1], 50, restrict=False)
        self.assertEqual([1.0, 0.0], list(unrestricted['dice']))
        self.assertFalse(unrestricted['empty'].any())
        self.assertRaises(ShapeError, overlap_table, records, masks, ['motif'], [0, 1], 50)



class TestMasks(unittest.TestCase):
    def setUp(self):
        self.geometry = TilingConfig(n=4, m=4, bag_px=4, word_px=2, d=8, channels=1)

    def test_rasterize_bags(self):
        pixels = np.zeros((8, 8))
        pixels[:4, :4] = 1
        pixels[4:6, 4:8] = 1
        np.testing.assert_array_equal([True, False, False, True], rasterize_mask(pixels, self.geometry))
        pixels[4:5, 4:8] = 0
        np.testing.assert_array_equal([True, False, False, False], rasterize_mask(pixels, self.geometry))

    def test_rasterize_words(self):
        pixels = np.zeros((8, 8))
        pixels[0:2, 0] = 1
        pixels[0, 2] = 1
        pixels[6:8, 6:8] = 1
        words = rasterize_mask(pixels, self.geometry, WORD_LEVEL)
        self.assertEqual((4, 4), words.shape)
        self.assertTrue(words[0, 0])
        self.assertFalse(words[0, 1])
        self.assertTrue(words[3, 3])
        self.assertEqual(2, int(words.sum()))

    def test_rasterize_resizes(self):
        pixels = np.zeros((16, 16))
        pixels[:8, :8] = 1
        np.testing.assert_array_equal([True, False, False, False], rasterize_mask(pixels, self.geometry))
        self.assertRaises(ShapeError, rasterize_mask, np.zeros(8), self.geometry)

    def test_coefficient_grid_and_heatmap(self):
        words = np.arange(16, dtype=np.float64).reshape(4, 4)
        record = record_of([0.1, 0.2, 0.3, 0.4], words)
        np.testing.assert_array_equal([[0.1, 0.2], [0.3, 0.4]], coefficient_grid(record, self.geometry, BAG_LEVEL))
        grid = coefficient_grid(record, self.geometry, WORD_LEVEL)
        self.assertEqual((4, 4), grid.shape)
        np.testing.assert_array_equal([0, 1, 2, 3], grid[:2, :2].reshape(-1))
        np.testing.assert_array_equal([12, 13, 14, 15], grid[2:, 2:].reshape(-1))
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'heatmap.png')
            save_heatmap(grid, path, cell_px=3)
            with Image.open(path) as image:
                self.assertEqual((12, 12), image.size)
                self.assertEqual(255, max(image.getdata()))


class TestBenchmark(unittest.TestCase):
    def test_format(self):
        self.assertEqual('2.13 s ± 12 ms', format_latency(2.13, 0.012))
        self.assertRaises(ContractError, format_latency, float('nan'), 0.0)

    def test_benchmark(self):
        tiling = TilingConfig(n=2, m=2, bag_px=1, word_px=1, d=8, channels=1)
        params = HatnetParams.create(tiling, ModelConfig(heads=2, encoder=PRECOMPUTED))
        features = WordFeatures(Tensor(np.ones((2, 2, 8))))
        result = benchmark(params, features, trials=2)
        self.assertEqual(2, result.trials)
        self.assertEqual(3, result.warmup)
        self.assertEqual(2, len(result.times))
        self.assertGreater(result.mean_s, 0.0)
        self.assertGreaterEqual(result.std_s, 0.0)
        self.assertIn(' s ± ', result.to_dict()['formatted'])
        self.assertRaises(ContractError, benchmark, params, features, trials=1)


class TestEvaluate(unittest.TestCase):
    def test_evaluate_and_compare(self):
        tiling = TilingConfig(n=2, m=2, bag_px=1, word_px=1, d=8, channels=1)
        params = HatnetParams.create(tiling, ModelConfig(heads=2, num_classes=3, encoder=PRECOMPUTED))
        rng = np.random.default_rng(0)
        samples = [Sample(f's{i}', i % 3, WordFeatures(Tensor(rng.normal(size=(2, 2, 8))))) for i in range(6)]
        metrics, collected = evaluate(params, samples)
        self.assertEqual(6, sum(map(sum, metrics.confusion)))
        self.assertEqual((6, 3), collected.scores.shape)
        self.assertEqual(['s0', 's1', 's2', 's3', 's4', 's5'], collected.names)
        self.assertTrue(0.0 <= metrics.accuracy <= 1.0)
        table = comparison_table([('euclidean', metrics), ('mean', metrics, {'parameters': 10})])
        self.assertEqual(COMPARISON_COLUMNS + ['parameters'], list(table.columns))
        self.assertEqual(['euclidean', 'mean'], list(table['configuration']))
        self.assertRaises(ContractError, evaluate, params, [])


if __name__ == '__main__':
    unittest.main()
