import argparse
import os
import tempfile
import unittest

from config import parse_config, from_dict, save_config, RunConfig
from errors import ConfigError

CONFIG_FOLDER = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'config')


def overrides(**kwargs):
    values = dict(data=None, out=None, seed=None, psi=None, epochs=None, no_augment=False)
    values.update(kwargs)
    return argparse.Namespace(**values)


class TestConfig(unittest.TestCase):
    def test_defaults(self):
        config = parse_config()
        self.assertEqual((49, 49, 256), (config.tiling.n, config.tiling.m, config.tiling.d))
        self.assertEqual((1792, 256), (config.tiling.bag_px, config.tiling.word_px))
        self.assertEqual(4, config.model.heads)
        self.assertEqual('euclidean', config.psi)
        self.assertEqual(8, config.train.accum_steps)
        self.assertIsNone(config.data)

    def test_heads_must_divide_d(self):
        with self.assertRaises(ConfigError) as context:
            from_dict({'model': {'heads': 5}})
        self.assertIn('heads', context.exception.key)

    def test_unknown_keys(self):
        with self.assertRaises(ConfigError) as context:
            from_dict({'model': {'head': 4}})
        self.assertEqual('model.head', context.exception.key)
        with self.assertRaises(ConfigError) as context:
            from_dict({'optimizer': {}})
        self.assertEqual('optimizer', context.exception.key)

    def test_section_errors_are_prefixed(self):
        with self.assertRaises(ConfigError) as context:
            from_dict({'train': {'accum_steps': 0}})
        self.assertEqual('train.accum_steps', context.exception.key)
        with self.assertRaises(ConfigError) as context:
            from_dict({'model': {'psi': 'cosine'}})
        self.assertEqual('model.psi', context.exception.key)
        self.assertRaises(ConfigError, from_dict, {'tiling': [1, 2]})
        self.assertRaises(ConfigError, from_dict, {'seed': -1})

    def test_toy_encoder_checks_grid(self):
        with self.assertRaises(ConfigError) as context:
            from_dict({'tiling': {'n': 4, 'm': 4, 'bag_px': 10, 'word_px': 4, 'd': 8}, 'model': {'heads': 2}})
        self.assertEqual('bag_px', context.exception.key)
        config = from_dict({'tiling': {'n': 2, 'm': 3, 'bag_px': 1, 'word_px': 1, 'd': 8},
                            'model': {'heads': 2, 'encoder': 'precomputed'}})
        self.assertEqual(2, config.tiling.n)

    def test_root_key(self):
        config = from_dict({'Config': {'seed': 3, 'model': {'psi': 'mean'}}})
        self.assertEqual(3, config.seed)
        self.assertEqual('mean', config.psi)
        self.assertRaises(ConfigError, from_dict, {'Config': {}, 'seed': 1})
        self.assertRaises(ConfigError, from_dict, ['Config'])

    def test_round_trip(self):
        config = from_dict({'model': {'psi': 'manhattan'}, 'train': {'lr_start': 1e-7, 'adam_eps': 1e-8},
                            'out': 'runs/x'})
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'saved', 'config.json')
            save_config(config, path)
            self.assertEqual(config.to_dict(), parse_config(path).to_dict())

    def test_overrides(self):
        config = parse_config(None, overrides(data='data/x', out='runs/y', seed=7, psi='mean', epochs=3,
                                              no_augment=True))
        self.assertEqual(('data/x', 'runs/y', 7), (config.data, config.out, config.seed))
        self.assertEqual((7, 7), (config.train.seed, config.synthetic.seed))
        self.assertEqual('mean', config.psi)
        self.assertEqual((3, 0), (config.train.epochs_phase1, config.train.epochs_phase2))
        self.assertFalse(config.train.augment)
        untouched = parse_config(None, overrides())
        self.assertEqual(RunConfig().to_dict(), untouched.to_dict())

    def test_files(self):
        self.assertRaises(ConfigError, parse_config, 'no-such-config.yml')
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'broken.yml')
            with open(path, 'w') as c_file:
                c_file.write('Config:\n  model: [unclosed\n')
            with self.assertRaises(ConfigError) as context:
                parse_config(path)
            self.assertEqual('config', context.exception.key)

    def test_example_files(self):
        example = parse_config(os.path.join(CONFIG_FOLDER, 'hatnet-config.example.yml'))
        self.assertEqual(49, example.tiling.n)
        self.assertEqual(1e-7, example.train.lr_start)
        synthetic = parse_config(os.path.join(CONFIG_FOLDER, 'synthetic.example.yml'))
        self.assertEqual(synthetic.synthetic.n, synthetic.tiling.n)
        self.assertEqual(synthetic.synthetic.tiling(synthetic.tiling.d), synthetic.tiling)
        overfit = parse_config(os.path.join(CONFIG_FOLDER, 'overfit.yml'))
        self.assertEqual(overfit.synthetic.tiling(overfit.tiling.d), overfit.tiling)
        self.assertEqual(16, overfit.synthetic.num_classes * overfit.synthetic.samples_per_class)


if __name__ == '__main__':
    unittest.main()
