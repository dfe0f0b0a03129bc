#!/usr/bin/env python3
import argparse
import json
import math
import os
import sys

import numpy as np
import pandas as pd

from common.utils import get_logger, LOG_PREFIX, APP_NAME, attach_log_dir, print_config

if LOG_PREFIX not in os.environ:
    os.environ[LOG_PREFIX] = 'HATNet'

os.environ[APP_NAME] = 'HATNet'

import htnt
from checkpoint import load_checkpoint, final_folder
from config import parse_config, save_config
from errors import HatnetError, ConfigError
from evaluation import evaluate, roc_curves, roc_frame, benchmark, dice_sweep, overlap_table, \
    coefficient_grid, save_heatmap, comparison_table, confusion, report, LEVELS, BAG_LEVEL, \
    DEFAULT_TRIALS, DICE_SWEEP_K
from hatnet_model import HatnetParams, TiledImage, WordFeatures, TilingConfig, PSI_KINDS, predict, top_k_bags, \
    top_k_words, count_parameters, ensemble_predict, tile_image
from synthetic import generate_synthetic, load_dataset, retile_dataset, TEST, SPLITS
from tensor import Tensor
from trainer import fit

LOG_FOLDER = 'logs'
DEFAULT_TOP_K = 30
LOGGER_NAMES = ('HATNet', 'HATNet Config', 'HATNet Model', 'Trainer', 'Evaluation', 'Synthetic', 'Checkpoint',
                'Tensor', 'Word Encoder')


def parse_arguments(args=None):
    parser = argparse.ArgumentParser(description='Train, evaluate and inspect HATNet image classifiers')
    subparsers = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Configuration file, example is in config/hatnet-config.example.yml')
    common.add_argument('--data', help='Dataset directory')
    common.add_argument('--out', help='Output directory, everything the command writes goes here')
    common.add_argument('--seed', help='Random seed for initialization, shuffling and generation', type=int)

    train = subparsers.add_parser('train', parents=[common], help='Train a model and average its best checkpoints')
    train.add_argument('--psi', help='Projection function', choices=PSI_KINDS)
    train.add_argument('--epochs', help='Train for this many epochs without the decay phase', type=int)
    train.add_argument('--no-augment', help='Disable word augmentation', action='store_true')

    evaluate_parser = subparsers.add_parser('eval', parents=[common], help='Write a metrics report')
    evaluate_parser.add_argument('--checkpoint', help='Checkpoint directory, defaults to <out>/final')
    evaluate_parser.add_argument('--split', help='Dataset split', choices=list(SPLITS) + ['all'], default=TEST)

    attn = subparsers.add_parser('attn', parents=[common], help='Export attention coefficients and top-k cells')
    attn.add_argument('--checkpoint', help='Checkpoint directory', required=True)
    attn.add_argument('--input', help='HTNT file: words, word features or image pixels')
    attn.add_argument('--top-k', help='Percentage of bags or words to keep', type=float, default=DEFAULT_TOP_K)
    attn.add_argument('--level', help='Attention level', choices=LEVELS, default=BAG_LEVEL)
    attn.add_argument('--split', help='Dataset split for the dice sweep', choices=list(SPLITS) + ['all'],
                      default=TEST)

    subparsers.add_parser('synth', parents=[common], help='Generate a synthetic planted-motif dataset')

    bench = subparsers.add_parser('bench', parents=[common], help='Measure forward pass latency')
    bench.add_argument('--checkpoint', help='Checkpoint directory, a freshly initialized model is used otherwise')
    bench.add_argument('--input', help='HTNT input, a zero input of the configured geometry is used otherwise')
    bench.add_argument('--trials', help='Number of timed passes', type=int, default=DEFAULT_TRIALS)

    ablate = subparsers.add_parser('ablate', parents=[common], help='Compare projection functions or geometries')
    mode = ablate.add_mutually_exclusive_group(required=True)
    mode.add_argument('--psi', help='Train one model per projection function', action='store_true')
    mode.add_argument('--geometry', help='Bag/word counts as N:M, word count N * M stays fixed', nargs='+')
    ablate.add_argument('--split', help='Dataset split to report on', choices=list(SPLITS) + ['all'], default=TEST)

    ensemble = subparsers.add_parser('ensemble', parents=[common], help='Majority vote over several checkpoints')
    ensemble.add_argument('--checkpoint', help='Checkpoint directory, repeat for every member', action='append',
                          required=True)
    ensemble.add_argument('--split', help='Dataset split', choices=list(SPLITS) + ['all'], default=TEST)
    return parser.parse_args(args)


def process_arguments(args, log):
    overrides = argparse.Namespace(data=args.data, out=args.out, seed=args.seed,
                                   psi=getattr(args, 'psi', None) if args.command == 'train' else None,
                                   epochs=getattr(args, 'epochs', None),
                                   no_augment=getattr(args, 'no_augment', False))
    config = parse_config(args.config, overrides)
    if not config.out:
        raise ConfigError('out', 'no output directory, specify one in config file or with --out')
    single_input = args.command == 'attn' and args.input
    if args.command not in ('synth', 'bench') and not single_input and not config.data:
        raise ConfigError('data', 'no dataset, specify one in config file or with --data')
    if config.data and args.command != 'synth' and not os.path.isdir(config.data):
        raise ConfigError('data', f'{config.data} is not a directory!')
    os.makedirs(config.out, exist_ok=True)
    attach_log_dir(os.path.join(config.out, LOG_FOLDER), *LOGGER_NAMES)
    print_config(log, config)
    return config


def write_json(path, data):
    with open(path, 'w') as out_file:
        json.dump(data, out_file, indent=2, sort_keys=True)
        out_file.write('\n')


def read_input(path, tiling):
    """
    Words (n x m x px x px x c), features (n x m x d) or image pixels (h x w [x c])
    """
    array = htnt.load_array(path)
    if array.ndim == 5:
        return TiledImage(Tensor(array), tiling)
    if array.ndim == 3 and list(array.shape) == [tiling.n, tiling.m, tiling.d]:
        return WordFeatures(Tensor(array))
    return tile_image(array, tiling)


def cmd_synth(config, args, log):
    dataset = generate_synthetic(config.synthetic, config.out, config.tiling.d)
    save_config(config, os.path.join(config.out, 'config.json'))
    return {'samples': len(dataset), 'splits': dataset.manifest['splits']}


def cmd_train(config, args, log):
    dataset = load_dataset(config.data, config.tiling)
    params = HatnetParams.create(config.tiling, config.model, seed=config.seed)
    log.info(f'Parameters: {count_parameters(params)}')
    save_config(config, os.path.join(config.out, 'config.json'))
    result = fit(params, dataset.subset('train'), dataset.subset('val'), config.train, config.out)
    summary = {
        'epochs': len(result.history),
        'final_loss': result.history[-1].loss,
        'best_epochs': [c.epoch for c in result.checkpoints],
        'best_val_accuracy': [c.val_accuracy for c in result.checkpoints],
        'parameters': count_parameters(result.params),
        'checkpoint': final_folder(config.out),
    }
    write_json(os.path.join(config.out, 'train-summary.json'), summary)
    return summary


def _subset(dataset, split):
    samples = dataset.subset(split)
    if not samples:
        raise ConfigError('split', f'split "{split}" has no samples')
    return samples


def cmd_eval(config, args, log):
    params, _ = load_checkpoint(args.checkpoint or final_folder(config.out))
    dataset = load_dataset(config.data, params.tiling)
    metrics, collected = evaluate(params, _subset(dataset, args.split))
    write_json(os.path.join(config.out, 'metrics.json'), metrics.to_dict())
    curves = roc_curves(collected.scores, collected.labels, params.model_cfg.num_classes)
    roc_frame(curves).to_csv(os.path.join(config.out, 'roc.csv'), index=False)
    log.info(f'Accuracy {metrics.accuracy:.4f}, macro F1 {metrics.macro_f1:.4f}')
    return {'accuracy': metrics.accuracy, 'macro_f1': metrics.macro_f1}


def cmd_attn(config, args, log):
    params, _ = load_checkpoint(args.checkpoint)
    if args.input:
        return _attention_single(params, args, config.out)
    dataset = load_dataset(config.data, params.tiling)
    samples = [s for s in _subset(dataset, args.split) if s.bag_mask is not None]
    if not samples:
        raise ConfigError('data', 'dataset has no region masks for a dice sweep')
    records = [predict(params, s.input)[1] for s in samples]
    masks = [s.bag_mask if args.level == BAG_LEVEL else s.word_mask for s in samples]
    sweep = dice_sweep(records, masks, [s.label for s in samples], DICE_SWEEP_K, args.level)
    sweep.to_csv(os.path.join(config.out, f'dice-sweep-{args.level}.csv'), index=False)
    per_image = overlap_table(records, masks, [s.name for s in samples], [s.label for s in samples], args.top_k,
                              args.level)
    per_image.to_csv(os.path.join(config.out, f'dice-{args.level}-images.csv'), index=False)
    at_k = float(per_image['dice'].mean())
    empty = list(per_image.loc[per_image['empty'], 'name'])
    if empty:
        log.warning(f'{len(empty)} images have neither annotated nor predicted {args.level}s, scored 1.0')
    summary = {'level': args.level, 'top_k': args.top_k, 'dice': at_k, 'samples': len(samples), 'empty': empty}
    write_json(os.path.join(config.out, f'dice-{args.level}.json'), summary)
    log.info(f'Mean top-{args.top_k:g}% {args.level} dice: {at_k:.4f}')
    return summary


def _attention_single(params, args, out):
    sample = read_input(args.input, params.tiling)
    prediction, record = predict(params, sample)
    geometry = params.tiling
    if args.level == BAG_LEVEL:
        top = top_k_bags(record, args.top_k)
    else:
        top = [list(pair) for pair in top_k_words(record, args.top_k)]
    result = {
        'level': args.level,
        'top_k_percent': args.top_k,
        'top_k': top,
        'predicted_class': prediction.predicted_class,
        'probs': prediction.probs.data.astype(float).tolist(),
        'bag_coeffs': record.bag_coeffs.data.astype(float).tolist(),
        'word_coeffs': record.word_coeffs.data.astype(float).tolist(),
    }
    write_json(os.path.join(out, 'attention.json'), result)
    pd.DataFrame({'bag': range(geometry.n), 'coeff': record.bag_coeffs.data}).to_csv(
        os.path.join(out, 'bag-coeffs.csv'), index=False)
    bags, words = np.indices((geometry.n, geometry.m))
    pd.DataFrame({'bag': bags.ravel(), 'word': words.ravel(), 'coeff': record.word_coeffs.data.ravel()}).to_csv(
        os.path.join(out, 'word-coeffs.csv'), index=False)
    for level in LEVELS:
        save_heatmap(coefficient_grid(record, geometry, level), os.path.join(out, f'heatmap-{level}.png'))
    return {'predicted_class': prediction.predicted_class, 'top_k': top}


def cmd_bench(config, args, log):
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
    else:
        params = HatnetParams.create(config.tiling, config.model, seed=config.seed)
    tiling = params.tiling
    if args.input:
        sample = read_input(args.input, tiling)
    elif not params.encoder.trainable:
        sample = WordFeatures(Tensor(np.zeros((tiling.n, tiling.m, tiling.d))))
    else:
        sample = TiledImage(Tensor(np.zeros((tiling.n, tiling.m, tiling.word_px, tiling.word_px, tiling.channels))),
                            tiling)
    result = benchmark(params, sample, args.trials)
    write_json(os.path.join(config.out, 'bench.json'), result.to_dict())
    return result.to_dict()


def parse_geometry(value, total):
    try:
        n, m = (int(part) for part in value.split(':'))
    except ValueError:
        raise ConfigError('geometry', f'"{value}" is not of the form N:M')
    if n * m != total:
        raise ConfigError('geometry', f'"{value}" has {n * m} words per image, dataset has {total}')
    return n, m


def _ablation_variants(config, args, dataset):
    if args.psi:
        for kind in PSI_KINDS:
            model = type(config.model)(**dict(config.model.to_dict(), psi=kind))
            yield kind, config.tiling, model, dataset
        return
    tiling = dataset.tiling
    for value in args.geometry:
        n, m = parse_geometry(value, tiling.n * tiling.m)
        variant = TilingConfig(n=n, m=m, bag_px=math.isqrt(m) * tiling.word_px, word_px=tiling.word_px, d=tiling.d,
                               channels=tiling.channels)
        yield f'{n}x{m}', variant, config.model, retile_dataset(dataset, variant)


def cmd_ablate(config, args, log):
    dataset = load_dataset(config.data, config.tiling)
    rows = []
    for name, tiling, model, variant_data in _ablation_variants(config, args, dataset):
        log.info(f'Ablation run {name}')
        params = HatnetParams.create(tiling, model, seed=config.seed)
        run_out = os.path.join(config.out, name)
        result = fit(params, variant_data.subset('train'), variant_data.subset('val'), config.train, run_out)
        metrics, _ = evaluate(result.params, _subset(variant_data, args.split))
        counts = count_parameters(result.params)
        rows.append((name, metrics, {'n': tiling.n, 'm': tiling.m, 'params_encoder': counts['encoder'],
                                     'params_attention': counts['attention']}))
    table = comparison_table(rows)
    table.to_csv(os.path.join(config.out, 'ablation.csv'), index=False)
    write_json(os.path.join(config.out, 'ablation.json'), table.to_dict(orient='records'))
    return {'configurations': list(table['configuration'])}


def cmd_ensemble(config, args, log):
    members = [load_checkpoint(path)[0] for path in args.checkpoint]
    tiling = members[0].tiling
    for member in members[1:]:
        if member.tiling != tiling or member.model_cfg.num_classes != members[0].model_cfg.num_classes:
            raise ConfigError('checkpoint', 'ensemble members differ in geometry or class count')
    dataset = load_dataset(config.data, tiling)
    samples = _subset(dataset, args.split)
    predictions = [ensemble_predict(members, s.input) for s in samples]
    labels = [s.label for s in samples]
    cm = confusion([p.predicted_class for p in predictions], labels, members[0].model_cfg.num_classes)
    metrics = report(cm, np.array([p.probs.data for p in predictions]), labels)
    write_json(os.path.join(config.out, 'ensemble-metrics.json'), dict(metrics.to_dict(), members=args.checkpoint))
    return {'accuracy': metrics.accuracy, 'members': len(members)}


HANDLERS = {
    'train': cmd_train,
    'eval': cmd_eval,
    'attn': cmd_attn,
    'synth': cmd_synth,
    'bench': cmd_bench,
    'ablate': cmd_ablate,
    'ensemble': cmd_ensemble,
}


def error_payload(error):
    if isinstance(error, HatnetError):
        return error.to_dict()
    return {'error': type(error).__name__, 'message': str(error), 'key': None}


def main(args):
    log = get_logger('HATNet')
    try:
        config = process_arguments(args, log)
        result = HANDLERS[args.command](config, args, log)
        log.info(f'{args.command} finished: {result}')
        return 0
    except (HatnetError, ValueError, IndexError, KeyError, TypeError, OSError) as e:
        log.debug(e, exc_info=True)
        sys.stderr.write(json.dumps(error_payload(e)) + '\n')
        return 1


if __name__ == '__main__':
    sys.exit(main(parse_arguments()))
