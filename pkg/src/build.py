import argparse
import logging
import os
import sys
from dataclasses import replace

from src.consts import (
    ADAPTED_CHECKPOINT, EXIT_ERROR, EXIT_OK, EXIT_VERIFY_FAILED, TRAINING_LOG, WARMUP_CHECKPOINT, default_scene,
)
from src.config import add_config_arguments, overrides_from_args
from src.utils.common import make_sure_dir_exists, setup_logger
from src.utils.errors import PLAdaptError


logger = logging.getLogger('pladapt.build')


def cmd_generate(args):
    from src.helpers.dataset import DatasetSpec, write_dataset

    spec = DatasetSpec.load(args.spec) if args.spec else DatasetSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    write_dataset(spec, make_sure_dir_exists(args.out))


def _pipeline(args):
    from src.helpers.pipeline import load_config_and_input_data
    from src.pipeline import Pipeline

    config, dataset = load_config_and_input_data(
        args.config, overrides_from_args(args), data_root=args.data, output_dir=args.out,
    )
    return Pipeline(config, dataset)


def cmd_warmup(args):
    pipeline = _pipeline(args)
    pipeline.warmup(resume=args.resume)
    pipeline.plot()


def cmd_adapt(args):
    pipeline = _pipeline(args)
    pipeline.adapt(args.warmup, pairs_path=args.pairs, pseudo_dir=args.pseudo_labels, resume=args.resume)
    pipeline.plot()


def cmd_pair(args):
    pipeline = _pipeline(args)
    pipeline.pair(out_path=args.pairs_out)


def cmd_ablate(args):
    from src.helpers.plots import plot_ablation
    from src.pipeline import run_ablation

    pipeline = _pipeline(args)
    ablation = run_ablation(pipeline.config, pipeline.dataset, args.warmup, pairs_path=args.pairs)
    plot_ablation(ablation, pipeline.config.output_dir)


def cmd_eval(args):
    from src.helpers.dataset import Dataset
    from src.helpers.model import load_model
    from src.pipeline import Pipeline

    model, config, _ = load_model(args.ckpt)
    data_root = args.data or config.data_root
    if data_root is None:
        raise PLAdaptError('no dataset given: pass --data')
    out_dir = make_sure_dir_exists(args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), 'eval'))
    dataset = Dataset(data_root)
    pipeline = Pipeline(config.with_overrides({'output_dir': out_dir}), dataset)
    pipeline.model = model
    keys = {
        'target-val': dataset.target_val_keys,
        'target-train': dataset.target_train_keys,
        'source-val': pipeline.val_keys,
    }[args.split]
    report = pipeline.evaluate(keys, out_dir, paired=args.paired, overlays=args.overlays)
    print(report.tail(1).to_string(index=False))


def cmd_plot(args):
    import pandas as pd
    from src.helpers.plots import plot_training_log

    log_path = args.log if os.path.isfile(args.log) else os.path.join(args.log, TRAINING_LOG)
    out_dir = args.out or os.path.dirname(os.path.abspath(log_path))
    plot_training_log(pd.read_csv(log_path), out_dir)


def cmd_verify(args):
    from src.verify import inject_fault, run_verify

    if args.inject_fault:
        with inject_fault(args.inject_fault):
            passed = run_verify(args.suites, seed=args.seed)
    else:
        passed = run_verify(args.suites, seed=args.seed)
    if not passed:
        logger.error('verification failed')
        return EXIT_VERIFY_FAILED
    logger.info('all verification suites passed')


def _training_parser(subparsers, name, help, func):
    parser = subparsers.add_parser(name, help=help)
    parser.add_argument('-c', '--config', help='config file (key = value or json)')
    parser.add_argument('-d', '--data', help='dataset root produced by `generate`')
    parser.add_argument('-o', '--out', help='output directory')
    add_config_arguments(parser)
    parser.set_defaults(func=func)
    return parser


def build_parser():
    from src.verify import FAULTS, SUITES

    parser = argparse.ArgumentParser(prog='pladapt', description='Power-line segmentation domain adaptation')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    subparsers = parser.add_subparsers(dest='command', required=True)

    generate = subparsers.add_parser('generate', help='generate the two-domain dataset')
    generate.add_argument('-s', '--spec', default=default_scene if os.path.isfile(default_scene) else None)
    generate.add_argument('-o', '--out', required=True)
    generate.add_argument('--seed', type=int)
    generate.set_defaults(func=cmd_generate)

    warmup = _training_parser(subparsers, 'warmup', 'source-only warm-up and pseudo labels', cmd_warmup)
    warmup.add_argument('--resume', help=f'continue from a {WARMUP_CHECKPOINT}')

    adapt = _training_parser(subparsers, 'adapt', 'domain adaptation from a warm-up checkpoint', cmd_adapt)
    adapt.add_argument('-w', '--warmup', required=True, help=f'{WARMUP_CHECKPOINT} produced by `warmup`')
    adapt.add_argument('--pairs', help='persisted pair file from `pair`')
    adapt.add_argument('--pseudo-labels', help='pseudo-label directory (default: next to the warm-up checkpoint)')
    adapt.add_argument('--resume', help=f'continue from an {ADAPTED_CHECKPOINT}')

    pair = _training_parser(subparsers, 'pair', 'two-way SSIM pairing', cmd_pair)
    pair.add_argument('-p', '--pairs-out', required=True)

    ablate = _training_parser(subparsers, 'ablate', 'component and cross-attention ablations', cmd_ablate)
    ablate.add_argument('-w', '--warmup', required=True)
    ablate.add_argument('--pairs')

    evaluate = subparsers.add_parser('eval', help='source-free evaluation of a checkpoint')
    evaluate.add_argument('-k', '--ckpt', required=True)
    evaluate.add_argument('-d', '--data')
    evaluate.add_argument('-o', '--out')
    evaluate.add_argument('--split', default='target-val', choices=['target-val', 'target-train', 'source-val'])
    evaluate.add_argument('--paired', action='store_true', help='also report paired-inference IoU')
    evaluate.add_argument('--overlays', type=int, default=0, help='number of overlay figures to save')
    evaluate.set_defaults(func=cmd_eval)

    plot = subparsers.add_parser('plot', help='plot a training log')
    plot.add_argument('-l', '--log', required=True, help=f'{TRAINING_LOG} or the directory holding it')
    plot.add_argument('-o', '--out')
    plot.set_defaults(func=cmd_plot)

    verify = subparsers.add_parser('verify', help='run the property suites')
    verify.add_argument('--suites', nargs='+', choices=list(SUITES))
    verify.add_argument('--inject-fault', choices=list(FAULTS))
    verify.add_argument('--seed', type=int, default=0)
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logger(getattr(logging, args.log_level))
    try:
        code = args.func(args)
    except PLAdaptError as e:
        print(f'pladapt {args.command}: {e}', file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK if code is None else code


if __name__ == '__main__':
    sys.exit(main())
