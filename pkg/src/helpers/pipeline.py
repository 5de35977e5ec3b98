import logging
import os

import numpy as np
import pandas as pd

from src.adaptation import Pair, PairSet, PseudoLabel, PseudoLabelSet
from src.config import RunConfig
from src.helpers.dataset import Dataset
from src.utils.common import make_sure_dir_exists
from src.utils.errors import ConfigError, ContractError
from src.utils.pnm import read_label, write_label


logger = logging.getLogger('pladapt.pipeline')

PAIR_COLUMNS = ['source', 'target', 'ssim']


def load_config_and_input_data(config_path=None, overrides=None, data_root=None, output_dir=None):
    """Load configuration file and dataset
    Parameters
    ----------
    config_path : string or None
        Path to config file (key = value text or json); None uses the built-in defaults.
    overrides : dict
        Raw flag values that win over the file.
    Returns
    -------
    RunConfig, Dataset
    """
    #
    logger.info('Loading config...')
    config = RunConfig.load(config_path) if config_path else RunConfig()
    config = config.with_overrides(overrides or {})
    if data_root is not None:
        config = config.with_overrides({'data_root': os.path.abspath(data_root)})
    if output_dir is not None:
        config = config.with_overrides({'output_dir': os.path.abspath(output_dir)})
    if config.data_root is None:
        raise ConfigError('no dataset given: set data_root in the config or pass --data')
    #
    dataset = Dataset(config.data_root)
    if dataset.spec.size != config.image_size:
        raise ConfigError(f'dataset images are {dataset.spec.size}px but image_size is {config.image_size}')
    #
    make_sure_dir_exists(config.output_dir)
    config.save(os.path.join(config.output_dir, 'config.txt'))
    #
    logger.info('Loaded config...')
    #
    return config, dataset


def _stem(key):
    return os.path.splitext(os.path.basename(key))[0]


def save_pseudo_labels(labels, out_dir):
    """Hard labels as PGM plus the full soft probabilities ([K, H, W], raw little-endian f64)."""
    make_sure_dir_exists(out_dir)
    for key, label in labels.items.items():
        write_label(os.path.join(out_dir, f'{_stem(key)}.pgm'), label.labels)
        np.ascontiguousarray(label.probs, dtype='<f8').tofile(os.path.join(out_dir, f'{_stem(key)}.f64'))


def load_pseudo_labels(keys, in_dir, num_classes, tau):
    labels = PseudoLabelSet(tau=tau)
    for key in keys:
        hard = read_label(os.path.join(in_dir, f'{_stem(key)}.pgm'))
        path = os.path.join(in_dir, f'{_stem(key)}.f64')
        if not os.path.isfile(path):
            raise ContractError(f'pseudo-label probabilities missing for {key}')
        probs = np.fromfile(path, dtype='<f8').astype(np.float64)
        if probs.size != num_classes * hard.size:
            raise ContractError(f'{path}: {probs.size} values do not fit {num_classes}x{hard.shape}')
        labels[key] = PseudoLabel.from_probs(probs.reshape((num_classes,) + hard.shape), tau)
    return labels


def write_pairs(pairs, path):
    df = pd.DataFrame([(p.source, p.target, p.ssim) for p in pairs], columns=PAIR_COLUMNS)
    df.to_csv(path, sep='\t', header=False, index=False, float_format='%.17g')


def read_pairs(path, dataset=None):
    """PairSet from a `source<TAB>target<TAB>ssim` file; absolute paths are made relative to the dataset."""
    try:
        df = pd.read_csv(path, sep='\t', header=None, names=PAIR_COLUMNS, dtype={'source': str, 'target': str})
    except (OSError, pd.errors.ParserError) as e:
        raise ConfigError(f'cannot read pairs from {path}: {e}') from e
    pairs = []
    for row in df.itertuples(index=False):
        source, target = row.source, row.target
        if dataset is not None:
            source, target = (os.path.relpath(p, dataset.root) if os.path.isabs(p) else p for p in (source, target))
        pairs.append(Pair(source, target, float(row.ssim), origin='file'))
    return PairSet(pairs)
