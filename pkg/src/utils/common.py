import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt


LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def setup_logger(level=logging.INFO):
    logger = logging.getLogger('pladapt')
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)
    logger.setLevel(level)
    return logger


def save_plt_fig(name, format='png'):
    if format == 'tiff':
        plt.savefig(name, format=format, pil_kwargs={'compression': 'tiff_lzw'}, dpi=350)
    else:
        plt.savefig(name, format=format, dpi=350)
    plt.close()


def make_sure_dir_exists(dir_path):
    if not os.path.isdir(dir_path):
        os.makedirs(dir_path)

    return dir_path


def max_workers(default=None):
    """Worker cap from QF_THREADS, else `default` (or the CPU count)."""
    value = os.environ.get('QF_THREADS')
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logging.getLogger('pladapt.common').warning('ignoring non-integer QF_THREADS=%r', value)
    return default or os.cpu_count() or 1
