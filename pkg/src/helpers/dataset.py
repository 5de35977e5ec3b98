import logging
import os
from dataclasses import dataclass
from typing import Tuple

from tqdm import tqdm

from src.config import from_values, parse_text, serialize
from src.scene import Appearance, SceneSpec, generate_domain
from src.utils.common import make_sure_dir_exists
from src.utils.errors import ConfigError
from src.utils.pnm import read_image, read_label, write_image, write_label


logger = logging.getLogger('pladapt.dataset')

SPEC_FILE = 'spec.txt'


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 42
    size: int = 64
    n_source: int = 200
    n_target: int = 250
    n_val: int = 50
    lines: Tuple[int, ...] = (1, 3)
    widths: Tuple[int, ...] = (1, 3)
    source_backgrounds: Tuple[str, ...] = ('flat', 'gradient')
    source_background_level: Tuple[float, ...] = (0.6, 0.95)
    source_line_contrast: Tuple[float, ...] = (0.45, 0.7)
    source_tint: float = 0.05
    source_noise_std: float = 0.0
    target_backgrounds: Tuple[str, ...] = ('noise',)
    target_background_level: Tuple[float, ...] = (0.2, 0.5)
    target_line_contrast: Tuple[float, ...] = (0.08, 0.2)
    target_tint: float = 0.15
    target_noise_std: float = 0.02

    def __post_init__(self):
        if self.n_source < 1 or self.n_target < 1 or not 0 <= self.n_val < self.n_target:
            raise ConfigError(f'bad dataset counts: {self.n_source} source, {self.n_target} target, {self.n_val} val')

    def scene(self, domain):
        appearance = Appearance(
            backgrounds=getattr(self, f'{domain}_backgrounds'),
            background_level=getattr(self, f'{domain}_background_level'),
            line_contrast=getattr(self, f'{domain}_line_contrast'),
            tint=getattr(self, f'{domain}_tint'),
            noise_std=getattr(self, f'{domain}_noise_std'),
        )
        return SceneSpec(domain, appearance, self.size, tuple(self.lines), tuple(self.widths), self.seed)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return from_values(cls, parse_text(f.read(), path), source=path)
        except OSError as e:
            raise ConfigError(f'cannot open dataset spec {path}: {e}') from e


def image_key(domain, index):
    return f'{domain}/images/{index:04d}.ppm'


def label_key(key):
    domain, _, name = key.split('/')
    return f'{domain}/labels/{os.path.splitext(name)[0]}.pgm'


def write_dataset(spec, root):
    """Generate both domains into `root`; returns the number of image files written."""
    written = 0
    for domain, n in (('source', spec.n_source), ('target', spec.n_target)):
        make_sure_dir_exists(os.path.join(root, domain, 'images'))
        make_sure_dir_exists(os.path.join(root, domain, 'labels'))
        for sample in tqdm(generate_domain(spec.scene(domain), n), desc=f'writing {domain}', leave=False):
            key = image_key(domain, sample.id)
            write_image(os.path.join(root, key), sample.image)
            write_label(os.path.join(root, label_key(key)), sample.label)
            written += 1
    with open(os.path.join(root, SPEC_FILE), 'w') as f:
        f.write(serialize(spec))
    logger.info('wrote %d images to %s', written, root)
    return written


class Dataset:
    """Read access to a generated dataset; the last `n_val` target ids form the validation split."""

    def __init__(self, root):
        self.root = root
        spec_path = os.path.join(root, SPEC_FILE)
        if not os.path.isfile(spec_path):
            raise ConfigError(f'{root} holds no {SPEC_FILE}; run `pladapt generate` first')
        self.spec = DatasetSpec.load(spec_path)
        n_train = self.spec.n_target - self.spec.n_val
        self.source_keys = [image_key('source', i) for i in range(self.spec.n_source)]
        self.target_train_keys = [image_key('target', i) for i in range(n_train)]
        self.target_val_keys = [image_key('target', i) for i in range(n_train, self.spec.n_target)]

    def path(self, key):
        return os.path.join(self.root, key)

    def image(self, key):
        return read_image(self.path(key))

    def label(self, key):
        return read_label(os.path.join(self.root, label_key(key)))

    def images(self, keys):
        return [(key, self.image(key)) for key in keys]
