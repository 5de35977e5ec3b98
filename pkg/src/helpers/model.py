"""Checkpoint files and model construction helpers.

A checkpoint is a text manifest followed by one little-endian float64 buffer::

    PLADAPT-CKPT 1
    @ seed = 42              <- effective run config, one "@ key = value" line each
    encoder/stage1.embed.w<TAB>8,3,4,4
    ...
    END
    <raw data of every array in manifest order>
"""
import numpy as np

from src.autograd import no_tape
from src.config import RunConfig
from src.model import QuadFormer
from src.objectives import DiscriminatorWeights
from src.utils.errors import ContractError


MAGIC = 'PLADAPT-CKPT 1'
END = 'END'


def save_checkpoint(path, arrays, config=None):
    lines = [MAGIC]
    if config is not None:
        lines += [f'@ {line}' for line in config.dumps().splitlines()]
    buffers = []
    for name, value in arrays.items():
        if '\t' in name or '\n' in name:
            raise ContractError(f'array name {name!r} contains a tab or newline')
        value = np.ascontiguousarray(value, dtype='<f8')
        lines.append(f'{name}\t{",".join(str(d) for d in value.shape)}')
        buffers.append(value.tobytes())
    lines.append(END)
    with open(path, 'wb') as f:
        f.write(('\n'.join(lines) + '\n').encode('utf-8'))
        for buffer in buffers:
            f.write(buffer)


def load_checkpoint(path):
    """Returns (arrays, config or None)."""
    with open(path, 'rb') as f:
        data = f.read()
    end_marker = f'\n{END}\n'.encode('utf-8')
    split = data.find(end_marker)
    if not data.startswith(MAGIC.encode('utf-8')) or split < 0:
        raise ContractError(f'{path} is not a checkpoint')
    header = data[:split].decode('utf-8').splitlines()[1:]
    offset = split + len(end_marker)

    config_lines = [line[2:] for line in header if line.startswith('@ ')]
    arrays = {}
    for line in header:
        if line.startswith('@ '):
            continue
        name, shape_text = line.split('\t')
        shape = tuple(int(d) for d in shape_text.split(',')) if shape_text else ()
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 8 * count > len(data):
            raise ContractError(f'{path}: data for {name!r} truncated')
        arrays[name] = np.frombuffer(data, dtype='<f8', count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ContractError(f'{path}: {len(data) - offset} trailing bytes after the last array')
    config = RunConfig.loads('\n'.join(config_lines), source=path) if config_lines else None
    return arrays, config


def build_discriminator(config, seed_offset=1):
    rng = np.random.default_rng([config.seed, seed_offset])
    return DiscriminatorWeights(config.num_classes, config.disc_channels, rng, config.leaky_slope)


def load_model(path):
    """QuadFormer restored from a checkpoint, together with its config and raw arrays."""
    arrays, config = load_checkpoint(path)
    if config is None:
        raise ContractError(f'{path} carries no run config')
    model = QuadFormer.from_config(config)
    model.load_state(arrays)
    return model, config, arrays


def predict_labels(model, img):
    """Source-free class map at full image resolution."""
    with no_tape():
        _, height, width = img.shape
        return model.forward_single(img, domain='target').labels(height, width)


def predict_paired_labels(model, img_s, img_t):
    with no_tape():
        _, height, width = img_t.shape
        _, mask_t = model.forward(img_s, img_t)
        return mask_t.labels(height, width)
