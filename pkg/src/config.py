"""Run configuration: every hyperparameter and ablation toggle, plus the `key = value` text format."""
import argparse
import json
import logging
import os
import typing
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional, Tuple

from src.utils.errors import ConfigError


logger = logging.getLogger('pladapt.config')


def parse_text(text, source='<config>'):
    """`key = value` lines into a dict of raw strings; `#` starts a comment."""
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'{source}:{number}: expected "key = value", got {raw.strip()!r}')
        key, value = (part.strip() for part in line.split('=', 1))
        if not key:
            raise ConfigError(f'{source}:{number}: empty key')
        if key in values:
            raise ConfigError(f'{source}:{number}: duplicate key {key!r}')
        values[key] = value
    return values


def _coerce_scalar(kind, value, key):
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            lowered = str(value).lower()
            if lowered not in ('true', 'false'):
                raise ValueError(value)
            return lowered == 'true'
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f'{key}: cannot read {value!r} as {kind.__name__}') from None


def coerce(annotation, value, key):
    """Convert a raw string (or a JSON value) to the annotated field type."""
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        if value is None or str(value).lower() in ('', 'none'):
            return None
        inner = [a for a in typing.get_args(annotation) if a is not type(None)][0]
        return coerce(inner, value, key)
    if origin is tuple:
        kind = typing.get_args(annotation)[0]
        items = value if isinstance(value, (list, tuple)) else [v.strip() for v in str(value).split(',') if v.strip()]
        return tuple(_coerce_scalar(kind, item, key) for item in items)
    return _coerce_scalar(annotation, value, key)


def format_value(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ', '.join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def from_values(cls, values, base=None, source='<config>'):
    """Build dataclass `cls` from raw values on top of `base` (or the defaults); unknown keys fail."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f'{source}: unknown keys {unknown}')
    parsed = {key: coerce(hints[key], value, key) for key, value in values.items()}
    return replace(base, **parsed) if base is not None else cls(**parsed)


def serialize(obj):
    return ''.join(f'{f.name} = {format_value(getattr(obj, f.name))}\n' for f in fields(obj))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    image_size: int = 64
    crop_size: int = 64
    # encoder
    channels: Tuple[int, ...] = (8, 16, 32, 64)
    depths: Tuple[int, ...] = (1, 1, 1, 1)
    heads: Tuple[int, ...] = (1, 1, 2, 4)
    reductions: Tuple[int, ...] = (8, 4, 2, 1)
    patch_size: int = 4
    mlp_ratio: int = 4
    shared_cross_weights: bool = True
    # decoder
    embed_dim: int = 64
    num_classes: int = 2
    shared_decoder: bool = True
    decoder_extra_layer: bool = False
    # discriminator
    disc_channels: Tuple[int, ...] = (8, 16, 32, 64, 1)
    leaky_slope: float = 0.2
    # pseudo labels
    tau: float = 0.9
    temperature: float = 1.0
    ema_momentum: float = 0.9999
    # losses
    beta1: float = 0.1
    beta2: float = 1.0
    class_weighting: bool = True
    pl_weight: float = 10.0
    # optimisation
    lr: float = 1e-3
    disc_lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 150
    iterations: int = 4000
    warmup_iterations: int = 500
    batch_size: int = 2
    # ablation toggles
    self_training: bool = True
    adversarial: bool = True
    label_correction: bool = True
    cross_source: bool = True
    cross_target: bool = True
    two_way_pairing: bool = True
    # bookkeeping
    source_val_fraction: float = 0.1
    eval_every: int = 500
    log_every: int = 50
    data_root: Optional[str] = None
    output_dir: str = 'output'

    def __post_init__(self):
        stages = len(self.channels)
        if not stages == len(self.depths) == len(self.heads) == len(self.reductions):
            raise ConfigError('channels, depths, heads and reductions must have one entry per stage')
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f'tau must lie in [0, 1], got {self.tau}')
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError(f'ema_momentum must lie in [0, 1), got {self.ema_momentum}')
        if self.temperature <= 0:
            raise ConfigError(f'temperature must be positive, got {self.temperature}')
        if stages < 1 or self.patch_size < 1:
            raise ConfigError('the encoder needs at least one stage and a positive patch_size')
        if self.crop_size > self.image_size:
            raise ConfigError(f'crop_size {self.crop_size} exceeds image_size {self.image_size}')
        multiple = self.size_multiple
        for key in ('image_size', 'crop_size'):
            value = getattr(self, key)
            if value < 1 or value % multiple:
                raise ConfigError(f'{key} {value} must be a positive multiple of {multiple} '
                                  f'(patch_size x 2^(stages - 1))')
        if self.eval_every < 0 or self.log_every < 0:
            raise ConfigError('eval_every and log_every must be >= 0 (0 disables)')
        if self.batch_size < 1 or self.iterations < 1 or self.warmup_iterations < 1:
            raise ConfigError('batch_size, iterations and warmup_iterations must be positive')
        if not 0.0 <= self.source_val_fraction < 1.0:
            raise ConfigError(f'source_val_fraction must lie in [0, 1), got {self.source_val_fraction}')

    @property
    def size_multiple(self):
        return self.patch_size * 2 ** (len(self.channels) - 1)

    @property
    def class_weights(self):
        if not self.class_weighting:
            return None
        return (1.0,) + (self.pl_weight,) * (self.num_classes - 1)

    def dumps(self):
        return serialize(self)

    def save(self, path):
        with open(path, 'w') as f:
            f.write(self.dumps())

    @classmethod
    def loads(cls, text, source='<config>'):
        return from_values(cls, parse_text(text, source), source=source)

    @classmethod
    def load(cls, path):
        """Read a `.txt` (key = value) or `.json` config; relative paths resolve against its directory."""
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f'cannot open configuration file {path}: {e}') from e
        if path.endswith('.json'):
            try:
                values = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f'{path}: {e}') from e
        else:
            values = parse_text(text, path)
        config = from_values(cls, values, source=path)
        return config.resolve_paths(os.path.dirname(os.path.abspath(path)))

    def resolve_paths(self, base_dir):
        data_root = self.data_root
        if data_root is not None and not os.path.isabs(data_root):
            data_root = os.path.join(base_dir, data_root)
        output_dir = self.output_dir if os.path.isabs(self.output_dir) else os.path.join(base_dir, self.output_dir)
        return replace(self, data_root=data_root, output_dir=output_dir)

    def with_overrides(self, values):
        return from_values(type(self), values, base=self, source='<flags>') if values else self

    def to_dict(self):
        return asdict(self)


def add_config_arguments(parser):
    """Expose every RunConfig field as --field-name; omitted flags are left out of the namespace."""
    group = parser.add_argument_group('configuration overrides')
    for f in fields(RunConfig):
        group.add_argument(f'--{f.name.replace("_", "-")}', dest=f'cfg_{f.name}', default=argparse.SUPPRESS,
                           metavar=f.name.upper())


def overrides_from_args(args):
    return {key[len('cfg_'):]: value for key, value in vars(args).items() if key.startswith('cfg_')}
