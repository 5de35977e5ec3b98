"""Binary PGM (P5) and PPM (P6) reading and writing.

8-bit rasters round-trip bit-exactly. Float images in [0, 1] are quantized on write as
round(255 * x); reading returns raw samples, or floats divided by maxval via `read_image`.
"""
import numpy as np

from src.utils.errors import PnmParseError, ShapeError


WHITESPACE = b' \t\n\r\v\f'
CHANNELS = {b'P5': 1, b'P6': 3}


def _skip(data, pos):
    """Skip whitespace and comments; comments run from '#' to the end of the line."""
    while pos < len(data):
        if data[pos] in WHITESPACE:
            pos += 1
        elif data[pos] == ord('#'):
            while pos < len(data) and data[pos] not in b'\r\n':
                pos += 1
        else:
            break
    return pos


def _integer(data, pos, field):
    pos = _skip(data, pos)
    start = pos
    while pos < len(data) and data[pos:pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise PnmParseError(f'expected {field}', start)
    if pos < len(data) and data[pos] not in WHITESPACE and data[pos] != ord('#'):
        raise PnmParseError(f'unexpected byte after {field}', pos)
    return int(data[start:pos]), pos


def decode_pnm(data):
    """Parse P5/P6 bytes into (samples [H, W] or [H, W, 3], maxval)."""
    magic = data[:2]
    if magic not in CHANNELS:
        raise PnmParseError(f'unsupported magic {magic!r}', 0)
    width, pos = _integer(data, 2, 'width')
    height, pos = _integer(data, pos, 'height')
    maxval, pos = _integer(data, pos, 'maxval')
    if width < 1 or height < 1:
        raise PnmParseError(f'non-positive size {width}x{height}', pos)
    if not 1 <= maxval <= 65535:
        raise PnmParseError(f'maxval {maxval} outside [1, 65535]', pos)
    if pos >= len(data) or data[pos] not in WHITESPACE:
        raise PnmParseError('missing whitespace before raster', pos)
    pos += 1

    channels = CHANNELS[magic]
    dtype = np.dtype('>u2') if maxval > 255 else np.dtype('u1')
    expected = width * height * channels * dtype.itemsize
    if len(data) - pos < expected:
        raise PnmParseError(f'raster truncated: {len(data) - pos} of {expected} bytes', len(data))
    samples = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=pos)
    if np.any(samples > maxval):
        raise PnmParseError(f'sample exceeds maxval {maxval}', pos)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return samples.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def encode_pnm(samples, maxval=255):
    samples = np.asarray(samples)
    if samples.ndim == 2:
        magic = b'P5'
    elif samples.ndim == 3 and samples.shape[2] == 3:
        magic = b'P6'
    else:
        raise ShapeError(f'cannot encode samples of shape {samples.shape} as PNM')
    height, width = samples.shape[:2]
    dtype = np.dtype('>u2') if maxval > 255 else np.dtype('u1')
    header = b'%s\n%d %d\n%d\n' % (magic, width, height, maxval)
    return header + samples.astype(dtype).tobytes()


def read_pnm(path):
    with open(path, 'rb') as f:
        return decode_pnm(f.read())


def write_pnm(path, samples, maxval=255):
    with open(path, 'wb') as f:
        f.write(encode_pnm(samples, maxval))


def read_image(path):
    """[3, H, W] float64 image in [0, 1]."""
    samples, maxval = read_pnm(path)
    if samples.ndim == 2:
        samples = np.repeat(samples[..., None], 3, axis=2)
    return samples.transpose(2, 0, 1).astype(np.float64) / maxval


def write_image(path, image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f'expected a [3, H, W] image, got {image.shape}')
    write_pnm(path, np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0))


def read_label(path):
    samples, _ = read_pnm(path)
    if samples.ndim != 2:
        raise ShapeError(f'{path}: label maps must be PGM, got {samples.shape}')
    return samples.astype(np.uint8)


def write_label(path, label):
    write_pnm(path, np.asarray(label, dtype=np.uint8))
