# app/utils/formats.py
# Binary container formats: depth maps ("DC3D"), Gaussian clouds ("DC3G")
# and named-array checkpoints ("DC3K")

import json
import struct

import numpy as np

from app.utils.error_handler import DataProcessingError

DEPTH_MAGIC = b"DC3D"
CLOUD_MAGIC = b"DC3G"
CHECKPOINT_MAGIC = b"DC3K"
FORMAT_VERSION = 1


# === DEPTH MAPS ===

def write_depth(path, depth):
    """
    Write an H×W depth map: 16-byte header (magic, version, H, W) + float32 data
    """
    depth = np.asarray(depth, dtype='<f4')
    if depth.ndim != 2:
        raise DataProcessingError(f"depth map must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    with open(path, 'wb') as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack('<III', FORMAT_VERSION, h, w))
        f.write(depth.tobytes(order='C'))


def read_depth(path):
    """Read a depth map written by write_depth"""
    with open(path, 'rb') as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != DEPTH_MAGIC:
            raise DataProcessingError(f"{path} is not a DC3D depth file")
        version, h, w = struct.unpack('<III', header[4:])
        if version != FORMAT_VERSION:
            raise DataProcessingError(f"unsupported depth format version {version}")
        data = np.frombuffer(f.read(4 * h * w), dtype='<f4')
    if data.size != h * w:
        raise DataProcessingError(f"{path} is truncated")
    return data.reshape(h, w).astype(np.float32)


# === GAUSSIAN CLOUDS ===

CLOUD_FIELDS = (
    ('positions', 3), ('log_scales', 3), ('rotations', 4),
    ('opacity_logits', 1), ('colors', 3),
)


def write_cloud_arrays(path, arrays):
    """
    Write cloud attributes: header (magic, version, M, reserved) then the
    float64 attribute arrays in CLOUD_FIELDS order and a uint8 frozen mask
    """
    m = int(arrays['positions'].shape[0])
    with open(path, 'wb') as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack('<III', FORMAT_VERSION, m, 0))
        for name, width in CLOUD_FIELDS:
            block = np.asarray(arrays[name], dtype='<f8').reshape(m, width)
            f.write(block.tobytes(order='C'))
        f.write(np.asarray(arrays['frozen'], dtype=np.uint8).reshape(m).tobytes())


def read_cloud_arrays(path):
    """Read a cloud written by write_cloud_arrays"""
    with open(path, 'rb') as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != CLOUD_MAGIC:
            raise DataProcessingError(f"{path} is not a DC3G cloud file")
        version, m, _ = struct.unpack('<III', header[4:])
        if version != FORMAT_VERSION:
            raise DataProcessingError(f"unsupported cloud format version {version}")
        arrays = {}
        for name, width in CLOUD_FIELDS:
            raw = f.read(8 * m * width)
            arrays[name] = np.frombuffer(raw, dtype='<f8').reshape(m, width).copy()
        arrays['opacity_logits'] = arrays['opacity_logits'].reshape(m)
        arrays['frozen'] = np.frombuffer(f.read(m), dtype=np.uint8).astype(bool)
    return arrays


# === CHECKPOINTS ===

def write_named_arrays(path, arrays, meta):
    """
    Write named arrays with a JSON header listing dtype, shape and offset

    Layout: magic, u32 version, u64 header length, JSON header, raw bytes.
    The raw bytes are the exact memory of each array, so a round trip is bit exact.
    """
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        array = np.ascontiguousarray(arrays[name])
        blob = array.tobytes(order='C')
        entries.append({
            'name': name,
            'dtype': array.dtype.str,
            'shape': list(array.shape),
            'offset': offset,
            'nbytes': len(blob),
        })
        offset += len(blob)
        blobs.append(blob)

    header = json.dumps({'arrays': entries, 'meta': meta}, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<IQ', FORMAT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_named_arrays(path):
    """Read a checkpoint written by write_named_arrays → (arrays, meta)"""
    with open(path, 'rb') as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise DataProcessingError(f"{path} is not a DC3K checkpoint")
        version, header_len = struct.unpack('<IQ', f.read(12))
        if version != FORMAT_VERSION:
            raise DataProcessingError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode('utf-8'))
        payload = f.read()

    arrays = {}
    for entry in header['arrays']:
        start = entry['offset']
        raw = payload[start:start + entry['nbytes']]
        if len(raw) != entry['nbytes']:
            raise DataProcessingError(f"{path} is truncated at array {entry['name']}")
        arrays[entry['name']] = np.frombuffer(raw, dtype=np.dtype(entry['dtype'])).reshape(entry['shape']).copy()
    return arrays, header['meta']
