# services/tensor_io.py
import io
import json
import logging
import os
import tempfile
import zipfile
from typing import Dict, Any, Optional, Tuple

import numpy as np

from .error_handler import ArtifactIOError, CheckpointError, FeatureError

logger = logging.getLogger(__name__)

FTZ_KINDS = ('mel', 'pose', 'param')
_FTZ_DTYPE = np.dtype('<f4')

MANIFEST_NAME = 'manifest.json'
PARAMS_PREFIX = 'params/'


def encode_ftz(array: np.ndarray, kind: str, rate_hz: Optional[float] = None) -> bytes:
    """Serialize an array as FTZ1: one JSON header line, then little-endian float32 row-major"""
    if kind not in FTZ_KINDS:
        raise FeatureError(f"Unknown tensor kind '{kind}', expected one of {FTZ_KINDS}")

    array = np.asarray(array)
    if kind in ('mel', 'pose') and array.ndim != 2:
        raise FeatureError(f"A {kind} tensor must be 2-D [T x C], got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise FeatureError(f"Refusing to write non-finite values to a {kind} tensor")

    header = {
        'shape': [int(n) for n in array.shape],
        'dtype': 'f32',
        'rate_hz': None if rate_hz is None else float(rate_hz),
        'kind': kind,
    }
    payload = np.ascontiguousarray(array, dtype=_FTZ_DTYPE).tobytes(order='C')
    return json.dumps(header).encode('utf-8') + b'\n' + payload


def decode_ftz(blob: bytes, source: str = '<bytes>') -> Tuple[np.ndarray, Dict[str, Any]]:
    """Parse FTZ1 bytes into (array, header)"""
    newline = blob.find(b'\n')
    if newline < 0:
        raise FeatureError(f"{source}: missing FTZ1 header line")

    try:
        header = json.loads(blob[:newline].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FeatureError(f"{source}: invalid FTZ1 header: {e}") from e

    if header.get('dtype') != 'f32' or header.get('kind') not in FTZ_KINDS:
        raise FeatureError(f"{source}: unsupported FTZ1 header {header}")

    shape = tuple(int(n) for n in header.get('shape', ()))
    payload = blob[newline + 1:]
    expected = int(np.prod(shape, dtype=np.int64)) * _FTZ_DTYPE.itemsize
    if len(payload) != expected:
        raise FeatureError(f"{source}: payload has {len(payload)} bytes, header shape {shape} needs {expected}")

    array = np.frombuffer(payload, dtype=_FTZ_DTYPE).reshape(shape).astype(np.float32)
    return array, header


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over the target"""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, temp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
        try:
            with os.fdopen(fd, 'wb') as file:
                file.write(data)
                file.flush()
                os.fsync(file.fileno())
            os.replace(temp_path, path)
        except BaseException:
            if os.path.exists(temp_path):
                os.remove(temp_path)
            raise
    except OSError as e:
        raise ArtifactIOError(f"Failed to write {path}: {e}", path=path) from e


def write_ftz(path: str, array: np.ndarray, kind: str, rate_hz: Optional[float] = None) -> None:
    atomic_write_bytes(path, encode_ftz(array, kind, rate_hz))
    logger.debug(f"Wrote {kind} tensor {np.shape(array)} to {path}")


def read_ftz(path: str) -> Tuple[np.ndarray, Dict[str, Any]]:
    try:
        with open(path, 'rb') as file:
            blob = file.read()
    except OSError as e:
        raise ArtifactIOError(f"Failed to read {path}: {e}", path=path) from e
    return decode_ftz(blob, source=path)


def save_checkpoint(path: str, tensors: Dict[str, np.ndarray], manifest: Dict[str, Any]) -> None:
    """Write named parameter tensors (FTZ1) and a JSON manifest into one zip archive"""
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, 'w', compression=zipfile.ZIP_DEFLATED) as archive:
        archive.writestr(MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True))
        for name, array in tensors.items():
            archive.writestr(f"{PARAMS_PREFIX}{name}.ftz", encode_ftz(array, 'param'))

    atomic_write_bytes(path, buffer.getvalue())
    logger.info(f"Checkpoint with {len(tensors)} tensors written to {path}")


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read an archive written by save_checkpoint"""
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")

    tensors: Dict[str, np.ndarray] = {}
    try:
        with zipfile.ZipFile(path, 'r') as archive:
            names = archive.namelist()
            if MANIFEST_NAME not in names:
                raise CheckpointError(f"{path}: archive has no {MANIFEST_NAME}")
            manifest = json.loads(archive.read(MANIFEST_NAME).decode('utf-8'))

            for entry in names:
                if entry.startswith(PARAMS_PREFIX) and entry.endswith('.ftz'):
                    name = entry[len(PARAMS_PREFIX):-len('.ftz')]
                    tensors[name], _ = decode_ftz(archive.read(entry), source=f"{path}:{entry}")
    except (zipfile.BadZipFile, json.JSONDecodeError, FeatureError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint: {e}") from e

    logger.info(f"Loaded checkpoint {path} ({len(tensors)} tensors, step {manifest.get('step')})")
    return tensors, manifest
