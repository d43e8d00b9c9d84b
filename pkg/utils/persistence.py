"""Binary tensor files with JSON sidecars, kept under one output directory."""
import logging
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from models.data import FeatureMatrix, GeneratorSpec, LabeledImages
from models.errors import ConfigError, FormatError
from models.network import ModelSpec, ParameterVector
from utils import helpers

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'DPRP'
DATASET_MAGIC = b'DPRI'
FEATURES_MAGIC = b'DPRF'
FORMAT_VERSION = 1

_F64 = np.dtype('<f8')


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.json')


def _check_header(blob: bytes, magic: bytes, path: Path) -> int:
    if len(blob) < 6 or blob[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {blob[:4]!r}")
    (version,) = struct.unpack_from('<H', blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    return 6


def _payload(blob: bytes, offset: int, count: int, path: Path) -> np.ndarray:
    expected = offset + count * _F64.itemsize
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob) - offset} bytes, expected {expected - offset}")
    return np.frombuffer(blob, dtype=_F64, count=count, offset=offset).astype(np.float64)


def encode_checkpoint(params: ParameterVector) -> bytes:
    """
    DPRP layout: magic, u16 version, u32 segment count, then per segment
    u16 name length, name bytes, u8 rank, u32 dims; then every segment as
    little-endian float64 in table order.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack('<HI', FORMAT_VERSION, len(params.layout))]
    for name, shape in params.layout:
        raw = name.encode('utf-8')
        parts.append(struct.pack('<H', len(raw)))
        parts.append(raw)
        parts.append(struct.pack('<B', len(shape)))
        parts.append(struct.pack(f'<{len(shape)}I', *shape))
    parts.append(params.values.astype(_F64).tobytes())
    return b''.join(parts)


def decode_checkpoint(blob: bytes, path: Path = Path('<bytes>')) -> ParameterVector:
    offset = _check_header(blob, CHECKPOINT_MAGIC, path)
    try:
        (count,) = struct.unpack_from('<I', blob, offset)
        offset += 4
        layout = []
        for _ in range(count):
            (name_len,) = struct.unpack_from('<H', blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (rank,) = struct.unpack_from('<B', blob, offset)
            offset += 1
            dims = struct.unpack_from(f'<{rank}I', blob, offset)
            offset += 4 * rank
            layout.append((name, tuple(int(d) for d in dims)))
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: corrupt segment table: {e}") from e
    size = sum(int(np.prod(shape)) for _, shape in layout)
    return ParameterVector(values=_payload(blob, offset, size, path), layout=tuple(layout))


def encode_images(inputs: np.ndarray, image_size: int, channels: int) -> bytes:
    n = inputs.shape[0]
    header = DATASET_MAGIC + struct.pack('<HIIII', FORMAT_VERSION, n, image_size, image_size, channels)
    return header + np.ascontiguousarray(inputs, dtype=_F64).tobytes()


def decode_images(blob: bytes, path: Path = Path('<bytes>')) -> Tuple[np.ndarray, int, int]:
    offset = _check_header(blob, DATASET_MAGIC, path)
    try:
        n, h, w, c = struct.unpack_from('<IIII', blob, offset)
    except struct.error as e:
        raise FormatError(f"{path}: truncated header") from e
    if h != w:
        raise FormatError(f"{path}: only square images are stored, got {h}x{w}")
    rows = _payload(blob, offset + 16, n * h * w * c, path)
    return rows.reshape(n, h * w * c), h, c


def encode_features(rows: np.ndarray) -> bytes:
    n, d = rows.shape
    header = FEATURES_MAGIC + struct.pack('<HII', FORMAT_VERSION, n, d)
    return header + np.ascontiguousarray(rows, dtype=_F64).tobytes()


def decode_features(blob: bytes, path: Path = Path('<bytes>')) -> np.ndarray:
    offset = _check_header(blob, FEATURES_MAGIC, path)
    try:
        n, d = struct.unpack_from('<II', blob, offset)
    except struct.error as e:
        raise FormatError(f"{path}: truncated header") from e
    return _payload(blob, offset + 8, n * d, path).reshape(n, d)


class ArtifactStore:
    """Read and write run artifacts, refusing paths outside the root."""

    def __init__(self, root: Union[str, Path]):
        """
        Initialize artifact store.

        Args:
            root: Output directory every write must stay inside
        """
        self.root = Path(root).resolve()

    def path(self, relative: Union[str, Path]) -> Path:
        target = (self.root / relative).resolve()
        if target != self.root and self.root not in target.parents:
            raise ConfigError(f"{relative} resolves outside the output directory {self.root}")
        return target

    def _write(self, relative: Union[str, Path], blob: bytes, sidecar: dict) -> Path:
        target = self.path(relative)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(blob)
        helpers.write_json(sidecar_path(target), sidecar)
        logger.info(f"Wrote {target} ({len(blob)} bytes)")
        return target

    def _read(self, path: Union[str, Path]) -> Tuple[Path, bytes, dict]:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"file not found: {path}")
        meta_path = sidecar_path(path)
        meta = helpers.read_json(meta_path) if meta_path.exists() else {}
        return path, path.read_bytes(), meta

    def save_checkpoint(self, relative: Union[str, Path], spec: ModelSpec, params: ParameterVector,
                        seed: int, provenance: Optional[dict] = None) -> Path:
        """
        Save model parameters.

        Args:
            relative: File name under the root
            spec: Model description stored in the sidecar
            params: Parameters to save
            seed: Seed that produced them
            provenance: Extra training provenance

        Returns:
            Path of the checkpoint
        """
        if params.layout != spec.layout():
            raise ConfigError("parameter layout does not match the model description")
        blob = encode_checkpoint(params)
        sidecar = {
            'model': spec.to_dict(),
            'seed': seed,
            'provenance': provenance or {},
            'content_hash': helpers.content_hash(blob),
        }
        return self._write(relative, blob, sidecar)

    def load_checkpoint(self, path: Union[str, Path]) -> Tuple[ModelSpec, ParameterVector, dict]:
        path, blob, meta = self._read(path)
        params = decode_checkpoint(blob, path)
        if 'model' not in meta:
            raise FormatError(f"{path}: sidecar has no model description")
        spec = ModelSpec.from_dict(meta['model'])
        if spec.layout() != params.layout:
            raise FormatError(f"{path}: segment table does not match the stored model description")
        logger.info(f"Loaded checkpoint {path} ({params.size} parameters)")
        return spec, params, meta

    def save_dataset(self, relative: Union[str, Path], data: LabeledImages,
                     generator: Optional[GeneratorSpec] = None, seed: int = 0) -> Path:
        blob = encode_images(data.inputs, data.image_size, data.channels)
        sidecar = {
            'generator': generator.to_dict() if generator is not None else None,
            'seed': seed,
            'labels': data.labels.tolist(),
            'meta': data.meta or {},
            'content_hash': helpers.content_hash(blob),
        }
        return self._write(relative, blob, sidecar)

    def load_dataset(self, path: Union[str, Path]) -> LabeledImages:
        path, blob, meta = self._read(path)
        rows, size, channels = decode_images(blob, path)
        labels = np.asarray(meta.get('labels') or np.zeros(rows.shape[0]), dtype=np.int64)
        return LabeledImages(inputs=rows, labels=labels, image_size=size, channels=channels,
                             meta=meta.get('meta'))

    def save_features(self, relative: Union[str, Path], features: FeatureMatrix,
                      preproc: Optional[dict] = None) -> Path:
        blob = encode_features(features.rows)
        sidecar = {
            'provenance': features.provenance,
            'preproc': preproc,
            'content_hash': helpers.content_hash(blob),
        }
        return self._write(relative, blob, sidecar)

    def load_features(self, path: Union[str, Path]) -> FeatureMatrix:
        path, blob, meta = self._read(path)
        return FeatureMatrix(rows=decode_features(blob, path), provenance=meta.get('provenance', {}))

    def save_json(self, relative: Union[str, Path], data) -> Path:
        return helpers.write_json(self.path(relative), data)
