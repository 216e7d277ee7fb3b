from __future__ import annotations

import io
import logging
from pathlib import Path
from typing import Dict, List, Mapping

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .errors import InvalidInputError
from .storage import write_bytes, write_json

logger = logging.getLogger(__name__)

_DTYPE = np.dtype("<f8")


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(..., ge=0)


class Manifest(BaseModel):
    dtype: str = _DTYPE.str
    tensors: List[TensorEntry] = Field(default_factory=list)


def manifest_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_params(path: Path, params: Mapping[str, np.ndarray]) -> Path:
    """Write every tensor as little-endian float64 into one flat file plus a JSON manifest."""
    path = Path(path)
    manifest = Manifest()
    buffer = io.BytesIO()
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype=_DTYPE)
        manifest.tensors.append(TensorEntry(name=name, shape=list(data.shape), offset=buffer.tell()))
        buffer.write(data.tobytes())
    offset = buffer.tell()
    write_bytes(path, buffer.getvalue())
    write_json(manifest_path(path), manifest)
    logger.info("wrote %d tensors (%d bytes) to %s", len(manifest.tensors), offset, path)
    return path


def load_params(path: Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
        manifest = Manifest.model_validate_json(manifest_path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise InvalidInputError(f"checkpoint not found: {exc.filename}") from exc
    except ValidationError as exc:
        raise InvalidInputError(f"checkpoint manifest for {path} is invalid: {exc}") from exc
    if np.dtype(manifest.dtype) != _DTYPE:
        raise InvalidInputError(f"unsupported checkpoint dtype {manifest.dtype}")

    params: Dict[str, np.ndarray] = {}
    for entry in manifest.tensors:
        count = int(np.prod(entry.shape, dtype=np.int64))
        end = entry.offset + count * _DTYPE.itemsize
        if end > len(raw):
            raise InvalidInputError(f"checkpoint {path} is truncated at tensor {entry.name}")
        params[entry.name] = np.frombuffer(raw, dtype=_DTYPE, count=count, offset=entry.offset).reshape(entry.shape).copy()
    return params
