from __future__ import annotations

import io
import json
import os
import tempfile
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from .errors import InvalidInputError

ModelT = TypeVar("ModelT", bound=BaseModel)

_registry_guard = threading.Lock()
_path_locks: Dict[Path, threading.Lock] = {}


@contextmanager
def serialized_writes(path: Path) -> Iterator[None]:
    """One writer at a time per target file within this process."""
    key = Path(path).resolve()
    with _registry_guard:
        lock = _path_locks.setdefault(key, threading.Lock())
    with lock:
        yield


def _plain(record: Any) -> Any:
    return record.model_dump(mode="json") if isinstance(record, BaseModel) else record


def dumps_record(record: Any) -> str:
    return json.dumps(_plain(record), ensure_ascii=False, sort_keys=True)


def read_jsonl(path: Path) -> List[dict]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise InvalidInputError(f"file not found: {path}") from exc
    rows = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}:{number}: invalid JSON ({exc.msg})") from exc
    return rows


def load_records(path: Path, model: Type[ModelT]) -> List[ModelT]:
    records = []
    for number, row in enumerate(read_jsonl(path), start=1):
        try:
            records.append(model.model_validate(row))
        except ValidationError as exc:
            raise InvalidInputError(f"{path}: record {number} is not a valid {model.__name__}: {exc}") from exc
    return records


def load_records_if_exists(path: Path, model: Type[ModelT]) -> List[ModelT]:
    return load_records(path, model) if Path(path).exists() else []


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    with serialized_writes(path):
        _atomic_write(path, data)


def write_jsonl(path: Path, records: Iterable[Any]) -> None:
    path = Path(path)
    body = "".join(dumps_record(record) + "\n" for record in records)
    write_bytes(path, body.encode("utf-8"))


def append_jsonl(path: Path, record: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with serialized_writes(path):
        with path.open("a", encoding="utf-8") as handle:
            handle.write(dumps_record(record) + "\n")


def write_json(path: Path, record: Any) -> None:
    path = Path(path)
    body = json.dumps(_plain(record), ensure_ascii=False, sort_keys=True, indent=2) + "\n"
    write_bytes(path, body.encode("utf-8"))


def read_lines(path: Path) -> List[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise InvalidInputError(f"file not found: {path}") from exc


def write_lines(path: Path, lines: Iterable[str]) -> None:
    write_bytes(path, "".join(line + "\n" for line in lines).encode("utf-8"))


def save_array(path: Path, array: np.ndarray) -> None:
    path = Path(path)
    buffer = io.BytesIO()
    np.save(buffer, np.ascontiguousarray(array), allow_pickle=False)
    write_bytes(path, buffer.getvalue())


def load_array(path: Path, expected_ndim: Optional[int] = None) -> np.ndarray:
    try:
        array = np.load(Path(path), allow_pickle=False)
    except FileNotFoundError as exc:
        raise InvalidInputError(f"file not found: {path}") from exc
    if expected_ndim is not None and array.ndim != expected_ndim:
        raise InvalidInputError(f"{path}: expected a rank-{expected_ndim} array, got shape {array.shape}")
    return array
