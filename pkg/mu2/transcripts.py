from __future__ import annotations

import hashlib
import json
import logging
import threading
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .storage import append_jsonl, read_jsonl

logger = logging.getLogger(__name__)


def transcript_key(kind: str, request: Mapping[str, Any]) -> str:
    payload = json.dumps({"kind": kind, "request": request}, ensure_ascii=False, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class TranscriptStore:
    """Append-only JSON-lines log of request/response pairs keyed by a content hash."""

    def __init__(self, path: Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: Dict[str, Any] = {}
        if self.path.exists():
            for row in read_jsonl(self.path):
                self._entries[row["key"]] = row["response"]
            logger.debug("loaded %d transcripts from %s", len(self._entries), self.path)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, kind: str, request: Mapping[str, Any]) -> Optional[Any]:
        with self._lock:
            return self._entries.get(transcript_key(kind, request))

    def put(self, kind: str, request: Mapping[str, Any], response: Any) -> None:
        key = transcript_key(kind, request)
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            append_jsonl(self.path, {"key": key, "kind": kind, "request": dict(request), "response": response})
