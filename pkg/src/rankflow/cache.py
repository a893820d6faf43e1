"""Content-addressed store for role outputs (rewrites, answers, summaries).

Entries are keyed by sha256 over (role, template version, input text) and
laid out as ``<root>/<k[:2]>/<k[2:4]>/<k>.json``. Writes go to a temp file
that is then hard-linked into place, so the first writer of a key wins and
readers never see a partial file.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Protocol

from .errors import CacheUnavailableError, InvalidInputError

_HEX = set("0123456789abcdef")


def cache_key(role_name: str, template_version: str, input_text: str) -> str:
    canonical = json.dumps([role_name, template_version, input_text], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _check_key(key: str) -> None:
    if len(key) != 64 or not set(key) <= _HEX:
        raise InvalidInputError(f"malformed cache key {key!r}")


class Cache(Protocol):
    def get(self, key: str) -> str | None: ...

    def put(self, key: str, value: str, usage: Mapping[str, int] | None = None) -> None: ...


class MemoryCache:
    def __init__(self) -> None:
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> str | None:
        _check_key(key)
        return self._entries.get(key)

    def put(self, key: str, value: str, usage: Mapping[str, int] | None = None) -> None:
        _check_key(key)
        with self._lock:
            self._entries.setdefault(key, value)


class DiskCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, key: str) -> Path:
        _check_key(key)
        return self.root / key[:2] / key[2:4] / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self.path_for(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        except OSError as exc:
            raise CacheUnavailableError(f"cannot read {path}: {exc}") from exc
        try:
            return json.loads(raw)["value"]
        except (ValueError, KeyError) as exc:
            raise CacheUnavailableError(f"corrupt cache entry {path}") from exc

    def put(self, key: str, value: str, usage: Mapping[str, int] | None = None) -> None:
        path = self.path_for(key)
        if path.exists():
            return
        entry = {
            "key": key,
            "value": value,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "usage": dict(usage or {}),
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump(entry, fh, ensure_ascii=False)
                    fh.flush()
                    os.fsync(fh.fileno())
                try:
                    os.link(tmp, path)
                except FileExistsError:
                    pass
                except OSError:
                    # filesystems without hard links
                    if not path.exists():
                        os.replace(tmp, path)
            finally:
                if os.path.exists(tmp):
                    os.unlink(tmp)
        except OSError as exc:
            raise CacheUnavailableError(f"cannot write {path}: {exc}") from exc
