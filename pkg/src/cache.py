"""
Content-addressed result cache.

Records live at <root>/<key[:2]>/<key>.json next to a checksum of their
canonical bytes. Writers go through a temporary file in the same directory
and os.replace, so readers see either nothing or a complete record.
"""

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from .errors import CacheError
from .models import ResultRecord

logger = logging.getLogger(__name__)


def record_key(operation: str, inputs: Dict[str, Any], version: str) -> str:
    """Key of a record: hash of the operation, its canonical inputs and the toolkit version."""
    payload = json.dumps({"operation": operation, "inputs": inputs, "version": version}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def record_path(root: Path, key: str) -> Path:
    return Path(root) / key[:2] / f"{key}.json"


def cache_put(record: ResultRecord, root: Path) -> Path:
    """Atomically store a record; concurrent writers of one key leave exactly one valid file."""
    target = record_path(root, record.key)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        document = {"checksum": record.checksum(), "record": record.model_dump(mode="json")}
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".json", dir=target.parent)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                json.dump(document, handle, sort_keys=True)
                handle.flush()
                os.fsync(handle.fileno())
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    except OSError as e:
        raise CacheError(f"cannot write record {record.key}: {e}") from e
    logger.debug("cached %s record %s", record.operation, record.key)
    return target


def cache_get(key: str, root: Path) -> Optional[ResultRecord]:
    """Stored record for `key`, or None on a miss; corrupt records count as misses."""
    path = record_path(root, key)
    if not path.exists():
        return None
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
        record = ResultRecord.model_validate(document["record"])
    except (OSError, ValueError, KeyError, TypeError, ValidationError) as e:
        logger.warning("discarding corrupt cache record %s: %s", path, e)
        return None
    if record.key != key or record.checksum() != document.get("checksum"):
        logger.warning("discarding cache record %s: checksum mismatch", path)
        return None
    return record


def iter_records(root: Path) -> List[ResultRecord]:
    """All valid records under `root`, ordered by (operation, key)."""
    root = Path(root)
    if not root.exists():
        return []
    records = []
    for path in sorted(root.glob("??/*.json")):
        record = cache_get(path.stem, root)
        if record is not None:
            records.append(record)
    return sorted(records, key=lambda r: (r.operation, r.key))
