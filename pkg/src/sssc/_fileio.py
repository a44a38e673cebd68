"""Small file-output helpers shared by the persistence and CLI layers."""

import os
import tempfile
from datetime import datetime, timezone


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temp file and rename.

    Guarantees that ``path`` either keeps its previous content or holds the
    complete new content; no partial files survive a failure.
    """
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        try:
            os.unlink(tmp_path)
        except OSError:
            pass
        raise


def utc_timestamp():
    """ISO-8601 UTC timestamp; the only nondeterministic field in outputs."""
    return datetime.now(timezone.utc).isoformat()
