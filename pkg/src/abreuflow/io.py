"""Atomic file output."""
from __future__ import annotations

import os
import tempfile


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class AtomicCSV:
    """Line-buffered CSV stream that lands at ``path`` only when closed.

    Rows are flushed to a temporary sibling file as they are written; on
    close (normal or exceptional) the temporary file is renamed into place,
    so readers never observe a half-written file at ``path``.
    """

    def __init__(self, path, header_lines):
        self.path = os.fspath(path)
        d = os.path.dirname(os.path.abspath(self.path))
        fd, self._tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(self.path))
        self._fh = os.fdopen(fd, "w", encoding="utf-8", newline="\n")
        for line in header_lines:
            self._fh.write(line + "\n")
        self._fh.flush()
        self.rows = 0

    def write(self, fields):
        self._fh.write(",".join(fields) + "\n")
        self._fh.flush()
        self.rows += 1

    def close(self):
        if self._fh.closed:
            return
        self._fh.close()
        os.replace(self._tmp, self.path)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def fmt(x) -> str:
    """Round-trip float formatting used in every CSV."""
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    return f"{float(x):.17g}"
