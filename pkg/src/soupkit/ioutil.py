"""Shared file and number-formatting helpers."""

from __future__ import annotations

import os
import tempfile


def fmt17(x: float) -> str:
    """Format a float with 17 significant digits (lossless round trip)."""
    return format(float(x), ".17g")


def fmt6(x: float) -> str:
    """Format a float with 6 significant digits, the precision used in graphics."""
    return format(float(x), ".6g")


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write a file via a temp sibling plus rename so readers never see partial content."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=os.path.basename(path) + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
