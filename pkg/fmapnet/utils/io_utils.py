"""
File input and output helpers.

Text inputs are decoded line by line so bad bytes are reported with their
line number. All files produced by the pipeline are written to a temporary file in the
destination directory and renamed into place, so an interrupted run never
leaves a truncated cache behind.
"""

import os
import hashlib
import tempfile
from contextlib import contextmanager

import numpy as np

from ..errors import DataError, MeshParseError


def ensure_dir(path):
    """Create a directory (and parents) if it does not exist yet."""
    if path and not os.path.exists(path):
        os.makedirs(path, exist_ok=True)
    return path


@contextmanager
def atomic_path(path):
    """
    Yield a temporary path next to ``path``; rename it onto ``path`` on success.

    Args:
        path (str): Final destination

    Yields:
        str: Temporary file path to write to
    """
    directory = os.path.dirname(os.path.abspath(path))
    ensure_dir(directory)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", suffix=os.path.basename(path), dir=directory)
    os.close(fd)
    try:
        yield tmp_path
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


@contextmanager
def atomic_write(path, mode="w"):
    """
    Open a file handle whose contents replace ``path`` only once the block exits cleanly.

    Args:
        path (str): Final destination
        mode (str): 'w' for text, 'wb' for binary
    """
    with atomic_path(path) as tmp_path:
        with open(tmp_path, mode) as fh:
            yield fh


def read_text_lines(path, error_type=DataError):
    """
    Read a UTF-8 text file into lines, keeping line endings.

    Args:
        path (str): File to read
        error_type (type): DataError subclass raised for undecodable bytes;
            MeshParseError gets the path and line number as attributes

    Returns:
        list: Decoded lines

    Raises:
        OSError: the file cannot be opened
    """
    with open(path, 'rb') as fh:
        raw = fh.read()
    lines = []
    for number, line in enumerate(raw.splitlines(keepends=True), start=1):
        try:
            lines.append(line.decode("utf-8"))
        except UnicodeDecodeError as e:
            message = f"not valid UTF-8 text (byte {line[e.start]:#04x} at column {e.start + 1})"
            if issubclass(error_type, MeshParseError):
                raise error_type(message, path=path, line_number=number)
            raise error_type(f"{path}:{number}: {message}")
    return lines


def array_hash(*arrays, extra=""):
    """
    SHA-256 over the raw bytes, dtype and shape of the given arrays.

    Args:
        *arrays: numpy arrays to hash
        extra (str): Additional text mixed into the digest (e.g. settings)

    Returns:
        str: Hex digest
    """
    digest = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    digest.update(extra.encode())
    return digest.hexdigest()
