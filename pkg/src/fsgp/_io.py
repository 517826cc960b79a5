"""Atomic archive writes shared by the basis and checkpoint formats."""

import os
import tempfile

import numpy as np


def atomic_savez(path, arrays):
    """Write ``arrays`` as an uncompressed ``.npz`` via write-temp-then-rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".npz", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
