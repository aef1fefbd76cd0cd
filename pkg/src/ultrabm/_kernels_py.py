"""NumPy implementations of the compiled kernels in ``_kernels.pyx``."""
import numpy as np

_CHUNK = 512


def order_mismatch_count(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D with equal length")
    count = 0
    for start in range(0, a.size, _CHUNK):
        sa = a[start:start + _CHUNK, None] >= a[None, :]
        sb = b[start:start + _CHUNK, None] >= b[None, :]
        count += int(np.count_nonzero(sa != sb))
    return count
