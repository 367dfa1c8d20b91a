import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))


def central_diff(fn, arr, step=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    for ix in np.ndindex(arr.shape):
        old = arr[ix]
        arr[ix] = old + step
        up = fn()
        arr[ix] = old - step
        down = fn()
        arr[ix] = old
        out[ix] = (up - down) / (2 * step)
    return out


def rel_err(a, b, floor=1e-8):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if max(na, nb) < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / max(na, nb))
