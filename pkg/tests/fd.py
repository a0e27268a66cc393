"""Central finite-difference oracle, independent of the autodiff engine."""
import numpy as np

STEP = 1e-5


def numeric_grad(f, arr, step=STEP, max_entries=None, rng=None):
    """d f() / d arr by central differences; ``f`` re-reads ``arr`` in place.

    With ``max_entries`` only a random subset of entries is probed; the
    returned mask marks which ones.
    """
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_entries, replace=False)
    grad = np.zeros(flat.size)
    mask = np.zeros(flat.size, dtype=bool)
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        grad[i] = (fp - fm) / (2 * step)
        mask[i] = True
    return grad.reshape(arr.shape), mask.reshape(arr.shape)


def max_rel_error(analytic, numeric, mask=None, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if mask is not None:
        a, n = a[mask], n[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
