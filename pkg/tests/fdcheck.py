"""Central finite differences, the oracle for every gradient test."""

import numpy as np

STEP = 1e-5


def numeric_grad(f, x: np.ndarray, coords=None, step: float = STEP, points: int = 3) -> np.ndarray:
    """d f / d x at the requested flat coordinates (all of them by default).

    ``points=5`` uses the fourth-order stencil, which tolerates a larger step
    and so keeps round-off small when the true derivative is tiny.
    """
    if points == 5:
        return _five_point(f, x, coords, step)
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        out.append((hi - lo) / (2 * step))
    return np.array(out)


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _five_point(f, x, coords, step):
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        orig = flat[i]
        vals = []
        for k in (2, 1, -1, -2):
            flat[i] = orig + k * step
            vals.append(f(x))
        flat[i] = orig
        out.append((-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step))
    return np.array(out)
