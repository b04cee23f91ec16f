"""Central finite differences with one level of Richardson extrapolation.

All stencils here are second-order accurate; combining steps ``h`` and
``h/2`` as ``(4 D(h/2) - D(h)) / 3`` removes the leading error term.
"""

import itertools

import numpy as np

MAX_ORDER = 4

# (offsets, weights) of the second-order central stencil for the k-th derivative
_STENCILS = {
    0: (np.array([0]), np.array([1.0])),
    1: (np.array([-1, 1]), np.array([-0.5, 0.5])),
    2: (np.array([-1, 0, 1]), np.array([1.0, -2.0, 1.0])),
    3: (np.array([-2, -1, 1, 2]), np.array([-0.5, 1.0, -1.0, 0.5])),
    4: (np.array([-2, -1, 0, 1, 2]), np.array([1.0, -4.0, 6.0, -4.0, 1.0])),
}


def default_step(order, scale=1.0):
    """Step balancing Richardson-reduced truncation against rounding."""
    return scale * np.finfo(float).eps ** (1.0 / (order + 4))


def _raw_partial(func, x, alpha, h):
    grids = [_STENCILS[a] for a in alpha]
    total = 0.0
    for combo in itertools.product(*[range(len(g[0])) for g in grids]):
        w = 1.0
        shift = np.zeros_like(x)
        for axis, idx in enumerate(combo):
            offsets, weights = grids[axis]
            w *= weights[idx]
            shift[axis] = offsets[idx] * h
        if w != 0.0:
            total = total + w * np.asarray(func(x + shift), dtype=float)
    return total / h ** sum(alpha)


def partial_derivative(func, x, alpha, h=None, scale=1.0):
    """Mixed partial derivative ``d^alpha func(x)`` and an error estimate.

    ``func`` may be vector valued. Orders above :data:`MAX_ORDER` per axis
    are rejected.
    """
    x = np.asarray(x, dtype=float)
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != x.size:
        raise ValueError("multi-index length must match the dimension of x")
    if any(a < 0 or a > MAX_ORDER for a in alpha):
        raise ValueError(f"per-axis order must lie in [0, {MAX_ORDER}]")
    order = sum(alpha)
    if order == 0:
        return np.asarray(func(x), dtype=float), 0.0
    if h is None:
        h = default_step(order, scale)
    coarse = _raw_partial(func, x, alpha, h)
    fine = _raw_partial(func, x, alpha, h / 2)
    value = (4.0 * fine - coarse) / 3.0
    err = float(np.max(np.abs(fine - coarse))) / 3.0
    return value, err


def multi_indices(n, order):
    """All multi-indices of total degree ``order`` in ``n`` variables."""
    for combo in itertools.combinations_with_replacement(range(n), order):
        alpha = [0] * n
        for i in combo:
            alpha[i] += 1
        yield tuple(alpha)


def central_jacobian(func, x, h, richardson=True):
    """Jacobian of ``func: R^n -> R^m`` by central differences.

    ``h`` is a scalar or per-coordinate array of steps. Returns ``(J, err)``
    where ``err`` is the elementwise Richardson correction magnitude (zeros
    when ``richardson`` is off).
    """
    x = np.asarray(x, dtype=float)
    steps = np.broadcast_to(np.asarray(h, dtype=float), x.shape)

    def sweep(scale):
        cols = []
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = steps[k] * scale
            plus = np.asarray(func(x + e), dtype=float)
            minus = np.asarray(func(x - e), dtype=float)
            cols.append((plus - minus) / (2.0 * e[k]))
        return np.stack(cols, axis=-1)

    coarse = sweep(1.0)
    if not richardson:
        return coarse, np.zeros_like(coarse)
    fine = sweep(0.5)
    return (4.0 * fine - coarse) / 3.0, np.abs(fine - coarse) / 3.0
