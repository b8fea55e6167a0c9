"""Hot inner loops, each with a numba and a pure-numpy implementation.

The backend is chosen once at import from ``COMPLEXQA_BACKEND`` (``numba`` or
``numpy``).  When the variable is unset numba is used if it imports, otherwise
numpy.  :func:`set_backend` switches at runtime, which the benchmark and the
backend-agreement tests rely on.

Both backends reduce in the same sequential order, so results agree to the
last bit for the scatter kernels and exactly for the integer kernels.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    NUMBA_AVAILABLE = False

_VALID = ("numba", "numpy")


def _initial_backend():
    requested = os.environ.get("COMPLEXQA_BACKEND", "").strip().lower()
    if requested == "numpy":
        return "numpy"
    if requested == "numba" and not NUMBA_AVAILABLE:
        raise ImportError("COMPLEXQA_BACKEND=numba but numba is not installed")
    if requested and requested not in _VALID:
        raise ValueError(f"COMPLEXQA_BACKEND must be one of {_VALID}, got {requested!r}")
    return "numba" if NUMBA_AVAILABLE else "numpy"


_backend = _initial_backend()


def get_backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` for subsequent kernel calls."""
    global _backend
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise ImportError("numba is not installed")
    _backend = name


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _segment_sum_np(values, ids, n):
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, ids, values)
    return out


def _segment_max_np(values, ids, n):
    # argmax holds the row index of the winning entry; ties keep the first row
    flat = values.reshape(values.shape[0], -1)
    out = np.full((n, flat.shape[1]), -np.inf, dtype=values.dtype)
    arg = np.full((n, flat.shape[1]), -1, dtype=np.int64)
    np.maximum.at(out, ids, flat)
    rows = np.arange(flat.shape[0])
    hit = flat == out[ids]
    # first row per (segment, column) that attains the max
    cand = np.where(hit, rows[:, None], np.iinfo(np.int64).max)
    best = np.full((n, flat.shape[1]), np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(best, ids, cand)
    filled = best != np.iinfo(np.int64).max
    arg[filled] = best[filled]
    out[~filled] = 0.0
    return out.reshape((n,) + values.shape[1:]), arg.reshape((n,) + values.shape[1:])


def _knn_np(coords, k):
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def _sasa_np(coords, radii, points, neighbor_cutoff):
    n_atoms = coords.shape[0]
    exposed = np.zeros(n_atoms, dtype=np.int64)
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    for i in range(n_atoms):
        near = np.flatnonzero((d2[i] < (radii[i] + radii + neighbor_cutoff) ** 2))
        near = near[near != i]
        surf = coords[i] + radii[i] * points
        if near.size == 0:
            exposed[i] = points.shape[0]
            continue
        dd = surf[:, None, :] - coords[near][None, :, :]
        buried = (np.einsum("pjk,pjk->pj", dd, dd) < radii[near] ** 2).any(axis=1)
        exposed[i] = points.shape[0] - int(buried.sum())
    return exposed


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _segment_sum_nb(values, ids, n):
        m, c = values.shape
        out = np.zeros((n, c), dtype=values.dtype)
        for r in range(m):
            s = ids[r]
            for j in range(c):
                out[s, j] += values[r, j]
        return out

    @njit(cache=True)
    def _segment_max_nb(values, ids, n):
        m, c = values.shape
        out = np.zeros((n, c), dtype=values.dtype)
        arg = np.full((n, c), -1, dtype=np.int64)
        for r in range(m):
            s = ids[r]
            for j in range(c):
                if arg[s, j] < 0 or values[r, j] > out[s, j]:
                    out[s, j] = values[r, j]
                    arg[s, j] = r
        return out, arg

    @njit(cache=True)
    def _knn_nb(coords, k):
        n = coords.shape[0]
        out = np.empty((n, k), dtype=np.int64)
        d2 = np.empty(n, dtype=coords.dtype)
        for i in range(n):
            for j in range(n):
                dx = coords[i, 0] - coords[j, 0]
                dy = coords[i, 1] - coords[j, 1]
                dz = coords[i, 2] - coords[j, 2]
                d2[j] = dx * dx + dy * dy + dz * dz
            d2[i] = np.inf
            order = np.argsort(d2, kind="mergesort")
            for t in range(k):
                out[i, t] = order[t]
        return out

    @njit(cache=True)
    def _sasa_nb(coords, radii, points, neighbor_cutoff):
        n_atoms = coords.shape[0]
        n_pts = points.shape[0]
        exposed = np.zeros(n_atoms, dtype=np.int64)
        near = np.empty(n_atoms, dtype=np.int64)
        for i in range(n_atoms):
            n_near = 0
            for j in range(n_atoms):
                if j == i:
                    continue
                dx = coords[i, 0] - coords[j, 0]
                dy = coords[i, 1] - coords[j, 1]
                dz = coords[i, 2] - coords[j, 2]
                lim = radii[i] + radii[j] + neighbor_cutoff
                if dx * dx + dy * dy + dz * dz < lim * lim:
                    near[n_near] = j
                    n_near += 1
            count = 0
            for p in range(n_pts):
                sx = coords[i, 0] + radii[i] * points[p, 0]
                sy = coords[i, 1] + radii[i] * points[p, 1]
                sz = coords[i, 2] + radii[i] * points[p, 2]
                buried = False
                for t in range(n_near):
                    j = near[t]
                    dx = sx - coords[j, 0]
                    dy = sy - coords[j, 1]
                    dz = sz - coords[j, 2]
                    if dx * dx + dy * dy + dz * dz < radii[j] * radii[j]:
                        buried = True
                        break
                if not buried:
                    count += 1
            exposed[i] = count
        return exposed


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def segment_sum(values, ids, n):
    """Sum rows of ``values`` into ``n`` buckets given by ``ids``."""
    values = np.asarray(values)
    ids = np.asarray(ids, dtype=np.int64)
    if _backend == "numba":
        flat = np.ascontiguousarray(values.reshape(values.shape[0], -1))
        out = _segment_sum_nb(flat, ids, int(n))
        return out.reshape((int(n),) + values.shape[1:])
    return _segment_sum_np(values, ids, int(n))


def segment_max(values, ids, n):
    """Per-bucket maximum and the row index that attains it (first on ties).

    Empty buckets get value 0 and index -1.
    """
    values = np.asarray(values)
    ids = np.asarray(ids, dtype=np.int64)
    if _backend == "numba":
        flat = np.ascontiguousarray(values.reshape(values.shape[0], -1))
        out, arg = _segment_max_nb(flat, ids, int(n))
        shape = (int(n),) + values.shape[1:]
        return out.reshape(shape), arg.reshape(shape)
    return _segment_max_np(values, ids, int(n))


def knn_indices(coords, k):
    """Indices of the ``k`` nearest other points per row; ties go to the lower index."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if _backend == "numba":
        return _knn_nb(coords, int(k))
    return _knn_np(coords, int(k))


def sasa_exposed_points(coords, radii, points, neighbor_cutoff=0.0):
    """Count sphere points per atom not buried inside any other atom's sphere.

    ``radii`` are already expanded by the probe radius.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    if _backend == "numba":
        return _sasa_nb(coords, radii, points, float(neighbor_cutoff))
    return _sasa_np(coords, radii, points, float(neighbor_cutoff))
