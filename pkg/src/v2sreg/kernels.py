"""Hot numeric kernels with numba and pure-numpy implementations.

Every kernel exists as ``<name>_numpy`` and (when numba is importable)
``<name>_numba``; the unsuffixed public name is bound to the path selected by
``backend.BACKEND``. Index-producing kernels (FPS, exact kNN, patch growth)
are written with identical floating-point evaluation order in both paths so
their outputs match bitwise; the softmax pair uses fastmath and agrees only to
rounding.

Distance tie rule everywhere: equal distances resolve to the lowest index.
"""

import numpy as np

from .backend import USING_NUMBA

# ---------------------------------------------------------------------------
# pure-numpy paths
# ---------------------------------------------------------------------------

_KNN_CHUNK = 128


def _sq_dists(query, ref):
    # explicit per-axis diffs keep the summation order identical to the loops
    dx = query[:, 0, None] - ref[None, :, 0]
    dy = query[:, 1, None] - ref[None, :, 1]
    dz = query[:, 2, None] - ref[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def knn_numpy(query, ref, k):
    nq = query.shape[0]
    nr = ref.shape[0]
    idx = np.empty((nq, k), dtype=np.int64)
    d2 = np.empty((nq, k), dtype=np.float64)
    tie = np.arange(nr)
    for lo in range(0, nq, _KNN_CHUNK):
        hi = min(lo + _KNN_CHUNK, nq)
        dd = _sq_dists(query[lo:hi], ref)
        order = np.lexsort((np.broadcast_to(tie, dd.shape), dd), axis=-1)[:, :k]
        idx[lo:hi] = order
        d2[lo:hi] = np.take_along_axis(dd, order, axis=-1)
    return idx, d2


def fps_numpy(points, m, start):
    n = points.shape[0]
    sel = np.empty(m, dtype=np.int64)
    sel[0] = start
    if m == 1:
        return sel
    mind = np.full(n, np.inf)
    mind[start] = -np.inf  # taken points never win; keeps indices distinct on duplicate clouds
    last = start
    for i in range(1, m):
        p = points[last]
        dx = points[:, 0] - p[0]
        dy = points[:, 1] - p[1]
        dz = points[:, 2] - p[2]
        d = dx * dx + dy * dy + dz * dz
        np.minimum(mind, d, out=mind)
        last = int(np.argmax(mind))  # argmax takes the first (lowest-index) maximum
        sel[i] = last
        mind[last] = -np.inf
    return sel


def grow_patch_numpy(points, start, m):
    n = points.shape[0]
    order = np.empty(m, dtype=np.int64)
    order[0] = start
    if m == 1:
        return order
    mind = np.full(n, np.inf)
    mind[start] = -np.inf  # selected points never re-chosen
    last = start
    for i in range(1, m):
        p = points[last]
        dx = points[:, 0] - p[0]
        dy = points[:, 1] - p[1]
        dz = points[:, 2] - p[2]
        d = dx * dx + dy * dy + dz * dz
        np.minimum(mind, d, out=mind)
        last = int(np.argmin(np.where(np.isneginf(mind), np.inf, mind)))
        order[i] = last
        mind[last] = -np.inf
    return order


def softmax_rows_numpy(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_rows_grad_numpy(a, da):
    s = (a * da).sum(axis=-1, keepdims=True)
    return a * (da - s)


# ---------------------------------------------------------------------------
# numba paths
# ---------------------------------------------------------------------------

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAVE_NUMBA = False

if HAVE_NUMBA:

    @njit(cache=True)
    def knn_numba(query, ref, k):
        nq = query.shape[0]
        nr = ref.shape[0]
        idx = np.empty((nq, k), dtype=np.int64)
        d2 = np.empty((nq, k), dtype=np.float64)
        for qi in range(nq):
            qx, qy, qz = query[qi, 0], query[qi, 1], query[qi, 2]
            bd = np.full(k, np.inf)
            bi = np.full(k, -1, dtype=np.int64)
            for j in range(nr):
                dx = qx - ref[j, 0]
                dy = qy - ref[j, 1]
                dz = qz - ref[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < bd[k - 1]:
                    pos = k - 1
                    while pos > 0 and d < bd[pos - 1]:
                        bd[pos] = bd[pos - 1]
                        bi[pos] = bi[pos - 1]
                        pos -= 1
                    bd[pos] = d
                    bi[pos] = j
            idx[qi] = bi
            d2[qi] = bd
        return idx, d2

    @njit(cache=True)
    def fps_numba(points, m, start):
        n = points.shape[0]
        sel = np.empty(m, dtype=np.int64)
        sel[0] = start
        if m == 1:
            return sel
        mind = np.full(n, np.inf)
        taken = np.zeros(n, dtype=np.bool_)
        taken[start] = True
        last = start
        for i in range(1, m):
            px, py, pz = points[last, 0], points[last, 1], points[last, 2]
            best = -np.inf
            besti = -1
            for j in range(n):
                dx = points[j, 0] - px
                dy = points[j, 1] - py
                dz = points[j, 2] - pz
                d = dx * dx + dy * dy + dz * dz
                if d < mind[j]:
                    mind[j] = d
                if not taken[j] and mind[j] > best:
                    best = mind[j]
                    besti = j
            sel[i] = besti
            taken[besti] = True
            last = besti
        return sel

    @njit(cache=True)
    def grow_patch_numba(points, start, m):
        n = points.shape[0]
        order = np.empty(m, dtype=np.int64)
        order[0] = start
        if m == 1:
            return order
        mind = np.full(n, np.inf)
        taken = np.zeros(n, dtype=np.bool_)
        taken[start] = True
        last = start
        for i in range(1, m):
            px, py, pz = points[last, 0], points[last, 1], points[last, 2]
            best = np.inf
            besti = -1
            for j in range(n):
                dx = points[j, 0] - px
                dy = points[j, 1] - py
                dz = points[j, 2] - pz
                d = dx * dx + dy * dy + dz * dz
                if d < mind[j]:
                    mind[j] = d
                if not taken[j] and mind[j] < best:
                    best = mind[j]
                    besti = j
            order[i] = besti
            taken[besti] = True
            last = besti
        return order

    @njit(cache=True, fastmath=True)
    def softmax_rows_numba(x):
        out = np.empty_like(x)
        r, m = x.shape
        for i in range(r):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                e = np.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(m):
                out[i, j] *= inv
        return out

    @njit(cache=True, fastmath=True)
    def softmax_rows_grad_numba(a, da):
        out = np.empty_like(a)
        r, m = a.shape
        for i in range(r):
            s = 0.0
            for j in range(m):
                s += a[i, j] * da[i, j]
            for j in range(m):
                out[i, j] = a[i, j] * (da[i, j] - s)
        return out

else:  # pragma: no cover
    knn_numba = None
    fps_numba = None
    grow_patch_numba = None
    softmax_rows_numba = None
    softmax_rows_grad_numba = None


if USING_NUMBA and HAVE_NUMBA:
    knn_kernel = knn_numba
    fps_kernel = fps_numba
    grow_patch_kernel = grow_patch_numba
    softmax_rows = softmax_rows_numba
    softmax_rows_grad = softmax_rows_grad_numba
else:
    knn_kernel = knn_numpy
    fps_kernel = fps_numpy
    grow_patch_kernel = grow_patch_numpy
    softmax_rows = softmax_rows_numpy
    softmax_rows_grad = softmax_rows_grad_numpy
