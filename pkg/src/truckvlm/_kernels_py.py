"""Pure-Python/numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` exactly and are used when the compiled
extension is unavailable (or when ``TRUCKVLM_PURE_PYTHON=1``).
"""

from collections import deque

import numpy as np


def dbscan_expand(indptr, indices, core):
    """Label points by cluster expansion over a CSR neighbor graph.

    Points are visited in index order; a border point keeps the label of
    the first cluster that reaches it. Noise is labelled -1.
    """
    n = len(core)
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for j in indices[indptr[p]:indptr[p + 1]]:
                if labels[j] == -1:
                    labels[j] = cluster
                    if core[j]:
                        queue.append(j)
        cluster += 1
    return labels


def erode(img, se):
    h, w = img.shape
    r = se.shape[0] // 2
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    padded[r:r + h, r:r + w] = img != 0
    out = np.ones((h, w), dtype=bool)
    for di, dj in zip(*np.nonzero(se)):
        out &= padded[di:di + h, dj:dj + w]
    return np.where(out, 255, 0).astype(np.uint8)


def dilate(img, se):
    # Minkowski dilation: out[p] = OR_s img[p - s]
    h, w = img.shape
    r = se.shape[0] // 2
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    padded[r:r + h, r:r + w] = img != 0
    out = np.zeros((h, w), dtype=bool)
    side = se.shape[0]
    for di, dj in zip(*np.nonzero(se)):
        oi, oj = side - 1 - di, side - 1 - dj
        out |= padded[oi:oi + h, oj:oj + w]
    return np.where(out, 255, 0).astype(np.uint8)


def hungarian(cost):
    """Minimum-cost assignment via shortest augmenting paths with potentials.

    Returns an int array ``col_of_row`` (``-1`` for unassigned rows).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_rows, n_cols = cost.shape
    transposed = n_rows > n_cols
    if transposed:
        cost = cost.T
        n_rows, n_cols = n_cols, n_rows
    a = cost.tolist()
    inf = float("inf")
    u = [0.0] * (n_rows + 1)
    v = [0.0] * (n_cols + 1)
    p = [0] * (n_cols + 1)  # p[j]: row matched to column j (1-based), 0 = free
    way = [0] * (n_cols + 1)
    for i in range(1, n_rows + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n_cols + 1)
        used = [False] * (n_cols + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n_cols + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n_cols + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    if transposed:
        col_of_row = np.full(n_cols, -1, dtype=np.int64)
        for j in range(1, n_cols + 1):
            if p[j]:
                col_of_row[j - 1] = p[j] - 1
        return col_of_row
    col_of_row = np.full(n_rows, -1, dtype=np.int64)
    for j in range(1, n_cols + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row
