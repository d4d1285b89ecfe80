# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Semantics match ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def dbscan_expand(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices, const cnp.uint8_t[::1] core):
    cdef Py_ssize_t n = core.shape[0]
    labels_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = labels_arr
    queue_arr = np.empty(max(n, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] queue = queue_arr
    cdef Py_ssize_t i, head, tail, k, p, j
    cdef cnp.int64_t cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        head = 0
        tail = 0
        queue[tail] = i
        tail += 1
        while head < tail:
            p = queue[head]
            head += 1
            for k in range(indptr[p], indptr[p + 1]):
                j = indices[k]
                if labels[j] == -1:
                    labels[j] = cluster
                    if core[j]:
                        queue[tail] = j
                        tail += 1
        cluster += 1
    return labels_arr


cdef _pad(img_in, Py_ssize_t r):
    img = np.asarray(img_in)
    h, w = img.shape[0], img.shape[1]
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=np.uint8)
    padded[r:r + h, r:r + w] = img != 0
    return padded


cdef _offsets(se_in, bint reflect):
    se = np.asarray(se_in)
    side = se.shape[0]
    di, dj = np.nonzero(se)
    if reflect:
        di, dj = side - 1 - di, side - 1 - dj
    return np.ascontiguousarray(di, dtype=np.int64), np.ascontiguousarray(dj, dtype=np.int64)


cdef _shift_combine(img_in, se_in, bint erode_mode):
    # One pass per active SE cell over a zero-padded copy: AND for erosion,
    # OR (with reflected offsets) for Minkowski dilation. Branch-free inner
    # loop over contiguous rows.
    cdef Py_ssize_t h = img_in.shape[0], w = img_in.shape[1]
    cdef Py_ssize_t r = se_in.shape[0] // 2
    cdef const cnp.uint8_t[:, ::1] pad = _pad(img_in, r)
    di_arr, dj_arr = _offsets(se_in, not erode_mode)
    cdef const cnp.int64_t[::1] di = di_arr, dj = dj_arr
    cdef Py_ssize_t m = di.shape[0]
    acc_arr = np.full((h, w), 1 if erode_mode else 0, dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] acc = acc_arr
    cdef Py_ssize_t i, j, k
    cdef const cnp.uint8_t* src
    cdef cnp.uint8_t* dst
    for k in range(m):
        for i in range(h):
            src = &pad[i + di[k], dj[k]]
            dst = &acc[i, 0]
            if erode_mode:
                for j in range(w):
                    dst[j] &= src[j]
            else:
                for j in range(w):
                    dst[j] |= src[j]
    acc_arr *= 255
    return acc_arr


def erode(img_in, se_in):
    return _shift_combine(img_in, se_in, True)


def dilate(img_in, se_in):
    # Minkowski dilation: out[p] = OR_s img[p - s]
    return _shift_combine(img_in, se_in, False)


def hungarian(cost_in):
    cost_np = np.ascontiguousarray(cost_in, dtype=np.float64)
    cdef Py_ssize_t n_rows = cost_np.shape[0], n_cols = cost_np.shape[1]
    cdef bint transposed = n_rows > n_cols
    if transposed:
        cost_np = np.ascontiguousarray(cost_np.T)
        n_rows, n_cols = n_cols, n_rows
    cdef double[:, ::1] a = cost_np
    u_arr = np.zeros(n_rows + 1)
    v_arr = np.zeros(n_cols + 1)
    minv_arr = np.empty(n_cols + 1)
    p_arr = np.zeros(n_cols + 1, dtype=np.int64)
    way_arr = np.zeros(n_cols + 1, dtype=np.int64)
    used_arr = np.zeros(n_cols + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, minv = minv_arr
    cdef cnp.int64_t[::1] p = p_arr, way = way_arr
    cdef cnp.uint8_t[::1] used = used_arr
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur
    for i in range(1, n_rows + 1):
        p[0] = i
        j0 = 0
        for j in range(n_cols + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n_cols + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
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
