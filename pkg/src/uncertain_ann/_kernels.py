"""numba kernels for index construction: best-first layer search over padded adjacency rows."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _less(d1, p1, d2, p2):
    return d1 < d2 or (d1 == d2 and p1 < p2)


@njit(cache=True)
def _min_push(hd, hp, size, d, p):
    i = size
    hd[i] = d
    hp[i] = p
    while i > 0:
        parent = (i - 1) >> 1
        if _less(hd[i], hp[i], hd[parent], hp[parent]):
            hd[i], hd[parent] = hd[parent], hd[i]
            hp[i], hp[parent] = hp[parent], hp[i]
            i = parent
        else:
            break
    return size + 1


@njit(cache=True)
def _min_pop(hd, hp, size):
    size -= 1
    hd[0] = hd[size]
    hp[0] = hp[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        best = i
        if l < size and _less(hd[l], hp[l], hd[best], hp[best]):
            best = l
        if r < size and _less(hd[r], hp[r], hd[best], hp[best]):
            best = r
        if best == i:
            break
        hd[i], hd[best] = hd[best], hd[i]
        hp[i], hp[best] = hp[best], hp[i]
        i = best
    return size


@njit(cache=True)
def _max_push(hd, hp, size, d, p):
    i = size
    hd[i] = d
    hp[i] = p
    while i > 0:
        parent = (i - 1) >> 1
        if _less(hd[parent], hp[parent], hd[i], hp[i]):
            hd[i], hd[parent] = hd[parent], hd[i]
            hp[i], hp[parent] = hp[parent], hp[i]
            i = parent
        else:
            break
    return size + 1


@njit(cache=True)
def _max_pop(hd, hp, size):
    size -= 1
    hd[0] = hd[size]
    hp[0] = hp[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        best = i
        if l < size and _less(hd[best], hp[best], hd[l], hp[l]):
            best = l
        if r < size and _less(hd[best], hp[best], hd[r], hp[r]):
            best = r
        if best == i:
            break
        hd[i], hd[best] = hd[best], hd[i]
        hp[i], hp[best] = hp[best], hp[i]
        i = best
    return size


@njit(cache=True)
def l2(X, a, q):
    s = 0.0
    for j in range(X.shape[1]):
        t = X[a, j] - q[j]
        s += t * t
    return np.sqrt(s)


@njit(cache=True)
def search_padded(X, nbr, deg, q, ep_d, ep_p, ef):
    """Return the ``ef`` closest ``(distance, position)`` pairs, ascending."""
    N = X.shape[0]
    visited = np.zeros(N, dtype=np.bool_)
    cap = N + len(ep_p) + 1
    cd = np.empty(cap)
    cp = np.empty(cap, dtype=np.int64)
    rd = np.empty(ef + 2)
    rp = np.empty(ef + 2, dtype=np.int64)
    cs = 0
    rs = 0
    for i in range(len(ep_p)):
        p = ep_p[i]
        if visited[p]:
            continue
        visited[p] = True
        cs = _min_push(cd, cp, cs, ep_d[i], p)
        rs = _max_push(rd, rp, rs, ep_d[i], p)
        if rs > ef:
            rs = _max_pop(rd, rp, rs)
    while cs > 0:
        d = cd[0]
        p = cp[0]
        cs = _min_pop(cd, cp, cs)
        if rs >= ef and _less(rd[0], rp[0], d, p):
            break
        for j in range(deg[p]):
            e = nbr[p, j]
            if visited[e]:
                continue
            visited[e] = True
            de = l2(X, e, q)
            if rs < ef or _less(de, e, rd[0], rp[0]):
                cs = _min_push(cd, cp, cs, de, e)
                rs = _max_push(rd, rp, rs, de, e)
                if rs > ef:
                    rs = _max_pop(rd, rp, rs)
    out_d = np.empty(rs)
    out_p = np.empty(rs, dtype=np.int64)
    for i in range(rs - 1, -1, -1):
        out_d[i] = rd[0]
        out_p[i] = rp[0]
        rs = _max_pop(rd, rp, rs)
    return out_d, out_p


@njit(cache=True)
def connect(nbr, dst, deg, p, q, d):
    """Insert ``q`` at distance ``d`` into the sorted row ``p``; drop the farthest on overflow."""
    k = deg[p]
    m = nbr.shape[1]
    j = 0
    while j < k and _less(dst[p, j], nbr[p, j], d, q):
        j += 1
    if j >= m:
        return
    stop = k if k < m - 1 else m - 1
    for t in range(stop, j, -1):
        nbr[p, t] = nbr[p, t - 1]
        dst[p, t] = dst[p, t - 1]
    nbr[p, j] = q
    dst[p, j] = d
    if k < m:
        deg[p] = k + 1
