"""Compiled inner loops for tree growing, prediction and permutation importance.

Randomness inside the kernels comes from splitmix64 streams keyed by integer
seeds, which lets every tree node and every (tree, feature) permutation own an
independent stream without any shared generator state.
"""

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0
_SMALL = 24

jit = nb.njit(cache=True, nogil=True)


@jit
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@jit
def stream_key(seed, tag):
    return _mix(np.uint64(seed) + _GOLDEN * np.uint64(tag + 1))


@jit
def _below(state, k):
    # (new state, uniform integer in [0, k))
    state = state + _GOLDEN
    u = (_mix(state) >> np.uint64(11)) * _INV53
    j = int(u * k)
    if j >= k:
        j = k - 1
    return state, j


@jit
def _argsort_small(vals, order, cnt):
    for i in range(cnt):
        order[i] = i
    for i in range(1, cnt):
        o = order[i]
        v = vals[o]
        j = i - 1
        while j >= 0 and vals[order[j]] > v:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = o


@jit
def node_best_split(XT, order, where, node, inv, yc, w, idx, s, e, cands, ncand, vals, srt):
    """Best variance-reduction split of rows ``idx[s:e]`` over ``cands[:ncand]``.

    ``w`` holds integer bag multiplicities and ``inv[k] == 1 / k``. ``yc``
    must be centred on the node mean. ``order[f]`` lists all rows by
    ascending feature f (ties by row) and ``where[r] == node`` marks the rows
    of this node; large nodes filter that order, small ones sort directly.
    Returns ``(feature, threshold, score)`` with feature -1 when no candidate
    separates distinct values.
    """
    n = XT.shape[1]
    cnt = e - s
    tot_w = 0
    tot = 0.0
    ssp = 0.0
    for k in range(cnt):
        r = idx[s + k]
        tot_w += w[r]
        tot += w[r] * yc[r]
        ssp += w[r] * yc[r] * yc[r]
    base = tot * tot * inv[tot_w]
    # scores closer than this are ties, so summation order cannot pick the winner
    tol = 1e-10 * ssp
    best_f = -1
    best_t = 0.0
    best_s = -1.0
    filtering = cnt > _SMALL
    for c in range(ncand):
        f = cands[c]
        row = XT[f]
        if filtering:
            of = order[f]
            j = 0
            for k in range(n):
                r = of[k]
                srt[j] = r
                j += where[r] == node
        else:
            for k in range(cnt):
                vals[k] = row[idx[s + k]]
            _argsort_small(vals, srt, cnt)
            for k in range(cnt):
                srt[k] = idx[s + srt[k]]
        r = srt[0]
        v = row[r]
        if v == row[srt[cnt - 1]]:
            continue
        lw = 0
        ls = 0.0
        for k in range(cnt - 1):
            lw += w[r]
            ls += w[r] * yc[r]
            rn = srt[k + 1]
            vn = row[rn]
            if v < vn:
                rs = tot - ls
                score = ls * ls * inv[lw] + rs * rs * inv[tot_w - lw] - base
                if score > best_s + tol or (score >= best_s - tol and f < best_f):
                    t = 0.5 * (v + vn)
                    if t >= vn:
                        t = v
                    best_f = f
                    best_t = t
                    best_s = score
            r = rn
            v = vn
    return best_f, best_t, best_s


def reciprocals(n):
    inv = np.zeros(n + 1)
    inv[1:] = 1.0 / np.arange(1, n + 1)
    return inv


def presort(XT):
    """Rows in ascending order of each feature (ties broken by row), shape (p, n)."""
    return np.ascontiguousarray(np.argsort(XT, axis=1, kind="stable").astype(np.int32))


@jit
def grow_tree(XT, order, y, w, seed, mtry, min_node, max_depth):
    """Grow one CART regression tree on the rows with positive weight ``w``.

    Node arrays come back in creation order with the root at 0; leaves carry
    feature -1. ``max_depth < 0`` means no depth cap.
    """
    p, n = XT.shape
    m = 0
    for i in range(n):
        if w[i] > 0:
            m += 1
    idx = np.empty(m, np.int64)
    k = 0
    for i in range(n):
        if w[i] > 0:
            idx[k] = i
            k += 1
    cap = 2 * m + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, np.int64)

    yc = np.zeros(n)
    # node id of every bag row, -1 for rows outside the bag
    where = np.full(n, -1, np.int64)
    for i in range(n):
        if w[i] > 0:
            where[i] = 0
    inv = np.zeros(n + 1)
    for k in range(1, n + 1):
        inv[k] = 1.0 / k
    vals = np.empty(m)
    srt = np.empty(m + 1, np.int64)  # the filter writes one slot past the node
    tmp = np.empty(m, np.int64)
    perm = np.arange(p)
    swaps = np.empty(mtry, np.int64)
    cands = np.empty(mtry, np.int64)

    st_node = np.empty(cap, np.int64)
    st_s = np.empty(cap, np.int64)
    st_e = np.empty(cap, np.int64)
    st_d = np.empty(cap, np.int64)
    st_key = np.empty(cap, np.uint64)
    top = 0
    st_node[0] = 0
    st_s[0] = 0
    st_e[0] = m
    st_d[0] = 0
    st_key[0] = stream_key(seed, 0)
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        s = st_s[top]
        e = st_e[top]
        depth = st_d[top]
        key = st_key[top]

        wsum = 0.0
        ysum = 0.0
        constant = True
        y0 = y[idx[s]]
        for k in range(s, e):
            r = idx[k]
            wsum += w[r]
            ysum += w[r] * y[r]
            if y[r] != y0:
                constant = False
        mean = ysum / wsum
        value[node] = mean
        count[node] = int(wsum)
        if constant or wsum < min_node or (max_depth >= 0 and depth >= max_depth):
            continue

        ss = 0.0
        for k in range(s, e):
            r = idx[k]
            yc[r] = y[r] - mean
            ss += w[r] * yc[r] * yc[r]

        state = key
        for i in range(mtry):
            state, j = _below(state, p - i)
            j += i
            swaps[i] = j
            tmp_f = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp_f
            cands[i] = perm[i]
        for i in range(mtry - 1, -1, -1):
            j = swaps[i]
            tmp_f = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp_f

        bf, bt, bs = node_best_split(XT, order, where, node, inv, yc, w, idx, s, e, cands,
                                     mtry, vals, srt)
        # rounding noise on a no-gain split must not count as improvement
        if bf < 0 or bs <= 1e-12 * ss:
            continue

        nl = 0
        nr = 0
        row = XT[bf]
        for k in range(s, e):
            r = idx[k]
            if row[r] <= bt:
                idx[s + nl] = r
                nl += 1
            else:
                tmp[nr] = r
                nr += 1
        for k in range(nr):
            idx[s + nl + k] = tmp[k]

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = bf
        threshold[node] = bt
        left[node] = lc
        right[node] = rc
        for k in range(s, s + nl):
            where[idx[k]] = lc
        for k in range(s + nl, e):
            where[idx[k]] = rc

        st_node[top] = rc
        st_s[top] = s + nl
        st_e[top] = e
        st_d[top] = depth + 1
        st_key[top] = _mix(key ^ (_GOLDEN * np.uint64(2)))
        top += 1
        st_node[top] = lc
        st_s[top] = s
        st_e[top] = s + nl
        st_d[top] = depth + 1
        st_key[top] = _mix(key ^ _GOLDEN)
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy())


@jit
def _route(x, feature, threshold, left, right, root):
    node = root
    while feature[node] >= 0:
        if x[feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@jit
def _route_with(x, feature, threshold, left, right, root, f, v):
    node = root
    while feature[node] >= 0:
        g = feature[node]
        xv = v if g == f else x[g]
        if xv <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@jit
def predict_packed(X, feature, threshold, left, right, value, roots):
    """Per-row mean over trees; ``roots`` index the packed node arrays."""
    n = X.shape[0]
    out = np.zeros(n)
    t_count = roots.size
    for i in range(n):
        acc = 0.0
        for t in range(t_count):
            acc += value[_route(X[i], feature, threshold, left, right, roots[t])]
        out[i] = acc / t_count
    return out


@jit
def predict_each(X, feature, threshold, left, right, value, roots):
    """Matrix of per-tree predictions, shape (n_trees, n_rows)."""
    n = X.shape[0]
    out = np.empty((roots.size, n))
    for t in range(roots.size):
        for i in range(n):
            out[t, i] = value[_route(X[i], feature, threshold, left, right, roots[t])]
    return out


@jit
def oob_sums(X, W, feature, threshold, left, right, value, roots):
    """Sum of out-of-bag tree predictions and contributing-tree count per row."""
    n = X.shape[0]
    sums = np.zeros(n)
    counts = np.zeros(n, np.int64)
    for t in range(roots.size):
        for i in range(n):
            if W[t, i] == 0:
                sums[i] += value[_route(X[i], feature, threshold, left, right, roots[t])]
                counts[i] += 1
    return sums, counts


@jit
def importance_matrix(X, y, W, feature, threshold, left, right, value, roots, ends, keys):
    """Per-tree OOB MSE increase after permuting each feature among OOB rows.

    Entry (t, j) stays exactly 0 when tree t never splits on feature j or has
    fewer than two OOB rows.
    """
    n, p = X.shape
    T = roots.size
    imp = np.zeros((T, p))
    used = np.zeros(p, np.bool_)
    oob = np.empty(n, np.int64)
    perm = np.empty(n, np.int64)
    for t in range(T):
        n_oob = 0
        for i in range(n):
            if W[t, i] == 0:
                oob[n_oob] = i
                n_oob += 1
        if n_oob < 2:
            continue
        base = 0.0
        for k in range(n_oob):
            i = oob[k]
            d = value[_route(X[i], feature, threshold, left, right, roots[t])] - y[i]
            base += d * d
        base /= n_oob
        used[:] = False
        for node in range(roots[t], ends[t]):
            if feature[node] >= 0:
                used[feature[node]] = True
        for f in range(p):
            if not used[f]:
                continue
            state = _mix(keys[t] ^ (_GOLDEN * np.uint64(f + 1)))
            for k in range(n_oob):
                perm[k] = oob[k]
            for k in range(n_oob - 1, 0, -1):
                state, j = _below(state, k + 1)
                tmp = perm[k]
                perm[k] = perm[j]
                perm[j] = tmp
            mse = 0.0
            for k in range(n_oob):
                i = oob[k]
                leaf = _route_with(X[i], feature, threshold, left, right, roots[t], f, X[perm[k], f])
                d = value[leaf] - y[i]
                mse += d * d
            imp[t, f] = mse / n_oob - base
    return imp
