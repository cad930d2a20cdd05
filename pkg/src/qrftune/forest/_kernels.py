"""Compiled tree kernels.

Trees are stored as flat arrays. A node either splits on ``feat >= 0`` or is
a leaf (``feat == -1``) owning a contiguous segment ``[start, end)`` of the
tree's reordered bootstrap sample. Categorical splits send a row left when
bit ``code`` of ``mask`` is set; continuous splits send it left when
``x <= thr``.
"""

import numpy as np
from numba import njit

REGRESSION = 0
SURVIVAL = 1

# Categorical partitions are enumerated exhaustively up to this many levels
# present in a node; above it levels are ordered by a node statistic.
MAX_ENUM_LEVELS = 10


@njit(cache=True, nogil=True)
def _regression_score(sl, nl, s, n):
    sr = s - sl
    nr = n - nl
    return sl * sl / nl + sr * sr / nr


@njit(cache=True, nogil=True)
def _logrank(cnt_l, d_l, d_tot, y_tot):
    # Squared standardized two-sample log-rank statistic; cnt_l holds left
    # counts at each exact local time, so the left risk set is its suffix sum.
    num = 0.0
    var = 0.0
    yl = 0.0
    for k in range(cnt_l.shape[0] - 1, -1, -1):
        yl += cnt_l[k]
        d = d_tot[k]
        if d > 0:
            y = y_tot[k]
            num += d_l[k] - yl * d / y
            if y > 1:
                var += yl * (y - yl) * d * (y - d) / (y * y * (y - 1.0))
    if var <= 1e-12:
        return 0.0
    return num * num / var


@njit(cache=True, nogil=True)
def _split_continuous_reg(xs, ys, best):
    # best = [score, thr]; returns True if improved
    m = xs.shape[0]
    order = np.argsort(xs, kind="mergesort")
    s = 0.0
    for j in range(m):
        s += ys[j]
    sl = 0.0
    improved = False
    for k in range(1, m):
        sl += ys[order[k - 1]]
        a = xs[order[k - 1]]
        b = xs[order[k]]
        if a < b:
            sc = _regression_score(sl, k, s, m)
            if sc > best[0]:
                best[0] = sc
                best[1] = 0.5 * (a + b)
                improved = True
    return improved


@njit(cache=True, nogil=True)
def _present_levels(codes, n_levels):
    seen = np.zeros(n_levels, np.int64)
    for j in range(codes.shape[0]):
        seen[codes[j]] = 1
    out = np.empty(seen.sum(), np.int64)
    c = 0
    for v in range(n_levels):
        if seen[v]:
            out[c] = v
            c += 1
    return out


@njit(cache=True, nogil=True)
def _split_categorical_reg(codes, ys, n_levels, best):
    # best = [score, mask(float-encoded)]
    lv = _present_levels(codes, n_levels)
    L = lv.shape[0]
    if L < 2:
        return False, np.int64(0)
    cnt = np.zeros(n_levels)
    sm = np.zeros(n_levels)
    s = 0.0
    for j in range(codes.shape[0]):
        cnt[codes[j]] += 1.0
        sm[codes[j]] += ys[j]
        s += ys[j]
    m = codes.shape[0]
    improved = False
    best_mask = np.int64(0)
    if L <= MAX_ENUM_LEVELS:
        # left set always holds the lowest present level; enumerate the rest
        for sub in range((1 << (L - 1)) - 1):
            mask = np.int64(1) << lv[0]
            nl = cnt[lv[0]]
            sl = sm[lv[0]]
            for b in range(L - 1):
                if (sub >> b) & 1:
                    mask |= np.int64(1) << lv[b + 1]
                    nl += cnt[lv[b + 1]]
                    sl += sm[lv[b + 1]]
            sc = _regression_score(sl, nl, s, m)
            if sc > best[0]:
                best[0] = sc
                best_mask = mask
                improved = True
    else:
        means = np.empty(L)
        for k in range(L):
            means[k] = sm[lv[k]] / cnt[lv[k]]
        order = np.argsort(means, kind="mergesort")
        mask = np.int64(0)
        nl = 0.0
        sl = 0.0
        for k in range(L - 1):
            v = lv[order[k]]
            mask |= np.int64(1) << v
            nl += cnt[v]
            sl += sm[v]
            sc = _regression_score(sl, nl, s, m)
            if sc > best[0]:
                best[0] = sc
                best_mask = mask
                improved = True
    return improved, best_mask


@njit(cache=True, nogil=True)
def _local_times(tr, ev):
    # compress global time ranks of a node to local indices
    ut = np.unique(tr)
    K = ut.shape[0]
    li = np.searchsorted(ut, tr)
    d_tot = np.zeros(K)
    n_at = np.zeros(K)
    for j in range(tr.shape[0]):
        n_at[li[j]] += 1.0
        d_tot[li[j]] += ev[j]
    y_tot = np.zeros(K)
    acc = 0.0
    for k in range(K - 1, -1, -1):
        acc += n_at[k]
        y_tot[k] = acc
    return li, d_tot, y_tot


@njit(cache=True, nogil=True)
def _split_continuous_surv(xs, li, ev, d_tot, y_tot, nodesize, best):
    m = xs.shape[0]
    K = d_tot.shape[0]
    order = np.argsort(xs, kind="mergesort")
    e_all = 0.0
    for j in range(m):
        e_all += ev[j]
    cnt_l = np.zeros(K)
    d_l = np.zeros(K)
    e_l = 0.0
    improved = False
    for k in range(1, m):
        j = order[k - 1]
        cnt_l[li[j]] += 1.0
        d_l[li[j]] += ev[j]
        e_l += ev[j]
        a = xs[j]
        b = xs[order[k]]
        if a < b and e_l >= nodesize and e_all - e_l >= nodesize:
            st = _logrank(cnt_l, d_l, d_tot, y_tot)
            if st > best[0]:
                best[0] = st
                best[1] = 0.5 * (a + b)
                improved = True
    return improved


@njit(cache=True, nogil=True)
def _split_categorical_surv(codes, li, ev, d_tot, y_tot, n_levels, nodesize, best):
    lv = _present_levels(codes, n_levels)
    L = lv.shape[0]
    if L < 2:
        return False, np.int64(0)
    K = d_tot.shape[0]
    cnt = np.zeros((n_levels, K))
    dd = np.zeros((n_levels, K))
    elv = np.zeros(n_levels)
    e_all = 0.0
    for j in range(codes.shape[0]):
        cnt[codes[j], li[j]] += 1.0
        dd[codes[j], li[j]] += ev[j]
        elv[codes[j]] += ev[j]
        e_all += ev[j]
    improved = False
    best_mask = np.int64(0)
    cnt_l = np.zeros(K)
    d_l = np.zeros(K)
    ordl = np.zeros(0, np.int64)
    if L <= MAX_ENUM_LEVELS:
        n_sub = (1 << (L - 1)) - 1
        seq = np.arange(n_sub)
    else:
        n_sub = L - 1
        seq = np.arange(n_sub)
        frac = np.empty(L)
        for k in range(L):
            tot = 0.0
            for t in range(K):
                tot += cnt[lv[k], t]
            frac[k] = elv[lv[k]] / tot
        ordl = np.argsort(frac, kind="mergesort")
    for sub in seq:
        mask = np.int64(0)
        cnt_l[:] = 0.0
        d_l[:] = 0.0
        e_l = 0.0
        if L <= MAX_ENUM_LEVELS:
            members = np.zeros(L, np.bool_)
            members[0] = True
            for b in range(L - 1):
                if (sub >> b) & 1:
                    members[b + 1] = True
            for k in range(L):
                if members[k]:
                    v = lv[k]
                    mask |= np.int64(1) << v
                    e_l += elv[v]
                    for t in range(K):
                        cnt_l[t] += cnt[v, t]
                        d_l[t] += dd[v, t]
        else:
            for k in range(sub + 1):
                v = lv[ordl[k]]
                mask |= np.int64(1) << v
                e_l += elv[v]
                for t in range(K):
                    cnt_l[t] += cnt[v, t]
                    d_l[t] += dd[v, t]
        if e_l < nodesize or e_all - e_l < nodesize:
            continue
        st = _logrank(cnt_l, d_l, d_tot, y_tot)
        if st > best[0]:
            best[0] = st
            best_mask = mask
            improved = True
    return improved, best_mask


@njit(cache=True, nogil=True)
def find_split(X, y, ev, tr, rows, feats, is_cat, n_levels, task, nodesize):
    """Best split of the node holding ``rows`` over candidate ``feats``.

    Returns (feature, threshold, mask, score). feature is -1 when no valid
    split improves on the parent. Candidate features are scanned in the
    given order and only strict improvements replace the incumbent, so
    ties go to the earlier feature and then the lower threshold/mask.
    """
    m = rows.shape[0]
    ys = np.empty(m)
    for j in range(m):
        ys[j] = y[rows[j]]
    best = np.zeros(2)
    best_f = -1
    best_thr = 0.0
    best_mask = np.int64(0)
    if task == REGRESSION:
        s = 0.0
        ymin = ys[0]
        ymax = ys[0]
        for j in range(m):
            s += ys[j]
            ymin = min(ymin, ys[j])
            ymax = max(ymax, ys[j])
        if ymin == ymax:
            return -1, 0.0, np.int64(0), 0.0
        base = s * s / m
        sse = 0.0
        mu = s / m
        for j in range(m):
            sse += (ys[j] - mu) ** 2
        best[0] = base + 1e-10 * sse
        for f in feats:
            if is_cat[f]:
                codes = np.empty(m, np.int64)
                for j in range(m):
                    codes[j] = np.int64(X[rows[j], f])
                imp, mk = _split_categorical_reg(codes, ys, n_levels[f], best)
                if imp:
                    best_f = f
                    best_mask = mk
                    best_thr = 0.0
            else:
                xs = np.empty(m)
                for j in range(m):
                    xs[j] = X[rows[j], f]
                if _split_continuous_reg(xs, ys, best):
                    best_f = f
                    best_thr = best[1]
                    best_mask = np.int64(0)
        return best_f, best_thr, best_mask, best[0] - base
    else:
        trs = np.empty(m, np.int64)
        evs = np.empty(m)
        for j in range(m):
            trs[j] = tr[rows[j]]
            evs[j] = ev[rows[j]]
        li, d_tot, y_tot = _local_times(trs, evs)
        best[0] = 1e-10
        for f in feats:
            if is_cat[f]:
                codes = np.empty(m, np.int64)
                for j in range(m):
                    codes[j] = np.int64(X[rows[j], f])
                imp, mk = _split_categorical_surv(codes, li, evs, d_tot, y_tot, n_levels[f], nodesize, best)
                if imp:
                    best_f = f
                    best_mask = mk
                    best_thr = 0.0
            else:
                xs = np.empty(m)
                for j in range(m):
                    xs[j] = X[rows[j], f]
                if _split_continuous_surv(xs, li, evs, d_tot, y_tot, nodesize, best):
                    best_f = f
                    best_thr = best[1]
                    best_mask = np.int64(0)
        return best_f, best_thr, best_mask, best[0]


@njit(cache=True, nogil=True)
def _goes_left(x, f, thr, mask, is_cat):
    if is_cat[f]:
        return ((mask >> np.int64(x)) & 1) == 1
    return x <= thr


@njit(cache=True, nogil=True)
def grow_tree(X, y, ev, tr, is_cat, n_levels, task, mtry, nodesize, exclude_pure, seed):
    """Grow one tree on a bootstrap resample drawn from ``seed``.

    Returns node arrays, the reordered bootstrap sample and the in-bag
    multiplicities of the training rows.
    """
    np.random.seed(seed)
    n, p = X.shape
    samp = np.empty(n, np.int64)
    inbag = np.zeros(n, np.int32)
    for j in range(n):
        r = np.random.randint(n)
        samp[j] = r
        inbag[r] += 1

    cap = 2 * n + 1
    feat = np.full(cap, -1, np.int64)
    thr = np.zeros(cap)
    mask = np.zeros(cap, np.int64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    n_nodes = 1
    start[0] = 0
    end[0] = n

    stack = np.empty(cap, np.int64)
    top = 0
    stack[top] = 0
    top += 1
    all_feats = np.arange(p)
    buf = np.empty(n, np.int64)
    while top > 0:
        top -= 1
        node = stack[top]
        s0 = start[node]
        e0 = end[node]
        m = e0 - s0
        if task == REGRESSION:
            if m < nodesize or m < 2:
                continue
        else:
            ne = 0.0
            for j in range(s0, e0):
                ne += ev[samp[j]]
            if ne < 2 * nodesize:
                continue
        rows = samp[s0:e0]
        if exclude_pure:
            keep = np.zeros(p, np.bool_)
            for f in range(p):
                v0 = X[rows[0], f]
                for j in range(1, m):
                    if X[rows[j], f] != v0:
                        keep[f] = True
                        break
            pool = all_feats[keep]
        else:
            pool = all_feats.copy()
        k = min(mtry, pool.shape[0])
        if k == 0:
            continue
        for j in range(k):
            r = j + np.random.randint(pool.shape[0] - j)
            t = pool[j]
            pool[j] = pool[r]
            pool[r] = t
        cand = np.sort(pool[:k])
        f, th, mk, score = find_split(X, y, ev, tr, rows, cand, is_cat, n_levels, task, nodesize)
        if f < 0:
            continue
        # stable partition of the segment
        nl = 0
        for j in range(m):
            if _goes_left(X[rows[j], f], f, th, mk, is_cat):
                buf[nl] = rows[j]
                nl += 1
        nr = nl
        for j in range(m):
            if not _goes_left(X[rows[j], f], f, th, mk, is_cat):
                buf[nr] = rows[j]
                nr += 1
        for j in range(m):
            samp[s0 + j] = buf[j]
        feat[node] = f
        thr[node] = th
        mask[node] = mk
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        start[lc] = s0
        end[lc] = s0 + nl
        start[rc] = s0 + nl
        end[rc] = e0
        # push right first so the left subtree is expanded first
        stack[top] = rc
        top += 1
        stack[top] = lc
        top += 1
    return (
        feat[:n_nodes].copy(),
        thr[:n_nodes].copy(),
        mask[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        start[:n_nodes].copy(),
        end[:n_nodes].copy(),
        samp,
        inbag,
    )


@njit(cache=True, nogil=True)
def leaf_payload(samp, start, end, feat, yrank, y, ev, task, n_support):
    """Per-leaf jump masses on the global support.

    Regression leaves put mass 1/size on each in-bag response (duplicates
    kept). Survival leaves store Kaplan-Meier jumps of 1 - S at the leaf's
    event times; events precede censorings at tied times.
    """
    n_nodes = feat.shape[0]
    leaf_of = np.full(n_nodes, -1, np.int64)
    n_leaves = 0
    for v in range(n_nodes):
        if feat[v] < 0:
            leaf_of[v] = n_leaves
            n_leaves += 1
    off = np.zeros(n_leaves + 1, np.int64)
    idx = np.empty(samp.shape[0], np.int64)
    mass = np.empty(samp.shape[0])
    mean = np.full(n_leaves, np.nan)
    c = 0
    for v in range(n_nodes):
        lf = leaf_of[v]
        if lf < 0:
            continue
        s0 = start[v]
        e0 = end[v]
        m = e0 - s0
        if task == REGRESSION:
            acc = 0.0
            for j in range(s0, e0):
                idx[c] = yrank[samp[j]]
                mass[c] = 1.0 / m
                acc += y[samp[j]]
                c += 1
            mean[lf] = acc / m
        else:
            ts = np.empty(m)
            es = np.empty(m)
            for j in range(m):
                ts[j] = y[samp[s0 + j]]
                es[j] = ev[samp[s0 + j]]
            order = np.argsort(ts, kind="mergesort")
            surv = 1.0
            at_risk = float(m)
            j = 0
            while j < m:
                t = ts[order[j]]
                d = 0.0
                tot = 0.0
                rk = -1
                while j < m and ts[order[j]] == t:
                    d += es[order[j]]
                    tot += 1.0
                    if es[order[j]] > 0:
                        rk = yrank[samp[s0 + order[j]]]
                    j += 1
                if d > 0:
                    new = surv * (1.0 - d / at_risk)
                    idx[c] = rk
                    mass[c] = surv - new
                    c += 1
                    surv = new
                at_risk -= tot
        off[lf + 1] = c
    return leaf_of, off, idx[:c].copy(), mass[:c].copy(), mean


@njit(cache=True, nogil=True)
def descend(x, tree_feat, tree_thr, tree_mask, tree_left, tree_right, base, is_cat):
    v = 0
    while tree_feat[base + v] >= 0:
        f = tree_feat[base + v]
        if _goes_left(x[f], f, tree_thr[base + v], tree_mask[base + v], is_cat):
            v = tree_left[base + v]
        else:
            v = tree_right[base + v]
    return v


@njit(cache=True, nogil=True)
def aggregate(
    Xq, qrows, use_oob, inbag, is_cat,
    node_off, feat, thr, mask, left, right, leaf_of,
    leaf_off, ent_off, ent_idx, ent_mass, leaf_mean, n_support,
):
    """Sum leaf jump masses over trees for each query row.

    With ``use_oob`` query q is row ``qrows[q]`` of the training data and
    only trees where it is out of bag contribute.
    """
    m = Xq.shape[0]
    B = node_off.shape[0] - 1
    out = np.zeros((m, n_support))
    cnt = np.zeros(m)
    msum = np.zeros(m)
    for b in range(B):
        base = node_off[b]
        lbase = leaf_off[b]
        for q in range(m):
            if use_oob and inbag[b, qrows[q]] != 0:
                continue
            v = descend(Xq[q], feat, thr, mask, left, right, base, is_cat)
            lf = lbase + leaf_of[base + v]
            for e in range(ent_off[lf], ent_off[lf + 1]):
                out[q, ent_idx[e]] += ent_mass[e]
            cnt[q] += 1.0
            msum[q] += leaf_mean[lf]
    return out, cnt, msum


@njit(cache=True, nogil=True)
def apply_tree(Xq, b, node_off, feat, thr, mask, left, right, is_cat):
    m = Xq.shape[0]
    out = np.empty(m, np.int64)
    base = node_off[b]
    for q in range(m):
        out[q] = descend(Xq[q], feat, thr, mask, left, right, base, is_cat)
    return out
