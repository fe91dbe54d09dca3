"""Hot numeric kernels.

Each kernel exists twice: a numba ``@njit`` loop version (suffix ``_nb``) and a
pure-numpy version (suffix ``_np``). The unsuffixed names are bound at import
time to the numba versions unless ``TOPONET_DISABLE_NUMBA`` is set to a truthy
value or numba cannot be imported. The LSTM forward recurrence is the one
exception: with numba on it switches to the numpy loop for large batches. Both
paths produce the same results up to floating-point summation order;
``tests/test_kernels.py`` holds them together.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_FLAG = os.environ.get("TOPONET_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA and not _DISABLED


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# minimum spanning tree (Prim, lexicographic (weight, canonical index) order)


@njit(cache=True)
def _prim_nb(weights, n, start):
    parent = np.full(n, -1, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    visited = np.zeros(n, dtype=np.bool_)
    key_w = np.full(n, np.inf)
    key_i = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    visited[start] = True
    order[0] = start
    u = start
    for step in range(1, n):
        for q in range(n):
            if visited[q]:
                continue
            if u < q:
                e = u * n - u * (u + 1) // 2 + (q - u - 1)
            else:
                e = q * n - q * (q + 1) // 2 + (u - q - 1)
            w = weights[e]
            if w < key_w[q] or (w == key_w[q] and e < key_i[q]):
                key_w[q] = w
                key_i[q] = e
                parent[q] = u
        best = -1
        for q in range(n):
            if visited[q]:
                continue
            if best < 0 or key_w[q] < key_w[best] or (
                key_w[q] == key_w[best] and key_i[q] < key_i[best]
            ):
                best = q
        visited[best] = True
        order[step] = best
        u = best
    return parent, order


def _prim_np(weights, n, start):
    iu, ju = np.triu_indices(n, k=1)
    W = np.zeros((n, n))
    W[iu, ju] = weights
    W[ju, iu] = weights
    E = np.zeros((n, n), dtype=np.int64)
    E[iu, ju] = np.arange(len(weights))
    E[ju, iu] = E[iu, ju]

    parent = np.full(n, -1, dtype=np.int64)
    order = np.empty(n, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    key_w = np.full(n, np.inf)
    key_i = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    visited[start] = True
    order[0] = start
    u = start
    for step in range(1, n):
        better = ~visited & ((W[u] < key_w) | ((W[u] == key_w) & (E[u] < key_i)))
        key_w[better] = W[u, better]
        key_i[better] = E[u, better]
        parent[better] = u
        cand = np.flatnonzero(~visited)
        ties = cand[key_w[cand] == key_w[cand].min()]
        u = int(ties[np.argmin(key_i[ties])])
        visited[u] = True
        order[step] = u
    return parent, order


# ---------------------------------------------------------------------------
# exhaustive MST by Pruefer enumeration (test oracle)


@njit(cache=True)
def _decode_pruefer_nb(seq, n, edges):
    degree = np.ones(n, dtype=np.int64)
    for a in seq:
        degree[a] += 1
    for k in range(n - 2):
        a = seq[k]
        for b in range(n):
            if degree[b] == 1:
                edges[k, 0] = a
                edges[k, 1] = b
                degree[b] -= 1
                degree[a] -= 1
                break
    u = -1
    for b in range(n):
        if degree[b] == 1:
            if u < 0:
                u = b
            else:
                edges[n - 2, 0] = u
                edges[n - 2, 1] = b
                break


@njit(cache=True)
def _brute_force_nb(weights, n):
    m = n - 2
    seq = np.zeros(max(m, 0), dtype=np.int64)
    edges = np.zeros((n - 1, 2), dtype=np.int64)
    best_edges = np.zeros((n - 1, 2), dtype=np.int64)
    best = np.inf
    total = n**m
    for _ in range(total):
        _decode_pruefer_nb(seq, n, edges)
        s = 0.0
        for k in range(n - 1):
            a, b = edges[k, 0], edges[k, 1]
            if a > b:
                a, b = b, a
            s += weights[a * n - a * (a + 1) // 2 + (b - a - 1)]
        if s < best:
            best = s
            best_edges[:, :] = edges
        # odometer increment
        for pos in range(m - 1, -1, -1):
            seq[pos] += 1
            if seq[pos] < n:
                break
            seq[pos] = 0
    return best_edges, best


def _decode_pruefer_py(seq, n):
    degree = [1] * n
    for a in seq:
        degree[a] += 1
    edges = []
    for a in seq:
        b = degree.index(1)
        edges.append((a, b))
        degree[b] -= 1
        degree[a] -= 1
    u, v = [b for b in range(n) if degree[b] == 1]
    edges.append((u, v))
    return edges


def _brute_force_np(weights, n):
    import itertools

    iu, ju = np.triu_indices(n, k=1)
    W = np.zeros((n, n))
    W[iu, ju] = weights
    W[ju, iu] = weights
    best, best_edges = np.inf, None
    for seq in itertools.product(range(n), repeat=n - 2):
        edges = np.array(_decode_pruefer_py(seq, n))
        s = W[edges[:, 0], edges[:, 1]].sum()
        if s < best:
            best, best_edges = s, edges
    return best_edges, best


# ---------------------------------------------------------------------------
# LSTM cell pointwise math; gate layout along the last axis is [i, f, g, o]


@njit(cache=True)
def _lstm_cell_fwd_nb(a, c_prev, p, peephole):
    B, H4 = a.shape
    H = H4 // 4
    gates = np.empty_like(a)
    c = np.empty_like(c_prev)
    tc = np.empty_like(c_prev)
    h = np.empty_like(c_prev)
    for b in range(B):
        for k in range(H):
            ai = a[b, k]
            af = a[b, H + k]
            if peephole:
                ai += p[0, k] * c_prev[b, k]
                af += p[1, k] * c_prev[b, k]
            i = 1.0 / (1.0 + np.exp(-ai))
            f = 1.0 / (1.0 + np.exp(-af))
            g = np.tanh(a[b, 2 * H + k])
            cc = f * c_prev[b, k] + i * g
            ao = a[b, 3 * H + k]
            if peephole:
                ao += p[2, k] * cc
            o = 1.0 / (1.0 + np.exp(-ao))
            t = np.tanh(cc)
            gates[b, k] = i
            gates[b, H + k] = f
            gates[b, 2 * H + k] = g
            gates[b, 3 * H + k] = o
            c[b, k] = cc
            tc[b, k] = t
            h[b, k] = o * t
    return h, c, gates, tc


@njit(cache=True)
def _lstm_cell_bwd_nb(dh, dc_next, gates, c_prev, tc, p, peephole):
    B, H = dh.shape
    da = np.empty((B, 4 * H))
    dc_prev = np.empty_like(c_prev)
    dp = np.zeros((3, H))
    for b in range(B):
        for k in range(H):
            i = gates[b, k]
            f = gates[b, H + k]
            g = gates[b, 2 * H + k]
            o = gates[b, 3 * H + k]
            t = tc[b, k]
            dao = dh[b, k] * t * o * (1.0 - o)
            dc = dc_next[b, k] + dh[b, k] * o * (1.0 - t * t)
            if peephole:
                dp[2, k] += dao * (f * c_prev[b, k] + i * g)
                dc += dao * p[2, k]
            dai = dc * g * i * (1.0 - i)
            daf = dc * c_prev[b, k] * f * (1.0 - f)
            dag = dc * i * (1.0 - g * g)
            dcp = dc * f
            if peephole:
                dp[0, k] += dai * c_prev[b, k]
                dp[1, k] += daf * c_prev[b, k]
                dcp += dai * p[0, k] + daf * p[1, k]
            da[b, k] = dai
            da[b, H + k] = daf
            da[b, 2 * H + k] = dag
            da[b, 3 * H + k] = dao
            dc_prev[b, k] = dcp
    return da, dc_prev, dp


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_cell_fwd_np(a, c_prev, p, peephole):
    H = c_prev.shape[1]
    ai, af, ag, ao = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
    if peephole:
        ai = ai + p[0] * c_prev
        af = af + p[1] * c_prev
    i = _sigmoid(ai)
    f = _sigmoid(af)
    g = np.tanh(ag)
    c = f * c_prev + i * g
    if peephole:
        ao = ao + p[2] * c
    o = _sigmoid(ao)
    tc = np.tanh(c)
    return o * tc, c, np.concatenate([i, f, g, o], axis=1), tc


def _lstm_cell_bwd_np(dh, dc_next, gates, c_prev, tc, p, peephole):
    H = dh.shape[1]
    i, f, g, o = gates[:, :H], gates[:, H : 2 * H], gates[:, 2 * H : 3 * H], gates[:, 3 * H :]
    dp = np.zeros((3, H))
    dao = dh * tc * o * (1.0 - o)
    dc = dc_next + dh * o * (1.0 - tc * tc)
    if peephole:
        dp[2] = (dao * (f * c_prev + i * g)).sum(axis=0)
        dc = dc + dao * p[2]
    dai = dc * g * i * (1.0 - i)
    daf = dc * c_prev * f * (1.0 - f)
    dag = dc * i * (1.0 - g * g)
    dc_prev = dc * f
    if peephole:
        dp[0] = (dai * c_prev).sum(axis=0)
        dp[1] = (daf * c_prev).sum(axis=0)
        dc_prev = dc_prev + dai * p[0] + daf * p[1]
    return np.concatenate([dai, daf, dag, dao], axis=1), dc_prev, dp


# Whole-sequence LSTM recurrences, time-major: xw is (T, B, 4H) holding the
# input projection plus bias; the recurrent product h @ U is added per step.


@njit(cache=True)
def _lstm_seq_fwd_nb(xw, U, p, peephole):
    T, B, H4 = xw.shape
    H = H4 // 4
    hs = np.empty((T, B, H))
    cs = np.empty((T, B, H))
    gates = np.empty((T, B, H4))
    tcs = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        a = xw[t] + np.dot(h, U)
        h, c, g, tc = _lstm_cell_fwd_nb(a, c, p, peephole)
        hs[t] = h
        cs[t] = c
        gates[t] = g
        tcs[t] = tc
    return hs, cs, gates, tcs


def _lstm_seq_fwd_np(xw, U, p, peephole):
    T, B, H4 = xw.shape
    H = H4 // 4
    hs = np.empty((T, B, H))
    cs = np.empty((T, B, H))
    gates = np.empty((T, B, H4))
    tcs = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        h, c, gates[t], tcs[t] = _lstm_cell_fwd_np(xw[t] + h @ U, c, p, peephole)
        hs[t] = h
        cs[t] = c
    return hs, cs, gates, tcs


@njit(cache=True)
def _lstm_seq_bwd_nb(dhs, U, hs, cs, gates, tcs, p, peephole):
    T, B, H = dhs.shape
    da_all = np.empty((T, B, 4 * H))
    dU = np.zeros_like(U)
    dp = np.zeros((3, H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    Ut = np.ascontiguousarray(U.T)
    for t in range(T - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else zeros
        c_prev = cs[t - 1] if t > 0 else zeros
        da, dc_next, dpt = _lstm_cell_bwd_nb(dhs[t] + dh_next, dc_next, gates[t], c_prev, tcs[t], p, peephole)
        dp += dpt
        dU += np.dot(h_prev.T, da)
        dh_next = np.dot(da, Ut)
        da_all[t] = da
    return da_all, dU, dp


def _lstm_seq_bwd_np(dhs, U, hs, cs, gates, tcs, p, peephole):
    T, B, H = dhs.shape
    da_all = np.empty((T, B, 4 * H))
    dU = np.zeros_like(U)
    dp = np.zeros((3, H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else zeros
        c_prev = cs[t - 1] if t > 0 else zeros
        da, dc_next, dpt = _lstm_cell_bwd_np(dhs[t] + dh_next, dc_next, gates[t], c_prev, tcs[t], p, peephole)
        dp += dpt
        dU += h_prev.T @ da
        dh_next = da @ U.T
        da_all[t] = da
    return da_all, dU, dp


# ---------------------------------------------------------------------------
# 3x3 convolution, stride 1, zero "same" padding. x: (N, C, H, W), k: (O, C, 3, 3)


@njit(cache=True)
def _conv3_fwd_nb(x, k, bias):
    N, C, H, W = x.shape
    O = k.shape[0]
    out = np.empty((N, O, H, W))
    for n in range(N):
        for o in range(O):
            for r in range(H):
                for s in range(W):
                    acc = bias[o]
                    for c in range(C):
                        for i in range(3):
                            rr = r + i - 1
                            if rr < 0 or rr >= H:
                                continue
                            for j in range(3):
                                ss = s + j - 1
                                if ss < 0 or ss >= W:
                                    continue
                                acc += k[o, c, i, j] * x[n, c, rr, ss]
                    out[n, o, r, s] = acc
    return out


@njit(cache=True)
def _conv3_bwd_nb(x, k, dout):
    N, C, H, W = x.shape
    O = k.shape[0]
    dx = np.zeros_like(x)
    dk = np.zeros_like(k)
    db = np.zeros(O)
    for n in range(N):
        for o in range(O):
            for r in range(H):
                for s in range(W):
                    g = dout[n, o, r, s]
                    if g == 0.0:
                        continue
                    db[o] += g
                    for c in range(C):
                        for i in range(3):
                            rr = r + i - 1
                            if rr < 0 or rr >= H:
                                continue
                            for j in range(3):
                                ss = s + j - 1
                                if ss < 0 or ss >= W:
                                    continue
                                dk[o, c, i, j] += g * x[n, c, rr, ss]
                                dx[n, c, rr, ss] += g * k[o, c, i, j]
    return dx, dk, db


def _im2col3(x):
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, C * 9)


def _conv3_fwd_np(x, k, bias):
    N, C, H, W = x.shape
    O = k.shape[0]
    out = _im2col3(x) @ k.reshape(O, C * 9).T + bias
    return np.ascontiguousarray(out.reshape(N, H, W, O).transpose(0, 3, 1, 2))


def _conv3_bwd_np(x, k, dout):
    N, C, H, W = x.shape
    O = k.shape[0]
    g = dout.transpose(0, 2, 3, 1).reshape(N * H * W, O)
    dk = (g.T @ _im2col3(x)).reshape(k.shape)
    db = g.sum(axis=0)
    # input gradient is a same-padded correlation of dout with the flipped kernel
    kf = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = _conv3_fwd_np(dout, kf, np.zeros(C))
    return dx, dk, db


# Below this many cell states per step the compiled loop wins on call
# overhead; above it numpy's SIMD exp/tanh loops win (benchmarks/bench_kernels.py).
LSTM_FWD_LOOP_MAX = 384


def _lstm_seq_fwd_mixed(xw, U, p, peephole):
    if xw.shape[1] * U.shape[0] <= LSTM_FWD_LOOP_MAX:
        return _lstm_seq_fwd_nb(xw, U, p, peephole)
    return _lstm_seq_fwd_np(xw, U, p, peephole)


if USE_NUMBA:
    prim = _prim_nb
    brute_force = _brute_force_nb
    lstm_seq_fwd = _lstm_seq_fwd_mixed
    lstm_seq_bwd = _lstm_seq_bwd_nb
    conv3_fwd = _conv3_fwd_nb
    conv3_bwd = _conv3_bwd_nb
else:
    prim = _prim_np
    brute_force = _brute_force_np
    lstm_seq_fwd = _lstm_seq_fwd_np
    lstm_seq_bwd = _lstm_seq_bwd_np
    conv3_fwd = _conv3_fwd_np
    conv3_bwd = _conv3_bwd_np
