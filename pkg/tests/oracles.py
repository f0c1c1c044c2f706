"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, no vectorization
tricks) and shares no code with the package.
"""
import math

import numpy as np


def naive_matmul(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_difference(f, x, h=1e-6):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def naive_softmax(v):
    e = [math.exp(x) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def naive_layer_norm(v, eps):
    n = len(v)
    mu = sum(v) / n
    var = sum((x - mu) ** 2 for x in v) / n
    return np.array([(x - mu) / math.sqrt(var + eps) for x in v])


def naive_linear(x, W, b):
    """x [n, in], W [out, in], b [out] by explicit loops."""
    n, d_in = x.shape
    d_out = W.shape[0]
    out = np.zeros((n, d_out))
    for i in range(n):
        for o in range(d_out):
            s = b[o]
            for j in range(d_in):
                s += x[i, j] * W[o, j]
            out[i, o] = s
    return out


def brute_force_causal_attention(x, Wq, Wk, Wv, Wo, bq, bv, bo, n_heads):
    """Single sequence x [L, d]; weights stored [out, in] like the package."""
    L, d = x.shape
    dh = d // n_heads
    q = x @ Wq.T + bq
    k = x @ Wk.T
    v = x @ Wv.T + bv
    out = np.zeros((L, d))
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        for t in range(L):
            scores = [float(q[t, sl] @ k[s, sl]) / math.sqrt(dh) for s in range(t + 1)]
            w = naive_softmax(scores)
            for s in range(t + 1):
                out[t, sl] += w[s] * v[s, sl]
    return out @ Wo.T + bo


def sequential_scan(delta, A, B, C, x, D):
    """Per-sample, per-step, per-channel loops of the selective recurrence."""
    b, L, di = x.shape
    n = A.shape[1]
    y = np.zeros((b, L, di))
    for s in range(b):
        h = np.zeros((di, n))
        for t in range(L):
            for c in range(di):
                for j in range(n):
                    h[c, j] = math.exp(delta[s, t, c] * A[c, j]) * h[c, j] \
                        + delta[s, t, c] * B[s, t, j] * x[s, t, c]
                y[s, t, c] = sum(C[s, t, j] * h[c, j] for j in range(n)) + D[c] * x[s, t, c]
    return y


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def xlstm_stabilized(i, f, o, z):
    """Scalar-loop sLSTM recurrence with stabilizer; inputs [L, d] of pre-activations,
    ``f`` already in log space. Returns h [L, d]."""
    L, d = i.shape
    h = np.zeros((L, d))
    for c in range(d):
        cc, nn, m = 0.0, 0.0, -1e30
        for t in range(L):
            m_new = max(f[t, c] + m, i[t, c])
            ig = math.exp(i[t, c] - m_new)
            fg = math.exp(f[t, c] + m - m_new)
            cc = fg * cc + ig * math.tanh(z[t, c])
            nn = fg * nn + ig
            m = m_new
            h[t, c] = _sig(o[t, c]) * cc / nn
    return h


def xlstm_unstabilized(i, f, o, z):
    """Same recurrence with raw exponentials (valid for small pre-activations)."""
    L, d = i.shape
    h = np.zeros((L, d))
    for c in range(d):
        cc, nn = 0.0, 0.0
        for t in range(L):
            ig, fg = math.exp(i[t, c]), math.exp(f[t, c])
            cc = fg * cc + ig * math.tanh(z[t, c])
            nn = fg * nn + ig
            h[t, c] = _sig(o[t, c]) * cc / nn
    return h


def naive_fps(points, k, start=0):
    """O(k n) greedy farthest point sampling, ties to the lowest index."""
    pts = [tuple(map(float, p)) for p in points]
    chosen = [start]
    for _ in range(k - 1):
        best, best_d = None, -1.0
        for i, p in enumerate(pts):
            if i in chosen:
                continue
            dmin = min(math.dist(p, pts[j]) for j in chosen)
            if dmin > best_d:
                best, best_d = i, dmin
        chosen.append(best)
    return chosen


def min_pairwise_distance(pts):
    pts = np.asarray(pts)
    best = math.inf
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            best = min(best, float(np.linalg.norm(pts[i] - pts[j])))
    return best


def cumulative_alpha_bar(T=1000, beta_start=1e-4, beta_end=0.02):
    """Running product of (1 - beta_t) over a linear beta grid, as a Python list."""
    out, acc = [], 1.0
    for t in range(T):
        beta = beta_start + (beta_end - beta_start) * t / (T - 1)
        acc *= 1.0 - beta
        out.append(acc)
    return out


def karras_direct(n, smin, smax, rho):
    if n == 1:
        return [smax, 0.0]
    vals = [(smax ** (1 / rho) + i / (n - 1) * (smin ** (1 / rho) - smax ** (1 / rho))) ** rho
            for i in range(n)]
    return vals + [0.0]
