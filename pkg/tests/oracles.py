"""Naive loop implementations used as independent references in tests."""
import numpy as np


def conv_direct(x, w, b):
    n, c, length = x.shape
    o, _, k = w.shape
    p = k // 2
    out = np.zeros((n, o, length))
    for a in range(n):
        for oo in range(o):
            for i in range(length):
                acc = b[oo]
                for cc in range(c):
                    for kk in range(k):
                        j = i + kk - p
                        if 0 <= j < length:
                            acc += x[a, cc, j] * w[oo, cc, kk]
                out[a, oo, i] = acc
    return out


def transconv_direct(x, w, b):
    """Scatter-add: input position i, tap k lands on output position i + k - K//2."""
    n, ci, length = x.shape
    _, co, k = w.shape
    p = k // 2
    out = np.zeros((n, co, length)) + np.asarray(b)[None, :, None]
    for a in range(n):
        for c in range(ci):
            for i in range(length):
                for oo in range(co):
                    for kk in range(k):
                        j = i + kk - p
                        if 0 <= j < length:
                            out[a, oo, j] += x[a, c, i] * w[c, oo, kk]
    return out


def maxpool_direct(x, window):
    n, c, length = x.shape
    out = np.zeros((n, c, length // window))
    idx = np.zeros((n, c, length // window), dtype=np.int64)
    for a in range(n):
        for cc in range(c):
            for i in range(length // window):
                best, arg = -np.inf, 0
                for k in range(window):
                    if x[a, cc, i * window + k] > best:
                        best, arg = x[a, cc, i * window + k], k
                out[a, cc, i], idx[a, cc, i] = best, arg
    return out, idx


def upsample_direct(x, factor):
    n, c, length = x.shape
    out = np.zeros((n, c, length * factor))
    for i in range(length * factor):
        out[:, :, i] = x[:, :, i // factor]
    return out


def central_difference(f, arr, h=1e-6):
    """Numerical gradient of scalar ``f()`` with respect to every element of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gf[k] = (fp - fm) / (2 * h)
    return g
