"""Pure numpy fallback for the compiled kernels.

The loops run over the contracted index so each output entry is accumulated
in the same left-to-right order as the C loops; results agree bitwise.
"""
import numpy as np


def matmul(a, b):
    m, k = a.shape
    c = np.zeros((m, b.shape[1]))
    for t in range(k):
        c += a[:, t, None] * b[t]
    return c


def pairwise_sq_dist(q, p):
    out = np.zeros((q.shape[0], p.shape[0]))
    for j in range(q.shape[1]):
        diff = q[:, j, None] - p[None, :, j]
        out += diff * diff
    return out


def pairwise_sq_dist_backward(q, p, g):
    nq, d = q.shape
    gq = np.zeros((nq, d))
    gp = np.zeros((p.shape[0], d))
    # C order: i outer, n inner; gq[i] sums over n, gp[n] sums over i
    for n in range(p.shape[0]):
        two_g = 2.0 * g[:, n, None]
        gq += two_g * (q - p[n])
    for i in range(nq):
        two_g = 2.0 * g[i, :, None]
        gp -= two_g * (q[i] - p)
    return gq, gp
