"""Independent brute-force oracles the fast implementations are checked against."""

import numpy as np


def conv2d_loops(x, kernel, stride=1, padding=0):
    """Direct convolution with python loops; x (N,C,H,W), kernel (O,C,kh,kw)."""
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for b in range(n):
        for oc in range(o):
            for u in range(oh):
                for v in range(ow):
                    acc = 0.0
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, ic, u * stride + i, v * stride + j] * kernel[oc, ic, i, j]
                    out[b, oc, u, v] = acc
    return out


def cmc_map_loops(distmat, q_ids, g_ids, q_cams, g_cams):
    """Sort-and-scan retrieval metrics; ties broken by gallery index."""
    nq, ng = distmat.shape
    cmc = np.zeros(ng)
    aps = []
    excluded = 0
    for q in range(nq):
        order = sorted(range(ng), key=lambda j: (distmat[q, j], j))
        kept = [j for j in order if not (g_ids[j] == q_ids[q] and g_cams[j] == q_cams[q])]
        rel = [k for k, j in enumerate(kept) if g_ids[j] == q_ids[q]]
        if not rel:
            excluded += 1
            continue
        first = rel[0]
        cmc[first:] += 1.0
        ap = 0.0
        for hit_number, position in enumerate(rel, start=1):
            ap += hit_number / (position + 1.0)
        aps.append(ap / len(rel))
    valid = nq - excluded
    return cmc / valid, float(np.mean(aps)), excluded
