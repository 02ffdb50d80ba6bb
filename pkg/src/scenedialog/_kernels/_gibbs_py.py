"""Pure-Python Gibbs sweeps; same arithmetic order as the compiled kernels."""

import numpy as np


def gibbs_sweep(words, docs, z, ndk, nkw, nk, alpha, beta_kw, beta_k, uniforms):
    last = len(nk) - 1
    for i in range(len(words)):
        w, d, old = words[i], docs[i], z[i]
        ndk[d, old] -= 1
        nkw[old, w] -= 1
        nk[old] -= 1
        cum = np.cumsum((ndk[d] + alpha) * (nkw[:, w] + beta_kw[:, w]) / (nk + beta_k))
        new = min(int(np.searchsorted(cum, uniforms[i] * cum[-1], side="right")), last)
        z[i] = new
        ndk[d, new] += 1
        nkw[new, w] += 1
        nk[new] += 1


def foldin_sweep(words, z, nd, phi, alpha, uniforms):
    last = len(nd) - 1
    for i in range(len(words)):
        w = words[i]
        nd[z[i]] -= 1
        cum = np.cumsum((nd + alpha) * phi[:, w])
        new = min(int(np.searchsorted(cum, uniforms[i] * cum[-1], side="right")), last)
        z[i] = new
        nd[new] += 1
