"""Pure-numpy kernels; reference behaviour for the compiled extension."""
import numpy as np


def neumann_chain(Q, noise, scale, step, V, accumulate=False):
    """Apply ``(I - step*H_k)...(I - step*H_1)`` to every row of ``V``.

    ``H_i = Q + scale * (N_i + N_i^T) / 2`` with ``N_i = noise[i]``; factor 1 acts
    first.  With ``accumulate`` the sum of all prefixes (including the empty
    one) is returned instead of the full product.
    """
    Q = np.asarray(Q, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    cur = np.array(V, dtype=np.float64, copy=True)
    p = Q.shape[0]
    if cur.ndim != 2 or cur.shape[1] != p or Q.shape[1] != p:
        raise ValueError("dimension mismatch in neumann_chain")
    if noise.shape[0] > 0 and noise.shape[1:] != (p, p):
        raise ValueError("noise stack has wrong shape")
    out = cur.copy() if accumulate else None
    half = 0.5 * scale
    for Ni in noise:
        H = Q + half * (Ni + Ni.T)
        # row by row so a row's result never depends on how many rows ride along
        for r in range(cur.shape[0]):
            cur[r] -= step * (H @ cur[r])
        if accumulate:
            out += cur
    return out if accumulate else cur
