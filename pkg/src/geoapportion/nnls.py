"""Batch non-negative least squares.

All solvers work on the normal-equation form

    minimize_w  0.5 * w' G w - b' w   subject to  w >= 0

one problem per row of ``B`` with a shared Gram matrix ``G``. For
``min ||y - w H||`` use ``G = H H'`` and ``b = H y``.
"""

from itertools import combinations

import numpy as np


class NNLSError(RuntimeError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


def nnls_active_set(G, b, max_iter=None, tol=None):
    """Lawson-Hanson active-set solve of a single problem.

    The entering variable is the largest positive component of the negative
    gradient (smallest index on ties). ``max_iter`` caps outer iterations and
    defaults to ``10 * K``.
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    K = b.shape[0]
    max_iter = 10 * K if max_iter is None else max_iter
    if tol is None:
        tol = 1e-12 * max(1.0, np.abs(b).max(initial=0.0), np.abs(G).max(initial=0.0))
    passive = np.zeros(K, dtype=bool)
    w = np.zeros(K)
    grad = b.copy()
    for _ in range(max_iter):
        cand = np.where(~passive, grad, -np.inf)
        j = int(np.argmax(cand))
        if passive.all() or cand[j] <= tol:
            return w
        passive[j] = True
        for _inner in range(3 * K + 3):
            idx = np.flatnonzero(passive)
            s = np.zeros(K)
            s[idx] = _solve_psd(G[np.ix_(idx, idx)], b[idx])
            if (s[idx] > 0).all():
                w = s
                break
            neg = idx[s[idx] <= 0]
            alpha = np.min(w[neg] / (w[neg] - s[neg]))
            w = w + alpha * (s - w)
            passive &= w > tol
            w[~passive] = 0.0
        grad = b - G @ w
    raise NNLSError(f"active-set NNLS did not converge in {max_iter} iterations")


def _solve_psd(A, rhs):
    try:
        return np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, rhs, rcond=None)[0]


def nnls_batch(G, B, max_subsets=4096):
    """Solve one NNLS problem per row of ``B`` (n x K); returns ``W`` (n x K).

    Candidate active sets are visited in order of size, then lexicographically;
    each row takes the first set whose solution satisfies the KKT conditions.
    Rows left uncertified fall back to :func:`nnls_active_set`.
    """
    G = np.asarray(G, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, K = B.shape
    W = np.zeros((n, K))
    scale = max(1.0, np.abs(G).max(initial=0.0))
    bmag = np.maximum(np.abs(B).max(axis=1), 1.0)
    tol = 1e-10 * scale * bmag

    # empty support: w = 0 is optimal iff b <= 0
    todo = ~(B <= tol[:, None]).all(axis=1)
    if K <= 12 and 2**K <= max_subsets:
        for size in range(1, K + 1):
            for support in combinations(range(K), size):
                rows = np.flatnonzero(todo)
                if rows.size == 0:
                    break
                S = list(support)
                G_SS = G[np.ix_(S, S)]
                if np.linalg.matrix_rank(G_SS) < size:
                    continue
                w_S = np.linalg.solve(G_SS, B[np.ix_(rows, S)].T).T
                ok = (w_S >= -tol[rows, None]).all(axis=1)
                if size < K:
                    comp = [k for k in range(K) if k not in support]
                    grad = B[np.ix_(rows, comp)] - w_S @ G[np.ix_(S, comp)]
                    ok &= (grad <= tol[rows, None]).all(axis=1)
                if ok.any():
                    hit = rows[ok]
                    W[np.ix_(hit, S)] = np.maximum(w_S[ok], 0.0)
                    todo[hit] = False
    for i in np.flatnonzero(todo):
        try:
            W[i] = nnls_active_set(G, B[i])
        except NNLSError as exc:
            raise NNLSError(str(exc), row=int(i)) from None
    return W


def nnls_rows(Y, H):
    """Row-wise ``argmin_{w >= 0} ||y_i - w H||`` for data ``Y`` (n x J), ``H`` (K x J).

    Returns ``(W, residual_norms)``.
    """
    Y = np.asarray(Y, dtype=float)
    H = np.asarray(H, dtype=float)
    W = nnls_batch(H @ H.T, Y @ H.T)
    resid = np.linalg.norm(Y - W @ H, axis=1)
    return W, resid
