"""Pure numpy versions of the compiled inner loops in ``_ckernels``."""

import numpy as np


def coded_dot(A, B, G):
    A = np.asarray(A, dtype=np.intp)
    B = np.asarray(B, dtype=np.intp)
    G = np.asarray(G, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError("code arrays have different sequence lengths")
    out = np.zeros((A.shape[0], B.shape[0]))
    for p in range(A.shape[1]):
        out += G[A[:, p][:, None], B[:, p][None, :]]
    return out


def coded_sqnorm(A, G):
    A = np.asarray(A, dtype=np.intp)
    G = np.asarray(G, dtype=np.float64)
    return np.diag(G)[A].sum(axis=1)


def sqdist(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[1] != Y.shape[1]:
        raise ValueError("inputs have different dimensions")
    out = np.empty((X.shape[0], Y.shape[0]))
    # row-blocked explicit differences; matches the compiled loop to rounding
    for i in range(X.shape[0]):
        diff = Y - X[i]
        out[i] = np.einsum("ij,ij->i", diff, diff)
    return out
