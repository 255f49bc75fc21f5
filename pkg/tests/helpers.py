import numpy as np
from scipy.linalg import subspace_angles


def random_pd(rng, n, cond=100.0):
    """Random covariance with eigenvalues spread geometrically over [1/cond, 1]."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.geomspace(1.0, cond, n) / cond
    return (Q * ev) @ Q.T


def principal_angles(A, B):
    return subspace_angles(A, B)
