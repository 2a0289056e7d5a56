"""Small dense linear-algebra helpers built on symmetric eigendecompositions."""

import numpy as np

from .config import DEFAULT
from .errors import DomainError


def sym(X):
    return 0.5 * (X + X.T)


def asymmetry(X):
    return float(np.max(np.abs(X - X.T))) if X.size else 0.0


def lam_min(X):
    return float(np.linalg.eigvalsh(sym(X))[0])


def lam_max(X):
    return float(np.linalg.eigvalsh(sym(X))[-1])


def opnorm(X):
    """Spectral norm (largest singular value); 0 for empty matrices."""
    X = np.atleast_2d(X)
    if X.size == 0:
        return 0.0
    return float(np.linalg.norm(X, 2))


def spd_power(X, p, floor=DEFAULT.eig_floor):
    """X**p for symmetric positive definite X."""
    w, V = np.linalg.eigh(sym(X))
    if w[0] <= 0:
        raise DomainError(f"matrix is not positive definite (lambda_min={w[0]:.3e})")
    w = np.maximum(w, floor)
    return sym((V * w**p) @ V.T)


def spd_sqrt(X):
    return spd_power(X, 0.5)


def loewner_le(X, Y, tol):
    """True when X <= Y in the Loewner order, up to ``tol`` on eigenvalues."""
    return lam_min(Y - X) >= -tol
