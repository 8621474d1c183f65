"""Small linear-algebra helpers shared across the package."""
from __future__ import annotations

import numpy as np

RANK_RTOL = 1e-8


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """Coerce to a float64 2-D array, raising ValueError on bad shape."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def sym(M: np.ndarray) -> np.ndarray:
    """Symmetrize: (M + M^T)/2."""
    return 0.5 * (M + M.T)


def psd_sqrt(Q: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix, clamping rounding-level negative eigenvalues."""
    w, V = np.linalg.eigh(sym(Q))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def rank_with_tol(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank from singular values: values below rtol * sigma_max count as zero."""
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def min_eig_sym(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(sym(M))[0])


def max_eig_sym(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(sym(M))[-1])


def frozen(arr: np.ndarray) -> np.ndarray:
    """Return a read-only float64 copy (value-type discipline for dataclass fields)."""
    out = np.array(arr, dtype=float)
    out.flags.writeable = False
    return out
