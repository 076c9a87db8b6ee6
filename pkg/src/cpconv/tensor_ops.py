"""Dense tensor primitives shared by the solvers and the network engine.

Conventions, fixed once here and inherited by every other module:

* tensors are numpy ndarrays in row-major (C) order, float32 or float64;
* ``unfold(t, m)`` puts mode ``m`` on the rows; the columns enumerate the
  remaining axes in their original order, last axis fastest;
* ``khatri_rao(a, b)`` is the column-wise Kronecker product with the rows
  of ``a`` varying slowest.

Together these conventions give the identity

    unfold(rank_r_sum(factors), m) == factors[m] @ kr(others).T

where ``others`` are the remaining factors in axis order, which is exactly
what the alternating/normal-equation solvers rely on.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "as_tensor",
    "outer_rank1",
    "unfold",
    "khatri_rao",
    "frobenius_norm",
    "relative_error",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def as_tensor(t, name: str = "tensor") -> np.ndarray:
    """Coerce to a finite float ndarray; the validation gate for public ops."""
    arr = np.asarray(t)
    if arr.dtype not in _FLOAT_DTYPES:
        if not np.issubdtype(arr.dtype, np.number) or np.issubdtype(arr.dtype, np.complexfloating):
            raise ValueError(f"{name} must be real-valued, got dtype {arr.dtype}")
        arr = arr.astype(np.float64)
    if arr.size == 0:
        raise ValueError(f"{name} must have at least one element")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite elements")
    return arr


def outer_rank1(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Outer product of D >= 2 vectors: element (i_1..i_D) = prod_k v_k[i_k]."""
    if len(vectors) < 2:
        raise ValueError("outer_rank1 needs at least two vectors")
    vecs = [as_tensor(v, f"vector {k}") for k, v in enumerate(vectors)]
    for k, v in enumerate(vecs):
        if v.ndim != 1:
            raise ValueError(f"vector {k} has {v.ndim} dimensions, expected 1")
    out = vecs[0]
    for v in vecs[1:]:
        out = out[..., None] * v
    return out


def unfold(t, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization: shape ``(t.shape[mode], prod(rest))``.

    Column order is the row-major enumeration of the remaining axes in
    their original order (the package-wide canonical convention).
    """
    arr = as_tensor(t)
    if not 0 <= mode < arr.ndim:
        raise ValueError(f"mode {mode} out of range for a {arr.ndim}-way tensor")
    return np.moveaxis(arr, mode, 0).reshape(arr.shape[mode], -1)


def khatri_rao(a, b) -> np.ndarray:
    """Column-wise Kronecker product of two matrices with equal column count.

    Column r is ``kron(a[:, r], b[:, r])``: the row index of ``a`` varies
    slowest, matching the column order produced by :func:`unfold`.
    """
    am = as_tensor(a, "a")
    bm = as_tensor(b, "b")
    if am.ndim != 2 or bm.ndim != 2:
        raise ValueError("khatri_rao operates on matrices")
    if am.shape[1] != bm.shape[1]:
        raise ValueError(
            f"rank mismatch: {am.shape[1]} columns vs {bm.shape[1]} columns"
        )
    return (am[:, None, :] * bm[None, :, :]).reshape(-1, am.shape[1])


def frobenius_norm(t) -> float:
    """sqrt of the sum of squared elements."""
    return float(np.linalg.norm(as_tensor(t).ravel()))


def relative_error(approx, ref) -> float:
    """``||approx - ref|| / ||ref||`` in the Frobenius norm."""
    a = as_tensor(approx, "approx")
    r = as_tensor(ref, "ref")
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {r.shape}")
    nref = float(np.linalg.norm(r.ravel()))
    if nref == 0.0:
        raise ValueError("reference tensor has zero norm")
    return float(np.linalg.norm((a - r).ravel())) / nref
