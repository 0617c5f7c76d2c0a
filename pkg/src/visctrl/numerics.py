"""Dense kernels the rest of the engine is built on.

Matrices are 2-D ``float64`` numpy arrays and latents are ``(h, w, c)``
arrays.  Everything is computed in float64; float32 is only the at-rest
format (weights, tensor files).

``matmul`` deliberately does not call BLAS: every output entry is the
left-to-right sum ``a[i,0]*b[0,j] + a[i,1]*b[1,j] + ...``, independent of
the BLAS library and its thread count.  With C-contiguous operands and more
than one output column, numpy's own ``einsum`` kernel (which never calls
BLAS) runs the inner loop over ``j`` and so accumulates ``k`` in exactly that
order.  A single output column would make ``k`` the inner loop, where the
kernel reorders the sum, so that case takes an explicit loop of rank-1
updates.  The unit tests pin both paths to a pure-Python triple loop bitwise.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError, ShapeError


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected rank-2, got shape {a.shape}")
    _check_finite(a, name)
    return a


def as_tensor3(t, name: str = "tensor") -> np.ndarray:
    a = np.asarray(t, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"{name}: expected rank-3 (h, w, c), got shape {a.shape}")
    _check_finite(a, name)
    return a


def _check_finite(a: np.ndarray, name: str) -> None:
    if not np.isfinite(a).all():
        raise DomainError(f"{name}: non-finite entries")


def to_tokens(z: np.ndarray) -> np.ndarray:
    """(h, w, c) latent -> (h*w, c) token matrix, row-major over (h, w)."""
    h, w, c = z.shape
    return z.reshape(h * w, c)


def from_tokens(x: np.ndarray, h: int, w: int) -> np.ndarray:
    if x.shape[0] != h * w:
        raise ShapeError(f"cannot fold {x.shape[0]} tokens into {h}x{w}")
    return x.reshape(h, w, x.shape[1])


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        if b.shape[1] > 1:
            out = np.einsum("ik,kj->ij", np.ascontiguousarray(a), np.ascontiguousarray(b))
        else:
            out = np.zeros((a.shape[0], 1), dtype=np.float64)
            for k in range(a.shape[1]):
                out += a[:, k : k + 1] * b[k : k + 1, :]
    _check_finite(out, "matmul result")
    return out


def softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def attention(q, k, v, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention; returns ``(out, attn_map)``.

    The two stages are kept separate so the map can be inspected.
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if q.shape[1] != d or k.shape[1] != d:
        raise ShapeError(f"attention: q {q.shape} / k {k.shape} do not match d={d}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: {k.shape[0]} keys but {v.shape[0]} values")
    scores = matmul(q, k.T) / math.sqrt(d)
    attn_map = softmax_rows(scores)
    return matmul(attn_map, v), attn_map
