"""Dense matrix/tensor kernels: validation, SVD, Schatten norms, outer
products and entropy.

Everything here operates on plain ``numpy`` arrays of float64.  Inputs
are validated once at the boundary (finite entries, sane shapes); the
numerical routines themselves assume validated data.

The SVD is a one-sided Jacobi: cyclic sweeps of plane rotations that
orthogonalize column pairs.  At the small dimensions this package
targets (<= 64) it is simple, accurate, and has no dependency beyond
numpy array arithmetic.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

__all__ = [
    "KernelError",
    "SvdResult",
    "SPECTRAL",
    "as_matrix",
    "as_tensor",
    "svd",
    "svd2x2_analytic",
    "schatten_norm",
    "outer_product",
    "shannon_entropy",
]

_JACOBI_TOL = 1e-14
_JACOBI_MAX_SWEEPS = 100


class KernelError(RuntimeError):
    """A numerical kernel failed to converge.  Carries the offending input."""

    def __init__(self, message: str, matrix: np.ndarray):
        super().__init__(message)
        self.matrix = matrix


class _Spectral(enum.Enum):
    SPECTRAL = "spectral"


#: Distinguished order selecting the spectral norm (largest singular
#: value) from the Schatten family.  Kept as an enum member rather than
#: a float infinity so the infinite order cannot be produced by
#: arithmetic accident.
SPECTRAL = _Spectral.SPECTRAL

SchattenOrder = Union[float, _Spectral]


def as_matrix(a) -> np.ndarray:
    """Validate and return ``a`` as a 2-D float64 array.

    Rejects non-2-D shapes, empty axes, and non-finite entries.
    """
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"matrix axes must be positive, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    return m


def as_tensor(a) -> np.ndarray:
    """Validate and return ``a`` as an order >= 1 dense float64 array."""
    t = np.asarray(a, dtype=float)
    if t.ndim < 1:
        t = t.reshape(1)
    if any(d < 1 for d in t.shape):
        raise ValueError(f"tensor axes must be positive, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor entries must be finite")
    return t


@dataclass(frozen=True)
class SvdResult:
    """Full SVD of a matrix: ``sum_r sigmas[r] * u[:, r] @ v[:, r].T``.

    ``u`` is (d, k), ``v`` is (d', k) with orthonormal columns and
    k = min(d, d'); ``sigmas`` is non-increasing and non-negative.
    """

    u: np.ndarray
    sigmas: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigmas) @ self.v.T


def _complete_orthonormal(q: np.ndarray, have: int) -> np.ndarray:
    # Fill columns have.. with an orthonormal completion of the first
    # `have` columns, drawn from the standard basis by Gram-Schmidt.
    d, k = q.shape
    col = have
    for cand in range(d):
        if col >= k:
            break
        w = np.zeros(d)
        w[cand] = 1.0
        w -= q[:, :col] @ (q[:, :col].T @ w)
        n = math.sqrt(float(w @ w))
        if n > 1e-8:
            q[:, col] = w / n
            col += 1
    if col < k:  # numerically impossible for k <= d, guarded anyway
        raise KernelError("failed to complete an orthonormal basis", q)
    return q


def svd(m) -> SvdResult:
    """One-sided Jacobi SVD with cyclic sweeps.

    Rotations stop once every column pair is orthogonal to relative
    precision 1e-14; raises :class:`KernelError` if 100 sweeps do not
    reach that point.  Singular values come back sorted descending, and
    each left vector is sign-normalized so its largest-magnitude entry
    is non-negative.
    """
    a = as_matrix(m)
    transposed = a.shape[0] < a.shape[1]
    b = (a.T if transposed else a).copy()
    d, k = b.shape
    vmat = np.eye(k)

    for _ in range(_JACOBI_MAX_SWEEPS):
        off = 0.0
        for i in range(k - 1):
            for j in range(i + 1, k):
                bi = b[:, i]
                bj = b[:, j]
                aii = float(bi @ bi)
                ajj = float(bj @ bj)
                aij = float(bi @ bj)
                # norms multiplied after the square roots: the product
                # of the squared norms can underflow even when both are
                # comfortably representable
                denom = math.sqrt(aii) * math.sqrt(ajj)
                if denom == 0.0:
                    continue
                rel = abs(aij) / denom
                off = max(off, rel)
                if rel <= _JACOBI_TOL:
                    continue
                zeta = (ajj - aii) / (2.0 * aij)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                gi = c * bi - s * bj
                gj = s * bi + c * bj
                b[:, i] = gi
                b[:, j] = gj
                vi = c * vmat[:, i] - s * vmat[:, j]
                vj = s * vmat[:, i] + c * vmat[:, j]
                vmat[:, i] = vi
                vmat[:, j] = vj
        if off <= _JACOBI_TOL:
            break
    else:
        raise KernelError("Jacobi SVD did not converge within the sweep cap", a)

    sigmas = np.sqrt(np.sum(b * b, axis=0))
    order = np.argsort(-sigmas, kind="stable")
    sigmas = sigmas[order]
    b = b[:, order]
    vmat = vmat[:, order]

    u = np.zeros((d, k))
    have = 0
    scale = sigmas[0] if sigmas[0] > 0 else 1.0
    for r in range(k):
        if sigmas[r] > scale * 1e-300 and sigmas[r] > 0.0:
            u[:, r] = b[:, r] / sigmas[r]
            have = r + 1
        else:
            sigmas[r] = 0.0
    if have < k:
        u = _complete_orthonormal(u, have)

    # sign convention: largest-magnitude entry of each left vector >= 0
    for r in range(k):
        lead = np.argmax(np.abs(u[:, r]))
        if u[lead, r] < 0:
            u[:, r] = -u[:, r]
            vmat[:, r] = -vmat[:, r]

    if transposed:
        u, vmat = vmat, u
    return SvdResult(u=u, sigmas=sigmas, v=vmat)


def svd2x2_analytic(m) -> tuple[float, float]:
    """Closed-form singular values of a 2x2 matrix, largest first.

    Uses the exact rotation-invariant form: with e = a+d, f = a-d,
    g = b+c, h = b-c, the singular values are (|q|+|r|)/2 and
    ||q|-|r||/2 for q = hypot(e, h), r = hypot(f, g).  Equivalent to
    the quadratic formula on the eigenvalues of the Gram matrix, but
    immune to cancellation.
    """
    w = as_matrix(m)
    if w.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {w.shape}")
    a, b = float(w[0, 0]), float(w[0, 1])
    c, d = float(w[1, 0]), float(w[1, 1])
    q = math.hypot(a + d, b - c)
    r = math.hypot(a - d, b + c)
    s1 = 0.5 * (q + r)
    s2 = 0.5 * abs(q - r)
    return s1, s2


def schatten_norm(m, p: SchattenOrder) -> float:
    """Schatten norm of order ``p``: ``(sum_r sigma_r**p) ** (1/p)``.

    ``p`` must be a positive real or :data:`SPECTRAL` (the max singular
    value).  p = 1 is nuclear, p = 2 is Frobenius; p < 1 gives the
    quasi-norm variant.  A float infinity is accepted and treated as
    :data:`SPECTRAL`.
    """
    w = as_matrix(m)
    if isinstance(p, _Spectral) or (isinstance(p, float) and math.isinf(p) and p > 0):
        sigmas = _sigmas_of(w)
        return float(sigmas[0])
    pf = float(p)
    if not pf > 0:
        raise ValueError(f"Schatten order must be positive, got {p!r}")
    if pf == 2.0:
        # Frobenius: no SVD needed
        return float(np.sqrt(np.sum(w * w)))
    sigmas = _sigmas_of(w)
    return float(np.sum(sigmas**pf) ** (1.0 / pf))


def _sigmas_of(w: np.ndarray) -> np.ndarray:
    if w.shape == (2, 2):
        s1, s2 = svd2x2_analytic(w)
        return np.array([s1, s2])
    return svd(w).sigmas


def outer_product(vectors: Sequence) -> np.ndarray:
    """Outer product of N >= 1 vectors, an order-N tensor.

    Entry (i1, ..., iN) is the product of the vectors' entries at
    those indices.
    """
    if len(vectors) == 0:
        raise ValueError("outer_product needs at least one vector")
    vs = []
    for v in vectors:
        arr = np.asarray(v, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("outer_product arguments must be non-empty vectors")
        if not np.all(np.isfinite(arr)):
            raise ValueError("vector entries must be finite")
        vs.append(arr)
    out = vs[0]
    for v in vs[1:]:
        out = np.multiply.outer(out, v)
    return out


def shannon_entropy(dist) -> float:
    """Entropy ``-sum rho ln rho`` of a distribution, with 0 ln 0 = 0.

    The input must be non-negative and sum to 1 within 1e-12.
    """
    rho = np.asarray(dist, dtype=float)
    if rho.ndim != 1 or rho.size == 0:
        raise ValueError("expected a non-empty 1-D distribution")
    if np.any(rho < 0) or not np.all(np.isfinite(rho)):
        raise ValueError("distribution entries must be finite and non-negative")
    total = float(rho.sum())
    if abs(total - 1.0) > 1e-12:
        raise ValueError(f"distribution must sum to 1 (got {total!r})")
    pos = rho[rho > 0]
    return float(-(pos * np.log(pos)).sum())
