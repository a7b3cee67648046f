"""Rank surrogates and loss-driven bound evaluators.

Two continuous stand-ins for rank are provided: the effective rank
(exponential of the entropy of the normalized singular-value
distribution) and the Frobenius distance from the best rank-r
approximant.  On top of these sit evaluators for the analytic
guarantees that hold along gradient-flow trajectories of the corner
completion tasks in :mod:`implreg.matfac`: a lower bound on any
Schatten (quasi-)norm of the product matrix plus upper bounds on its
effective rank and its distance from rank one, each a closed-form
function of the running loss.

Lower bounds can be negative ("vacuous") at high loss; they are
reported as computed, never clamped, so evaluator bugs stay visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import SPECTRAL, SchattenOrder, as_matrix, schatten_norm, svd

__all__ = [
    "QuasiNormSpec",
    "BoundReport",
    "UnbalancedInitReport",
    "nuclear",
    "frobenius",
    "spectral",
    "schatten",
    "DEFAULT_SPECS",
    "effective_rank",
    "effective_rank_of_sigmas",
    "dist_from_rank",
    "solution_singular_values",
    "perturbed_solution_singular_values",
    "base_task_bounds",
    "perturbed_task_bounds",
    "unbalanced_init_report",
    "solution_norm_argmin",
]


@dataclass(frozen=True)
class QuasiNormSpec:
    """A Schatten-family (quasi-)norm with its triangle constant.

    ``c`` is the smallest constant with ||A + B|| <= c (||A|| + ||B||):
    1 for p >= 1 and 2^(1/p - 1) for p < 1.  ``basis_norms`` holds the
    norms of the four 2x2 single-entry matrices (all 1 in this family).
    """

    p: SchattenOrder
    c: float = field(init=False)
    basis_norms: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.p is SPECTRAL:
            c = 1.0
        else:
            pf = float(self.p)
            if not pf > 0:
                raise ValueError("Schatten order must be positive")
            c = 1.0 if pf >= 1.0 else 2.0 ** (1.0 / pf - 1.0)
        object.__setattr__(self, "c", c)

    @property
    def name(self) -> str:
        if self.p is SPECTRAL:
            return "spectral"
        if self.p == 1.0:
            return "nuclear"
        if self.p == 2.0:
            return "frobenius"
        return f"schatten_{self.p:g}"

    def norm(self, m) -> float:
        return schatten_norm(m, self.p)


def nuclear() -> QuasiNormSpec:
    return QuasiNormSpec(p=1.0)


def frobenius() -> QuasiNormSpec:
    return QuasiNormSpec(p=2.0)


def spectral() -> QuasiNormSpec:
    return QuasiNormSpec(p=SPECTRAL)


def schatten(p: float) -> QuasiNormSpec:
    return QuasiNormSpec(p=p)


#: The default battery used in tests and logs: quasi-norm, nuclear,
#: Frobenius, spectral.
DEFAULT_SPECS: tuple[QuasiNormSpec, ...] = (schatten(0.5), nuclear(), frobenius(), spectral())


@dataclass(frozen=True)
class BoundReport:
    """One evaluated bound: its name, value, direction, and the inputs
    it was computed from.  ``value`` may be +inf (as the loss tends to
    zero) or negative (a vacuous lower bound, recorded as-is)."""

    name: str
    value: float
    kind: str  # "lower" | "upper"
    inputs: dict[str, float]


# ---------------------------------------------------------------------------
# rank surrogates


def effective_rank_of_sigmas(sigmas: Sequence[float]) -> float:
    """Effective rank from precomputed singular values."""
    sig = np.asarray(sigmas, dtype=float)
    total = float(sig.sum())
    if total <= 0.0:
        raise ValueError("effective rank is undefined for the zero matrix")
    rho = sig / total
    pos = rho[rho > 0]
    return float(np.exp(-(pos * np.log(pos)).sum()))


def effective_rank(m) -> float:
    """exp of the Shannon entropy of the singular-value distribution.

    Lies in (0, min(d, d')]; equals the integer rank exactly when all
    non-zero singular values coincide.  Undefined (raises) for the zero
    matrix.
    """
    return effective_rank_of_sigmas(svd(as_matrix(m)).sigmas)


def dist_from_rank(m, r: int) -> float:
    """Frobenius distance from the set of matrices with rank <= r,
    i.e. sqrt(sum of squared singular values past the r-th)."""
    w = as_matrix(m)
    k = min(w.shape)
    if not (0 <= r <= k):
        raise ValueError(f"rank bound {r} out of range [0, {k}]")
    sig = svd(w).sigmas
    tail = sig[r:]
    return float(np.sqrt((tail * tail).sum()))


# ---------------------------------------------------------------------------
# closed-form singular values along the solution families


def solution_singular_values(free_entry: float) -> tuple[float, float]:
    """Singular values of the base-task solution with the given free
    entry x: (|x| + sqrt(x^2 + 4)) / 2 and (sqrt(x^2 + 4) - |x|) / 2."""
    x = abs(float(free_entry))
    root = math.sqrt(x * x + 4.0)
    return (x + root) / 2.0, (root - x) / 2.0


def perturbed_solution_singular_values(
    free_entry: float, z: float, z_prime: float, eps: float
) -> tuple[float, float]:
    """Singular values of the perturbed-task solution with the given free
    entry: the squared values are (S +- sqrt(S^2 - 4 D^2)) / 2 with
    S the squared Frobenius norm and D the determinant x*eps - z*z'."""
    x = float(free_entry)
    s = x * x + z * z + z_prime * z_prime + eps * eps
    det = x * eps - z * z_prime
    inner = max(s * s - 4.0 * det * det, 0.0)
    root = math.sqrt(inner)
    s1 = math.sqrt((s + root) / 2.0)
    s2 = math.sqrt(max((s - root) / 2.0, 0.0))
    return s1, s2


# ---------------------------------------------------------------------------
# bound evaluators


def _sqrt2l(ell: float) -> float:
    return math.sqrt(2.0 * ell)


def _exp_sat(x: float) -> float:
    # exp that saturates to +inf instead of raising: the report formulas
    # legitimately overflow doubles for tiny defects
    return math.inf if x > 709.0 else math.exp(x)


def base_task_bounds(ell: float, spec: QuasiNormSpec) -> tuple[BoundReport, BoundReport, BoundReport]:
    """Bounds holding along positive-determinant trajectories of the base
    task at loss ``ell``:

    - ||W|| >= a / sqrt(ell) - b with a = ||e1 e1^T|| / (sqrt(2) c) and
      b = max(sqrt(2) a, 8 c^2 max_ij ||e_i e_j^T||);
    - erank(W) <= 1 + (2 sqrt(12) / ln 2) sqrt(ell);
    - distance from rank one <= 3 sqrt(2) sqrt(ell).
    """
    if ell < 0:
        raise ValueError("loss must be non-negative")
    e11 = spec.basis_norms[0]
    max_basis = max(spec.basis_norms)
    a = e11 / (math.sqrt(2.0) * spec.c)
    b = max(math.sqrt(2.0) * a, 8.0 * spec.c**2 * max_basis)
    norm_lb = math.inf if ell == 0.0 else a / math.sqrt(ell) - b
    erank_ub = 1.0 + (2.0 * math.sqrt(12.0) / math.log(2.0)) * math.sqrt(ell)
    dist_ub = 3.0 * math.sqrt(2.0) * math.sqrt(ell)
    inputs = {"loss": ell, "a": a, "b": b, "c": spec.c}
    return (
        BoundReport("norm_lower", norm_lb, "lower", inputs),
        BoundReport("erank_upper", erank_ub, "upper", {"loss": ell, "inf_erank": 1.0}),
        BoundReport("dist_upper", dist_ub, "upper", {"loss": ell}),
    )


def perturbed_task_bounds(
    ell: float, z: float, z_prime: float, eps: float, spec: QuasiNormSpec
) -> tuple[BoundReport, BoundReport, BoundReport]:
    """Bounds for the perturbed task at loss ``ell``, valid along
    trajectories whose determinant sign matches the task:

    - ||W|| >= a |z z'| / (|eps| + sqrt(2 ell)) - b with
      a = ||e1 e1^T|| / c and
      b = max(a |z z'| / (|eps| + min(|z|, |z'|)),
              8 c^2 max(|z|, |z'|, |eps|) max_ij ||e_i e_j^T||);
    - erank(W) <= 1 + 16 / min(|z|, |z'|) * (|eps| + sqrt(2 ell));
    - distance from rank one
      <= 4 |eps| + (4 + sqrt(|z z'|) / min(|z|, |z'|)) sqrt(2 ell).

    With eps != 0 the norm bound's zero-loss limit is the finite value
    a |z z'| / |eps| - b.
    """
    if z == 0 or z_prime == 0:
        raise ValueError("z and z_prime must be non-zero")
    if ell < 0:
        raise ValueError("loss must be non-negative")
    az, azp, ae = abs(z), abs(z_prime), abs(eps)
    zmin = min(az, azp)
    e11 = spec.basis_norms[0]
    max_basis = max(spec.basis_norms)
    a = e11 / spec.c
    b = max(a * az * azp / (ae + zmin), 8.0 * spec.c**2 * max(az, azp, ae) * max_basis)
    denom = ae + _sqrt2l(ell)
    norm_lb = math.inf if denom == 0.0 else a * az * azp / denom - b
    erank_ub = 1.0 + (16.0 / zmin) * (ae + _sqrt2l(ell))
    dist_ub = 4.0 * ae + (4.0 + math.sqrt(az * azp) / zmin) * _sqrt2l(ell)
    inputs = {"loss": ell, "z": z, "z_prime": z_prime, "eps": eps, "a": a, "b": b, "c": spec.c}
    return (
        BoundReport("norm_lower", norm_lb, "lower", inputs),
        BoundReport("erank_upper", erank_ub, "upper", {"loss": ell, "z": z, "z_prime": z_prime, "eps": eps}),
        BoundReport("dist_upper", dist_ub, "upper", {"loss": ell, "z": z, "z_prime": z_prime, "eps": eps}),
    )


@dataclass(frozen=True)
class UnbalancedInitReport:
    """Evaluation of the unbalanced-start guarantee.

    ``admissible`` records whether the stated defect threshold holds at
    the given depth (for depth 2 the threshold lies far below every
    representable positive double, so admissibility there is effectively
    a report that it does not); ``exit_time`` is the guaranteed horizon,
    and ``terminal_bounds`` the norm/erank/distance values at the
    alternative exit."""

    admissible: bool
    log_eps_threshold: float
    exit_time: float
    terminal_bounds: tuple[BoundReport, BoundReport, BoundReport]


def unbalanced_init_report(
    depth: int,
    ell_init: float,
    sigma_init: float,
    spec: QuasiNormSpec,
    *,
    eps: float | None = None,
    log_eps: float | None = None,
    factor_norm_max: float = 0.0,
    terminal_loss: float = 0.0,
) -> UnbalancedInitReport:
    """Evaluate the guarantee for trajectories whose initialization has
    balancedness defect ``eps`` (depth >= 2 only).

    Because the depth-2 branch involves terms like exp(-2^16 ...) and
    eps^(-L/(128L-64)) that underflow or overflow doubles, the defect
    may be passed as ``log_eps`` (its natural log) and all formulas are
    evaluated in log space.  ``factor_norm_max`` is the largest factor
    Frobenius norm at the start (values <= 32 are equivalent, the
    threshold clamps from below); ``sigma_init`` is the smaller of the
    product's minimal singular value and (1 - sqrt(ell_init)) / 2.
    ``terminal_loss`` feeds the residual term of the distance bound.

    Inadmissibility is reported, not raised.
    """
    if depth < 2:
        raise ValueError("the guarantee needs depth >= 2")
    if not (0.0 <= ell_init < 1.0):
        raise ValueError("ell_init must lie in [0, 1)")
    if not sigma_init > 0:
        raise ValueError("sigma_init must be positive")
    if (eps is None) == (log_eps is None):
        raise ValueError("pass exactly one of eps or log_eps")
    if eps is not None:
        if not eps > 0:
            raise ValueError("eps must be positive")
        log_eps = math.log(eps)
    assert log_eps is not None

    gap = 1.0 - math.sqrt(ell_init)  # in (0, 1]
    m = max(32.0, factor_norm_max)
    ln2 = math.log(2.0)
    log_inv_eps = -log_eps
    if log_inv_eps <= 0:
        raise ValueError("the defect must be below 1")

    if depth == 2:
        log_threshold = -(2.0**16) * (m + 1.0) ** 6 / gap**4
        exit_time = log_inv_eps ** (2.0 / 3.0) / (2.0 ** (2.0 / 3.0) * gap ** (4.0 / 3.0)) - math.log(
            math.e / (gap * sigma_init)
        )
        norm_main = (
            spec.basis_norms[0] * gap ** (4.0 / 3.0) / (2.0**11 * spec.c) * log_inv_eps ** (1.0 / 3.0)
        )
        erank_extra = 2.0**9 / gap ** (2.0 / 3.0) * log_inv_eps ** (-1.0 / 6.0)
        dist_main = 2.0**12 / gap ** (4.0 / 3.0) * log_inv_eps ** (-1.0 / 3.0)
    else:
        log_threshold = (
            128.0 * math.log(gap)
            - (64.0 * depth + 256.0) * ln2
            - 128.0 * math.log(depth)
            - (128.0 * depth - 64.0) * math.log(m + 1.0)
        )
        exit_time = (
            2.0 ** (4.0 * depth / 3.0)
            * depth
            / gap**2
            * _exp_sat(log_inv_eps * (3.0 * depth - 8.0) / (32.0 * depth - 16.0))
            - 2.0 ** (-(5.0 * depth + 5.0)) * sigma_init ** (-(depth - 2.0) / depth)
        )
        norm_main = (
            spec.basis_norms[0]
            * gap ** (6.0 / 5.0)
            / (2.0 ** (4.0 * depth) * depth ** (6.0 / 5.0) * spec.c)
            * _exp_sat(log_inv_eps * depth / (128.0 * depth - 64.0))
        )
        erank_extra = (
            2.0 ** (2.0 * depth + 5.0) * depth / gap * _exp_sat(-log_inv_eps * depth / (256.0 * depth - 128.0))
        )
        dist_main = (
            2.0 ** (3.0 * depth + 4.0)
            * depth ** (6.0 / 5.0)
            / gap ** (6.0 / 5.0)
            * _exp_sat(-log_inv_eps * depth / (128.0 * depth - 64.0))
        )

    max_basis = max(spec.basis_norms)
    norm_lb = norm_main - 12.0 * spec.c**2 * max_basis
    erank_ub = 1.0 + erank_extra
    dist_ub = dist_main + math.sqrt(2.0 * terminal_loss)
    inputs = {"log_eps": log_eps, "ell_init": ell_init, "sigma_init": sigma_init, "depth": float(depth)}
    bounds = (
        BoundReport("norm_lower", norm_lb, "lower", inputs),
        BoundReport("erank_upper", erank_ub, "upper", inputs),
        BoundReport("dist_upper", dist_ub, "upper", {**inputs, "terminal_loss": terminal_loss}),
    )
    return UnbalancedInitReport(
        admissible=log_eps <= log_threshold,
        log_eps_threshold=log_threshold,
        exit_time=exit_time,
        terminal_bounds=bounds,
    )


def solution_norm_argmin(spec: QuasiNormSpec, x_grid: Sequence[float]) -> float:
    """Grid minimizer of the (quasi-)norm over the base-task solution
    family, parameterized by the free entry.  The grid must contain 0;
    for every Schatten order the minimizer is 0."""
    grid = [float(x) for x in x_grid]
    if not grid:
        raise ValueError("x_grid must be non-empty")
    if 0.0 not in grid:
        raise ValueError("x_grid must contain 0")
    best_x = grid[0]
    best_v = math.inf
    for x in grid:
        w = np.array([[x, 1.0], [1.0, 0.0]])
        v = spec.norm(w)
        if v < best_v:
            best_v = v
            best_x = x
    return best_x
