"""Deep matrix factorization trained by gradient descent.

A depth-L factorization represents a d x d' matrix as the product
W_L @ ... @ W_1 ("product matrix") and fits observed entries of a
completion task by full-batch gradient descent on the factors.  The
module also provides: the standard initializers (layer-wise Gaussian,
balanced-by-construction, scaled identity), an explicit-Euler
integrator for the end-to-end product-matrix flow, predicted
instantaneous singular-value rates, the layer balancedness defect, and
an exact re-balancing construction.

Index convention: observations are keyed by 0-based (row, col); the
matrix position written "w11" in logs is entry [0, 0].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import metrics
from .linalg import as_matrix, schatten_norm, svd, svd2x2_analytic

__all__ = [
    "CompletionTask",
    "DeepNet",
    "TrainConfig",
    "TrajectorySample",
    "TrainResult",
    "DivergenceError",
    "ResampleError",
    "loss",
    "residual_gradient",
    "product_matrix",
    "factor_gradients",
    "gd_train",
    "init_unbalanced",
    "init_balanced",
    "init_identity",
    "resample_until_det_sign",
    "product_ode_step",
    "singular_value_rates",
    "unbalancedness_magnitude",
    "balance_project",
    "make_base_task",
    "make_perturbed_task",
    "make_extended_task",
    "required_det_sign",
    "leading_minor_det",
]

ENTRY_BLOWUP_LIMIT = 1e12


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or an entry beyond 1e12.

    Carries the last finite logged sample plus the partial trajectory so
    callers can persist what was computed before the blow-up.
    """

    def __init__(self, message, last_sample, trajectory, net):
        super().__init__(message)
        self.last_sample = last_sample
        self.trajectory = trajectory
        self.net = net


class ResampleError(RuntimeError):
    """Determinant-sign resampling exhausted its attempt budget."""


@dataclass(frozen=True)
class CompletionTask:
    """A matrix completion problem: shape plus observed entries."""

    shape: tuple[int, int]
    observations: Mapping[tuple[int, int], float]
    _rows: np.ndarray = field(init=False, repr=False, compare=False)
    _cols: np.ndarray = field(init=False, repr=False, compare=False)
    _vals: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d, dp = self.shape
        if d < 1 or dp < 1:
            raise ValueError("task shape must be positive")
        obs = dict(self.observations)
        if len(obs) >= d * dp:
            raise ValueError("at least one entry must be unobserved")
        for (i, j), v in obs.items():
            if not (0 <= i < d and 0 <= j < dp):
                raise ValueError(f"observed index {(i, j)} out of range for {self.shape}")
            if not math.isfinite(v):
                raise ValueError("observed values must be finite")
        keys = sorted(obs)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "_rows", np.array([k[0] for k in keys], dtype=np.intp))
        object.__setattr__(self, "_cols", np.array([k[1] for k in keys], dtype=np.intp))
        object.__setattr__(self, "_vals", np.array([obs[k] for k in keys], dtype=float))

    def index_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._rows, self._cols, self._vals

    def unobserved_indices(self) -> list[tuple[int, int]]:
        d, dp = self.shape
        return [(i, j) for i in range(d) for j in range(dp) if (i, j) not in self.observations]

    def observed_value_norm(self) -> float:
        """Euclidean norm of the observed-value vector."""
        return float(np.sqrt(self._vals @ self._vals))


@dataclass(frozen=True)
class DeepNet:
    """Ordered factors (W_1, ..., W_L); W_l maps dimension d_{l-1} to d_l."""

    factors: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.factors) < 1:
            raise ValueError("a network needs at least one factor")
        fs = tuple(as_matrix(f) for f in self.factors)
        for lo, hi in zip(fs, fs[1:]):
            if hi.shape[1] != lo.shape[0]:
                raise ValueError("adjacent factor dimensions do not chain")
        object.__setattr__(self, "factors", fs)

    @property
    def depth(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.factors[-1].shape[0], self.factors[0].shape[1])

    def is_full_dimensional(self) -> bool:
        """True when no hidden dimension constrains the reachable rank."""
        dims = [self.factors[0].shape[1]] + [f.shape[0] for f in self.factors]
        return min(dims) >= min(dims[0], dims[-1])

    def copy(self) -> "DeepNet":
        return DeepNet(tuple(f.copy() for f in self.factors))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    max_iters: int
    loss_threshold: float = 1e-4
    log_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.loss_threshold < 0:
            raise ValueError("loss_threshold must be non-negative")
        if self.log_stride < 1:
            raise ValueError("log_stride must be >= 1")


@dataclass(frozen=True)
class TrajectorySample:
    """Per-logged-iteration snapshot of a training run."""

    iteration: int
    loss: float
    unobserved: dict[tuple[int, int], float]
    sigmas: tuple[float, ...]
    det: float
    unbalancedness: float
    metrics: dict[str, float]


@dataclass(frozen=True)
class TrainResult:
    net: DeepNet
    trajectory: list[TrajectorySample]
    iterations: int
    converged: bool


def loss(task: CompletionTask, w) -> float:
    """Half the squared residual over observed entries."""
    m = as_matrix(w)
    if m.shape != task.shape:
        raise ValueError(f"matrix shape {m.shape} does not match task shape {task.shape}")
    rows, cols, vals = task.index_arrays()
    r = m[rows, cols] - vals
    return 0.5 * float(r @ r)


def residual_gradient(task: CompletionTask, w) -> np.ndarray:
    """Gradient of :func:`loss` at ``w``: the residual on observed entries, zero elsewhere."""
    m = as_matrix(w)
    if m.shape != task.shape:
        raise ValueError(f"matrix shape {m.shape} does not match task shape {task.shape}")
    rows, cols, vals = task.index_arrays()
    g = np.zeros_like(m)
    g[rows, cols] = m[rows, cols] - vals
    return g


def product_matrix(net: DeepNet) -> np.ndarray:
    p = net.factors[0]
    for f in net.factors[1:]:
        p = f @ p
    return p


def factor_gradients(net: DeepNet, task: CompletionTask) -> list[np.ndarray]:
    """Analytic gradient of the end-to-end loss with respect to each factor.

    For factor l the gradient is (W_L ... W_{l+1})^T G (W_{l-1} ... W_1)^T
    with G the masked residual of the product matrix.
    """
    fs = net.factors
    depth = len(fs)
    if net.shape != task.shape:
        raise ValueError(f"net shape {net.shape} does not match task shape {task.shape}")
    prefixes: list[np.ndarray | None] = [None] * depth
    p = fs[0]
    for l in range(1, depth):
        prefixes[l] = p
        p = fs[l] @ p
    g = residual_gradient(task, p)
    suffixes: list[np.ndarray | None] = [None] * depth
    s = None
    for l in range(depth - 2, -1, -1):
        s = fs[l + 1] if s is None else s @ fs[l + 1]
        suffixes[l] = s
    grads = []
    for l in range(depth):
        gl = g if suffixes[l] is None else suffixes[l].T @ g
        if prefixes[l] is not None:
            gl = gl @ prefixes[l].T
        grads.append(gl)
    return grads


def leading_minor_det(m: np.ndarray) -> float:
    """Determinant of the leading min-square submatrix (the determinant
    itself when the matrix is square)."""
    k = min(m.shape)
    sub = m[:k, :k]
    if k == 2:
        return float(sub[0, 0] * sub[1, 1] - sub[0, 1] * sub[1, 0])
    return float(np.linalg.det(sub))


def _sigmas(p: np.ndarray) -> np.ndarray:
    if p.shape == (2, 2):
        return np.array(svd2x2_analytic(p))
    return svd(p).sigmas


def _sample(it: int, loss_val: float, p: np.ndarray, factors, task: CompletionTask) -> TrajectorySample:
    sig = _sigmas(p)
    unb = 0.0
    for lo, hi in zip(factors, factors[1:]):
        unb = max(unb, schatten_norm(hi.T @ hi - lo @ lo.T, 1.0))
    mets = {
        "erank": metrics.effective_rank_of_sigmas(sig),
        "nuclear_norm": float(sig.sum()),
        "frob_norm": float(np.sqrt((sig * sig).sum())),
        "spectral_norm": float(sig[0]),
        "schatten_half": float(np.sqrt(sig).sum() ** 2),
    }
    unobs = {ij: float(p[ij]) for ij in task.unobserved_indices()}
    return TrajectorySample(
        iteration=it,
        loss=loss_val,
        unobserved=unobs,
        sigmas=tuple(float(s) for s in sig),
        det=leading_minor_det(p),
        unbalancedness=unb,
        metrics=mets,
    )


def gd_train(net: DeepNet, task: CompletionTask, cfg: TrainConfig) -> TrainResult:
    """Full-batch gradient descent on the factors.

    Runs until the loss drops below ``cfg.loss_threshold`` or
    ``cfg.max_iters`` updates have been applied.  A sample is logged at
    iteration 0, every ``log_stride`` iterations, whenever the loss
    crosses a power-of-ten boundary (so loss-resolved curves stay well
    sampled without storing every step), and at the final state.
    Raises :class:`DivergenceError` on non-finite loss or entries
    beyond 1e12.
    """
    if net.shape != task.shape:
        raise ValueError(f"net shape {net.shape} does not match task shape {task.shape}")
    depth = net.depth
    ws = [f.copy() for f in net.factors]
    rows, cols, vals = task.index_arrays()
    eta = cfg.learning_rate

    trajectory: list[TrajectorySample] = []
    prefixes: list = [None] * depth
    suffixes: list = [None] * depth

    it = 0
    last_decade: float | None = None
    logged_it = -1

    def log_state(p, lo):
        nonlocal logged_it
        trajectory.append(_sample(it, lo, p, ws, task))
        logged_it = it

    converged = False
    while True:
        p = ws[0]
        for l in range(1, depth):
            prefixes[l] = p
            p = ws[l] @ p
        r = p[rows, cols] - vals
        lo = 0.5 * float(r @ r)

        if not math.isfinite(lo) or float(np.abs(p).max()) > ENTRY_BLOWUP_LIMIT:
            last = trajectory[-1] if trajectory else None
            raise DivergenceError(
                f"training diverged at iteration {it}", last, trajectory, DeepNet(tuple(ws))
            )

        decade = math.floor(math.log10(lo)) if lo > 0 else None
        crossed = last_decade is not None and decade != last_decade
        last_decade = decade
        if it % cfg.log_stride == 0 or crossed:
            log_state(p, lo)

        if lo < cfg.loss_threshold:
            converged = True
            break
        if it >= cfg.max_iters:
            break

        g = np.zeros_like(p)
        g[rows, cols] = r
        s = None
        for l in range(depth - 2, -1, -1):
            s = ws[l + 1] if s is None else s @ ws[l + 1]
            suffixes[l] = s
        # all gradients are taken at the current point before any factor
        # moves (prefixes/suffixes alias the live arrays)
        grads = []
        for l in range(depth):
            gl = g if suffixes[l] is None else suffixes[l].T @ g
            if prefixes[l] is not None:
                gl = gl @ prefixes[l].T
            grads.append(gl)
        for l in range(depth):
            grads[l] *= eta
            ws[l] -= grads[l]
        it += 1

    if logged_it != it:
        log_state(p, lo)
    return TrainResult(net=DeepNet(tuple(ws)), trajectory=trajectory, iterations=it, converged=converged)


# ---------------------------------------------------------------------------
# initializers


def _hidden_dims(shape: tuple[int, int], depth: int) -> list[int]:
    # hidden sizes use the smallest value keeping the search space
    # unconstrained: min(rows, cols)
    d, dp = shape
    return [dp] + [min(d, dp)] * (depth - 1) + [d]


def init_unbalanced(shape: tuple[int, int], depth: int, alpha: float, rng: np.random.Generator) -> DeepNet:
    """Layer-wise independent Gaussian factors calibrated so the product
    matrix has entry standard deviation close to ``alpha``.

    Each factor's entries are i.i.d. N(0, s^2) with
    s = (alpha^2 / h^(L-1)) ** (1 / 2L), h the hidden dimension.  Each
    factor draws from its own spawned substream.  For rectangular
    shapes, excess rows of the last factor (or columns of the first)
    are cleared so the product is supported on its leading min-square
    block.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    d, dp = shape
    dims = _hidden_dims(shape, depth)
    h = min(d, dp)
    std = (alpha**2 / h ** (depth - 1)) ** (1.0 / (2 * depth))
    streams = rng.spawn(depth)
    fs = [streams[l].normal(0.0, std, size=(dims[l + 1], dims[l])) for l in range(depth)]
    if d > dp:
        fs[-1][dp:, :] = 0.0
    elif dp > d:
        fs[0][:, d:] = 0.0
    return DeepNet(tuple(fs))


def init_balanced(shape: tuple[int, int], depth: int, alpha: float, rng: np.random.Generator) -> DeepNet:
    """Balanced factors whose product equals a Gaussian target matrix.

    Draws a target with i.i.d. N(0, alpha^2) entries (excess rows or
    columns cleared for rectangular shapes), takes its SVD
    U diag(s) V^T, and sets W_L = U diag(s)^(1/L),
    W_l = diag(s)^(1/L) for the middle factors, W_1 = diag(s)^(1/L) V^T.
    The factors satisfy the layer balance identity exactly and every
    product-matrix singular value is the L-th power of the matching
    factor singular value.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    d, dp = shape
    target = rng.normal(0.0, alpha, size=(d, dp))
    if d > dp:
        target[dp:, :] = 0.0
    elif dp > d:
        target[:, d:] = 0.0
    res = svd(target)
    root = res.sigmas ** (1.0 / depth)
    if depth == 1:
        return DeepNet((target,))
    fs: list[np.ndarray] = []
    fs.append(root[:, None] * res.v.T)  # W_1 = diag(root) V^T, (h, dp)
    for _ in range(1, depth - 1):
        fs.append(np.diag(root))
    fs.append(res.u * root[None, :])  # W_L = U diag(root), (d, h)
    return DeepNet(tuple(fs))


def init_identity(dim: int, depth: int, alpha: float) -> DeepNet:
    """Scaled-identity start: every factor alpha**(1/L) * I, product alpha * I.

    Requires alpha in (0, 1]; the factors are balanced and the product
    determinant alpha**dim is positive.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    f = alpha ** (1.0 / depth) * np.eye(dim)
    return DeepNet(tuple(f.copy() for _ in range(depth)))


def resample_until_det_sign(
    make_init: Callable[[np.random.Generator], DeepNet],
    target_sign: int,
    rng: np.random.Generator,
    attempt_cap: int = 100,
) -> tuple[DeepNet, int]:
    """Redraw ``make_init`` until the product's leading-minor determinant
    has ``target_sign``; returns the net and the attempt count."""
    if target_sign not in (-1, 1):
        raise ValueError("target_sign must be +1 or -1")
    if attempt_cap < 1:
        raise ValueError("attempt_cap must be >= 1")
    for attempt in range(1, attempt_cap + 1):
        net = make_init(rng)
        det = leading_minor_det(product_matrix(net))
        if det != 0.0 and math.copysign(1.0, det) == target_sign:
            return net, attempt
    raise ResampleError(f"no draw matched determinant sign {target_sign:+d} in {attempt_cap} attempts")


# ---------------------------------------------------------------------------
# end-to-end dynamics


def _fractional_gram_powers(w: np.ndarray, depth: int):
    res = svd(w)
    u, sig, v = res.u, res.sigmas, res.v

    def left(beta: float) -> np.ndarray:  # (W W^T)^beta on the column space
        return (u * sig ** (2 * beta)) @ u.T

    def right(beta: float) -> np.ndarray:  # (W^T W)^beta
        return (v * sig ** (2 * beta)) @ v.T

    return left, right


def product_ode_step(w, task: CompletionTask, depth: int, dt: float) -> np.ndarray:
    """One explicit-Euler step of the end-to-end product-matrix flow.

    The velocity is -sum_l (W W^T)^((l-1)/L) G (W^T W)^((L-l)/L), the
    dynamics a balanced depth-L factorization induces on its product.
    Fractional Gram powers are taken through the SVD of ``w``.  Exists
    as a cross-check against factor-space gradient descent.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = as_matrix(w)
    g = residual_gradient(task, m)
    if depth == 1:
        return m - dt * g
    left, right = _fractional_gram_powers(m, depth)
    vel = np.zeros_like(m)
    for l in range(1, depth + 1):
        vel -= left((l - 1) / depth) @ g @ right((depth - l) / depth)
    return m + dt * vel


def singular_value_rates(w, task: CompletionTask, depth: int) -> list[float]:
    """Predicted instantaneous rates of the product-matrix singular values:
    -L (sigma_r^2)^(1 - 1/L) <G, u_r v_r^T> for each r.

    Zero singular values have rate zero for depth >= 2 (they are stuck).
    """
    m = as_matrix(w)
    g = residual_gradient(task, m)
    res = svd(m)
    rates = []
    for r in range(res.sigmas.size):
        s = float(res.sigmas[r])
        inner = float(res.u[:, r] @ g @ res.v[:, r])
        rates.append(-depth * (s * s) ** (1.0 - 1.0 / depth) * inner)
    return rates


def unbalancedness_magnitude(net: DeepNet) -> float:
    """Largest nuclear norm of W_{l+1}^T W_{l+1} - W_l W_l^T over adjacent
    layers; zero for depth 1.  Conserved by the continuous-time dynamics."""
    worst = 0.0
    for lo, hi in zip(net.factors, net.factors[1:]):
        worst = max(worst, schatten_norm(hi.T @ hi - lo @ lo.T, 1.0))
    return worst


def balance_project(net: DeepNet) -> DeepNet:
    """Replace square factors with exactly balanced ones nearby.

    Keeps W_1 and rebuilds each deeper factor from chained SVD rotations
    applied to the symmetric core U_1 S_1 U_1^T: with Q_l = U_l V_l^T
    and R_l = Q_l Q_{l-1} ... Q_2 (R_1 = I), the new factor l >= 2 is
    R_l (U_1 S_1 U_1^T) R_{l-1}^T.  The output is balanced to working
    precision and each factor moves at most (l-1) * sqrt(eps) in
    Frobenius norm, eps the input's unbalancedness magnitude.
    """
    fs = net.factors
    d = fs[0].shape[0]
    for f in fs:
        if f.shape != (d, d):
            raise ValueError("balance_project expects square factors of equal size")
    if len(fs) == 1:
        return net.copy()
    svds = [svd(f) for f in fs]
    core = (svds[0].u * svds[0].sigmas) @ svds[0].u.T
    out = [fs[0].copy()]
    rot_prev = np.eye(d)  # R_{l-1}
    rot = svds[1].u @ svds[1].v.T  # R_l, starting at Q_2
    for l in range(1, len(fs)):
        out.append(rot @ core @ rot_prev.T)
        if l + 1 < len(fs):
            rot_prev = rot
            rot = (svds[l + 1].u @ svds[l + 1].v.T) @ rot
    return DeepNet(tuple(out))


# ---------------------------------------------------------------------------
# task constructors


def make_base_task() -> CompletionTask:
    """The 2x2 completion problem with observations b[0,1] = b[1,0] = 1,
    b[1,1] = 0 and the corner (0, 0) unobserved.

    Its zero-loss solutions trade a norm penalty against rank: any
    Schatten norm is minimized only at free entry 0, while the rank
    surrogates approach their minimum only as the free entry diverges.
    """
    return CompletionTask(shape=(2, 2), observations={(0, 1): 1.0, (1, 0): 1.0, (1, 1): 0.0})


def make_perturbed_task(
    z: float, z_prime: float, eps: float, unobserved: tuple[int, int] = (0, 0)
) -> CompletionTask:
    """Generalization of the base task: the unobserved corner may sit at
    any (i, j) in {0,1}^2, the two adjacent entries hold ``z`` and
    ``z_prime`` (both non-zero), and the diagonally opposite entry holds
    ``eps``."""
    if z == 0 or z_prime == 0:
        raise ValueError("z and z_prime must be non-zero")
    i, j = unobserved
    if i not in (0, 1) or j not in (0, 1):
        raise ValueError("unobserved position must lie in {0,1}x{0,1}")
    obs = {(i, 1 - j): float(z), (1 - i, j): float(z_prime), (1 - i, 1 - j): float(eps)}
    return CompletionTask(shape=(2, 2), observations=obs)


def make_extended_task(rows: int, cols: int) -> CompletionTask:
    """The d x d' extension: every entry except (0, 0) observed; ones on
    the diagonal from index 2 up to the min dimension and at (0, 1) and
    (1, 0); zeros elsewhere."""
    if rows < 2 or cols < 2:
        raise ValueError("extended task needs both dimensions >= 2")
    k = min(rows, cols)
    obs = {}
    for i in range(rows):
        for j in range(cols):
            if (i, j) == (0, 0):
                continue
            one = (i == j and 2 <= i < k) or (i, j) in ((0, 1), (1, 0))
            obs[(i, j)] = 1.0 if one else 0.0
    return CompletionTask(shape=(rows, cols), observations=obs)


def required_det_sign(task: CompletionTask) -> int:
    """Initial determinant sign under which the free entry is driven to
    grow: +1 for the base and extended tasks; for the perturbed task,
    the sign of z * z' when the unobserved corner is on the diagonal and
    its opposite otherwise."""
    d, dp = task.shape
    unobs = task.unobserved_indices()
    if len(unobs) != 1:
        raise ValueError("task does not have the single-free-entry structure")
    i, j = unobs[0]
    if (d, dp) != (2, 2):
        if (i, j) != (0, 0):
            raise ValueError("extended tasks keep the free entry at (0, 0)")
        return 1
    z = task.observations[(i, 1 - j)]
    z_prime = task.observations[(1 - i, j)]
    prod = z * z_prime
    if prod == 0:
        raise ValueError("adjacent observations must be non-zero")
    sign = 1 if prod > 0 else -1
    return sign if i == j else -sign
