"""Box-constrained QP (primal active set) and a finite-difference SQP driver."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

HESSIAN_REGULARIZATION = 1e-8


class SolverError(Exception):
    code = "SOLVER_ERROR"


class SingularHessianError(SolverError):
    code = "SINGULAR_HESSIAN"


class MaxItersError(SolverError):
    code = "MAX_ITERS"


class InfeasibleStartError(SolverError):
    code = "INFEASIBLE_START"


class GradProbeFailed(SolverError):
    code = "GRAD_PROBE_FAILED"

    def __init__(self, coordinate: int):
        super().__init__(f"objective failed while probing coordinate {coordinate}")
        self.coordinate = coordinate


class Active(enum.IntEnum):
    FREE = 0
    AT_LOWER = 1
    AT_UPPER = 2


@dataclass
class BoxQp:
    """minimize 0.5 x'Hx + g'x  subject to  lower <= x <= upper."""

    hessian: np.ndarray
    linear_term: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.hessian = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        self.linear_term = np.atleast_1d(np.asarray(self.linear_term, dtype=float))
        n = self.linear_term.size
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if self.hessian.shape != (n, n):
            raise ValueError("hessian shape does not match linear term")
        if np.max(np.abs(self.hessian - self.hessian.T), initial=0.0) > 1e-10:
            raise ValueError("hessian must be symmetric")
        if np.any(self.lower > self.upper):
            raise ValueError("lower must not exceed upper")

    @property
    def n(self) -> int:
        return self.linear_term.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.hessian @ x + self.linear_term @ x)

    def kkt_residual(self, x: np.ndarray) -> float:
        """Projected-gradient residual ||x - clip(x - (Hx + g))||_inf."""
        grad = self.hessian @ x + self.linear_term
        proj = np.clip(x - grad, self.lower, self.upper)
        return float(np.max(np.abs(x - proj), initial=0.0))

    def regularized(self, eps: float = HESSIAN_REGULARIZATION) -> "BoxQp":
        return BoxQp(self.hessian + eps * np.eye(self.n), self.linear_term, self.lower, self.upper)


@dataclass
class QpSolution:
    x: np.ndarray
    active_set: np.ndarray
    iterations: int
    kkt_residual: float
    multipliers: np.ndarray = field(default=None)

    def shifted(self, block: int = 1) -> "QpSolution":
        """Drop the first ``block`` coordinates and repeat the last block (receding horizon)."""
        if self.x.size <= block:
            return self
        x = np.concatenate([self.x[block:], self.x[-block:]])
        act = np.concatenate([self.active_set[block:], self.active_set[-block:]])
        return QpSolution(x, act, 0, math.inf)


def solve_box_qp(qp: BoxQp, warm: Optional[QpSolution] = None, tol: float = 1e-10,
                 max_iters: Optional[int] = None) -> QpSolution:
    """Primal active-set method for a strictly convex box QP.

    The working set starts from ``warm.active_set`` (or empty). Each iteration
    solves the Newton step on the free coordinates with a Cholesky factor, moves
    to the first blocking bound, and frees the bound with the most negative
    multiplier once the free subproblem is solved exactly.
    """
    H, g, lo, hi = qp.hessian, qp.linear_term, qp.lower, qp.upper
    n = qp.n
    fixed_eq = lo == hi

    if warm is not None and warm.active_set is not None and warm.active_set.size == n:
        act = np.asarray(warm.active_set, dtype=int).copy()
        act[(act == Active.AT_LOWER) & ~np.isfinite(lo)] = Active.FREE
        act[(act == Active.AT_UPPER) & ~np.isfinite(hi)] = Active.FREE
        x = np.clip(np.nan_to_num(warm.x, nan=0.0), lo, hi)
    else:
        act = np.full(n, Active.FREE, dtype=int)
        x = np.clip(np.zeros(n), lo, hi)
    act[fixed_eq] = Active.AT_LOWER
    x[act == Active.AT_LOWER] = lo[act == Active.AT_LOWER]
    x[act == Active.AT_UPPER] = hi[act == Active.AT_UPPER]

    if max_iters is None:
        max_iters = 10 * n if n > 0 else 1
    scale = max(1.0, float(np.max(np.abs(H), initial=0.0)))
    for it in range(1, max_iters + 1):
        free = act == Active.FREE
        grad = H @ x + g
        p = np.zeros(n)
        if free.any():
            Hff = H[np.ix_(free, free)]
            try:
                factor = cho_factor(Hff, lower=True, check_finite=False)
            except LinAlgError as exc:
                raise SingularHessianError("reduced Hessian is not positive definite") from exc
            p[free] = cho_solve(factor, -grad[free], check_finite=False)

        if np.max(np.abs(p), initial=0.0) <= 1e-12 * (1.0 + np.max(np.abs(x), initial=0.0)):
            grad = H @ x + g
            mult = np.zeros(n)
            mult[act == Active.AT_LOWER] = grad[act == Active.AT_LOWER]
            mult[act == Active.AT_UPPER] = -grad[act == Active.AT_UPPER]
            mult[fixed_eq] = 0.0
            worst = int(np.argmin(mult))
            if mult[worst] >= -tol * scale:
                return QpSolution(x, act, it, qp.kkt_residual(x), np.where(fixed_eq, 0.0, mult))
            act[worst] = Active.FREE
            continue

        # ratio test against the bounds of the free coordinates
        alpha = 1.0
        block, block_side = -1, Active.FREE
        for i in np.flatnonzero(free):
            if p[i] > 0 and np.isfinite(hi[i]):
                a = (hi[i] - x[i]) / p[i]
                if a < alpha:
                    alpha, block, block_side = a, i, Active.AT_UPPER
            elif p[i] < 0 and np.isfinite(lo[i]):
                a = (lo[i] - x[i]) / p[i]
                if a < alpha:
                    alpha, block, block_side = a, i, Active.AT_LOWER
        x = x + max(alpha, 0.0) * p
        if block >= 0:
            act[block] = block_side
            x[block] = lo[block] if block_side == Active.AT_LOWER else hi[block]
        x = np.clip(x, lo, hi)
    raise MaxItersError(f"active-set iteration cap {max_iters} exceeded")


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, rel_step: float = 1e-6,
                lower: Optional[np.ndarray] = None, upper: Optional[np.ndarray] = None,
                f0: Optional[float] = None, curvature: bool = False):
    """Central-difference gradient with steps ``rel_step * max(1, |x_i|)``.

    When bounds are given and a centred probe would leave the box, the
    second-order one-sided stencil on the feasible side is used instead.
    With ``curvature=True`` a diagonal second-difference estimate is also returned.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    grad = np.zeros(n)
    diag = np.zeros(n)
    if curvature and f0 is None:
        f0 = f(x)

    def probe(y, i):
        v = f(y)
        if v is None or not np.isfinite(v):
            raise GradProbeFailed(i)
        return float(v)

    for i in range(n):
        h = rel_step * max(1.0, abs(x[i]))
        up_ok = upper is None or x[i] + h <= upper[i]
        dn_ok = lower is None or x[i] - h >= lower[i]
        e = np.zeros(n)
        e[i] = h
        if up_ok and dn_ok or not (up_ok or dn_ok):
            fp, fm = probe(x + e, i), probe(x - e, i)
            grad[i] = (fp - fm) / (2 * h)
            if curvature:
                diag[i] = (fp - 2 * f0 + fm) / (h * h)
        else:
            base = f0 if f0 is not None else probe(x, i)
            s = 1.0 if up_ok else -1.0
            f1, f2 = probe(x + s * e, i), probe(x + 2 * s * e, i)
            grad[i] = s * (-3 * base + 4 * f1 - f2) / (2 * h)
            if curvature:
                diag[i] = (base - 2 * f1 + f2) / (h * h)
    if curvature:
        return grad, diag
    return grad


class HessianMode(enum.Enum):
    BFGS = "BFGS"
    GAUSS_NEWTON_DIAG = "GAUSS_NEWTON_DIAG"


class NlpStatus(enum.Enum):
    CONVERGED = "CONVERGED"
    BUDGET = "BUDGET"
    LINE_SEARCH_FAILED = "LINE_SEARCH_FAILED"
    ROUGH_REGION = "ROUGH_REGION"


@dataclass
class SqpSettings:
    max_iters: int = 50
    grad_step: float = 1e-6
    armijo_c: float = 1e-4
    tol_stationarity: float = 1e-8
    hessian_mode: HessianMode = HessianMode.BFGS

    def __post_init__(self):
        if not self.grad_step > 0:
            raise ValueError("grad_step must be positive")
        if not 0 < self.armijo_c < 0.5:
            raise ValueError("armijo_c must lie in (0, 0.5)")
        self.hessian_mode = HessianMode(self.hessian_mode)


@dataclass
class NlpProblem:
    """``objective(x)`` returns ``(cost, failed)``; failed points count as +inf."""

    dim: int
    objective: Callable[[np.ndarray], Tuple[float, bool]]
    lower: np.ndarray
    upper: np.ndarray
    is_failure_infinite: bool = True

    def __post_init__(self):
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.dim,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.dim,)).copy()

    def value(self, x: np.ndarray) -> float:
        cost, failed = self.objective(x)
        if failed and self.is_failure_infinite:
            return math.inf
        return float(cost)


@dataclass
class NlpSolution:
    x: np.ndarray
    cost: float
    stationarity: float
    status: NlpStatus
    iterations: int = 0
    cost_history: list = field(default_factory=list)


def _projected_stationarity(x, grad, lower, upper) -> float:
    return float(np.max(np.abs(x - np.clip(x - grad, lower, upper)), initial=0.0))


def _damped_bfgs(B, s, y):
    Bs = B @ s
    sBs = float(s @ Bs)
    sy = float(s @ y)
    if sBs <= 0 or not np.isfinite(sBs):
        return None
    if sy >= 0.2 * sBs:
        r = y
    else:
        theta = 0.8 * sBs / (sBs - sy)
        r = theta * y + (1 - theta) * Bs
    sr = float(s @ r)
    if sr <= 1e-12 * sBs:
        return None
    return B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / sr


def solve_nlp_sqp(problem: NlpProblem, x0: np.ndarray, settings: Optional[SqpSettings] = None,
                  iter_budget: Optional[int] = None) -> NlpSolution:
    """Bound-constrained SQP with FD gradients and Armijo backtracking.

    Accepted iterates never increase the cost. Two consecutive gradient probe
    failures end the solve with ``ROUGH_REGION``.
    """
    settings = settings or SqpSettings()
    budget = settings.max_iters if iter_budget is None else min(iter_budget, settings.max_iters)
    lo, hi = problem.lower, problem.upper
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    f = problem.value(x)
    if not np.isfinite(f):
        raise InfeasibleStartError("objective fails at the starting point")

    n = problem.dim
    B = np.eye(n)
    history = [f]
    rel_step = settings.grad_step
    probe_failures = 0
    status = NlpStatus.BUDGET
    stationarity = math.inf
    prev = None  # (s, grad) from the last accepted step
    it = 0
    grad = None
    while True:
        try:
            if settings.hessian_mode is HessianMode.GAUSS_NEWTON_DIAG:
                grad, diag = fd_gradient(problem.value, x, rel_step, lo, hi, f0=f, curvature=True)
            else:
                grad = fd_gradient(problem.value, x, rel_step, lo, hi, f0=f)
            probe_failures = 0
        except GradProbeFailed:
            probe_failures += 1
            if probe_failures >= 2:
                status = NlpStatus.ROUGH_REGION
                break
            rel_step *= 0.1
            continue

        stationarity = _projected_stationarity(x, grad, lo, hi)
        if stationarity <= settings.tol_stationarity:
            status = NlpStatus.CONVERGED
            break
        if it >= budget:
            status = NlpStatus.BUDGET
            break

        if settings.hessian_mode is HessianMode.GAUSS_NEWTON_DIAG:
            floor = 1e-6 * max(1.0, float(np.max(np.abs(diag), initial=0.0)))
            B = np.diag(np.maximum(diag, floor))
        elif prev is not None:
            s, g_old = prev
            y = grad - g_old
            updated = _damped_bfgs(B, s, y)
            if updated is None:
                sy, yy = float(s @ y), float(y @ y)
                gamma = yy / sy if sy > 0 and yy > 0 else 1.0
                B = gamma * np.eye(n)
            else:
                B = updated

        H = 0.5 * (B + B.T) + HESSIAN_REGULARIZATION * np.eye(n)
        qp = BoxQp(H, grad, lo - x, hi - x)
        try:
            p = solve_box_qp(qp).x
        except SolverError:
            B = np.eye(n)
            p = np.clip(-grad, lo - x, hi - x)

        slope = float(grad @ p)
        it += 1
        if slope >= 0:
            status = NlpStatus.LINE_SEARCH_FAILED
            break
        alpha = 1.0
        accepted = False
        for _ in range(21):
            xt = np.clip(x + alpha * p, lo, hi)
            ft = problem.value(xt)
            if np.isfinite(ft) and ft <= f + settings.armijo_c * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status = NlpStatus.LINE_SEARCH_FAILED
            break
        prev = (xt - x, grad)
        x, f = xt, ft
        history.append(f)

    return NlpSolution(x, f, stationarity, status, it, history)
