"""
Dense convex QP and small mixed-integer QP solvers.

    minimize    0.5 x'Hx + g'x
    subject to  A_eq x = b_eq,  A_ineq x <= b_ineq,  lower <= x <= upper

solve_qp is a primal active-set method started from a phase-1 point found with the HiGHS
linear programming solver; it warm-starts from a previous solution's working set.
solve_miqp enumerates binary assignments exhaustively for up to 8 binaries and runs
best-first branch-and-bound on the QP relaxation above that.

Usage:
    sol = solve_qp(QpProblem(H, g, A_ineq=A, b_ineq=b))
    if sol.optimal:
        x = sol.x
    sol = solve_qp(problem, warm_start=sol)
"""

import heapq
import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import linprog

from highway_scmpc.errors import ModelError
from highway_scmpc.structured_logger import get_logger

logger = get_logger(__name__)

FEASIBILITY_TOL = 1e-8
DUAL_TOL = 1e-9
EXHAUSTIVE_LIMIT = 8


class QpStatus(str, Enum):
    OPTIMAL = 'optimal'
    INFEASIBLE = 'infeasible'
    MAX_ITER = 'max_iter'


def _as_matrix(A, n):
    if A is None:
        return np.zeros((0, n))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros((0, n))
    return A


def _as_vector(b, m):
    if b is None:
        return np.zeros(m)
    return np.asarray(b, dtype=float).ravel()


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_ineq: Optional[np.ndarray] = None
    b_ineq: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.shape[0]
        if self.H.shape != (n, n):
            raise ModelError(f'H must be {n}x{n}, got {self.H.shape}')
        if not np.allclose(self.H, self.H.T, atol=1e-9 * max(1.0, np.abs(self.H).max())):
            raise ModelError('H must be symmetric')
        self.H = 0.5 * (self.H + self.H.T)
        self.A_eq = _as_matrix(self.A_eq, n)
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0])
        self.A_ineq = _as_matrix(self.A_ineq, n)
        self.b_ineq = _as_vector(self.b_ineq, self.A_ineq.shape[0])
        self.lower = np.full(n, -np.inf) if self.lower is None else \
            np.asarray(self.lower, dtype=float).ravel()
        self.upper = np.full(n, np.inf) if self.upper is None else \
            np.asarray(self.upper, dtype=float).ravel()
        for name, A, b in (('eq', self.A_eq, self.b_eq), ('ineq', self.A_ineq, self.b_ineq)):
            if A.shape[1] != n or A.shape[0] != b.shape[0]:
                raise ModelError(f'A_{name}/b_{name} dimensions inconsistent with n={n}')
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ModelError('bounds must have one entry per variable')
        if np.any(self.lower > self.upper):
            raise ModelError('lower bound above upper bound')

    @property
    def n(self) -> int:
        return self.g.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.g @ x)

    def stacked_inequalities(self) -> Tuple[np.ndarray, np.ndarray, int, np.ndarray, np.ndarray]:
        """
        All inequalities as G x <= h: general rows first, then finite upper bounds,
        then finite lower bounds. Returns (G, h, m_general, upper_idx, lower_idx).
        """
        n = self.n
        upper_idx = np.flatnonzero(np.isfinite(self.upper))
        lower_idx = np.flatnonzero(np.isfinite(self.lower))
        eye = np.eye(n)
        G = np.vstack([self.A_ineq, eye[upper_idx], -eye[lower_idx]])
        h = np.concatenate([self.b_ineq, self.upper[upper_idx], -self.lower[lower_idx]])
        return G, h, self.A_ineq.shape[0], upper_idx, lower_idx

    def max_violation(self, x: np.ndarray) -> float:
        G, h, _, _, _ = self.stacked_inequalities()
        worst = 0.0
        if G.shape[0]:
            worst = max(worst, float(np.max(G @ x - h)))
        if self.A_eq.shape[0]:
            worst = max(worst, float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        return worst


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: QpStatus
    duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eq_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    upper_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lower_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    working_set: Tuple[int, ...] = ()
    certificate: Optional[np.ndarray] = None
    assignment: Optional[Tuple[int, ...]] = None

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def _infeasible(n, certificate=None, iterations=0):
    return QpSolution(x=np.full(n, np.nan), objective=np.inf, status=QpStatus.INFEASIBLE,
                      iterations=iterations, certificate=certificate)


def _regularized_hessian(H):
    try:
        linalg.cholesky(H, lower=True)
        return H
    except linalg.LinAlgError:
        n = H.shape[0]
        lam = 1e-9 * np.trace(H) / n if np.trace(H) > 0 else 1e-9
        logger.warning('Hessian not positive definite, regularizing',
                       extra={'lambda': float(lam), 'n': n})
        return H + lam * np.eye(n)


def _phase_one(G, h, A_eq, b_eq, n):
    """Feasible starting point maximizing the smallest inequality margin (capped at 1)."""
    if G.shape[0] == 0:
        if A_eq.shape[0] == 0:
            return np.zeros(n), None
        x, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
        if np.max(np.abs(A_eq @ x - b_eq)) > FEASIBILITY_TOL:
            return None, None
        return x, None

    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = np.hstack([G, -np.ones((G.shape[0], 1))])
    A_eq_lp = np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))]) if A_eq.shape[0] else None
    b_eq_lp = b_eq if A_eq.shape[0] else None
    bounds = [(None, None)] * n + [(-1.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=h, A_eq=A_eq_lp, b_eq=b_eq_lp, bounds=bounds,
                  method='highs')
    if res.status != 0 or res.x is None:
        return None, None
    if res.x[-1] > FEASIBILITY_TOL:
        certificate = None
        if getattr(res, 'ineqlin', None) is not None:
            certificate = -np.asarray(res.ineqlin.marginals)
        return None, certificate
    return res.x[:n], None


def _independent(rows: List[np.ndarray], candidate: np.ndarray) -> bool:
    if not rows:
        return bool(np.any(np.abs(candidate) > 0))
    M = np.vstack(rows)
    return np.linalg.matrix_rank(np.vstack([M, candidate])) > np.linalg.matrix_rank(M)


def _solve_kkt(H, C, rhs_x):
    n, m = H.shape[0], C.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = C.T
    K[n:, :n] = C
    rhs = np.concatenate([rhs_x, np.zeros(m)])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    return sol[:n], sol[n:]


def solve_qp(problem: QpProblem, warm_start: Optional[QpSolution] = None,
             max_iter: Optional[int] = None) -> QpSolution:
    """
    Solve a strictly convex QP with the primal active-set method.

    Args:
        problem: the QP
        warm_start: a previous solution; its point and working set are reused when the
            point is feasible for this problem
        max_iter: iteration cap (default 10 * (n + m) + 50)

    Returns:
        QpSolution; status max_iter carries the last iterate
    """
    n = problem.n
    H = _regularized_hessian(problem.H)
    g = problem.g
    A_eq, b_eq = problem.A_eq, problem.b_eq
    G, h, m_general, upper_idx, lower_idx = problem.stacked_inequalities()
    m = G.shape[0]
    if max_iter is None:
        max_iter = 10 * (n + m) + 50
    scale = max(1.0, float(np.max(np.abs(h))) if m else 1.0)
    active_tol = 1e-9 * scale

    x = None
    working: List[int] = []
    if warm_start is not None and warm_start.x is not None and warm_start.x.shape == (n,) \
            and np.all(np.isfinite(warm_start.x)) \
            and problem.max_violation(warm_start.x) <= FEASIBILITY_TOL:
        x = warm_start.x.copy()
        slack = h - G @ x if m else np.zeros(0)
        working = [i for i in warm_start.working_set if i < m and slack[i] <= active_tol]
    if x is None:
        x, certificate = _phase_one(G, h, A_eq, b_eq, n)
        if x is None:
            return _infeasible(n, certificate=certificate)
        rows = [a for a in A_eq]
        for i in np.flatnonzero(G @ x - h >= -active_tol) if m else []:
            if _independent(rows, G[i]):
                rows.append(G[i])
                working.append(int(i))

    status = QpStatus.MAX_ITER
    multipliers = np.zeros(0)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        C = np.vstack([A_eq, G[working]]) if working else A_eq
        p, nu = _solve_kkt(H, C, -(H @ x + g))
        if np.max(np.abs(p)) <= 1e-12 * (1.0 + np.max(np.abs(x))):
            # at p = 0 the step system reads H x + g + C' nu = 0, so nu are the multipliers
            multipliers = nu
            lam = multipliers[A_eq.shape[0]:]
            if lam.size == 0 or np.min(lam) >= -DUAL_TOL:
                status = QpStatus.OPTIMAL
                break
            leave = min(range(lam.size), key=lambda k: (lam[k], working[k]))
            working.pop(leave)
            continue

        Gp = G @ p if m else np.zeros(0)
        alpha = 1.0
        blocking = None
        in_working = set(working)
        for i in range(m):
            if i in in_working or Gp[i] <= 1e-12:
                continue
            step = max((h[i] - G[i] @ x) / Gp[i], 0.0)
            if step < alpha:
                alpha = step
                blocking = i
        x = x + alpha * p
        if blocking is not None:
            working.append(blocking)

    duals = np.zeros(m)
    eq_duals = np.zeros(A_eq.shape[0])
    if status is QpStatus.OPTIMAL:
        eq_duals = multipliers[:A_eq.shape[0]]
        for k, i in enumerate(working):
            duals[i] = max(multipliers[A_eq.shape[0] + k], 0.0)
    upper_duals = np.zeros(n)
    lower_duals = np.zeros(n)
    upper_duals[upper_idx] = duals[m_general:m_general + upper_idx.size]
    lower_duals[lower_idx] = duals[m_general + upper_idx.size:]
    if status is QpStatus.MAX_ITER:
        logger.warning('Active-set iteration limit reached',
                       extra={'n': n, 'm': m, 'max_iter': max_iter})

    return QpSolution(
        x=x,
        objective=problem.objective(x),
        status=status,
        duals=duals[:m_general],
        eq_duals=eq_duals,
        upper_duals=upper_duals,
        lower_duals=lower_duals,
        iterations=iterations,
        working_set=tuple(sorted(working)),
    )


def kkt_residuals(problem: QpProblem, solution: QpSolution) -> Dict[str, float]:
    """Primal feasibility, stationarity and complementary slackness of a solution."""
    x = solution.x
    grad = problem.H @ x + problem.g
    if problem.A_eq.shape[0]:
        grad = grad + problem.A_eq.T @ solution.eq_duals
    if problem.A_ineq.shape[0]:
        grad = grad + problem.A_ineq.T @ solution.duals
    grad = grad + solution.upper_duals - solution.lower_duals

    slack_terms = []
    if problem.A_ineq.shape[0]:
        slack_terms.append(solution.duals * (problem.b_ineq - problem.A_ineq @ x))
    finite_u = np.isfinite(problem.upper)
    finite_l = np.isfinite(problem.lower)
    slack_terms.append(solution.upper_duals[finite_u] * (problem.upper[finite_u] - x[finite_u]))
    slack_terms.append(solution.lower_duals[finite_l] * (x[finite_l] - problem.lower[finite_l]))
    complementarity = max((float(np.max(np.abs(t))) for t in slack_terms if t.size), default=0.0)

    return {
        'primal': max(problem.max_violation(x), 0.0),
        'stationarity': float(np.max(np.abs(grad))) if grad.size else 0.0,
        'complementarity': complementarity,
    }


@dataclass
class MiqpProblem:
    base: QpProblem
    binaries: Sequence[int]
    max_binaries: int = 12

    def __post_init__(self):
        self.binaries = tuple(int(i) for i in self.binaries)
        if len(self.binaries) > self.max_binaries:
            raise ModelError(f'{len(self.binaries)} binaries exceed the cap of {self.max_binaries}')
        if len(set(self.binaries)) != len(self.binaries) or \
                any(not 0 <= i < self.base.n for i in self.binaries):
            raise ModelError('binary indices must be distinct variable indices')


def _fix_variables(problem: QpProblem, fixed: Dict[int, float]):
    """Eliminate fixed variables. Returns (reduced problem or None, free indices, constant)."""
    n = problem.n
    idx = np.array(sorted(fixed), dtype=int)
    values = np.array([fixed[i] for i in idx], dtype=float)
    free = np.array([i for i in range(n) if i not in fixed], dtype=int)
    tol = FEASIBILITY_TOL

    if np.any(values < problem.lower[idx] - tol) or np.any(values > problem.upper[idx] + tol):
        return None, free, 0.0
    constant = float(0.5 * values @ problem.H[np.ix_(idx, idx)] @ values + problem.g[idx] @ values)

    def reduce_rows(A, b, equality):
        A_f = A[:, free]
        b_f = b - A[:, idx] @ values
        empty = np.all(np.abs(A_f) <= 1e-14, axis=1) if A_f.shape[1] else np.ones(A.shape[0], bool)
        if equality and np.any(np.abs(b_f[empty]) > tol):
            return None
        if not equality and np.any(b_f[empty] < -tol):
            return None
        return A_f[~empty], b_f[~empty]

    eq = reduce_rows(problem.A_eq, problem.b_eq, True)
    ineq = reduce_rows(problem.A_ineq, problem.b_ineq, False)
    if eq is None or ineq is None:
        return None, free, constant
    if free.size == 0:
        return 'fixed', free, constant

    reduced = QpProblem(
        H=problem.H[np.ix_(free, free)],
        g=problem.g[free] + problem.H[np.ix_(free, idx)] @ values,
        A_eq=eq[0], b_eq=eq[1], A_ineq=ineq[0], b_ineq=ineq[1],
        lower=problem.lower[free], upper=problem.upper[free],
    )
    return reduced, free, constant


def _solve_fixed(problem: QpProblem, fixed: Dict[int, float]) -> QpSolution:
    reduced, free, constant = _fix_variables(problem, fixed)
    n = problem.n
    if reduced is None:
        return _infeasible(n)
    x = np.zeros(n)
    for i, v in fixed.items():
        x[i] = v
    if isinstance(reduced, str):
        return QpSolution(x=x, objective=constant, status=QpStatus.OPTIMAL)
    sol = solve_qp(reduced)
    if not sol.optimal:
        return QpSolution(x=np.full(n, np.nan), objective=np.inf, status=sol.status,
                          iterations=sol.iterations)
    x[free] = sol.x
    return QpSolution(x=x, objective=problem.objective(x), status=QpStatus.OPTIMAL,
                      iterations=sol.iterations)


def _relaxation(problem: QpProblem, binaries: Sequence[int]) -> QpProblem:
    lower = problem.lower.copy()
    upper = problem.upper.copy()
    lower[list(binaries)] = np.maximum(lower[list(binaries)], 0.0)
    upper[list(binaries)] = np.minimum(upper[list(binaries)], 1.0)
    return QpProblem(problem.H, problem.g, problem.A_eq, problem.b_eq,
                     problem.A_ineq, problem.b_ineq, lower, upper)


def solve_miqp(problem: MiqpProblem, method: str = 'auto') -> QpSolution:
    """
    Minimize over all 0/1 assignments of the binary variables.

    Returns the QpSolution of the best assignment with `assignment` set, in the order of
    `problem.binaries`. With method 'auto' the search is exhaustive for up to 8 binaries
    and best-first branch-and-bound above; 'exhaustive' and 'branch-and-bound' force one.
    """
    base, binaries = problem.base, problem.binaries
    if method not in ('auto', 'exhaustive', 'branch-and-bound'):
        raise ModelError(f'unknown MIQP method {method!r}')
    if not binaries:
        sol = solve_qp(base)
        sol.assignment = ()
        return sol
    if method == 'exhaustive' or (method == 'auto' and len(binaries) <= EXHAUSTIVE_LIMIT):
        return _exhaustive(base, binaries)
    return _branch_and_bound(base, binaries)


def _exhaustive(base: QpProblem, binaries: Sequence[int]) -> QpSolution:
    best = _infeasible(base.n)
    for values in itertools.product((0, 1), repeat=len(binaries)):
        sol = _solve_fixed(base, dict(zip(binaries, values)))
        if sol.optimal and sol.objective < best.objective - 1e-12:
            sol.assignment = tuple(values)
            best = sol
    return best


def _branch_and_bound(base: QpProblem, binaries: Sequence[int]) -> QpSolution:
    relaxed = _relaxation(base, binaries)
    best = _infeasible(base.n)
    counter = itertools.count()
    heap = [(-np.inf, next(counter), ())]
    while heap:
        bound, _, fixings = heapq.heappop(heap)
        if bound >= best.objective - 1e-12:
            continue
        node = _solve_fixed(relaxed, dict(fixings))
        if not node.optimal or node.objective >= best.objective - 1e-12:
            continue
        fixed_idx = {i for i, _ in fixings}
        fractional = [
            (min(node.x[i] % 1.0, 1.0 - node.x[i] % 1.0), i) for i in binaries
            if i not in fixed_idx and 1e-6 < node.x[i] % 1.0 < 1.0 - 1e-6
        ]
        if not fractional:
            integral = dict(fixings)
            integral.update({i: float(round(node.x[i])) for i in binaries if i not in fixed_idx})
            sol = _solve_fixed(base, integral)
            if sol.optimal and sol.objective < best.objective - 1e-12:
                sol.assignment = tuple(int(integral[i]) for i in binaries)
                best = sol
            continue
        # most fractional first, lowest index on ties
        _, branch = max(fractional, key=lambda item: (item[0], -item[1]))
        for value in (0.0, 1.0):
            heapq.heappush(heap, (node.objective, next(counter), fixings + ((branch, value),)))
    return best


def write_problem_text(problem: QpProblem, stream: TextIO) -> None:
    """Dump a QP as plain-text matrix sections: '# <name> <rows> <cols>' then rows."""
    sections = (('H', problem.H), ('g', problem.g[None, :]),
                ('A_eq', problem.A_eq), ('b_eq', problem.b_eq[None, :]),
                ('A_ineq', problem.A_ineq), ('b_ineq', problem.b_ineq[None, :]),
                ('lower', problem.lower[None, :]), ('upper', problem.upper[None, :]))
    for name, M in sections:
        rows = M.shape[0] if M.size else 0
        stream.write(f'# {name} {rows} {M.shape[1]}\n')
        if rows:
            np.savetxt(stream, M, fmt='%.17g')


def read_problem_text(stream: TextIO) -> QpProblem:
    parts: Dict[str, np.ndarray] = {}
    lines = stream.read().splitlines()
    i = 0
    while i < len(lines):
        _, name, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        data = [np.array(line.split(), dtype=float) for line in lines[i + 1:i + 1 + rows]]
        parts[name] = np.vstack(data) if rows else np.zeros((0, cols))
        i += 1 + rows
    vec = {k: parts[k].ravel() for k in ('g', 'b_eq', 'b_ineq', 'lower', 'upper')}
    return QpProblem(parts['H'], vec['g'], parts['A_eq'], vec['b_eq'],
                     parts['A_ineq'], vec['b_ineq'], vec['lower'], vec['upper'])
