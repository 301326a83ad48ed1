"""Canonical conic program and its interior-point backend.

A :class:`ConicProblem` is::

    minimize    1/2 x'Px + q'x + const
    subject to  A_eq x = b_eq
                G x <= h
                C_k x + d_k in SOC        (first entry >= norm of the rest)
                R_k x + e_k in RSOC       (a * b >= ||w||^2, a, b >= 0)

Problems are assembled with :class:`ConicBuilder` and solved by Clarabel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import clarabel
import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class Infeasible(SolverError):
    pass


class MaxIterations(SolverError):
    pass


class IllConditioned(SolverError):
    pass


@dataclass
class ConeBlock:
    """Stacked affine rows ``M x + c`` split into consecutive cones of ``dims``."""

    M: sp.csr_matrix
    c: np.ndarray
    dims: list


@dataclass
class ConicProblem:
    n: int
    P: sp.csc_matrix
    q: np.ndarray
    const: float
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    soc: ConeBlock
    rsoc: ConeBlock

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.const)

    def violation(self, x: np.ndarray) -> float:
        """Largest constraint violation of a candidate point."""
        worst = 0.0
        if self.A_eq.shape[0]:
            worst = max(worst, np.abs(self.A_eq @ x - self.b_eq).max())
        if self.G.shape[0]:
            worst = max(worst, (self.G @ x - self.h).max(initial=0.0))
        for block, rotated in ((self.soc, False), (self.rsoc, True)):
            vals = block.M @ x + block.c
            start = 0
            for d in block.dims:
                v = vals[start:start + d]
                start += d
                if rotated:
                    a, b, w = v[0], v[1], v[2:]
                    worst = max(worst, -a, -b, w @ w - a * b)
                else:
                    worst = max(worst, np.linalg.norm(v[1:]) - v[0])
        return float(worst)


@dataclass
class ConicSolution:
    x: np.ndarray
    objective: float
    status: str
    tolerance: float
    iterations: int = 0
    # Clarabel-form slacks and duals, for external KKT checks
    s: np.ndarray | None = field(default=None, repr=False)
    z: np.ndarray | None = field(default=None, repr=False)


class ConicBuilder:
    """Incremental assembly of a :class:`ConicProblem`.

    Rows are added in vectorised batches: a *term* is ``(cols, coefs)`` with
    ``cols`` an index array of length m and ``coefs`` a scalar or length-m
    array, and a batch of m rows is ``sum(coefs * x[cols]) + const``.
    """

    def __init__(self):
        self.n = 0
        self._P = ([], [], [])
        self._q = []
        self.const = 0.0
        self._eq = _Rows()
        self._in = _Rows()
        self._soc = _Rows()
        self._soc_dims = []
        self._rsoc = _Rows()
        self._rsoc_dims = []

    def var(self, size: int) -> np.ndarray:
        idx = np.arange(self.n, self.n + size)
        self.n += size
        return idx

    def linear(self, cols, coefs):
        cols = np.atleast_1d(cols)
        self._q.append((cols, np.broadcast_to(coefs, cols.shape).astype(float)))

    def square(self, terms, const=0.0, weight=1.0):
        """Add ``weight/2 * (sum of terms + const)^2`` for each row of the batch."""
        cols, coefs, m = _normalize(terms)
        const = np.broadcast_to(np.asarray(const, dtype=float), (m,))
        weight = np.broadcast_to(np.asarray(weight, dtype=float), (m,))
        k = len(cols)
        for a in range(k):
            self.linear(cols[a], weight * const * coefs[a])
            for b in range(k):
                self._P[0].append(cols[a])
                self._P[1].append(cols[b])
                self._P[2].append(weight * coefs[a] * coefs[b])
        self.const += float(0.5 * np.sum(weight * const**2))

    def eq(self, terms, rhs):
        self._eq.add(terms, -np.asarray(rhs, dtype=float))

    def le(self, terms, rhs):
        self._in.add(terms, -np.asarray(rhs, dtype=float))

    def bounds(self, cols, lo=None, hi=None):
        cols = np.atleast_1d(cols)
        if lo is not None and hi is not None:
            # pinned entries become equalities (no strict interior otherwise)
            lo = np.broadcast_to(np.asarray(lo, dtype=float), cols.shape)
            hi = np.broadcast_to(np.asarray(hi, dtype=float), cols.shape)
            fixed = lo == hi
            if fixed.any():
                self.eq([(cols[fixed], 1.0)], lo[fixed])
                cols, lo, hi = cols[~fixed], lo[~fixed], hi[~fixed]
            if not cols.size:
                return
        if hi is not None:
            hi = np.broadcast_to(np.asarray(hi, dtype=float), cols.shape)
            keep = np.isfinite(hi)
            if keep.any():
                self.le([(cols[keep], 1.0)], hi[keep])
        if lo is not None:
            lo = np.broadcast_to(np.asarray(lo, dtype=float), cols.shape)
            keep = np.isfinite(lo)
            if keep.any():
                self.le([(cols[keep], -1.0)], -lo[keep])

    def soc(self, head, tail):
        """Batch of cones ``||(tail_1, ..., tail_k)|| <= head``; each entry of
        ``head`` / ``tail`` is ``(terms, const)``."""
        rows = [head] + list(tail)
        m = _batch_size(rows)
        self._soc.merge(_interleave(rows, m))
        self._soc_dims += [len(rows)] * m

    def rsoc(self, a, b, w):
        """Batch of rotated cones ``a * b >= ||w||^2`` with ``a, b >= 0``."""
        rows = [a, b] + list(w)
        m = _batch_size(rows)
        self._rsoc.merge(_interleave(rows, m))
        self._rsoc_dims += [len(rows)] * m

    def build(self) -> ConicProblem:
        n = self.n
        if self._P[0]:
            r = np.concatenate(self._P[0])
            c = np.concatenate(self._P[1])
            v = np.concatenate(self._P[2])
            P = sp.csc_matrix((v, (r, c)), shape=(n, n))
        else:
            P = sp.csc_matrix((n, n))
        q = np.zeros(n)
        for cols, coefs in self._q:
            np.add.at(q, cols, coefs)
        A_eq, b_eq = self._eq.matrix(n)
        G, h = self._in.matrix(n)
        S, s = self._soc.matrix(n)
        R, rr = self._rsoc.matrix(n)
        # stored constant is on the lhs; flip to rhs form for eq / ineq
        return ConicProblem(
            n=n, P=P, q=q, const=self.const,
            A_eq=A_eq, b_eq=b_eq, G=G, h=h,
            soc=ConeBlock(S, -s, list(self._soc_dims)),
            rsoc=ConeBlock(R, -rr, list(self._rsoc_dims)),
        )


def _normalize(terms):
    cols, coefs = [], []
    m = None
    for c, a in terms:
        c = np.atleast_1d(np.asarray(c))
        m = c.size if m is None else m
        cols.append(c)
        coefs.append(np.broadcast_to(np.asarray(a, dtype=float), c.shape))
    return cols, coefs, m


def _batch_size(rows):
    sizes = [_normalize(terms)[2] or np.size(const) for terms, const in rows]
    return max(sizes)


def _interleave(rows, m):
    """Row blocks for m cones of len(rows) entries each, cone-major order."""
    k = len(rows)
    block = _Rows()
    for j, (terms, const) in enumerate(rows):
        cols, coefs, _ = _normalize(terms)
        idx = np.arange(m) * k + j
        block.add(list(zip(cols, coefs)), np.broadcast_to(np.asarray(const, dtype=float), (m,)),
                  rows_at=idx, m=m)
    block.count = m * k
    return block


class _Rows:
    # constraint rows stored as triplets; the constant is kept as "lhs + const"
    def __init__(self):
        self.r, self.c, self.v, self.const_idx, self.const_val = [], [], [], [], []
        self.count = 0

    def add(self, terms, const, rows_at=None, m=None):
        cols, coefs, m_terms = _normalize(terms)
        m = m or m_terms or np.size(const)
        const = np.broadcast_to(np.asarray(const, dtype=float), (m,))
        idx = np.arange(self.count, self.count + m) if rows_at is None else rows_at + self.count
        for c, a in zip(cols, coefs):
            self.r.append(idx)
            self.c.append(c)
            self.v.append(a)
        self.const_idx.append(idx)
        self.const_val.append(const)
        if rows_at is None:
            self.count += m

    def merge(self, other):
        off = self.count
        self.r += [r + off for r in other.r]
        self.c += other.c
        self.v += other.v
        self.const_idx += [i + off for i in other.const_idx]
        self.const_val += other.const_val
        self.count += other.count

    def matrix(self, n):
        if not self.count:
            return sp.csr_matrix((0, n)), np.zeros(0)
        M = sp.csr_matrix(
            (np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))),
            shape=(self.count, n),
        )
        const = np.zeros(self.count)
        np.add.at(const, np.concatenate(self.const_idx), np.concatenate(self.const_val))
        return M, -const


# ---------------------------------------------------------------------------
# Clarabel backend

def _rsoc_as_soc(block: ConeBlock) -> tuple[sp.csr_matrix, np.ndarray, list]:
    # a*b >= ||w||^2, a,b >= 0  <=>  ||(a - b, 2w)|| <= a + b
    rows, consts, dims = [], [], []
    M = block.M.tocsr()
    start = 0
    T_r, T_c, T_v = [], [], []
    out = 0
    for d in block.dims:
        a, b = start, start + 1
        T_r += [out, out, out + 1, out + 1]
        T_c += [a, b, a, b]
        T_v += [1.0, 1.0, 1.0, -1.0]
        for k in range(2, d):
            T_r.append(out + k)
            T_c.append(start + k)
            T_v.append(2.0)
        out += d
        start += d
        dims.append(d)
    T = sp.csr_matrix((T_v, (T_r, T_c)), shape=(out, start))
    return T @ M, T @ block.c, dims


def _clarabel_data(problem: ConicProblem):
    blocks, rhs, cones = [], [], []
    if problem.A_eq.shape[0]:
        blocks.append(problem.A_eq)
        rhs.append(problem.b_eq)
        cones.append(clarabel.ZeroConeT(problem.A_eq.shape[0]))
    if problem.G.shape[0]:
        blocks.append(problem.G)
        rhs.append(problem.h)
        cones.append(clarabel.NonnegativeConeT(problem.G.shape[0]))
    if problem.soc.dims:
        blocks.append(-problem.soc.M)
        rhs.append(problem.soc.c)
        cones += [clarabel.SecondOrderConeT(d) for d in problem.soc.dims]
    if problem.rsoc.dims:
        M, c, dims = _rsoc_as_soc(problem.rsoc)
        blocks.append(-M)
        rhs.append(c)
        cones += [clarabel.SecondOrderConeT(d) for d in dims]
    if blocks:
        A = sp.vstack(blocks).tocsc()
        b = np.concatenate(rhs)
    else:
        A = sp.csc_matrix((0, problem.n))
        b = np.zeros(0)
    P = sp.triu(problem.P, format="csc")
    return P, A, b, cones


def clarabel_matrices(problem: ConicProblem):
    """``(P_upper, A, b, cones)`` exactly as handed to the backend."""
    return _clarabel_data(problem)


def _settings(tol, max_iter):
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = max_iter
    s.tol_gap_abs = tol
    s.tol_gap_rel = tol
    s.tol_feas = tol
    s.tol_ktratio = min(1e-6, tol)
    s.presolve_enable = False
    return s


_OK = {"Solved": "optimal", "AlmostSolved": "inaccurate"}


def _finish(problem, sol, tol) -> ConicSolution:
    status = str(sol.status)
    if status in _OK:
        x = np.asarray(sol.x)
        if status != "Solved":
            log.warning("conic solve finished with status %s", status)
        return ConicSolution(x=x, objective=problem.objective(x), status=_OK[status],
                             tolerance=tol, iterations=sol.iterations,
                             s=np.asarray(sol.s), z=np.asarray(sol.z))
    if "Infeasible" in status:
        raise Infeasible(f"conic problem is {status}")
    if status == "MaxIterations":
        raise MaxIterations("conic solver hit its iteration limit")
    raise IllConditioned(f"conic solver stopped with status {status}")


def solve_conic(problem: ConicProblem, tol: float = 1e-8, max_iter: int = 200,
                warm_start: np.ndarray | None = None) -> ConicSolution:
    """Solve a conic program to the given KKT tolerance.

    ``warm_start`` is accepted for interface symmetry with the iterative fast
    paths; interior-point iterates cannot be warm started and it is ignored.
    """
    P, A, b, cones = _clarabel_data(problem)
    solver = clarabel.DefaultSolver(P, problem.q, A, b, cones, _settings(tol, max_iter))
    return _finish(problem, solver.solve(), tol)


class ReusableSolver:
    """A factorised problem whose linear objective term can be swapped between
    solves (the ADMM subproblems only change ``q`` and ``const``)."""

    def __init__(self, problem: ConicProblem, tol: float = 1e-8, max_iter: int = 200):
        self.problem = problem
        self.tol = tol
        P, A, b, cones = _clarabel_data(problem)
        self._solver = clarabel.DefaultSolver(P, problem.q, A, b, cones, _settings(tol, max_iter))

    def solve(self, q: np.ndarray | None = None, const: float | None = None) -> ConicSolution:
        if q is not None:
            self.problem.q = np.asarray(q, dtype=float)
            self._solver.update(q=self.problem.q)
        if const is not None:
            self.problem.const = float(const)
        return _finish(self.problem, self._solver.solve(), self.tol)


def dump_problem(problem: ConicProblem, path) -> None:
    """Write the canonical form as plain text (one nonzero per line)."""
    out = [f"n {problem.n}", f"const {problem.const!r}"]

    def mat(name, M):
        M = sp.coo_matrix(M)
        out.append(f"{name} {M.shape[0]} {M.shape[1]} {M.nnz}")
        out.extend(f"{i} {j} {v!r}" for i, j, v in zip(M.row, M.col, M.data))

    def vec(name, v):
        out.append(f"{name} {len(v)}")
        out.extend(repr(float(a)) for a in v)

    mat("P", problem.P)
    vec("q", problem.q)
    mat("A_eq", problem.A_eq)
    vec("b_eq", problem.b_eq)
    mat("G", problem.G)
    vec("h", problem.h)
    for name, block in (("soc", problem.soc), ("rsoc", problem.rsoc)):
        mat(name, block.M)
        vec(name + "_const", block.c)
        out.append(f"{name}_dims " + " ".join(map(str, block.dims)))
    Path(path).write_text("\n".join(out) + "\n")
