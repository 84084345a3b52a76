"""Linear programming: a tableau simplex with Bland's rule, uniqueness tests,
vertex enumeration, and a HiGHS route for large sparse programs.

All programs are maximizations ``max r.y  s.t.  A y = b,  lower <= y <= upper``.
The tableau code works on the pure standard form (``y >= 0``); bounded
programs are converted first.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import highspy
import numpy as np
import scipy.sparse as sps

FEAS_TOL = 1e-8
OPT_TOL = 1e-9
DEDUP_TOL = 1e-8
PIVOT_TOL = 1e-10
VERTEX_CAP = 24


class LpError(RuntimeError):
    """Solver failure: pivot budget exhausted, numerical breakdown or backend error."""


@dataclass
class StandardLp:
    A: np.ndarray | sps.spmatrix
    b: np.ndarray
    r: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if not sps.issparse(self.A):
            self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        m, n = self.A.shape
        if self.b.shape != (m,) or self.r.shape != (n,):
            raise ValueError("inconsistent LP dimensions")

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    @property
    def has_default_bounds(self) -> bool:
        lo_ok = self.lower is None or np.all(self.lower == 0)
        up_ok = self.upper is None or np.all(np.isposinf(self.upper))
        return bool(lo_ok and up_ok)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.shape[1]
        lo = np.zeros(n) if self.lower is None else np.asarray(self.lower, dtype=float)
        up = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        return lo, up

    def dense(self) -> np.ndarray:
        return self.A.toarray() if sps.issparse(self.A) else self.A

    def to_standard_form(self):
        """Return ``(lp0, recover)`` where ``lp0`` has ``y >= 0`` only.

        Finite lower bounds are shifted out, free columns are split and finite
        upper bounds become rows with slacks.  ``recover`` maps a solution of
        ``lp0`` back to the original variables.
        """
        A = self.dense()
        m, n = A.shape
        lo, up = self.bounds()
        cols, shift, signs = [], np.zeros(n), []
        pieces = []
        for j in range(n):
            if np.isfinite(lo[j]):
                shift[j] = lo[j]
                pieces.append((j, 1.0))
            elif np.isfinite(up[j]):
                shift[j] = up[j]
                pieces.append((j, -1.0))
            else:
                pieces.append((j, 1.0))
                pieces.append((j, -1.0))
        k = len(pieces)
        boxed = [j for j in range(n) if np.isfinite(lo[j]) and np.isfinite(up[j])]
        A0 = np.zeros((m + len(boxed), k + len(boxed)))
        r0 = np.zeros(k + len(boxed))
        for col, (j, sgn) in enumerate(pieces):
            A0[:m, col] = sgn * A[:, j]
            r0[col] = sgn * self.r[j]
            cols.append(j)
            signs.append(sgn)
        b0 = np.concatenate([self.b - A @ shift, np.zeros(len(boxed))])
        first_piece = {}
        for col, (j, _) in enumerate(pieces):
            first_piece.setdefault(j, col)
        for i, j in enumerate(boxed):
            A0[m + i, first_piece[j]] = 1.0
            A0[m + i, k + i] = 1.0
            b0[m + i] = up[j] - lo[j]
        cols_arr, signs_arr = np.array(cols), np.array(signs)
        offset = float(self.r @ shift)

        def recover(y0: np.ndarray) -> np.ndarray:
            y = shift.copy()
            np.add.at(y, cols_arr, signs_arr * y0[:k])
            return y

        return StandardLp(A0, b0, r0), recover, offset


@dataclass
class LpSolution:
    status: str
    y: np.ndarray | None = None
    value: float | None = None
    basis: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    pivots: int = 0
    tableau: np.ndarray | None = field(default=None, repr=False)


class _Tableau:
    """Dense simplex tableau; the last row holds reduced costs and ``-objective``."""

    def __init__(self, A, b, budget):
        m, n = A.shape
        flip = b < 0
        A = np.where(flip[:, None], -A, A)
        b = np.where(flip, -b, b)
        self.m, self.n = m, n
        self.T = np.zeros((m + 1, n + m + 1))
        self.T[:m, :n] = A
        self.T[:m, n:n + m] = np.eye(m)
        self.T[:m, -1] = b
        self.basis = np.arange(n, n + m)
        self.active = np.ones(n + m, dtype=bool)
        self.budget = budget
        self.pivots = 0

    def pivot(self, i, j):
        if self.pivots >= self.budget:
            raise LpError(f"pivot budget of {self.budget} exhausted")
        T = self.T
        T[i] /= T[i, j]
        col = T[:, j].copy()
        col[i] = 0.0
        T -= np.outer(col, T[i])
        self.basis[i] = j
        self.pivots += 1

    def ratio_row(self, j):
        T, m = self.T, self.T.shape[0] - 1
        colj = T[:m, j]
        rows = np.nonzero(colj > PIVOT_TOL)[0]
        if rows.size == 0:
            return None
        ratios = np.maximum(T[rows, -1], 0.0) / colj[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-12 * max(1.0, best)]
        return int(ties[np.argmin(self.basis[ties])])

    def run(self):
        """Bland's rule: lowest-index improving column, lowest-index leaving variable."""
        while True:
            d = self.T[-1, :-1]
            cand = np.nonzero((d > OPT_TOL) & self.active)[0]
            if cand.size == 0:
                return "optimal"
            j = int(cand[0])
            i = self.ratio_row(j)
            if i is None:
                return "unbounded"
            self.pivot(i, j)

    def set_objective(self, c_full):
        m = self.T.shape[0] - 1
        cb = c_full[self.basis]
        self.T[-1, :-1] = c_full - cb @ self.T[:m, :-1]
        self.T[-1, -1] = -cb @ self.T[:m, -1]

    def drop_row(self, i):
        self.T = np.delete(self.T, i, axis=0)
        self.basis = np.delete(self.basis, i)


def _tableau_simplex(A, b, r, budget=None) -> LpSolution:
    m, n = A.shape
    budget = budget if budget is not None else 50 * (m + n)
    tab = _Tableau(A, b, budget)
    c1 = np.zeros(n + m)
    c1[n:] = -1.0
    tab.set_objective(c1)
    tab.run()
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    if -tab.T[-1, -1] < -FEAS_TOL * scale:
        return LpSolution("infeasible", pivots=tab.pivots)
    # drive artificial variables out of the basis; rows that cannot be pivoted are redundant
    i = 0
    while i < tab.T.shape[0] - 1:
        if tab.basis[i] >= n:
            row = tab.T[i, :n]
            js = np.nonzero(np.abs(row) > 1e-9)[0]
            if js.size:
                tab.pivot(i, int(js[np.argmax(np.abs(row[js]))]))
            else:
                tab.drop_row(i)
                continue
        i += 1
    tab.active[n:] = False
    tab.T[:, n:n + m] = 0.0
    c2 = np.zeros(n + m)
    c2[:n] = r
    tab.set_objective(c2)
    status = tab.run()
    if status == "unbounded":
        return LpSolution("unbounded", pivots=tab.pivots)
    basis = tab.basis.copy()
    y = np.zeros(n)
    y[basis] = tab.T[:-1, -1]
    # polish the basic values against the original data
    B = A[:, basis]
    yb, *_ = np.linalg.lstsq(B, b, rcond=None)
    if np.max(np.abs(B @ yb - b), initial=0.0) <= FEAS_TOL * scale and np.all(yb > -FEAS_TOL):
        y[basis] = yb
    y[np.abs(y) < 1e-13] = 0.0
    y = np.maximum(y, 0.0)
    if np.max(np.abs(A @ y - b), initial=0.0) > 1e-7 * scale:
        raise LpError("simplex lost primal feasibility")
    pi, *_ = np.linalg.lstsq(B.T, r[basis], rcond=None)
    red = r - A.T @ pi
    red[basis] = 0.0
    return LpSolution("optimal", y=y, value=float(r @ y), basis=np.sort(basis),
                      reduced_costs=red, pivots=tab.pivots, tableau=tab)


def _highs_lp(lp: StandardLp) -> highspy.HighsLp:
    A = sps.csc_matrix(lp.A)
    m, n = A.shape
    lo, up = lp.bounds()
    h = highspy.HighsLp()
    h.num_col_, h.num_row_ = n, m
    h.col_cost_ = lp.r.astype(float)
    h.col_lower_ = np.where(np.isfinite(lo), lo, -highspy.kHighsInf)
    h.col_upper_ = np.where(np.isfinite(up), up, highspy.kHighsInf)
    h.row_lower_ = lp.b.copy()
    h.row_upper_ = lp.b.copy()
    h.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    h.a_matrix_.start_ = A.indptr.astype(np.int32)
    h.a_matrix_.index_ = A.indices.astype(np.int32)
    h.a_matrix_.value_ = A.data.astype(float)
    h.sense_ = highspy.ObjSense.kMaximize
    return h


class HighsModel:
    """A persistent HiGHS model; re-solves after bound changes start from the last basis."""

    def __init__(self, lp: StandardLp, solver: str | None = None):
        self.n = lp.shape[1]
        self.highs = highspy.Highs()
        self.highs.setOptionValue("output_flag", False)
        if solver is not None:
            self.highs.setOptionValue("solver", solver)
        self.highs.setOptionValue("primal_feasibility_tolerance", 1e-9)
        self.highs.setOptionValue("dual_feasibility_tolerance", 1e-10)
        self.highs.passModel(_highs_lp(lp))

    def set_rhs(self, rows, values):
        rows = np.asarray(rows, dtype=np.int32)
        values = np.asarray(values, dtype=float)
        self.highs.changeRowsBounds(rows.size, rows, values, values)

    def set_col_bounds(self, cols, lower, upper):
        cols = np.asarray(cols, dtype=np.int32)
        lo = np.where(np.isfinite(lower), lower, -highspy.kHighsInf).astype(float)
        up = np.where(np.isfinite(upper), upper, highspy.kHighsInf).astype(float)
        self.highs.changeColsBounds(cols.size, cols, lo, up)

    def solve(self) -> LpSolution:
        self.highs.run()
        status = self.highs.getModelStatus()
        if status == highspy.HighsModelStatus.kOptimal:
            y = np.array(self.highs.getSolution().col_value)
            basis = self.highs.getBasis()
            basic = np.array([j for j, st in enumerate(basis.col_status)
                              if st == highspy.HighsBasisStatus.kBasic], dtype=int)
            return LpSolution("optimal", y=y, value=float(self.highs.getInfo().objective_function_value),
                              basis=basic, pivots=int(self.highs.getInfo().simplex_iteration_count))
        if status == highspy.HighsModelStatus.kInfeasible:
            return LpSolution("infeasible")
        if status in (highspy.HighsModelStatus.kUnbounded, highspy.HighsModelStatus.kUnboundedOrInfeasible):
            return LpSolution("unbounded")
        raise LpError(f"HiGHS stopped with status {self.highs.modelStatusToString(status)}")


def solve(lp: StandardLp, method: str = "auto", max_pivots: int | None = None) -> LpSolution:
    """Solve ``lp`` to optimality.

    ``method="simplex"`` runs the dense tableau with Bland's rule (pivot budget
    ``50 (m + n)`` unless ``max_pivots`` is given); ``"highs"`` uses the HiGHS
    dual simplex; ``"auto"`` picks the tableau for small programs.
    """
    m, n = lp.shape
    if method == "auto":
        method = "simplex" if m * n <= 60_000 else "highs"
    if method == "highs":
        return HighsModel(lp).solve()
    if method != "simplex":
        raise ValueError(f"unknown method {method!r}")
    if lp.has_default_bounds:
        return _tableau_simplex(lp.dense(), lp.b, lp.r, max_pivots)
    lp0, recover, offset = lp.to_standard_form()
    sol = _tableau_simplex(lp0.A, lp0.b, lp0.r, max_pivots)
    if sol.status == "optimal":
        sol.y = recover(sol.y)
        sol.value = float(lp.r @ sol.y)
        sol.basis = sol.reduced_costs = sol.tableau = None
    return sol


def is_unique(lp: StandardLp, sol: LpSolution | None = None) -> str:
    """Classify the optimum of a standard-form ``lp``: ``unique``, ``non-unique`` or ``undecided``.

    Nonbasic columns with zero reduced cost are probed by a single ratio-test
    step.  A step that moves the point proves non-uniqueness.  If every probe
    is blocked by degeneracy, the optimal face is searched directly: for a
    basic optimum ``y*`` the optimum is unique exactly when no point of the
    optimal face puts weight outside ``supp(y*)``.
    """
    if not lp.has_default_bounds:
        raise ValueError("uniqueness test needs a standard-form LP")
    try:
        if sol is None or sol.tableau is None:
            sol = _tableau_simplex(lp.dense(), lp.b, lp.r)
        if sol.status != "optimal":
            raise LpError(f"LP is {sol.status}")
        tab = sol.tableau
        n = lp.shape[1]
        d = tab.T[-1, :n]
        basic = set(int(j) for j in tab.basis)
        zero_rc = [j for j in range(n) if j not in basic and d[j] >= -OPT_TOL]
        if not zero_rc:
            return "unique"
        m = tab.T.shape[0] - 1
        for j in zero_rc:
            col = tab.T[:m, j]
            pos = col > PIVOT_TOL
            if not pos.any():
                return "non-unique"
            theta = float(np.min(np.maximum(tab.T[:m, -1][pos], 0.0) / col[pos]))
            if theta * max(1.0, float(np.abs(col).max())) > 1e-7:
                return "non-unique"
        return _face_test(lp, sol)
    except LpError:
        return "undecided"


def _face_test(lp: StandardLp, sol: LpSolution) -> str:
    A = lp.dense()
    off = sol.y <= FEAS_TOL
    A_face = np.vstack([A, lp.r])
    b_face = np.append(lp.b, sol.value)
    face = _tableau_simplex(A_face, b_face, off.astype(float))
    if face.status != "optimal":
        raise LpError("optimal face search failed")
    return "non-unique" if face.value > 1e-7 else "unique"


def _independent_rows(A: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    from scipy.linalg import qr

    _, R, piv = qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(1.0, diag.max(initial=0.0))))
    return np.sort(piv[:rank])


def enumerate_vertices(lp: StandardLp, cap: int = VERTEX_CAP) -> np.ndarray:
    """All basic feasible solutions of a standard-form ``lp`` with ``n <= cap``.

    Returns an array of shape ``(V, n)``; duplicates (degenerate bases) are
    merged at tolerance 1e-8.
    """
    if not lp.has_default_bounds:
        raise ValueError("vertex enumeration needs a standard-form LP")
    A = lp.dense()
    m, n = A.shape
    if n > cap:
        raise LpError(f"vertex enumeration limited to n <= {cap} (got {n})")
    rows = _independent_rows(A)
    A, b = A[rows], lp.b[rows]
    k = A.shape[0]
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    found: list[np.ndarray] = []
    combos = itertools.combinations(range(n), k)
    while True:
        chunk = list(itertools.islice(combos, 20000))
        if not chunk:
            break
        idx = np.array(chunk, dtype=int).reshape(len(chunk), k)
        B = A[:, idx].transpose(1, 0, 2)
        ok = np.abs(np.linalg.det(B)) > 1e-12
        if not ok.any():
            continue
        sol = np.linalg.solve(B[ok], np.broadcast_to(b, (int(ok.sum()), k))[..., None])[..., 0]
        feas = np.all(sol >= -FEAS_TOL * scale, axis=1)
        for cols, yb in zip(idx[ok][feas], sol[feas]):
            y = np.zeros(n)
            y[cols] = np.maximum(yb, 0.0)
            if np.max(np.abs(A @ y - b)) > 1e-7 * scale:
                continue
            if not any(np.max(np.abs(y - v)) <= DEDUP_TOL for v in found):
                found.append(y)
    return np.array(found).reshape(len(found), n)


def descent_constant(lp: StandardLp, y_star, columns=None, cap: int = VERTEX_CAP) -> float:
    """Smallest objective loss per unit sup-norm distance from ``y_star`` to another vertex.

    ``columns`` restricts the distance to a subset of coordinates.  Raises
    ``LpError`` when some other vertex is also optimal.
    """
    y_star = np.asarray(y_star, dtype=float)
    cols = np.arange(y_star.size) if columns is None else np.asarray(columns)
    best = np.inf
    for v in enumerate_vertices(lp, cap):
        gap = float(np.max(np.abs(v[cols] - y_star[cols])))
        if gap <= DEDUP_TOL:
            continue
        loss = float(lp.r @ (y_star - v))
        if loss <= OPT_TOL:
            raise LpError("optimum is not unique; descent constant undefined")
        best = min(best, loss / gap)
    return best
