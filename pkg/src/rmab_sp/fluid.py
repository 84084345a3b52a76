"""Fluid (mean-field) relaxation, its optimal plan, and the policy-class constants."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps

from . import lp as lpmod
from .model import RmabInstance, check_state, drift

SPLIT_TOL = 1e-9


@dataclass(frozen=True)
class FluidIndex:
    """Column and row positions of the stage-``h0`` fluid program."""

    h0: int
    y_col: np.ndarray        # [k, s, a] for stage h0 + k
    x_col: np.ndarray        # [k, s] for stage h0 + 1 + k
    budget_rows: np.ndarray  # [k]
    couple_rows: np.ndarray  # [k, s]
    drift_rows: np.ndarray   # [k, s']


def build_fluid_lp(instance: RmabInstance, x_h=None, h: int = 1, sparse: bool = False):
    """Fluid program from state ``x_h`` at stage ``h`` to the horizon.

    Variables are the action fractions of stages ``h .. H`` followed by the
    state fractions of stages ``h+1 .. H``.  Rows are the per-stage budgets,
    the state/action consistency rows and the drift rows.
    """
    S, H = instance.S, instance.H
    x_h = instance.x_ini if x_h is None else check_state(x_h)
    K = H - h + 1
    y_col = np.arange(K * S * 2).reshape(K, S, 2)
    x_col = K * S * 2 + np.arange((K - 1) * S).reshape(K - 1, S)
    n = K * S * 2 + (K - 1) * S
    budget_rows = np.arange(K)
    couple_rows = K + np.arange(K * S).reshape(K, S)
    drift_rows = K + K * S + np.arange((K - 1) * S).reshape(K - 1, S)
    m = K + K * S + (K - 1) * S
    rows, cols, vals = [], [], []

    def put(i, j, v):
        rows.append(i), cols.append(j), vals.append(v)

    b = np.zeros(m)
    r = np.zeros(n)
    alpha = instance.alpha
    for k in range(K):
        stage = h + k
        b[budget_rows[k]] = alpha
        r[y_col[k].ravel()] = instance.reward(stage).ravel()
        for s in range(S):
            put(budget_rows[k], y_col[k, s, 1], 1.0)
            put(couple_rows[k, s], y_col[k, s, 0], 1.0)
            put(couple_rows[k, s], y_col[k, s, 1], 1.0)
            if k == 0:
                b[couple_rows[0, s]] = x_h[s]
            else:
                put(couple_rows[k, s], x_col[k - 1, s], -1.0)
        if k < K - 1:
            P = instance.kernel(stage)
            for t in range(S):
                put(drift_rows[k, t], x_col[k, t], 1.0)
                for s in range(S):
                    for a in (0, 1):
                        if P[a, s, t] != 0.0:
                            put(drift_rows[k, t], y_col[k, s, a], -P[a, s, t])
    A = sps.csr_matrix((vals, (rows, cols)), shape=(m, n))
    index = FluidIndex(h, y_col, x_col, budget_rows, couple_rows, drift_rows)
    return lpmod.StandardLp(A if sparse else A.toarray(), b, r), index


@dataclass
class FluidSolution:
    x_star: np.ndarray   # (H, S)
    y_star: np.ndarray   # (H, S, 2)
    value: float
    degenerate: bool
    unique: str
    sigma: float | None
    lp: lpmod.StandardLp
    index: FluidIndex
    instance: RmabInstance | None = None

    @property
    def H(self) -> int:
        return self.y_star.shape[0]

    @property
    def S(self) -> int:
        return self.y_star.shape[1]


def is_degenerate(y_star, tol: float = SPLIT_TOL) -> bool:
    """True unless every stage has a state whose arms are split between both actions."""
    y_star = np.asarray(y_star)
    split = (y_star[..., 0] > tol) & (y_star[..., 1] > tol)
    return not bool(np.all(split.any(axis=1)))


def solve_fluid(instance: RmabInstance, method: str = "simplex", vertex_cap: int = lpmod.VERTEX_CAP,
                check_unique: bool = True) -> FluidSolution:
    """Optimal fluid plan from ``x_ini`` with degeneracy and uniqueness flags.

    The descent constant is computed by vertex enumeration when the program
    has at most ``vertex_cap`` columns and the optimum is unique; otherwise
    ``sigma`` is ``None``.
    """
    prog, index = build_fluid_lp(instance)
    sol = lpmod.solve(prog, method=method)
    if sol.status != "optimal":
        raise lpmod.LpError(f"fluid LP is {sol.status}")
    y = sol.y
    H, S = instance.H, instance.S
    y_star = y[index.y_col]
    x_star = np.vstack([instance.x_ini[None, :], y[index.x_col]]) if H > 1 else instance.x_ini[None, :].copy()
    unique = lpmod.is_unique(prog, sol if method == "simplex" else None) if check_unique else "undecided"
    sigma = None
    if unique == "unique" and prog.shape[1] <= vertex_cap:
        sigma = lpmod.descent_constant(prog, y, columns=index.y_col.ravel(), cap=vertex_cap)
    return FluidSolution(x_star=x_star, y_star=y_star, value=float(sol.value), degenerate=is_degenerate(y_star),
                         unique=unique, sigma=sigma, lp=prog, index=index, instance=instance)


def v_lp(instance: RmabInstance, x_h, h: int) -> float:
    """Fluid value of the remaining horizon from state ``x_h`` at stage ``h``."""
    prog, _ = build_fluid_lp(instance, x_h, h)
    sol = lpmod.solve(prog)
    if sol.status != "optimal":
        raise lpmod.LpError(f"fluid LP is {sol.status}")
    return float(sol.value)


def q_lp(instance: RmabInstance, x_h, y_h, h: int) -> float:
    """Fluid value when the stage-``h`` action is fixed to ``y_h``."""
    y_h = np.asarray(y_h, dtype=float)
    now = float(np.sum(instance.reward(h) * y_h))
    if h == instance.H:
        return now
    nxt = drift(instance, h, y_h)
    return now + v_lp(instance, nxt / nxt.sum(), h + 1)


class FluidResolver:
    """Repeated fluid re-solves from arbitrary states, one warm HiGHS model per stage."""

    def __init__(self, instance: RmabInstance):
        self.instance = instance
        self._models: dict[int, tuple[lpmod.HighsModel, FluidIndex]] = {}

    def _model(self, h: int):
        if h not in self._models:
            prog, index = build_fluid_lp(self.instance, self.instance.x_ini, h, sparse=True)
            self._models[h] = (lpmod.HighsModel(prog), index)
        return self._models[h]

    def solve(self, x_h, h: int) -> tuple[np.ndarray, float]:
        """First-stage action and value of the fluid program from ``x_h`` at stage ``h``."""
        model, index = self._model(h)
        model.set_rhs(index.couple_rows[0], np.asarray(x_h, dtype=float))
        sol = model.solve()
        if sol.status != "optimal":
            raise lpmod.LpError(f"fluid re-solve is {sol.status}")
        y = np.maximum(sol.y[index.y_col[0]], 0.0)
        return y, float(sol.value)


@dataclass(frozen=True)
class PolicyParams:
    """Constants of the restricted policy class.

    ``z[h-1]`` scales the admissible state deviation at stage ``h``; the action
    deviation radius is ``kappa`` times the state radius.  Scaled decisions are
    boxed by ``kappa * box`` while the scaled state stays within ``box``.
    """

    kappa: float
    lipschitz: np.ndarray
    z: np.ndarray
    box: float = 20.0
    sigma: float | None = None

    @staticmethod
    def delta(N: int) -> float:
        return 2.0 * math.log(N) / math.sqrt(N)

    def state_radius(self, h: int, N: int) -> float:
        return float(self.z[h - 1]) * self.delta(N)

    def action_radius(self, h: int, N: int) -> float:
        return self.kappa * self.state_radius(h, N)


def drift_lipschitz(instance: RmabInstance, h: int) -> float:
    """Sup-norm operator norm of the linear drift map at stage ``h``, capped at ``2S``."""
    P = instance.kernel(h)  # [a, s, t]
    return float(min(P.sum(axis=(0, 1)).max(), 2 * instance.S))


def policy_constants(instance: RmabInstance, fluid: FluidSolution, kappa: float | None = None,
                     box: float = 20.0) -> PolicyParams:
    S, H = instance.S, instance.H
    if kappa is None:
        if fluid.sigma is None:
            raise ValueError("descent constant unavailable; supply kappa explicitly")
        kappa = max(2.0 + 6.0 * S, 3.0 + 2.0 * instance.r_max * H * S / fluid.sigma)
    L = np.array([drift_lipschitz(instance, h) for h in range(1, H)])
    z = np.ones(H)
    for h in range(1, H):
        z[h] = math.sqrt(S) * (kappa * L[h - 1] * z[h - 1] + 1.0)
    return PolicyParams(kappa=float(kappa), lipschitz=L, z=z, box=float(box), sigma=fluid.sigma)


class MappingError(RuntimeError):
    """No admissible partner state exists for an action repair step."""


def map_action(x, x_prime, y, y_star, radius_state: float, radius_action: float,
               tol: float = SPLIT_TOL) -> np.ndarray:
    """Repair an action ``y`` feasible for ``x`` so that it becomes feasible for ``x_prime``.

    Each state is visited once.  Pull fractions are first capped by the new
    state mass.  A state whose idle fraction then sits more than
    ``radius_action`` away from the reference ``y_star`` trades mass with a
    partner state that has slack on the pull side; a state whose pull
    fraction had to be capped hands the lost pulls to a partner that can
    absorb them.  Partners are chosen by smallest index.
    """
    x_prime = np.asarray(x_prime, dtype=float)
    y = np.asarray(y, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    rs, ra = radius_state, radius_action
    S = x_prime.size
    out = np.empty_like(y)
    out[:, 1] = np.minimum(y[:, 1], x_prime)
    out[:, 0] = x_prime - out[:, 1]

    def partner(s, ok):
        for t in range(S):
            if t != s and ok(t):
                return t
        raise MappingError(f"no partner state for state {s}")

    for s in range(S):
        if y[s, 1] <= x_prime[s]:
            if np.all(np.abs(out[s] - y_star[s]) <= ra):
                continue
            if out[s, 0] > y_star[s, 0] + ra:
                eps = out[s, 0] - y_star[s, 0] - ra
                t = partner(s, lambda t: out[t, 1] > y_star[t, 1] + 2 * rs)
            elif out[s, 0] < y_star[s, 0] - ra:
                eps = out[s, 0] - y_star[s, 0] + ra
                t = partner(s, lambda t: out[t, 1] < y_star[t, 1] - 3 * rs)
            else:
                continue
            out[s, 0] -= eps
            out[s, 1] += eps
            out[t, 0] += eps
            out[t, 1] -= eps
        else:
            eps = y[s, 1] - x_prime[s]
            t = partner(s, lambda t: (out[t, 0] >= 2 * rs and y_star[t, 0] <= tol)
                        or (out[t, 1] <= y_star[t, 1] + 0.5 * ra and y_star[t, 0] > tol))
            out[t, 0] -= eps
            out[t, 1] += eps
    return out
