"""Gaussian stochastic program in scaled coordinates.

Near the fluid plan ``y*`` a state ``x`` and an action ``y`` are written as

    x = x*_h + d / sqrt(N),        y = y*_h + c / sqrt(N),

so that ``c`` carries the first-order correction of an LP-based plan.  The
scaled program chooses ``c`` stage by stage under Gaussian noise
``d_{h+1} = sum_{s,a} c_h(s,a) P_h(. | s,a) + Z_h`` with ``Z_h ~ N(0, Gamma_h)``,
subject to ``sum_s c(s,1) = 0``, ``c(s,0) + c(s,1) = d(s)`` and ``c(s,a) >= 0``
wherever ``y*_h(s,a) = 0``.  It is solved by sample average approximation on a
scenario tree; decisions at unseen states come from re-solving the subtree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
from scipy.optimize import brentq
from scipy.special import ndtr

from . import lp as lpmod
from .fluid import FluidResolver, FluidSolution, PolicyParams, SPLIT_TOL
from .model import EvalReport, RmabInstance, project_simplex, rng_stream

NODE_CAP = 200_000


def noise_factor(gamma: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Matrix ``F`` with ``F F^T = gamma``, from an eigendecomposition with tiny negatives clipped."""
    gamma = np.asarray(gamma, dtype=float)
    gamma = 0.5 * (gamma + gamma.T)
    vals, vecs = np.linalg.eigh(gamma)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol * scale:
        raise ValueError(f"covariance is not PSD (eigenvalue {vals.min():.3g})")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def center(z: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Remove the round-off sum of each draw, spread over the coordinates that carry variance."""
    gamma = np.asarray(gamma, dtype=float)
    diag = np.diag(gamma)
    live = diag > 1e-14 * max(1.0, float(diag.max(initial=0.0)))
    z = np.array(z, dtype=float)
    z[..., ~live] = 0.0
    if live.any():
        z[..., live] -= z[..., live].sum(axis=-1, keepdims=True) / live.sum()
    return z


def sample_noise(gamma_h, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``Z ~ N(0, gamma_h)``; each draw is corrected so its coordinates sum to zero."""
    F = noise_factor(gamma_h)
    S = F.shape[0]
    n = 1 if size is None else size
    z = center(rng.standard_normal((n, S)) @ F.T, gamma_h)
    return z[0] if size is None else z


def default_branching(H: int) -> tuple[int, ...]:
    if H < 2:
        return ()
    if H == 2:
        return (10_000,)
    return (30,) * (H - 1)


@dataclass
class ScenarioTree:
    """Uniform-branching tree rooted at stage ``root_stage``.

    ``noise[k]`` holds the noise of the ``len(noise[k])`` nodes at depth ``k``
    (stage ``root_stage + k``) and ``parent[k]`` their parents at depth ``k-1``.
    Depth 0 is the root, which has no noise.
    """

    root_stage: int
    branching: tuple[int, ...]
    noise: list[np.ndarray]
    parent: list[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.noise)

    def size(self, k: int) -> int:
        return self.noise[k].shape[0]

    @property
    def n_nodes(self) -> int:
        return sum(self.size(k) for k in range(self.depth))

    @property
    def n_scenarios(self) -> int:
        return self.size(self.depth - 1)


def build_tree(gammas: np.ndarray, root_stage: int, branching, seed: int) -> ScenarioTree:
    S = gammas.shape[-1]
    noise = [np.zeros((1, S))]
    parent = [np.zeros(1, dtype=int)]
    for k, B in enumerate(branching, start=1):
        stage = root_stage + k
        prev = noise[-1].shape[0]
        z = sample_noise(gammas[stage - 2], rng_stream(seed, root_stage, k), size=prev * B)
        noise.append(z)
        parent.append(np.repeat(np.arange(prev), B))
    return ScenarioTree(root_stage, tuple(int(b) for b in branching), noise, parent)


@dataclass
class _TreeProgram:
    lp: lpmod.StandardLp
    offsets: list[int]
    root_rows: np.ndarray
    root_cols: np.ndarray


def _assemble(instance: RmabInstance, y_star: np.ndarray, tree: ScenarioTree, cap: float, d_root) -> _TreeProgram:
    """Deterministic equivalent of the scaled program on ``tree``; one decision block per node."""
    S = instance.S
    h0 = tree.root_stage
    block = 2 * S
    offsets = np.cumsum([0] + [tree.size(k) * block for k in range(tree.depth)]).tolist()
    n = offsets[-1]
    rows_per_node = S + 1
    row_offsets = np.cumsum([0] + [tree.size(k) * rows_per_node for k in range(tree.depth)]).tolist()
    m = row_offsets[-1]
    I, J, V = [], [], []
    b = np.zeros(m)
    r = np.zeros(n)
    lower = np.empty(n)
    upper = np.full(n, cap)
    for k in range(tree.depth):
        stage = h0 + k
        nk = tree.size(k)
        nodes = np.arange(nk)
        col0 = offsets[k] + nodes * block           # (nk,)
        row0 = row_offsets[k] + nodes * rows_per_node
        cols = col0[:, None] + np.arange(block)[None, :]  # (nk, 2S), index 2s + a
        r[cols.ravel()] = np.tile(instance.reward(stage).ravel() / nk, nk)
        zero = (y_star[stage - 1] <= SPLIT_TOL).ravel()
        lower[cols.ravel()] = np.tile(np.where(zero, 0.0, -cap), nk)
        # budget: sum_s c(s,1) = 0
        pulls = col0[:, None] + 2 * np.arange(S)[None, :] + 1
        I.append(np.repeat(row0, S)); J.append(pulls.ravel()); V.append(np.ones(nk * S))
        # coupling: c(s,0) + c(s,1) - (parent drift)(s) = z(s)
        crow = row0[:, None] + 1 + np.arange(S)[None, :]  # (nk, S)
        for a in (0, 1):
            I.append(crow.ravel()); J.append((col0[:, None] + 2 * np.arange(S)[None, :] + a).ravel())
            V.append(np.ones(nk * S))
        if k == 0:
            b[crow.ravel()] = np.asarray(d_root, dtype=float)
        else:
            b[crow.ravel()] = tree.noise[k].ravel()
            P = instance.kernel(stage - 1)  # [a, s, t]
            pcol0 = offsets[k - 1] + tree.parent[k] * block
            # entry (child row t, parent column (s, a)) = -P[a, s, t]
            coef = -P.transpose(2, 1, 0).reshape(S, block)  # [t, 2s + a]
            nzt, nzc = np.nonzero(coef)
            I.append((crow[:, nzt]).ravel())
            J.append((pcol0[:, None] + nzc[None, :]).ravel())
            V.append(np.tile(coef[nzt, nzc], nk))
    A = sps.csc_matrix((np.concatenate(V), (np.concatenate(I), np.concatenate(J))), shape=(m, n))
    root_rows = 1 + np.arange(S)
    return _TreeProgram(lpmod.StandardLp(A, b, r, lower, upper), offsets, root_rows, np.arange(block))


@dataclass
class SpSolution:
    root: np.ndarray                 # (S, 2) scaled decision at the root
    decisions: list[np.ndarray]      # per depth, (n_k, S, 2)
    states: list[np.ndarray]         # per depth, (n_k, S) scaled deviations d
    objective: float
    solver_objective: float
    n_scenarios: int
    branching: tuple[int, ...]
    seed: int
    root_stage: int = 1
    out_of_region: int = 0
    tree: ScenarioTree | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "root_stage": self.root_stage,
            "root_decision": self.root.tolist(),
            "objective": self.objective,
            "solver_objective": self.solver_objective,
            "n_scenarios": self.n_scenarios,
            "branching": list(self.branching),
            "seed": self.seed,
            "out_of_region_nodes": self.out_of_region,
        }


def _root_bounds(fluid: FluidSolution, prog: _TreeProgram, stage: int, N: int | None):
    lo = prog.lp.lower[prog.root_cols].copy()
    if N is not None:
        lo = np.maximum(lo, -math.sqrt(N) * fluid.y_star[stage - 1].ravel())
    return lo, prog.lp.upper[prog.root_cols]


def _check_root_state(fluid: FluidSolution, d, stage: int) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if d.shape != (fluid.S,):
        raise ValueError("scaled state must have length S")
    if abs(d.sum()) > 1e-7 * max(1.0, float(np.abs(d).max())):
        raise ValueError("scaled state deviation must sum to zero")
    empty = fluid.x_star[stage - 1] <= SPLIT_TOL
    if np.any(d[empty] < -1e-9):
        raise ValueError("scaled state removes mass from a state the fluid plan leaves empty")
    return d


class LinearizedFallback:
    """Out-of-region decision in scaled coordinates.

    This is the large-population limit of a fluid re-solve: the deterministic
    version of the scaled program (a single zero-noise path) started from
    ``d``.  No trust-region box is imposed.
    """

    def __init__(self, fluid: FluidSolution):
        self.fluid = fluid
        self._models = {}

    def __call__(self, d, stage: int, N: int | None = None) -> np.ndarray:
        fluid, instance = self.fluid, self.fluid.instance
        if stage not in self._models:
            tree = build_tree(np.zeros((max(fluid.H - 1, 1), fluid.S, fluid.S)), stage,
                              (1,) * (fluid.H - stage), seed=0)
            prog = _assemble(instance, fluid.y_star, tree, np.inf, np.zeros(fluid.S))
            self._models[stage] = (lpmod.HighsModel(prog.lp), prog)
        model, prog = self._models[stage]
        model.set_rhs(prog.root_rows, d)
        lo, up = _root_bounds(fluid, prog, stage, N)
        model.set_col_bounds(prog.root_cols, lo, up)
        sol = model.solve()
        if sol.status != "optimal":
            raise lpmod.LpError(f"linearized fallback is {sol.status}")
        return sol.y[prog.root_cols].reshape(fluid.S, 2)


def _solve_tree(fluid: FluidSolution, gammas, params: PolicyParams, branching, seed: int, root_stage: int,
                d_root, N: int | None, node_cap: int) -> SpSolution:
    instance = fluid.instance
    S = fluid.S
    n_vars = 2 * S * sum(int(np.prod(branching[:k])) for k in range(len(branching) + 1))
    if n_vars > node_cap:
        raise ValueError(f"scenario tree needs {n_vars} LP variables (cap {node_cap})")
    d_root = _check_root_state(fluid, d_root, root_stage)
    tree = build_tree(gammas, root_stage, branching, seed)
    cap = params.kappa * params.box
    prog = _assemble(instance, fluid.y_star, tree, cap, d_root)
    lo, up = _root_bounds(fluid, prog, root_stage, N)
    prog.lp.lower[prog.root_cols] = lo
    # interior point with crossover is far steadier than dual simplex on wide trees
    sol = lpmod.HighsModel(prog.lp, solver="ipm").solve()
    if sol.status != "optimal":
        raise lpmod.LpError(f"SAA program is {sol.status}")
    decisions = [sol.y[prog.offsets[k]:prog.offsets[k + 1]].reshape(-1, S, 2).copy() for k in range(tree.depth)]
    # walk the tree: nodes outside the trust region (and everything below them) take the fallback decision
    fallback = LinearizedFallback(fluid)
    states = [d_root[None, :].copy()]
    replaced = np.zeros(1, dtype=bool)
    n_out = 0
    for k in range(1, tree.depth):
        P = instance.kernel(root_stage + k - 1)
        par = tree.parent[k]
        d = np.einsum("nsa,ast->nt", decisions[k - 1][par], P) + tree.noise[k]
        states.append(d)
        replaced_k = replaced[par] | (np.abs(d).max(axis=1) > params.box)
        for i in np.nonzero(replaced_k)[0]:
            decisions[k][i] = fallback(d[i], root_stage + k)
        n_out += int(replaced_k.sum())
        replaced = replaced_k
    objective = sum(float(np.sum(instance.reward(root_stage + k) * decisions[k]) / decisions[k].shape[0])
                    for k in range(tree.depth))
    return SpSolution(root=decisions[0][0].copy(), decisions=decisions, states=states, objective=objective,
                      solver_objective=float(sol.value), n_scenarios=tree.n_scenarios,
                      branching=tuple(branching), seed=seed, root_stage=root_stage, out_of_region=n_out, tree=tree)


def build_and_solve_saa(fluid: FluidSolution, gammas, params: PolicyParams, branching=None, seed: int = 0,
                        N: int | None = None, node_cap: int = NODE_CAP) -> SpSolution:
    """Solve the sample-average version of the scaled program from ``d_1 = 0``.

    ``branching[k]`` is the number of children per node at depth ``k``, i.e.
    the number of noise samples for the transition out of stage ``k + 1``.
    With ``N`` given, the root decision also keeps ``y*_1 + c / sqrt(N) >= 0``.
    """
    if fluid.H < 2:
        raise ValueError("the scaled program needs H >= 2")
    branching = default_branching(fluid.H) if branching is None else tuple(branching)
    if len(branching) != fluid.H - 1:
        raise ValueError(f"branching needs {fluid.H - 1} entries")
    return _solve_tree(fluid, gammas, params, branching, seed, 1, np.zeros(fluid.S), N, node_cap)


class SpPolicy:
    """Scaled decision rule ``(d, h) -> c`` from rolling re-solves of the SAA program.

    The subtree used at stage ``h`` has branching ``branching[h-1:]`` and noise
    drawn from the stream ``(seed, h)``; it is built once and re-solved from a
    warm basis for each query, so decisions are a deterministic function of
    ``(d, h, N)``.  At the last stage no noise remains and the program is the
    exact single-stage LP.
    """

    def __init__(self, fluid: FluidSolution, gammas, params: PolicyParams, branching=None, seed: int = 0,
                 node_cap: int = NODE_CAP):
        self.fluid = fluid
        self.gammas = np.asarray(gammas)
        self.params = params
        self.branching = default_branching(fluid.H) if branching is None else tuple(branching)
        if len(self.branching) != fluid.H - 1:
            raise ValueError(f"branching needs {fluid.H - 1} entries")
        self.seed = seed
        self.node_cap = node_cap
        self._models: dict[int, tuple[lpmod.HighsModel, _TreeProgram]] = {}
        self._cache: dict[tuple, np.ndarray] = {}

    def _model(self, h: int):
        if h not in self._models:
            sub = self.branching[h - 1:]
            n_vars = 2 * self.fluid.S * sum(int(np.prod(sub[:k])) for k in range(len(sub) + 1))
            if n_vars > self.node_cap:
                raise ValueError(f"scenario tree needs {n_vars} LP variables (cap {self.node_cap})")
            tree = build_tree(self.gammas, h, sub, self.seed)
            prog = _assemble(self.fluid.instance, self.fluid.y_star, tree, self.params.kappa * self.params.box,
                             np.zeros(self.fluid.S))
            self._models[h] = (lpmod.HighsModel(prog.lp), prog)
        return self._models[h]

    def __call__(self, d, h: int, N: int | None = None) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if np.abs(d).max(initial=0.0) > self.params.box:
            raise ValueError("scaled state lies outside the trust region; use the fallback policy")
        d = _check_root_state(self.fluid, d, h)
        key = (h, N, np.round(d, 12).tobytes())
        hit = self._cache.get(key)
        if hit is not None:
            return hit.copy()
        model, prog = self._model(h)
        model.set_rhs(prog.root_rows, d)
        lo, up = _root_bounds(self.fluid, prog, h, N)
        model.set_col_bounds(prog.root_cols, lo, up)
        sol = model.solve()
        if sol.status != "optimal":
            raise lpmod.LpError(f"rolling SAA re-solve at stage {h} is {sol.status}")
        c = sol.y[prog.root_cols].reshape(self.fluid.S, 2)
        c = _clean_decision(c, d, self.fluid.y_star[h - 1])
        if len(self._cache) < 200_000:
            self._cache[key] = c
        return c.copy()


def _clean_decision(c: np.ndarray, d: np.ndarray, y_star_h: np.ndarray) -> np.ndarray:
    """Remove solver round-off so budget and coupling hold to machine precision."""
    c = c.copy()
    zero = y_star_h <= SPLIT_TOL
    c[zero] = np.maximum(c[zero], 0.0)
    c[:, 0] = d - c[:, 1]
    return c


def sp_decision(d_h, h: int, fluid: FluidSolution, gammas, params: PolicyParams, branching=None, seed: int = 0,
                N: int | None = None) -> np.ndarray:
    """One scaled decision from a freshly built rolling re-solve (see ``SpPolicy``)."""
    return SpPolicy(fluid, gammas, params, branching, seed)(d_h, h, N)


@dataclass(frozen=True)
class TwoStateConstants:
    beta_star: float
    w: float
    tau_star: float
    c_star: float
    lp_gap_const: float
    sp_gain_const: float
    k: float


def analytic_two_state(p1: float, q1: float, p2: float, q2: float) -> TwoStateConstants:
    """Closed-form first-stage correction for the two-state, two-stage family.

    Stage 1 pulls a fraction ``beta`` of the arms in state 1 (half the arms
    start in each state, half are pulled), and stage 2 rewards pulls of
    state-1 arms.  ``p1, q1`` are the probabilities of landing in state 1 from
    state 1 when pulled / idle, ``p2, q2`` the same from state 2.
    """
    for v in (p1, q1, p2, q2):
        if not 0.0 <= v <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
    k = q1 + p2 - p1 - q2
    if k <= 1.0:
        raise ValueError("need q1 + p2 - p1 - q2 > 1")
    beta = (0.5 * (q1 + p2) - 0.5) / k
    if not 0.0 < beta < 0.5:
        raise ValueError("fluid pull fraction falls outside (0, 1/2)")
    w = math.sqrt(beta * p1 * (1 - p1) + (0.5 - beta) * q1 * (1 - q1)
                  + (0.5 - beta) * p2 * (1 - p2) + beta * q2 * (1 - q2))
    target = (k - 1.0) / k
    tau = brentq(lambda t: (1.0 - ndtr(t)) - target, -40.0, 40.0, xtol=1e-12)
    bump = math.exp(-tau * tau / 2.0) / math.sqrt(2.0 * math.pi)
    return TwoStateConstants(beta_star=beta, w=w, tau_star=tau, c_star=w * tau / k,
                             lp_gap_const=w * bump, sp_gain_const=w * (1.0 / math.sqrt(2.0 * math.pi) - bump), k=k)


@dataclass
class GaussianRun:
    values: np.ndarray
    out_of_region: int


def _gaussian_rollouts(policy_c, fluid: FluidSolution, gammas, params: PolicyParams, N: int, reps: int, seed: int,
                       first_decision=None) -> GaussianRun:
    instance = fluid.instance
    H, S = fluid.H, fluid.S
    root_n = math.sqrt(N)
    factors = [noise_factor(g) for g in gammas]
    resolver = FluidResolver(instance)
    values = np.zeros(reps)
    out = 0
    for rep in range(reps):
        rng = rng_stream(seed, rep)
        eps = rng.standard_normal((max(H - 1, 0), S))
        x = instance.x_ini.astype(float)
        total = 0.0
        for h in range(1, H + 1):
            d = root_n * (x - fluid.x_star[h - 1])
            if h == 1 and first_decision is not None:
                y = fluid.y_star[0] + np.asarray(first_decision) / root_n
            elif np.abs(d).max() <= params.box and np.abs(x - fluid.x_star[h - 1]).max() <= params.state_radius(h, N):
                y = fluid.y_star[h - 1] + policy_c(d, h, N) / root_n
            else:
                y, _ = resolver.solve(x, h)
                out += 1
            total += float(np.sum(instance.reward(h) * y))
            if h < H:
                z = center(factors[h - 1] @ eps[h - 1], gammas[h - 1])
                x = project_simplex(np.einsum("sa,ast->t", y, instance.kernel(h)) + z / root_n)
        values[rep] = total
    return GaussianRun(values, out)


def gaussian_evaluate(policy_c, fluid: FluidSolution, gammas, params: PolicyParams, N: int, reps: int,
                      seed: int = 0, first_decision=None) -> EvalReport:
    """Per-arm value of a scaled policy inside the Gaussian system.

    States outside the policy region fall back to a fluid re-solve.  With
    ``first_decision`` the stage-1 scaled decision is pinned (``zeros`` gives
    the value of starting with the fluid action and continuing with the policy).
    """
    run = _gaussian_rollouts(policy_c, fluid, gammas, params, N, reps, seed, first_decision)
    return EvalReport.from_samples(run.values, N=N, seed=seed, notes={"fallback_steps": run.out_of_region})


def first_stage_gain(policy_c, fluid: FluidSolution, gammas, params: PolicyParams, N: int, reps: int,
                     seed: int = 0) -> EvalReport:
    """``sqrt(N) * (V_policy - Q(first decision = fluid action))`` in the Gaussian system.

    Both rollouts of a replication share the noise, so the paired differences
    give a tight interval.
    """
    free = _gaussian_rollouts(policy_c, fluid, gammas, params, N, reps, seed)
    pinned = _gaussian_rollouts(policy_c, fluid, gammas, params, N, reps, seed, np.zeros((fluid.S, 2)))
    return EvalReport.from_samples(math.sqrt(N) * (free.values - pinned.values), N=N, seed=seed)
