"""The N-arm system: rounding, executable policies, Monte Carlo evaluation and exact
dynamic programming for two-state instances.

Inside this module states and actions are carried as integer arm counts
(``n_x[s]`` and ``n_y[s, a]``); fractions are only formed for rewards and
for the fluid-based decision rules.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binom

from . import sp as spmod
from .fluid import FluidResolver, FluidSolution, MappingError, PolicyParams, map_action, policy_constants
from .model import (EvalReport, InstanceError, RmabInstance, covariances, arm_step, cumulative_kernel,
                    integer_state, rng_stream)

SNAP_TOL = 1e-7


def budget_count(alpha: float, N: int) -> int:
    k = alpha * N
    if abs(k - round(k)) > 1e-9:
        raise InstanceError(f"alpha * N = {k} is not an integer")
    return int(round(k))


def round_counts(y, n_x: np.ndarray, N: int, alpha: float) -> np.ndarray:
    """Integer pull/idle counts within one arm of ``N * y`` in every coordinate.

    Pulls are rounded down in every state and the missing pulls are restored
    one per state: the last state first, then the other states with a
    fractional part in index order.  Idle counts are whatever remains.
    """
    y = np.asarray(y, dtype=float)
    n_x = np.asarray(n_x, dtype=np.int64)
    A = budget_count(alpha, N)
    if np.any(y < -SNAP_TOL) or np.max(np.abs(y.sum(axis=1) * N - n_x)) > 1e-6 * max(1, N) \
            or abs(y[:, 1].sum() * N - A) > 1e-6 * max(1, N):
        raise InstanceError("action is not feasible for the state")
    ny = np.clip(y[:, 1] * N, 0.0, None)
    near = np.abs(ny - np.rint(ny)) < SNAP_TOL * max(1, N)
    ny = np.where(near, np.rint(ny), ny)
    pulls = np.minimum(np.floor(ny).astype(np.int64), n_x)
    frac = (ny - pulls) > 0
    missing = A - int(pulls.sum())
    S = n_x.size
    order = [S - 1] + list(range(S - 1))
    for s in order:
        if missing <= 0:
            break
        if frac[s] and pulls[s] < n_x[s]:
            pulls[s] += 1
            missing -= 1
    if missing != 0:
        raise InstanceError("rounding could not meet the budget")
    return np.stack([n_x - pulls, pulls], axis=1)


def round_action(y, x, N: int, alpha: float) -> np.ndarray:
    """Integer-scaled version of a feasible action ``y`` for the state ``x`` (multiples of ``1/N``)."""
    n_x = np.rint(np.asarray(x, dtype=float) * N).astype(np.int64)
    return round_counts(y, n_x, N, alpha) / N


def check_counts(n_y: np.ndarray, n_x: np.ndarray, A: int):
    if np.any(n_y < 0) or np.any(n_y.sum(axis=1) != n_x) or int(n_y[:, 1].sum()) != A:
        raise AssertionError(f"infeasible action counts {n_y.tolist()} for state {n_x.tolist()}")


class Policy:
    """Maps arm counts at stage ``h`` to feasible action counts."""

    name = "policy"
    deterministic = True

    def __init__(self, instance: RmabInstance):
        self.instance = instance
        self._cache: dict[tuple, np.ndarray] = {}

    def decide(self, n_x, h: int, N: int, rng: np.random.Generator | None = None) -> np.ndarray:
        n_x = np.asarray(n_x, dtype=np.int64)
        if self.deterministic:
            key = (h, N, n_x.tobytes())
            hit = self._cache.get(key)
            if hit is None:
                hit = self._decide(n_x, h, N, rng)
                if len(self._cache) < 500_000:
                    self._cache[key] = hit
            return hit.copy()
        return self._decide(n_x, h, N, rng)

    def _decide(self, n_x, h, N, rng):
        raise NotImplementedError


class LpUpdatePolicy(Policy):
    """Re-solve the fluid program from the current state and apply its first action."""

    name = "lp-update"

    def __init__(self, instance: RmabInstance, resolver: FluidResolver | None = None):
        super().__init__(instance)
        self.resolver = resolver or FluidResolver(instance)

    def fractional(self, x, h):
        y, _ = self.resolver.solve(x, h)
        return _repair(y, x, self.instance.alpha)

    def _decide(self, n_x, h, N, rng):
        return round_counts(self.fractional(n_x / N, h), n_x, N, self.instance.alpha)


def _repair(y, x, alpha):
    """Absorb solver round-off so that ``y`` is exactly consistent with ``x`` and the budget."""
    y = np.clip(np.asarray(y, dtype=float), 0.0, None)
    y[:, 1] = np.minimum(y[:, 1], x)
    gap = alpha - y[:, 1].sum()
    if gap > 0:
        room = x - y[:, 1]
        y[:, 1] += room * (gap / room.sum()) if room.sum() > 0 else 0.0
    elif gap < 0:
        y[:, 1] *= alpha / y[:, 1].sum()
    y[:, 0] = x - y[:, 1]
    return y


class LpFixedPolicy(Policy):
    """Follow the fluid plan ``y*_h``, repaired against the realized state by ``map_action``."""

    name = "lp-fixed"

    def __init__(self, instance: RmabInstance, fluid: FluidSolution, params: PolicyParams):
        super().__init__(instance)
        self.fluid = fluid
        self.params = params

    def fractional(self, x, h, N):
        y_star = self.fluid.y_star[h - 1]
        x_star = self.fluid.x_star[h - 1]
        rs = self.params.state_radius(h, N)
        try:
            y = map_action(x_star, x, y_star, y_star, rs, self.params.kappa * rs)
        except MappingError:
            y = None
        if y is None or y.min() < -1e-12:
            y = _greedy_repair(y_star, x, self.instance.alpha)
        return _repair(y, x, self.instance.alpha)

    def _decide(self, n_x, h, N, rng):
        return round_counts(self.fractional(n_x / N, h, N), n_x, N, self.instance.alpha)


def _greedy_repair(y_star, x, alpha):
    """Keep the planned pulls where the state allows and top up in index order."""
    pulls = np.minimum(y_star[:, 1], x)
    short = alpha - pulls.sum()
    for s in range(x.size):
        if short <= 0:
            break
        add = min(short, x[s] - pulls[s])
        pulls[s] += add
        short -= add
    return np.stack([x - pulls, pulls], axis=1)


class SpPolicyN(Policy):
    """Fluid plan plus the scaled SP correction inside the policy region, fluid re-solve outside."""

    name = "sp"

    def __init__(self, instance: RmabInstance, fluid: FluidSolution, params: PolicyParams,
                 scaled: spmod.SpPolicy, fallback: LpUpdatePolicy | None = None):
        super().__init__(instance)
        self.fluid = fluid
        self.params = params
        self.scaled = scaled
        self.fallback = fallback or LpUpdatePolicy(instance)
        self.fallback_calls = 0

    def in_region(self, x, h, N) -> bool:
        dev = np.abs(x - self.fluid.x_star[h - 1]).max()
        return dev <= self.params.state_radius(h, N) and math.sqrt(N) * dev <= self.params.box

    def fractional(self, x, h, N):
        if not self.in_region(x, h, N):
            self.fallback_calls += 1
            return self.fallback.fractional(x, h)
        rn = math.sqrt(N)
        d = rn * (x - self.fluid.x_star[h - 1])
        c = self.scaled(d, h, N)
        return _repair(self.fluid.y_star[h - 1] + c / rn, x, self.instance.alpha)

    def _decide(self, n_x, h, N, rng):
        return round_counts(self.fractional(n_x / N, h, N), n_x, N, self.instance.alpha)


class RandomPolicy(Policy):
    """Pull a uniformly random set of ``alpha N`` arms."""

    name = "random"
    deterministic = False

    def _decide(self, n_x, h, N, rng):
        if rng is None:
            raise ValueError("random policy needs a generator")
        pulls = rng.multivariate_hypergeometric(n_x, budget_count(self.instance.alpha, N))
        return np.stack([n_x - pulls, pulls], axis=1)


@dataclass
class PolicySpec:
    kind: str
    seed: int = 0
    branching: tuple | None = None
    kappa: float | None = None
    box: float = 20.0


def build_policy(spec: PolicySpec, instance: RmabInstance, fluid: FluidSolution | None = None,
                 resolver: FluidResolver | None = None) -> Policy:
    if spec.kind == "random":
        return RandomPolicy(instance)
    if spec.kind == "lp-update":
        return LpUpdatePolicy(instance, resolver)
    fluid = fluid if fluid is not None else _solve_fluid(instance)
    params = policy_constants(instance, fluid, kappa=spec.kappa, box=spec.box)
    if spec.kind == "lp-fixed":
        return LpFixedPolicy(instance, fluid, params)
    if spec.kind == "sp":
        gammas = covariances(instance, fluid.y_star).gamma
        scaled = spmod.SpPolicy(fluid, gammas, params, spec.branching, spec.seed)
        return SpPolicyN(instance, fluid, params, scaled, LpUpdatePolicy(instance, resolver))
    raise ValueError(f"unknown policy kind {spec.kind!r}")


def _solve_fluid(instance):
    from .fluid import solve_fluid

    return solve_fluid(instance)


def decide(policy: Policy, x_h, h: int, N: int, rng=None) -> np.ndarray:
    """Integer-scaled action (fractions) chosen by ``policy`` in state ``x_h``."""
    n_x = np.rint(np.asarray(x_h, dtype=float) * N).astype(np.int64)
    if n_x.sum() != N or np.max(np.abs(n_x - np.asarray(x_h) * N)) > 1e-6:
        raise InstanceError(f"state is not a multiple of 1/{N}")
    return policy.decide(n_x, h, N, rng) / N


def rollouts(policy: Policy, instance: RmabInstance, N: int, reps: int, seed: int,
             fluid: FluidSolution | None = None):
    """Per-replication per-arm totals and sup-norm deviations from the fluid path.

    Replication ``i`` draws one uniform per arm and stage from the stream
    ``(seed, i)``, so two policies evaluated with the same seed are coupled.
    """
    H, S = instance.H, instance.S
    A = budget_count(instance.alpha, N)
    n0 = integer_state(instance.x_ini, N)
    cums = [cumulative_kernel(instance.kernel(h)) for h in range(1, H)]
    totals = np.zeros(reps)
    dev = np.zeros((reps, H))
    for rep in range(reps):
        rng = rng_stream(seed, rep)
        prng = rng_stream(seed, rep, 1) if not policy.deterministic else None
        arms = np.repeat(np.arange(S), n0)
        n_x = n0.copy()
        total = 0.0
        for h in range(1, H + 1):
            if fluid is not None:
                dev[rep, h - 1] = np.abs(n_x / N - fluid.x_star[h - 1]).max()
            n_y = policy.decide(n_x, h, N, prng)
            check_counts(n_y, n_x, A)
            total += float(np.sum(instance.reward(h) * n_y)) / N
            if h < H:
                arms = arm_step(cums[h - 1], arms, n_y, rng.random(N))
                n_x = np.bincount(arms, minlength=S)
        totals[rep] = total
    return totals, dev


def evaluate(policy: Policy, instance: RmabInstance, N: int, reps: int, seed: int = 0,
             fluid: FluidSolution | None = None) -> EvalReport:
    """Monte Carlo per-arm value of ``policy`` on ``N`` arms."""
    totals, dev = rollouts(policy, instance, N, reps, seed, fluid)
    notes = {"policy": policy.name}
    n0 = integer_state(instance.x_ini, N)
    if np.max(np.abs(n0 / N - instance.x_ini)) > 1e-12:
        notes["x_ini_rounded"] = (n0 / N).tolist()
    return EvalReport.from_samples(totals, N=N, seed=seed, stage_deviation=dev.mean(axis=0) if fluid else None,
                                   notes=notes)


# ---------------------------------------------------------------- two-state exact DP

DP_MAX_N = 5000
DP_MAX_H = 4


def _binom_pmf(n: int, p: float) -> np.ndarray:
    return binom.pmf(np.arange(n + 1), n, p)


def _sum_pmfs(n_total: int, p: float, q: float) -> np.ndarray:
    """Row ``j``: law of ``Bin(j, p) + Bin(n_total - j, q)``."""
    out = np.zeros((n_total + 1, n_total + 1))
    for j in range(n_total + 1):
        out[j] = np.convolve(_binom_pmf(j, p), _binom_pmf(n_total - j, q))
    err = np.abs(out.sum(axis=1) - 1.0).max()
    if err >= 1e-10:
        raise ArithmeticError(f"binomial convolution lost mass ({err:.2e})")
    return out


@dataclass
class _StageKernel:
    """Next-stage count laws for a two-state stage.

    With ``A`` pulls, ``j`` of them in state 1 and ``k`` arms in state 1, the
    next state-1 count is ``Bin(j, p1) + Bin(A-j, p2) + Bin(k-j, q1) + Bin(N-A-k+j, q2)``:
    ``pulled[j]`` is the law of the first two terms and ``idle[k-j]`` of the rest.
    """

    pulled: np.ndarray
    idle: np.ndarray

    @classmethod
    def build(cls, P: np.ndarray, N: int, A: int) -> "_StageKernel":
        return cls(pulled=_sum_pmfs(A, P[1, 0, 0], P[1, 1, 0]), idle=_sum_pmfs(N - A, P[0, 0, 0], P[0, 1, 0]))

    def idle_expectation(self, V: np.ndarray) -> np.ndarray:
        """``W[m, a] = E V(a + idle_m)`` for ``m`` idle arms in state 1."""
        return np.stack([np.correlate(V, row, mode="valid") for row in self.idle])


def _feasible_pulls(k: int, N: int, A: int) -> range:
    return range(max(0, k - (N - A)), min(k, A) + 1)


def _stage_reward(r: np.ndarray, N: int, A: int, k: np.ndarray, j: np.ndarray) -> np.ndarray:
    return (r[0, 1] * j + r[0, 0] * (k - j) + r[1, 1] * (A - j) + r[1, 0] * (N - k - A + j)) / N


def _check_dp(instance: RmabInstance, N: int):
    if instance.S != 2:
        raise ValueError("exact DP is implemented for two-state arms only")
    if N > DP_MAX_N or instance.H > DP_MAX_H:
        raise ValueError(f"exact DP limited to N <= {DP_MAX_N} and H <= {DP_MAX_H}")
    return budget_count(instance.alpha, N)


@dataclass
class DpTable:
    """Optimal values ``values[h-1][k]`` and pull counts in state 1 ``actions[h-1][k]``."""

    N: int
    values: list[np.ndarray]
    actions: list[np.ndarray]
    k0: int
    value: float = field(init=False)

    def __post_init__(self):
        self.value = float(self.values[0][self.k0])

    def to_dict(self) -> dict:
        return {"N": self.N, "value": self.value, "k0": self.k0,
                "values": [v.tolist() for v in self.values], "actions": [a.tolist() for a in self.actions]}


def dp_optimal(instance: RmabInstance, N: int) -> DpTable:
    """Exact optimal per-arm value on ``N`` two-state arms by backward induction over the state-1 count."""
    A = _check_dp(instance, N)
    H = instance.H
    k0 = int(integer_state(instance.x_ini, N)[0])
    values: list[np.ndarray] = [None] * H
    actions: list[np.ndarray] = [None] * H
    nxt = None
    for h in range(H, 0, -1):
        r = instance.reward(h)
        if nxt is not None:
            ker = _StageKernel.build(instance.kernel(h), N, A)
            M = ker.idle_expectation(nxt) @ ker.pulled.T   # M[m, j]
        V = np.full(N + 1, -np.inf)
        act = np.zeros(N + 1, dtype=np.int64)
        for k in range(N + 1):
            js = np.arange(_feasible_pulls(k, N, A).start, _feasible_pulls(k, N, A).stop)
            q = _stage_reward(r, N, A, k, js)
            if nxt is not None:
                q = q + M[k - js, js]
            best = int(np.argmax(q))
            V[k], act[k] = q[best], js[best]
        values[h - 1], actions[h - 1] = V, act
        nxt = V
    return DpTable(N, values, actions, k0)


def dp_evaluate(policy: Policy, instance: RmabInstance, N: int) -> float:
    """Exact per-arm value of a deterministic ``policy`` on ``N`` two-state arms."""
    A = _check_dp(instance, N)
    if not policy.deterministic:
        raise ValueError("exact evaluation needs a deterministic policy")
    H = instance.H
    k0 = int(integer_state(instance.x_ini, N)[0])
    nxt = None
    for h in range(H, 0, -1):
        ks = np.array([k0]) if h == 1 else np.arange(N + 1)
        js = np.array([policy.decide(np.array([k, N - k]), h, N)[0, 1] for k in ks])
        V = np.full(N + 1, np.nan)
        V[ks] = _stage_reward(instance.reward(h), N, A, ks, js)
        if nxt is not None:
            ker = _StageKernel.build(instance.kernel(h), N, A)
            W = ker.idle_expectation(nxt)
            V[ks] += np.einsum("ia,ia->i", ker.pulled[js], W[ks - js])
        nxt = V
    return float(nxt[k0])
