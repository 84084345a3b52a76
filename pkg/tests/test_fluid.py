import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmab_sp import fluid, lp, model
from rmab_sp.fluid import map_action


@pytest.fixture(scope="module")
def two_state():
    inst = model.builtin("two-state")
    return inst, fluid.solve_fluid(inst)


def test_two_state_solution(two_state):
    inst, sol = two_state
    beta = 0.3 / 1.15
    assert sol.y_star[0, 0, 1] == pytest.approx(beta, abs=1e-12)
    assert sol.value == pytest.approx(beta + 0.5, abs=1e-12)
    assert sol.degenerate and sol.unique == "unique"
    assert sol.sigma == pytest.approx(3 / 23)
    prog, index = fluid.build_fluid_lp(inst)
    assert prog.shape[1] == 2 * 2 * 2 + 2


def test_fluid_trajectory_invariants():
    for name in ("two-state", "maintenance"):
        inst = model.builtin(name)
        sol = fluid.solve_fluid(inst, method="auto")
        assert np.allclose(sol.x_star[0], inst.x_ini)
        for h in range(1, inst.H):
            assert np.allclose(sol.x_star[h], model.drift(inst, h, sol.y_star[h - 1]), atol=1e-9)
        assert np.allclose(sol.y_star[..., 1].sum(axis=1), inst.alpha, atol=1e-9)
        assert sum(np.sum(inst.reward(h) * sol.y_star[h - 1]) for h in range(1, inst.H + 1)) == \
            pytest.approx(sol.value, abs=1e-8)


def test_maintenance_flags():
    sol = fluid.solve_fluid(model.builtin("maintenance"), method="auto")
    assert sol.degenerate and sol.unique == "unique"
    assert fluid.solve_fluid(model.builtin("maintenance-uniform"), method="auto").unique == "non-unique"


def test_single_stage_is_greedy():
    rewards = np.array([[[0.0, 3.0], [0.0, 1.0], [0.5, 2.0]]])
    inst = model.RmabInstance(alpha=0.4, kernels=np.zeros((0, 2, 3, 3)), rewards=rewards,
                              x_ini=np.array([0.3, 0.3, 0.4]))
    sol = fluid.solve_fluid(inst)
    # pull advantage: state 0 (3), state 2 (1.5), state 1 (1)
    assert np.allclose(sol.y_star[0, :, 1], [0.3, 0.0, 0.1])
    assert sol.value == pytest.approx(0.3 * 3 + 0.3 * 0 + 0.1 * 2 + 0.3 * 0.5)


def test_identity_kernel_strict_rewards_non_degenerate():
    S, H = 3, 3
    kernels = np.broadcast_to(np.eye(S), (H - 1, 2, S, S)).copy()
    rewards = np.broadcast_to(np.array([[0.0, 3.0], [0.0, 2.0], [0.0, 1.0]]), (H, S, 2)).copy()
    inst = model.RmabInstance(alpha=0.5, kernels=kernels, rewards=rewards, x_ini=np.array([0.2, 0.5, 0.3]))
    sol = fluid.solve_fluid(inst)
    assert not sol.degenerate
    assert sol.unique == "unique"
    assert len(lp.enumerate_vertices(sol.lp)) > 1


def test_degeneracy_flag():
    split = np.tile(np.array([[0.25, 0.25], [0.5, 0.0]]), (3, 1, 1))
    assert not fluid.is_degenerate(split)


@pytest.mark.parametrize("scale", [0.5, 3.0, 17.0])
def test_degeneracy_invariant_under_reward_scaling(scale):
    for seed in range(5):
        inst = model.random_instance(seed, 4, 3, sparsity="half")
        scaled = model.RmabInstance(alpha=inst.alpha, kernels=inst.kernels, rewards=inst.rewards * scale,
                                    x_ini=inst.x_ini)
        assert fluid.solve_fluid(inst).degenerate == fluid.solve_fluid(scaled).degenerate


def test_stage_values_principle_of_optimality():
    inst = model.builtin("maintenance")
    sol = fluid.solve_fluid(inst, method="auto")
    assert fluid.v_lp(inst, inst.x_ini, 1) == pytest.approx(sol.value, abs=1e-6)
    for h in range(1, inst.H):
        lhs = fluid.v_lp(inst, sol.x_star[h - 1], h)
        rhs = np.sum(inst.reward(h) * sol.y_star[h - 1]) + fluid.v_lp(inst, sol.x_star[h], h + 1)
        assert lhs == pytest.approx(rhs, abs=1e-7)


def test_q_lp_two_state(two_state):
    inst, sol = two_state
    assert fluid.q_lp(inst, inst.x_ini, sol.y_star[0], 1) == pytest.approx(sol.value)
    assert fluid.q_lp(inst, sol.x_star[1], sol.y_star[1], 2) == pytest.approx(np.sum(inst.reward(2) * sol.y_star[1]))
    # no state-1 pulls at stage 1: state-1 mass becomes 0.5*0.9 + 0.5*0.7 = 0.8, stage 2 pulls min(0.5, 0.8)
    y = np.array([[0.5, 0.0], [0.0, 0.5]])
    assert fluid.q_lp(inst, inst.x_ini, y, 1) == pytest.approx(0.5)
    # pinned-variable oracle: the same program with the stage-1 columns fixed
    prog, index = fluid.build_fluid_lp(inst)
    lo, up = np.zeros(prog.shape[1]), np.full(prog.shape[1], np.inf)
    lo[index.y_col[0].ravel()] = up[index.y_col[0].ravel()] = y.ravel()
    pinned = lp.StandardLp(prog.A, prog.b, prog.r, lo, up)
    assert lp.solve(pinned, method="highs").value == pytest.approx(0.5)


def test_resolver_matches_fresh_solve():
    inst = model.builtin("maintenance")
    res = fluid.FluidResolver(inst)
    rng = np.random.default_rng(0)
    for h in (1, 3, 5):
        x = rng.dirichlet(np.ones(inst.S))
        y, v = res.solve(x, h)
        assert v == pytest.approx(fluid.v_lp(inst, x, h), abs=1e-7)
        assert np.allclose(y.sum(axis=1), x, atol=1e-8)


def test_policy_constants(two_state):
    inst, sol = two_state
    params = fluid.policy_constants(inst, sol)
    expect = max(2 + 6 * 2, 3 + 2 * 1.0 * 2 * 2 / (3 / 23))
    assert params.kappa == pytest.approx(expect)
    assert params.z[0] == 1.0
    assert params.z[1] == pytest.approx(math.sqrt(2) * (params.kappa * params.lipschitz[0] + 1))
    assert params.lipschitz[0] == pytest.approx(0.2 + 0.9 + 0.7 + 0.25)
    assert params.delta(400) == pytest.approx(2 * math.log(400) / 20)
    with pytest.raises(ValueError):
        fluid.policy_constants(inst, fluid.FluidSolution(sol.x_star, sol.y_star, sol.value, True, "unique",
                                                         None, sol.lp, sol.index))


def test_z_recursion_hand_value_and_monotone():
    inst = model.builtin("maintenance")
    sol = fluid.solve_fluid(inst, method="auto")
    params = fluid.policy_constants(inst, sol, kappa=14.0)
    assert np.all(np.diff(params.z) > 0)
    assert np.all(params.lipschitz <= 2 * inst.S)
    S, kappa, L = 2, 14.0, 1.0
    assert math.sqrt(S) * (kappa * L * 1 + 1) == pytest.approx(21.2132, abs=1e-4)


# ---------------------------------------------------------------- action mapping

def test_map_action_identity():
    x = np.array([0.3, 0.3, 0.4])
    y = np.array([[0.1, 0.2], [0.3, 0.0], [0.2, 0.2]])
    assert np.allclose(map_action(x, x, y, y, 0.01, 0.1), y)


def test_map_action_two_state_example(two_state):
    _, sol = two_state
    y_star = sol.y_star[0]
    x, xp = np.array([0.5, 0.5]), np.array([0.52, 0.48])
    rs = 0.02
    out = map_action(x, xp, y_star, y_star, rs, 14 * rs)
    assert out[:, 1].sum() == pytest.approx(0.5, abs=1e-15)
    assert np.allclose(out.sum(axis=1), xp)
    assert np.abs(out - y_star).max() <= 3 * 0.02 + 1e-15


def _fuzz_pool():
    pool = []
    for i in range(30):
        S = 2 + i % 4
        sol = fluid.solve_fluid(model.random_instance(100 + i, S, 3), method="auto", check_unique=False)
        pool.extend((sol.x_star[h], sol.y_star[h]) for h in range(3))
    return pool


POOL = _fuzz_pool()


def _perturb(rng, base, radius, live):
    for _ in range(100):
        e = rng.uniform(-radius, radius, base.size)
        e[~live] = np.abs(e[~live])
        e[live] -= e.sum() / live.sum()
        if np.abs(e).max() <= radius and np.all(base + e >= 0):
            return base + e
    return None


def _case(seed):
    """A precondition-satisfying (x, x', y, y*, radii) tuple, or None."""
    rng = np.random.default_rng(seed)
    x_star, y_star = POOL[rng.integers(len(POOL))]
    S = x_star.size
    kappa = 2 + 6 * S
    smallest = np.concatenate([x_star[x_star > 1e-9], y_star[y_star > 1e-9]]).min()
    rs = rng.uniform(0.01, 1) * smallest / (4 * kappa * S)
    ra = kappa * rs
    live = x_star > 1e-9
    x, xp = _perturb(rng, x_star, rs, live), _perturb(rng, x_star, rs, live)
    if x is None or xp is None:
        return None
    pulled = y_star[:, 1] > 1e-9
    for _ in range(100):
        e = rng.uniform(-(ra - rs), ra - rs, S) * rng.uniform()
        e[~pulled] = 0
        e[pulled] -= e.sum() / pulled.sum()
        y1 = y_star[:, 1] + e
        y = np.stack([x - y1, y1], axis=1)
        if y.min() >= 0 and np.abs(y - y_star).max() <= ra:
            return x, xp, y, y_star, rs, ra
    return None


@settings(max_examples=10_000, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_map_action_postconditions(seed):
    case = _case(seed)
    if case is None:
        return
    x, xp, y, y_star, rs, ra = case
    out = map_action(x, xp, y, y_star, rs, ra)
    S = x.size
    assert out.min() >= -1e-12
    assert np.abs(out.sum(axis=1) - xp).max() <= 1e-12
    assert abs(out[:, 1].sum() - y[:, 1].sum()) <= 1e-12
    assert np.abs(out - y).max() <= (S + 1) * np.abs(x - xp).max() + 1e-12
    assert np.abs(out - y_star).max() <= ra + 1e-12


def test_map_action_reports_missing_partner():
    # far outside the radius: the idle surplus in state 1 has nowhere to go
    y_star = np.array([[0.5, 0.5], [0.0, 0.0]])
    with pytest.raises(fluid.MappingError):
        map_action(np.array([1.0, 0.0]), np.array([0.3, 0.7]), y_star, y_star, 1e-3, 1e-2)
