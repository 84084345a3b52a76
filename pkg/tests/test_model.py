import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmab_sp import model
from rmab_sp.model import InstanceError


def test_two_state_kernel_entry():
    inst = model.builtin("two-state")
    assert inst.kernel(1)[0, 0, 0] == pytest.approx(0.9)
    assert inst.kernel(1)[1, 0, 0] == pytest.approx(0.2)
    assert (inst.S, inst.H, inst.alpha) == (2, 2, 0.5)


def test_maintenance_reward_offset_and_rows():
    inst = model.builtin("maintenance")
    assert inst.reward_offset > 0
    assert inst.rewards[0, 1, 0] - inst.reward_offset == pytest.approx(-5.4707)
    assert np.allclose(inst.kernels.sum(axis=-1), 1.0, atol=1e-12)
    assert inst.meta["max_row_correction"] <= 1e-3


def test_drift_two_state_hand_value():
    inst = model.builtin("two-state")
    y = np.array([[0.0, 0.5], [0.5, 0.0]])
    assert model.drift(inst, 1, y)[0] == pytest.approx(0.2 * 0.5 + 0.25 * 0.5)


def test_drift_identity_and_matrix_product():
    S = 3
    eye = np.broadcast_to(np.eye(S), (1, 2, S, S)).copy()
    inst = model.RmabInstance(alpha=0.4, kernels=eye, rewards=np.ones((2, S, 2)), x_ini=np.ones(S) / S)
    x = np.array([0.2, 0.3, 0.5])
    y = np.stack([x - [0.1, 0.3, 0.0], [0.1, 0.3, 0.0]], axis=1)
    assert np.allclose(model.drift(inst, 1, y), x)

    rnd = model.random_instance(3, 3, 2)
    y = np.full((3, 2), 1 / 6)
    expect = np.zeros(3)
    for s, a, t in itertools.product(range(3), range(2), range(3)):
        expect[t] += y[s, a] * rnd.kernels[0, a, s, t]
    assert np.allclose(model.drift(rnd, 1, y), expect, atol=1e-15)


def test_two_state_gamma():
    inst = model.builtin("two-state")
    beta = 0.3 / 1.15
    y = np.array([[[0.5 - beta, beta], [beta, 0.5 - beta]], [[0.0, 0.5], [0.5, 0.0]]])
    gamma = model.covariances(inst, y).gamma[0]
    assert gamma[0, 0] == pytest.approx(0.1624, abs=1e-4)
    assert np.allclose(gamma.sum(axis=1), 0, atol=1e-12)


def test_deterministic_kernel_has_zero_covariance():
    S = 3
    perm = np.eye(S)[[1, 2, 0]]
    kernels = np.stack([np.eye(S), perm])[None]
    inst = model.RmabInstance(alpha=0.5, kernels=kernels, rewards=np.ones((2, S, 2)), x_ini=np.ones(S) / S)
    y = np.full((2, S, 2), 1 / 6)
    assert np.abs(model.covariances(inst, y).gamma).max() == 0.0


def test_gamma_matches_simulated_covariance():
    inst = model.random_instance(11, 3, 2)
    y = np.array([[0.2, 0.1], [0.15, 0.25], [0.25, 0.05]])
    yy = np.stack([y, y])
    gamma = model.covariances(inst, yy).gamma[0]
    rng = model.rng_stream(5)
    # one arm per unit of y mass: with n arms the covariance of counts/n is gamma/n
    n = 1000
    counts = np.rint(y * n).astype(int)
    draws = np.array([model.sample_counts(inst.kernel(1), counts, rng) for _ in range(20000)]) / n
    emp = np.cov(draws.T) * n
    # standard error of a sample covariance entry is about sqrt(var_i var_j / R)
    se = np.sqrt(np.outer(np.diag(gamma), np.diag(gamma)) / draws.shape[0]) + 1e-12
    assert np.all(np.abs(emp - gamma) <= 3 * se + 2e-4)
    assert np.abs(draws.mean(axis=0) - model.drift(inst, 1, y)).max() <= 4 * np.sqrt(gamma.diagonal().max() / n / 20000)


def test_gamma_psd_rows_sum_zero():
    for seed in range(20):
        inst = model.random_instance(seed, 4, 3, sparsity="half")
        y = np.random.default_rng(seed).dirichlet(np.ones(8), size=3).reshape(3, 4, 2)
        for g in model.covariances(inst, y).gamma:
            assert np.allclose(g, g.T)
            assert np.abs(g.sum(axis=1)).max() < 1e-10
            assert np.linalg.eigvalsh(g).min() >= -1e-9


def _grid_projection(v, step):
    best, arg = np.inf, None
    if v.size == 2:
        for a in np.arange(0, 1 + step / 2, step):
            p = np.array([a, 1 - a])
            d = np.sum((p - v) ** 2)
            if d < best:
                best, arg = d, p
    else:
        for a in np.arange(0, 1 + step / 2, step):
            for b in np.arange(0, 1 - a + step / 2, step):
                p = np.array([a, b, max(1 - a - b, 0.0)])
                d = np.sum((p - v) ** 2)
                if d < best:
                    best, arg = d, p
    return arg


def test_projection_against_grid():
    assert np.allclose(model.project_simplex([1.2, 0.2]), _grid_projection(np.array([1.2, 0.2]), 1e-4), atol=1e-4)
    v = np.array([-0.1, 0.55, 0.55])
    assert np.allclose(model.project_simplex(v), _grid_projection(v, 2e-3), atol=2e-3)
    assert np.allclose(model.project_simplex([0.3, 0.7]), [0.3, 0.7])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=8), st.lists(st.floats(-3, 3), min_size=8, max_size=8))
def test_projection_properties(u, w):
    u = np.array(u)
    v = np.array(w[: u.size])
    pu, pv = model.project_simplex(u), model.project_simplex(v)
    assert pu.min() >= 0 and abs(pu.sum() - 1) < 1e-9
    assert np.allclose(model.project_simplex(pu), pu, atol=1e-12)
    assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + 1e-12


def test_random_instance_construction():
    a = model.random_instance(7, 5, 5, 0.4, "dense")
    b = model.random_instance(7, 5, 5, 0.4, "dense")
    assert np.array_equal(a.kernels, b.kernels) and np.array_equal(a.rewards, b.rewards)
    assert np.all(a.kernels > 0) and np.allclose(a.kernels.sum(-1), 1)
    half = model.random_instance(7, 5, 5, 0.4, "half")
    assert np.all((half.kernels == 0).sum(axis=-1) == 2)
    with pytest.raises(InstanceError):
        model.random_instance(7, 1, 3, 0.4, "half")


def test_from_dict_round_trip_and_validation(tmp_path):
    inst = model.builtin("two-state")
    doc = inst.to_dict()
    again = model.from_dict(doc)
    assert np.array_equal(again.kernels, inst.kernels)
    # a trailing kernel pair for stage H is accepted and dropped
    doc2 = dict(doc, kernels=doc["kernels"] + doc["kernels"])
    assert model.from_dict(doc2).kernels.shape == inst.kernels.shape
    neg = dict(doc, rewards=(np.array(doc["rewards"]) - 3).tolist())
    shifted = model.from_dict(neg)
    assert shifted.reward_offset == pytest.approx(3.0) and shifted.rewards.min() == 0
    bad = dict(doc, kernels=[[[0.5, 0.4], [0.5, 0.5]]] * 2)
    with pytest.raises(InstanceError):
        model.from_dict(bad)
    path = tmp_path / "inst.json"
    path.write_text(json.dumps(doc))
    assert model.load_instance(path).name == "two-state"
    path.write_text("{broken")
    with pytest.raises(InstanceError):
        model.load_instance(path)


def test_integer_state_largest_remainder():
    assert model.integer_state([0.5, 0.5], 10).tolist() == [5, 5]
    assert model.integer_state([1 / 3, 1 / 3, 1 / 3], 10).sum() == 10
    assert model.integer_state([0.26, 0.74], 10).tolist() == [3, 7]


def test_sample_transition_deterministic_kernel():
    S = 2
    kernels = np.stack([np.eye(S), np.eye(S)[::-1]])[None]
    inst = model.RmabInstance(alpha=0.5, kernels=kernels, rewards=np.ones((2, S, 2)), x_ini=np.ones(S) / S)
    y = np.array([[0.3, 0.2], [0.2, 0.3]])
    out = model.sample_transition(inst, 1, y, 10, model.rng_stream(0))
    assert np.allclose(out, model.drift(inst, 1, y))


def test_sample_transition_unbiased_two_state():
    inst = model.builtin("two-state")
    beta = 0.3 / 1.15
    N = 10**6
    y = np.array([[0.5 - beta, beta], [beta, 0.5 - beta]])
    n = np.rint(y * N).astype(int)
    rng = model.rng_stream(1)
    draws = np.array([model.sample_counts(inst.kernel(1), n, rng)[0] / N for _ in range(200)])
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - 0.5) <= 3 * se + 1e-6


def test_arm_step_has_the_multinomial_law():
    inst = model.random_instance(4, 3, 2)
    cum = model.cumulative_kernel(inst.kernel(1))
    counts = np.array([[3, 2], [1, 4], [5, 5]])
    states = np.repeat(np.arange(3), counts.sum(axis=1))
    rng = model.rng_stream(9)
    R = 20000
    draws = np.array([np.bincount(model.arm_step(cum, states, counts, rng.random(states.size)), minlength=3)
                      for _ in range(R)])
    mean = model.drift(inst, 1, counts)
    gamma = np.einsum("sa,saij->ij", counts, model.stage_covariances(inst, 1))
    assert np.all(np.abs(draws.mean(axis=0) - mean) <= 4 * np.sqrt(np.diag(gamma) / R))
    assert np.allclose(np.cov(draws.T), gamma, atol=0.15)


def test_rng_streams_are_reproducible_and_distinct():
    a = model.rng_stream(3, 1).random(4)
    assert np.array_equal(a, model.rng_stream(3, 1).random(4))
    assert not np.array_equal(a, model.rng_stream(3, 2).random(4))


def test_eval_report_interval():
    rep = model.EvalReport.from_samples([1.0, 2.0, 3.0, 4.0], N=10, seed=0)
    assert rep.mean == 2.5
    assert rep.ci == pytest.approx(1.96 * np.std([1, 2, 3, 4], ddof=1) / 2)
