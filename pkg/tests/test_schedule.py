import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pld.schedule import (DropSchedule, GateVector, block_flops, block_flops_fraction, expected_depth,
                          expected_depth_mean, flops_per_step, gamma_default, layer_keep_probs,
                          polynomial_reference, sample_gates, schedule_table, steady_state_depth,
                          theta_bar)
from pld.transformer import ModelConfig


def sched(theta=0.5, T=1000, L=12, gamma=None):
    return DropSchedule.from_steps(theta, T, L, gamma)


def test_gamma_default():
    assert gamma_default(200_000) == pytest.approx(5e-4, rel=1e-15)
    assert gamma_default(100) == 1.0
    for bad in (0, -5):
        with pytest.raises(ValueError):
            gamma_default(bad)


def test_theta_bar_examples():
    for q in (0.3, 0.5, 0.9, 1.0):
        assert theta_bar(0, sched(q)) == 1.0
    s = sched(0.5, T=1000)
    assert abs(theta_bar(1000, s) - 0.5) < 1e-5
    s9 = sched(0.9, T=1000)
    assert theta_bar(500, s9) == pytest.approx(0.9 + 0.1 * math.exp(-50), rel=1e-15)
    assert theta_bar(math.inf, s) == 0.5


def test_theta_bar_vectorized_matches_scalar():
    s = sched(0.7, T=300)
    t = np.arange(0, 400, 7)
    np.testing.assert_array_equal(theta_bar(t, s), [theta_bar(int(v), s) for v in t])


def test_theta_bar_rejects_negative_step():
    with pytest.raises(ValueError):
        theta_bar(-1, sched())


def test_schedule_validation(caplog):
    with pytest.raises(ValueError):
        DropSchedule(0.0, 0.1, 10, 4)
    with pytest.raises(ValueError):
        DropSchedule(0.5, 0.0, 10, 4)
    with pytest.raises(ValueError):
        DropSchedule(0.5, 0.1, 10, 0)
    with caplog.at_level(logging.WARNING):
        DropSchedule(0.3, 0.1, 10, 4)
    assert "recommended" in caplog.text


def test_layer_keep_probs_examples():
    np.testing.assert_array_equal(layer_keep_probs(0, sched(L=7)), np.ones(7))
    np.testing.assert_allclose(layer_keep_probs(math.inf, sched(L=4)), [1.0, 0.875, 0.75, 0.625], rtol=1e-15)
    p12 = layer_keep_probs(math.inf, sched(L=12))
    assert p12[-1] == pytest.approx(1 - 11 / 24, rel=1e-14)
    assert p12[0] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 1.0), st.integers(1, 30), st.integers(0, 5000), st.integers(0, 5000))
def test_keep_probs_monotone_in_depth_and_time(q, L, t1, t2):
    s = DropSchedule.from_steps(q, 1000, L)
    a, b = sorted((t1, t2))
    pa, pb = layer_keep_probs(a, s), layer_keep_probs(b, s)
    assert pa[0] == pb[0] == 1.0
    assert np.all(np.diff(pa) <= 0) and np.all(pb <= pa + 1e-15)
    assert np.all(pb > 0)
    assert theta_bar(b, s) <= theta_bar(a, s)


def test_sample_gates_determinism_and_t0():
    s = sched(L=12)
    assert sample_gates(0, s, 3).gates.tolist() == [1] * 12
    a, b = sample_gates(777, s, 3), sample_gates(777, s, 3)
    assert np.array_equal(a.gates, b.gates) and np.array_equal(a.probs, b.probs)
    assert a.step == 777
    assert a.kept == int(a.gates.sum())


def test_sample_gates_order_independent():
    s = sched(L=12)
    forward = [sample_gates(t, s, 5).gates for t in range(50, 60)]
    backward = [sample_gates(t, s, 5).gates for t in reversed(range(50, 60))][::-1]
    assert all(np.array_equal(x, y) for x, y in zip(forward, backward))


def test_sample_gates_prefix_property():
    # layer l's outcome does not depend on how many layers the schedule has
    u12 = sample_gates(400, sched(L=12, theta=1.0), 2)
    assert u12.gates.all()
    from pld import rng
    u = rng.uniforms(2, rng.GATES, 400, 12)
    np.testing.assert_array_equal(u[:6], rng.uniforms(2, rng.GATES, 400, 6))


def test_keep_frequency_monte_carlo():
    s = sched(L=12)
    t = 10_000
    n = 50_000
    gates = np.array([sample_gates(t, s, seed).gates for seed in range(n)])
    p = layer_keep_probs(t, s)
    freq = gates.mean(0)
    sigma = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) <= 3 * sigma + 1e-12)


def test_per_sublayer_gates_shape():
    g = sample_gates(900, sched(L=5), 1, per_sublayer=True)
    assert g.gates.shape == (5, 2)
    assert g.kept == int(g.gates.any(axis=1).sum())


def test_gate_vector_helpers():
    assert GateVector.all_on(3).kept == 3
    assert GateVector.all_off(3).kept == 0
    with pytest.raises(ValueError):
        GateVector([1, 1], [1.0])


def test_expected_depth():
    assert expected_depth(sched(L=12), 0) == 12.0
    assert steady_state_depth(sched(L=12)) == pytest.approx(9.25, rel=1e-14)
    for L in (1, 4, 12, 24):
        assert steady_state_depth(sched(L=L)) == pytest.approx((3 * L + 1) / 4, rel=1e-14)


def test_expected_depth_mean_matches_loop():
    s = sched(0.6, T=200, L=8)
    direct = np.mean([expected_depth(s, t) for t in range(201)])
    assert expected_depth_mean(s) == pytest.approx(direct, rel=1e-13)


def test_flops_accounting():
    cfg = ModelConfig(L=12, d=64, H=4, V=99, S=64)
    s = sched(L=12)
    assert flops_per_step(s, cfg, 0) == 1.0
    assert block_flops_fraction(s, 0) == 1.0
    ss = flops_per_step(s, cfg, math.inf, include_head=False)
    assert ss == pytest.approx(9.25 / 12, rel=1e-14)
    # with the head included the saving is diluted
    assert ss < flops_per_step(s, cfg, math.inf) < 1.0
    vals = [flops_per_step(s, cfg, t) for t in range(0, 1001, 10)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_block_flop_model_by_hand():
    cfg = ModelConfig(L=1, d=8, H=2, V=11, S=4)
    per_token = 6 * 64 + 2 * 4 * 8 * 2 + 2 * 64 + 2 * 8 * 32 * 2
    assert block_flops(cfg) == 3 * 4 * per_token


def test_polynomial_reference():
    s = sched(0.5, T=100)
    assert polynomial_reference(0, s, 2) == 1.0
    assert polynomial_reference(50, s, 1) == 0.5
    assert polynomial_reference(100, s, 3) == 0.5


def test_schedule_table_layout():
    s = sched(0.5, T=1000, L=12)
    header, rows = schedule_table(s, steps=[0, 500, 1000], reference_degrees=[2])
    assert header[:3] == ["step", "theta", "p_1"]
    assert header[-3:] == ["expected_depth", "flops_fraction", "poly_2"]
    assert rows[0][1] == 1.0 and rows[0][header.index("flops_fraction")] == 1.0
    assert all(type(v) in (int, float) for r in rows for v in r)
