import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fednilm.errors import ConfigError, DimensionError, SpecHashMismatch
from fednilm.model import ParameterVector
from fednilm.optim import (
    ADAM,
    SGD,
    OptimizerHyper,
    OptimizerState,
    adam_step,
    decode_state,
    encode_state,
    lr_schedule,
    sgd_step,
    step,
)

H = 99


def pv(xs, dtype=np.float64, h=H):
    return ParameterVector(np.asarray(xs, dtype=dtype), h)


def scalar_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar-loop Adam, one parameter at a time."""
    theta = list(theta)
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, start=1):
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            theta[i] -= lr * mh / (math.sqrt(vh) + eps)
    return theta


def test_sgd_examples():
    assert sgd_step(pv([1.0]), pv([2.0]), 0.5).values[0] == 0.0
    p = pv([1.5, -2.0])
    assert sgd_step(p, pv([0.0, 0.0]), 0.1).values.tobytes() == p.values.tobytes()


def test_sgd_two_steps_linear():
    p, g1, g2 = pv([1.0, 2.0]), pv([0.25, -0.5]), pv([0.5, 0.125])
    out = sgd_step(sgd_step(p, g1, 0.5), g2, 0.5)
    assert np.allclose(out.values, p.values - 0.5 * (g1.values + g2.values), rtol=0, atol=1e-15)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16), st.floats(1e-6, 1.0))
def test_sgd_exact_update(xs, lr):
    p = pv(xs, np.float32)
    g = pv(np.asarray(xs)[::-1], np.float32)
    out = sgd_step(p, g, lr)
    expect = p.values - np.float32(lr) * g.values
    assert np.array_equal(out.values, expect)


def test_sgd_errors():
    with pytest.raises(DimensionError):
        sgd_step(pv([1.0]), pv([1.0, 2.0]), 0.1)
    with pytest.raises(SpecHashMismatch):
        sgd_step(pv([1.0]), pv([1.0], h=1), 0.1)
    with pytest.raises(ConfigError):
        sgd_step(pv([1.0]), pv([1.0]), -0.1)


def test_adam_zero_grad_fresh_state():
    st0 = OptimizerState.fresh(ADAM, OptimizerHyper(), 3, np.float64)
    p = pv([0.5, -1.0, 2.0])
    st1, out = adam_step(st0, p, pv([0, 0, 0]), 1e-3)
    assert out.values.tobytes() == p.values.tobytes()
    assert st1.step_count == 1


def test_adam_first_step_closed_form():
    st0 = OptimizerState.fresh(ADAM, OptimizerHyper(), 1, np.float64)
    _, out = adam_step(st0, pv([0.0]), pv([1.0]), 1e-3)
    assert out.values[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_matches_scalar_loop():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(6)]
    state = OptimizerState.fresh(ADAM, OptimizerHyper(), 5, np.float64)
    p = pv(theta)
    for g in grads:
        state, p = adam_step(state, p, pv(g), 1e-3)
    ref = scalar_adam(theta, grads, 1e-3)
    assert np.max(np.abs(p.values - ref)) <= 1e-12
    assert state.step_count == 6


@given(st.floats(-1e6, 1e6).filter(lambda g: abs(g) > 1e-6))
def test_adam_step_one_sign_and_magnitude(g):
    state = OptimizerState.fresh(ADAM, OptimizerHyper(), 1, np.float64)
    _, out = adam_step(state, pv([0.0]), pv([g]), 1e-3)
    delta = out.values[0]
    assert np.sign(delta) == -np.sign(g)
    assert abs(delta) <= 1e-3 * (1 + 1e-9)


def test_adam_kind_and_count_errors():
    with pytest.raises(ConfigError):
        adam_step(OptimizerState.fresh(SGD, OptimizerHyper(), 1), pv([0.0]), pv([1.0]))
    with pytest.raises(DimensionError):
        adam_step(OptimizerState.fresh(ADAM, OptimizerHyper(), 2), pv([0.0]), pv([1.0]))


def test_lr_schedule():
    h = OptimizerHyper(lr0=1e-3, decay_gamma=0.98)
    assert lr_schedule(0, h) == 1e-3
    assert lr_schedule(1, h) == pytest.approx(9.8e-4, rel=1e-12)
    lrs = [lr_schedule(r, h) for r in range(201)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert all(x > 0 for x in lrs)
    assert lr_schedule(50, OptimizerHyper(decay_gamma=1.0)) == 1e-3


def test_hyper_validation():
    for bad in ({"beta1": 1.0}, {"beta2": 0.0}, {"eps_stab": 0.0}, {"decay_gamma": 0.0}, {"decay_gamma": 1.5}):
        with pytest.raises(ConfigError):
            OptimizerHyper(**bad)


def test_step_dispatch_counts():
    s = OptimizerState.fresh(SGD, OptimizerHyper(), 1)
    s, p = step(s, pv([1.0]), pv([1.0]), 0.5)
    assert s.step_count == 1 and p.values[0] == 0.5


def test_state_round_trip_reproduces_updates():
    rng = np.random.default_rng(1)
    n = 7
    p = pv(rng.normal(size=n), np.float32)
    state = OptimizerState.fresh(ADAM, OptimizerHyper(lr0=0.01), n, np.float32)
    for _ in range(3):
        state, p = adam_step(state, p, pv(rng.normal(size=n), np.float32))
    restored = decode_state(encode_state(state))
    assert restored.step_count == state.step_count and restored.hyper == state.hyper
    g = pv(rng.normal(size=n), np.float32)
    a = adam_step(state, p, g)[1]
    b = adam_step(restored, p, g)[1]
    assert a.values.tobytes() == b.values.tobytes()


def test_sgd_state_round_trip_and_reset():
    s = OptimizerState(SGD, OptimizerHyper(), 4)
    assert decode_state(encode_state(s)) == s
    a = OptimizerState.fresh(ADAM, OptimizerHyper(), 3)
    a, _ = adam_step(a, pv([0, 0, 0], np.float32), pv([1, 1, 1], np.float32))
    r = a.reset()
    assert r.step_count == 0 and not r.m.any() and not r.v.any()
