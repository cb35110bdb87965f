import numpy as np
import pytest

from hazegan.optim import AdamState, NonFiniteGradientError, adam_step


def _run(g_seq, theta=0.0, **kw):
    p = [np.array([theta])]
    st = AdamState(**kw)
    deltas = []
    for g in g_seq:
        before = p[0].copy()
        adam_step(p, [np.array([g])], st)
        deltas.append(float(p[0][0] - before[0]))
    return p[0], st, deltas


def test_first_step_is_minus_lr():
    _, st, (d,) = _run([1.0])
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert d == pytest.approx(-2e-4 / (1 + 1e-8), rel=1e-12)
    assert st.t == 1


def test_zero_gradient_never_moves():
    p, _, deltas = _run([0.0] * 50, theta=1.5)
    assert p[0] == 1.5 and all(d == 0 for d in deltas)


def test_constant_gradient_step_tends_to_lr():
    _, _, deltas = _run([0.3] * 3000)
    assert abs(abs(deltas[-1]) - 2e-4) < 1e-8


def test_scale_consistency():
    _, _, d1 = _run([0.5, -0.2, 0.7])
    _, _, d10 = _run([5.0, -2.0, 7.0])
    assert np.all(np.sign(d1) == np.sign(d10))
    np.testing.assert_allclose(d1, d10, rtol=1e-6)


def test_state_invariants():
    rng = np.random.default_rng(0)
    params = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    st = AdamState()
    for t in range(1, 6):
        adam_step(params, [rng.normal(size=(3, 2)), rng.normal(size=4)], st)
        assert st.t == t
        assert all(np.all(v >= 0) for v in st.v)
        assert [m.shape for m in st.m] == [p.shape for p in params]


def test_non_finite_gradient_aborts_whole_step():
    params = [np.zeros(3), np.zeros(5)]
    st = AdamState()
    bad = np.zeros(5)
    bad[2:4] = np.nan
    with pytest.raises(NonFiniteGradientError) as err:
        adam_step(params, [np.ones(3), bad], st, names=["a", "b"])
    msg = str(err.value)
    assert "b" in msg and "[2..3]" in msg
    assert st.t == 0 and np.all(params[0] == 0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(3)], [np.zeros(4)], AdamState())


def test_none_gradient_leaves_param():
    params = [np.ones(2), np.ones(2)]
    adam_step(params, [None, np.ones(2)], AdamState())
    assert np.all(params[0] == 1) and np.all(params[1] < 1)
