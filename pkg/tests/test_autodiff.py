import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neural_spacetime import autodiff as ad
from neural_spacetime.autodiff import Param, Tape
from neural_spacetime.errors import ConstraintViolation, DoubleBackward, NonScalarLoss, ShapeMismatch


def grad_of(fn, *params):
    ad.zero_grads(params)
    tape = Tape()
    ad.backward(tape, fn(tape))
    return [p.grad.copy() for p in params]


def away_from(rng, shape, kinks=(0.0,), margin=1e-2, scale=2.0):
    x = rng.uniform(-scale, scale, size=shape)
    for _ in range(100):
        bad = np.zeros(shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(np.abs(x) - k) < margin
        if not bad.any():
            return x
        x[bad] = rng.uniform(-scale, scale, size=int(bad.sum()))
    raise RuntimeError("could not sample away from kinks")


def test_square_derivative():
    x = Param(np.array(3.0))
    assert grad_of(lambda t: ad.square(t.param(x)), x)[0] == 6.0


def test_exponent_derivative_matches_analytic():
    x = Param(np.array([0.5]))
    s = Param(np.array(2.0))
    l = Param(np.array(3.0))
    gx, gs, gl = grad_of(lambda t: ad.sum_(ad.piecewise_power(t.param(x), t.param(s), t.param(l))), x, s, l)
    assert gs == pytest.approx(0.5**2 * math.log(0.5), rel=1e-14)
    assert gl == 0.0
    assert gx[0] == pytest.approx(2 * 0.5, rel=1e-14)


def test_leaky_relu_value():
    t = Tape()
    assert float(ad.leaky_relu(t.constant(-1.0), 0.01).value) == -0.01


def test_sum_of_params_gives_ones():
    p = Param(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(grad_of(lambda t: ad.sum_(t.param(p)), p)[0], np.ones((2, 3)))


def test_backward_errors():
    p = Param(np.ones(3))
    tape = Tape()
    node = t_node = tape.param(p)
    with pytest.raises(NonScalarLoss):
        ad.backward(tape, t_node)
    loss = ad.sum_(node)
    ad.backward(tape, loss)
    with pytest.raises(DoubleBackward):
        ad.backward(tape, loss)
    tape.reset()
    ad.backward(tape, loss)


def test_zero_parameter_graph_is_noop():
    tape = Tape()
    ad.backward(tape, ad.sum_(tape.constant(np.ones(3))))


def test_shape_mismatch():
    tape = Tape()
    with pytest.raises(ShapeMismatch):
        ad.add(tape.constant(np.ones(3)), tape.constant(np.ones(4)))
    with pytest.raises(ShapeMismatch):
        ad.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))


def test_exponent_floor_enforced():
    tape = Tape()
    with pytest.raises(ConstraintViolation):
        ad.signed_power(tape.constant(np.ones(2)), 0.5)
    with pytest.raises(ConstraintViolation):
        ad.piecewise_power(tape.constant(np.ones(2)), 1.0, 0.9)
    ad.signed_power(tape.constant(np.ones(2)), 0.5, floor=0.0)


def test_kink_conventions():
    x = Param(np.array([0.0, 1.0, -1.0]))
    e = Param(np.array(2.0))
    gx, _ = grad_of(lambda t: ad.sum_(ad.signed_power(t.param(x), t.param(e))), x, e)
    assert gx[0] == 0.0
    # at |x| = 1 the large-scale branch is used: d/dx |x|^l = l
    l = Param(np.array(3.0))
    s = Param(np.array(2.0))
    gx, gs, gl = grad_of(lambda t: ad.sum_(ad.piecewise_power(t.param(x), t.param(s), t.param(l))), x, s, l)
    assert gx.tolist() == [0.0, 3.0, 3.0]
    assert gs == 0.0 and gl == 0.0  # log|x| = 0 at |x| = 1
    one = Param(np.array(1.0))
    gx, _ = grad_of(lambda t: ad.sum_(ad.signed_power(t.param(x), t.param(one))), x, one)
    assert gx.tolist() == [1.0, 1.0, 1.0]


def test_linear_model_gradient_check():
    rng = np.random.default_rng(0)
    w = Param(rng.normal(size=(3, 2)), name="w")
    x = rng.normal(size=(5, 3))
    rep = ad.gradient_check(lambda t: ad.sum_(ad.matmul(t.constant(x), t.param(w))), [w])
    assert rep.max_rel_error < 1e-10


def test_constant_closure_gradients_zero():
    p = Param(np.ones(3), name="p")
    rep = ad.gradient_check(lambda t: ad.sum_(t.constant(np.ones(2))), [p])
    assert np.all(rep.analytic["p"] == 0) and np.all(rep.numeric["p"] == 0)


def _op_cases(rng):
    a = away_from(rng, (3, 4), kinks=(0.0, 1.0))
    b = away_from(rng, (3, 4), kinks=(0.0, 1.0))
    m = rng.normal(size=(4, 2))
    pos = rng.uniform(0.2, 2.0, size=(3, 4))
    unit = rng.uniform(-0.9, 0.9, size=(3, 4))
    e1, e2 = rng.uniform(1.0, 3.0, size=2)
    return {
        "add": ([a, b], lambda t, x, y: ad.add(x, y)),
        "sub": ([a, b], lambda t, x, y: ad.sub(x, y)),
        "mul": ([a, b], lambda t, x, y: ad.mul(x, y)),
        "div": ([a, pos], lambda t, x, y: ad.div(x, y)),
        "broadcast": ([a, b[0]], lambda t, x, y: ad.mul(x, y)),
        "matmul": ([a, m], lambda t, x, y: ad.matmul(x, y)),
        "abs": ([a], lambda t, x: ad.abs_(x)),
        "square": ([a], lambda t, x: ad.square(x)),
        "exp": ([a], lambda t, x: ad.exp(x)),
        "log1p": ([pos], lambda t, x: ad.log1p(x)),
        "sqrt": ([pos], lambda t, x: ad.sqrt(x)),
        "arccos": ([unit], lambda t, x: ad.arccos(x)),
        "relu": ([a], lambda t, x: ad.relu(x)),
        "leaky_relu": ([a], lambda t, x: ad.leaky_relu(x, 0.01)),
        "sigmoid": ([a], lambda t, x: ad.sigmoid(x, 10.0)),
        "maximum": ([a, b], lambda t, x, y: ad.maximum(x, y)),
        "signed_power": ([a, np.array(e1)], lambda t, x, e: ad.signed_power(x, e)),
        "piecewise_power": ([a, np.array(e1), np.array(e2)], lambda t, x, s, l: ad.piecewise_power(x, s, l)),
        "mean": ([a], lambda t, x: ad.mean(x, axis=0)),
        "sum_keepdims": ([a], lambda t, x: ad.sum_(x, axis=1, keepdims=True)),
        "min": ([a], lambda t, x: ad.min_(x, axis=-1)),
        "getitem": ([a], lambda t, x: ad.getitem(x, (slice(None), slice(1, 3)))),
        "take": ([a], lambda t, x: ad.take(x, np.array([2, 0, 2]))),
        "concat": ([a, b], lambda t, x, y: ad.concat([x, y], axis=0)),
        "transpose": ([a], lambda t, x: ad.transpose(x)),
        "reshape": ([a], lambda t, x: ad.reshape(x, (2, 6))),
    }


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, (values, fn) in _op_cases(rng).items():
        params = [Param(np.array(v, dtype=float), name=f"{name}.{i}") for i, v in enumerate(values)]
        weights = None

        def closure(t, params=params, fn=fn):
            out = fn(t, *[t.param(p) for p in params])
            nonlocal weights
            if weights is None:
                weights = np.random.default_rng(seed + 1).normal(size=out.shape)
            return ad.sum_(ad.mul(out, t.constant(weights)))

        rep = ad.gradient_check(closure, params, step=1e-5, floor=1e-4)
        assert rep.max_rel_error < 1e-4, (name, rep.worst_param, rep.max_rel_error)


def test_min_ties_route_to_one_entry():
    p = Param(np.array([[1.0, 1.0, 2.0]]))
    g = grad_of(lambda t: ad.sum_(ad.min_(t.param(p), axis=-1)), p)[0]
    assert g.sum() == 1.0


def test_stop_gradient():
    p = Param(np.array(2.0))
    g = grad_of(lambda t: ad.mul(ad.stop_gradient(t.param(p)), t.param(p)), p)[0]
    assert g == 2.0


def test_kink_gap_reports_distance():
    tape = Tape()
    ad.piecewise_power(tape.constant(np.array([0.5, 1.3])), 1.0, 1.0)
    assert ad.kink_gap(tape) == pytest.approx(0.3)


def test_clip_preserves_direction_exactly():
    rng = np.random.default_rng(4)
    for _ in range(50):
        gs = [rng.normal(size=(3, 2)) * rng.uniform(0.01, 30), rng.normal(size=4)]
        clipped, norm = ad.clip_by_global_norm(gs, 1.0)
        n = math.sqrt(sum(float(np.sum(g * g)) for g in gs))
        assert norm == n
        for c, g in zip(clipped, gs):
            assert np.array_equal(c, g * min(1.0, 1.0 / n))


def test_tape_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        w = Param(rng.normal(size=(4, 4)))
        x = rng.normal(size=(6, 4))
        tape = Tape()
        h = ad.leaky_relu(ad.matmul(tape.constant(x), tape.param(w)))
        loss = ad.sum_(ad.piecewise_power(h, 1.5, 2.0))
        ad.backward(tape, loss)
        return float(loss.value), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)
