import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neural_spacetime.autodiff import Tape
from neural_spacetime.baselines import (
    FixedGeometryModel,
    SnowflakeModel,
    SnowflakeV1Params,
    desitter_distance,
    euclidean_distance,
    minkowski_interval,
    project_to_desitter,
    minkowski_inner,
    snowflake_v1,
)
from neural_spacetime.errors import NegativeInput, OffManifold, ShapeMismatch

coords = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=3)


def unit_snowflake(a=1.0, b=1.0, p=0.0):
    one = np.ones((1, 1))
    return SnowflakeV1Params([one], [one], [np.ones(3)], [a], [b], p)


def test_euclidean_examples():
    assert euclidean_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert euclidean_distance([0.0, 0.0], [3.0, 4.0]) == 5.0
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 6))
    assert euclidean_distance(x, y) == pytest.approx(math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y))), rel=1e-15)


@settings(max_examples=200)
@given(coords, coords, coords)
def test_euclidean_metric_axioms(x, y, z):
    dxy, dyx = euclidean_distance(x, y), euclidean_distance(y, x)
    assert dxy == dyx and dxy >= 0
    assert dxy <= euclidean_distance(x, z) + euclidean_distance(z, y) + 1e-12 * (1 + dxy)


def test_minkowski_examples():
    assert minkowski_interval([0.0, 1.0], [0.0, 1.0]) == (0.0, False)
    d, causal = minkowski_interval([0.0, 0.0], [2.0, 1.0])
    assert d == pytest.approx(math.sqrt(3)) and causal
    d, causal = minkowski_interval([0.0, 0.0], [1.0, 1.0])
    assert d == 0.0 and causal
    d, causal = minkowski_interval([0.0, 0.0], [-2.0, 1.0])
    assert not causal


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_minkowski_causality_transitive(seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=3)
    step = lambda: np.concatenate([[abs(rng.normal()) + 1.0], rng.normal(size=2) * 0.5])
    v = u + step()
    w = v + step()
    if minkowski_interval(u, v)[1] and minkowski_interval(v, w)[1]:
        assert minkowski_interval(u, w)[1]


def test_desitter_examples():
    x = np.array([0.0, 1.0, 0.0])
    assert desitter_distance(x, x) == 0.0
    assert desitter_distance(x, -x) == pytest.approx(math.pi)
    # timelike-separated pair leaves the arccos domain
    a = np.array([0.0, 1.0, 0.0])
    b = np.array([3.0, 1.0, 0.0])
    assert desitter_distance(a, b) is None
    with pytest.raises(OffManifold):
        desitter_distance([1.0, 0.0, 0.0], a)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
def test_projection_lands_on_hyperboloid(seed, radius):
    x = np.random.default_rng(seed).normal(size=(5, 4))
    p = project_to_desitter(x, radius)
    assert np.allclose(minkowski_inner(p, p), radius**2, rtol=1e-12)
    assert np.array_equal(p[:, 0], x[:, 0])


def test_snowflake_examples():
    assert snowflake_v1(unit_snowflake(), 0.0) == 0.0
    want = (1 - math.exp(-1)) + 1 + math.log(2)
    assert snowflake_v1(unit_snowflake(), 1.0) == pytest.approx(want, rel=1e-15)
    with pytest.raises(NegativeInput):
        snowflake_v1(unit_snowflake(), -0.1)
    with pytest.raises(ShapeMismatch):
        SnowflakeV1Params([np.zeros((1, 1))], [np.ones((1, 1))], [np.ones(3)], [1.0], [1.0], 0.0)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_snowflake_nonnegative_and_monotone(seed):
    rng = np.random.default_rng(seed)
    widths = [1, 3, 4, 1]
    A = [rng.uniform(0, 1, size=(5, widths[j])) for j in range(3)]
    B = [rng.uniform(0, 1, size=(widths[j + 1], 5)) for j in range(3)]
    C = [rng.uniform(0, 1, size=3) for _ in range(3)]
    sf = SnowflakeV1Params(A, B, C, rng.uniform(0.1, 1, 3), rng.uniform(0, 1, 3), rng.normal())
    r = np.sort(rng.uniform(0, 10, size=50))
    out = snowflake_v1(sf, r)
    assert np.all(out >= 0)
    assert np.all(np.diff(out) >= -1e-12 * np.maximum(out[1:], 1))


def test_snowflake_model_matches_plain_function():
    m = SnowflakeModel(in_dim=2, space_dim=3, encoder_depth=1, encoder_width=4, seed=1)
    r = np.array([0.0, 0.3, 1.0, 2.5])
    tape = Tape()
    got = m.warp(tape, tape.constant(r)).value
    assert np.allclose(got, snowflake_v1(m.as_params(), r), rtol=1e-13)


def test_fixed_geometry_only_encoder_trainable():
    for kind in ("euclidean", "minkowski", "desitter"):
        m = FixedGeometryModel(kind, in_dim=2, space_dim=3, encoder_depth=1, encoder_width=4)
        assert all(name.startswith("encoder.") for name in m.params)


def test_fixed_geometry_tape_matches_closed_forms():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(6, 2))
    src, dst = np.array([0, 1, 2, 3]), np.array([4, 5, 0, 1])
    for kind in ("euclidean", "minkowski", "desitter"):
        m = FixedGeometryModel(kind, in_dim=2, space_dim=3, encoder_depth=1, encoder_width=4, seed=2)
        tape = Tape()
        emb = m.encode(tape, feats)
        pred, valid = m.distance(tape, emb, src, dst)
        e = emb.value
        for i, (u, v) in enumerate(zip(src, dst)):
            if kind == "euclidean":
                want = euclidean_distance(e[u], e[v])
            elif kind == "minkowski":
                want = minkowski_interval(e[u], e[v])[0]
            else:
                want = desitter_distance(e[u], e[v])
            if want is None:
                assert not valid[i]
            else:
                assert valid[i] and pred.value[i] == pytest.approx(want, rel=1e-12, abs=1e-14)


def test_lorentzian_needs_two_dims():
    with pytest.raises(ShapeMismatch):
        FixedGeometryModel("minkowski", in_dim=2, space_dim=1)
