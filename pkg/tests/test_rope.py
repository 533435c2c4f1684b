import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lwm.rope import Coord3, RopeConfig, rope_angles, rope_periods, rotate_token

DEFAULT = RopeConfig.for_head_dim(64)


def test_periods_paper_schedule():
    p = rope_periods(10)
    assert p[0] == pytest.approx(0.01)
    assert p[-1] == pytest.approx(100.0)
    ratios = p[1:] / p[:-1]
    assert np.allclose(ratios, 10 ** (4 / 9))
    assert p[1] == pytest.approx(10 ** (-2 + 4 / 9))


def test_periods_degenerate_and_errors():
    assert rope_periods(1) == pytest.approx([0.01])
    with pytest.raises(ValueError):
        rope_periods(0)


def test_default_split_is_3x20_plus_4():
    assert DEFAULT.head_dim == 64
    assert DEFAULT.dims_per_axis == 20
    assert DEFAULT.num_periods == 10
    assert DEFAULT.unrotated_dims == 4


def test_config_validation():
    with pytest.raises(ValueError):
        RopeConfig(head_dim=64, dims_per_axis=21, num_periods=10)
    with pytest.raises(ValueError):
        RopeConfig(head_dim=8, dims_per_axis=4, num_periods=2)  # 12 > 8
    with pytest.raises(ValueError):
        RopeConfig(head_dim=64, dims_per_axis=20, num_periods=10, period_range=(1.0, 0.1))


def test_zero_coordinate_is_identity(rng):
    v = rng.standard_normal(64)
    out = rotate_token(v, Coord3(0.0, 0.0, 0.0), DEFAULT)
    assert np.array_equal(out, v)


def test_norm_preserved(rng):
    for _ in range(20):
        v = rng.standard_normal(64)
        c = Coord3(rng.uniform(0, 10), rng.uniform(-1, 1), rng.uniform(-1, 1))
        out = rotate_token(v, c, DEFAULT)
        assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(v), abs=1e-6)


def test_relative_position_identity(rng):
    # <rot(q, a), rot(k, b)> == <rot(q, a - b), k>, brute-force over triples
    for _ in range(100):
        q = rng.standard_normal(64)
        k = rng.standard_normal(64)
        # spatial draws in [-0.5, 0.5] keep the difference coordinate valid
        ca = Coord3(rng.uniform(0, 5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5))
        cb = Coord3(rng.uniform(0, 5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5))
        lhs = rotate_token(q, ca, DEFAULT) @ rotate_token(k, cb, DEFAULT)
        diff = Coord3(ca.tau - cb.tau, ca.i - cb.i, ca.j - cb.j)
        rhs = rotate_token(q, diff, DEFAULT) @ k
        assert lhs == pytest.approx(rhs, abs=1e-5)


def test_axis_shift_invariance(rng):
    # shifting both coords along one axis leaves the inner product unchanged
    q = rng.standard_normal(64)
    k = rng.standard_normal(64)
    for axis in range(3):
        base_a = [1.0, 0.3, -0.2]
        base_b = [0.5, -0.1, 0.4]
        ref = rotate_token(q, Coord3(*base_a), DEFAULT) @ rotate_token(
            k, Coord3(*base_b), DEFAULT
        )
        for shift in (0.7, 2.5):
            if axis > 0 and shift > 0.5:
                continue  # keep spatial coords in range
            a = list(base_a)
            b = list(base_b)
            a[axis] += shift
            b[axis] += shift
            shifted = rotate_token(q, Coord3(*a), DEFAULT) @ rotate_token(
                k, Coord3(*b), DEFAULT
            )
            assert shifted == pytest.approx(ref, abs=1e-4)


def test_chunk_isolation(rng):
    v = rng.standard_normal(64)
    a = rotate_token(v, Coord3(2.0, 0.5, -0.5), DEFAULT)
    b = rotate_token(v, Coord3(4.5, 0.5, -0.5), DEFAULT)
    per = DEFAULT.dims_per_axis
    # time chunk differs, spatial chunks and tail bit-identical
    assert not np.array_equal(a[:per], b[:per])
    assert np.array_equal(a[per:], b[per:])
    c = rotate_token(v, Coord3(2.0, -0.1, -0.5), DEFAULT)
    assert np.array_equal(a[:per], c[:per])
    assert not np.array_equal(a[per : 2 * per], c[per : 2 * per])
    assert np.array_equal(a[2 * per :], c[2 * per :])


def test_rotate_dimension_mismatch():
    with pytest.raises(ValueError, match="length"):
        rotate_token(np.zeros(10), Coord3(0, 0, 0), DEFAULT)


def test_spatial_coord_validation():
    with pytest.raises(ValueError):
        Coord3(0.0, 1.5, 0.0)


def test_angles_layout():
    cfg = RopeConfig.for_head_dim(12)  # 2 periods per axis
    ang = rope_angles(np.array([2.0, 0.5, -1.0]), cfg)
    periods = cfg.periods()
    expect = np.concatenate([2.0 / periods, 0.5 / periods, -1.0 / periods])
    assert np.allclose(ang, expect)


@settings(max_examples=50, deadline=None)
@given(
    tau=st.floats(-10, 10, allow_nan=False),
    i=st.floats(-1, 1, allow_nan=False),
    j=st.floats(-1, 1, allow_nan=False),
    seed=st.integers(0, 2**31 - 1),
)
def test_norm_preservation_property(tau, i, j, seed):
    v = np.random.default_rng(seed).standard_normal(64)
    out = rotate_token(v, Coord3(tau, i, j), DEFAULT)
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(v), rel=1e-9)
