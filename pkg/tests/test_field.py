import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from cycreg.errors import DataError
from cycreg.field import (DisplacementField, compose, identity_grid, jacobian_determinant,
                          jacobian_stats, load_field, save_field, trilinear_sample,
                          upsample_field, warp, warp_array, warp_gradient, warp_landmarks)
from cycreg.gradcheck import random_offset_field
from cycreg.volume import LandmarkSet, Volume3D

finite = st.floats(-1e6, 1e6, allow_nan=False, width=64)


def brute_trilinear(values, point):
    """Direct 8-neighbour sum with zero outside the grid."""
    base = np.floor(point).astype(int)
    total = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        idx = base + corner
        w = np.prod([1 - abs(point[d] - idx[d]) for d in range(3)])
        if all(0 <= idx[d] < values.shape[d] for d in range(3)):
            total += w * values[tuple(idx)]
    return total


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(*[st.integers(2, 6)] * 3), elements=finite))
def test_zero_field_warp_is_bit_identical(data):
    out = warp_array(data, np.zeros((*data.shape, 3)))
    assert out.tobytes() == data.tobytes()


def test_matches_brute_force_sum():
    rng = np.random.default_rng(0)
    vals = rng.random((5, 6, 4))
    pts = rng.uniform(-1.5, 6.5, size=(40, 3))
    got = trilinear_sample(vals, pts)
    assert_allclose(got, [brute_trilinear(vals, p) for p in pts], rtol=0, atol=1e-12)


def test_ramp_shift_by_one():
    ramp = np.broadcast_to(np.arange(8.0)[:, None, None], (8, 8, 8))
    field = np.zeros((8, 8, 8, 3))
    field[..., 0] = 1.0
    out = warp_array(ramp, field)
    assert_allclose(out[:7], ramp[:7] + 1, atol=1e-12)
    assert_array_equal(out[7], 0.0)


def test_constant_volume_in_bounds():
    rng = np.random.default_rng(1)
    field = rng.uniform(-0.9, 0.9, size=(6, 6, 6, 3))
    out = warp_array(np.full((6, 6, 6), 2.5), field)
    assert_allclose(out[1:-1, 1:-1, 1:-1], 2.5, atol=1e-12)


def test_warp_types_and_dims():
    v = Volume3D(np.ones((3, 3, 3)), (2.0, 2.0, 2.0))
    out = warp(v, DisplacementField.zeros((3, 3, 3)))
    assert isinstance(out, Volume3D)
    assert out.spacing_mm == (2.0, 2.0, 2.0)
    with pytest.raises(DataError, match="mismatch"):
        warp(v, DisplacementField.zeros((3, 3, 4)))


def test_warp_gradient_finite_differences():
    rng = np.random.default_rng(2)
    moving = rng.random((8, 8, 8))
    field = random_offset_field(rng, (8, 8, 8))
    upstream = rng.normal(size=(8, 8, 8))
    grad = warp_gradient(moving, field, upstream)
    h = 1e-3
    for _ in range(30):
        idx = tuple(int(rng.integers(n)) for n in (8, 8, 8, 3))
        plus, minus = field.copy(), field.copy()
        plus[idx] += h
        minus[idx] -= h
        num = (np.sum(upstream * warp_array(moving, plus))
               - np.sum(upstream * warp_array(moving, minus))) / (2 * h)
        err = abs(grad[idx] - num) / max(abs(grad[idx]), abs(num), 1e-10)
        assert err <= 1e-3


def test_warp_gradient_constant_volume_is_zero():
    rng = np.random.default_rng(3)
    field = rng.uniform(-0.4, 0.4, size=(6, 6, 6, 3))
    g = warp_gradient(np.full((6, 6, 6), 4.0), field, rng.normal(size=(6, 6, 6)))
    assert_allclose(g[1:-1, 1:-1, 1:-1], 0.0, atol=1e-12)


def test_warp_gradient_of_ramp():
    ramp = np.broadcast_to(3.0 * np.arange(8.0)[:, None, None], (8, 8, 8))
    upstream = np.zeros((8, 8, 8))
    upstream[4, 3, 5] = 1.0
    field = DisplacementField(np.full((8, 8, 8, 3), 0.3))
    g = warp_gradient(ramp, field, upstream)
    assert isinstance(g, DisplacementField)
    assert_allclose(g.vectors[4, 3, 5], [3.0, 0.0, 0.0], atol=1e-12)
    rest = np.delete(g.vectors.reshape(-1, 3), np.ravel_multi_index((4, 3, 5), (8, 8, 8)), 0)
    assert_array_equal(rest, 0.0)


def test_splat_is_adjoint_of_sample():
    from cycreg.field import displaced_stencil

    rng = np.random.default_rng(4)
    field = rng.uniform(-2, 2, size=(5, 6, 7, 3))
    s = displaced_stencil(field)
    u, v = rng.normal(size=(5, 6, 7)), rng.normal(size=(5, 6, 7))
    assert_allclose(np.sum(u * s.sample(v)), np.sum(s.splat(u) * v), rtol=1e-12)


def test_compose_translations():
    t1 = DisplacementField(np.broadcast_to([1.0, 0.0, -1.0], (8, 8, 8, 3)))
    t2 = DisplacementField(np.broadcast_to([0.5, 2.0, 0.0], (8, 8, 8, 3)))
    c = compose(t1, t2)
    assert_allclose(c.vectors[1:5, 1:5, 2:7], np.broadcast_to([1.5, 2.0, -1.0], (4, 4, 5, 3)))


def test_compose_sinusoid_double_warp():
    grid = identity_grid((16, 16, 16))
    outer = 0.8 * np.sin(2 * np.pi * grid / 16 + np.array([0.3, 1.1, 2.0]))
    inner = 0.6 * np.cos(2 * np.pi * grid / 16 + np.array([0.9, 0.2, 1.4]))
    # double interpolation error scales with curvature; period 32 keeps it small
    image = np.prod(np.cos(2 * np.pi * grid / 32), axis=-1)
    twice = warp_array(warp_array(image, outer), inner)
    once = warp_array(image, compose(DisplacementField(outer), DisplacementField(inner)).vectors)
    core = (slice(2, -2),) * 3
    assert np.max(np.abs(twice - once)[core]) <= 0.02


def test_warp_landmarks():
    pts = LandmarkSet((("p", (1.25, 2.5, 3.75)), ("q", (4.0, 0.5, 0.0))))
    assert warp_landmarks(pts, DisplacementField.zeros((6, 6, 6))) == pts
    shift = np.zeros((6, 6, 6, 3))
    shift[..., 2] = 2.0
    moved = warp_landmarks(pts, DisplacementField(shift)).positions
    assert_allclose(moved, pts.positions + [0, 0, 2])
    linear = DisplacementField(0.1 * identity_grid((6, 6, 6)))
    assert_allclose(warp_landmarks(pts, linear).positions, 1.1 * pts.positions, atol=1e-12)


def test_jacobian_identity_and_affine():
    stats = jacobian_stats(DisplacementField.zeros((5, 5, 5)))
    assert_array_equal(stats.det_volume.data, 1.0)
    assert stats.nonpositive_fraction == 0
    det = jacobian_determinant(0.5 * identity_grid((7, 7, 7)))
    assert_allclose(det, 3.375, atol=1e-6)


def test_jacobian_reflection():
    field = np.zeros((6, 6, 6, 3))
    field[..., 0] = -2.0 * identity_grid((6, 6, 6))[..., 0]
    stats = jacobian_stats(DisplacementField(field))
    assert_allclose(stats.det_volume.data[1:-1, 1:-1, 1:-1], -1.0, atol=1e-12)
    assert stats.nonpositive_fraction == 1.0


def test_upsample_constant_is_exact():
    coarse = np.broadcast_to([1.0, -0.5, 0.25], (4, 4, 4, 3))
    fine = upsample_field(coarse, (8, 8, 7), (2.0, 2.0, 2.0))
    assert_array_equal(fine, np.broadcast_to([2.0, -1.0, 0.5], (8, 8, 7, 3)))


def test_field_container_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    f = DisplacementField(rng.normal(size=(3, 4, 5, 3)).astype(np.float32))
    save_field(f, tmp_path / "phi", (1.0, 1.0, 2.0))
    back = load_field(tmp_path / "phi")
    assert_array_equal(back.vectors, f.vectors)
    # interleaved per voxel, x fastest
    raw = np.fromfile(tmp_path / "phi.raw", dtype="<f4")
    assert_array_equal(raw[:3], f.vectors[0, 0, 0])
    assert_array_equal(raw[3:6], f.vectors[1, 0, 0])
    with pytest.raises(DataError, match="kind"):
        from cycreg.volume import load_volume
        load_volume(tmp_path / "phi")
