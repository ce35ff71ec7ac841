import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seunet.lifting import (
    LiftedSignal,
    element,
    gaussian_blur,
    gaussian_kernel,
    gaussian_lift,
    lifted_action,
    max_project,
    plane_rescale,
    plane_subsample_action,
    semigroup_compose,
)
from seunet.tensor import Tensor, backward, mul, sum_all

elements = st.builds(lambda k, a, b: element(k, (a, b)), st.integers(0, 3), st.integers(0, 6), st.integers(0, 6))


# ---------------------------------------------------------------- algebra


def test_identity_element_composes_trivially():
    b = element(2, (3, 1))
    assert semigroup_compose(element(0), b) == b
    assert semigroup_compose(b, element(0)) == b


def test_compose_direct_value():
    assert semigroup_compose(element(1, (3, 0)), element(2, (1, 1))) == element(3, (5, 2))


@given(elements, elements, elements, st.integers(2, 3))
def test_compose_is_associative(a, b, c, gamma):
    left = semigroup_compose(semigroup_compose(a, b, gamma), c, gamma)
    right = semigroup_compose(a, semigroup_compose(b, c, gamma), gamma)
    assert left == right


def test_negative_exponent_rejected():
    with pytest.raises(ValueError, match=">= 0"):
        element(-1)


# ---------------------------------------------------------------- actions


def test_lifted_identity_action(rng):
    f = rng.normal(size=(3, 5, 6, 2))
    np.testing.assert_array_equal(lifted_action((0, (0, 0)), f), f)


def test_unit_row_translation_crops_last_row(rng):
    f = rng.normal(size=(2, 5, 4, 1))
    out = lifted_action((0, (1, 0)), f)
    np.testing.assert_array_equal(out, f[:, 1:])


def test_one_octave_on_eight_pixels(rng):
    f = rng.normal(size=(4, 8, 8, 1))
    out = lifted_action((1, (0, 0)), f, 2)
    assert out.shape == (3, 4, 4, 1)
    for l in range(3):
        for i in range(4):
            for j in range(4):
                assert out[l, i, j, 0] == f[l + 1, 2 * i, 2 * j, 0]


@given(st.integers(0, 2), st.integers(0, 4), st.integers(0, 4), st.integers(5, 11), st.integers(5, 11))
def test_action_extent_and_values(k, zr, zc, h, w):
    f = np.arange(4 * h * w, dtype=np.float64).reshape(4, h, w, 1)
    out = lifted_action((k, (zr, zc)), f, 2)
    rows, cols = (h - 1 - zr) // 2**k + 1, (w - 1 - zc) // 2**k + 1
    assert out.shape == (4 - k, rows, cols, 1)
    assert out[-1, -1, -1, 0] == f[3, 2**k * (rows - 1) + zr, 2**k * (cols - 1) + zc, 0]


def test_action_rejects_exhausted_scales(rng):
    with pytest.raises(ValueError, match="scales"):
        lifted_action((3, (0, 0)), rng.normal(size=(3, 4, 4, 1)))


@given(elements, elements)
def test_right_action_homomorphism(a, b):
    if a.k + b.k >= 6:
        return
    f = np.random.default_rng(a.k * 7 + b.k).normal(size=(6, 60, 60, 1))
    lhs = lifted_action(a, lifted_action(b, f))
    rhs = lifted_action(semigroup_compose(b, a), f)
    s, h, w = (min(x, y) for x, y in zip(lhs.shape[:3], rhs.shape[:3]))
    np.testing.assert_array_equal(lhs[:s, :h, :w], rhs[:s, :h, :w])


def test_action_keeps_lifted_metadata(rng):
    sig = LiftedSignal(rng.normal(size=(3, 8, 8, 1)), gamma=2, base_sigma=1.5, level0="identity")
    out = lifted_action((1, (0, 0)), sig)
    assert isinstance(out, LiftedSignal)
    assert out.base_sigma == 1.5 and out.level0 == "identity"


def test_plane_action_ramp():
    f = np.repeat(np.arange(4.0)[:, None], 4, axis=1)[..., None]
    out = plane_subsample_action((1, (0, 0)), f)
    np.testing.assert_array_equal(out[..., 0], [[0, 0], [2, 2]])


def test_plane_action_index_map(rng):
    f = rng.normal(size=(13, 11, 2))
    out = plane_subsample_action((2, (1, 1)), f)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            np.testing.assert_array_equal(out[i, j], f[4 * i + 1, 4 * j + 1])
    assert out.shape[:2] == (3, 3)


def test_plane_action_identity_and_empty(rng):
    f = rng.normal(size=(4, 4, 1))
    np.testing.assert_array_equal(plane_subsample_action((0, (0, 0)), f), f)
    with pytest.raises(ValueError):
        plane_subsample_action((1, (4, 0)), f)


# ---------------------------------------------------------------- rescaling


def test_rescale_identity(rng):
    f = rng.normal(size=(5, 7, 2))
    np.testing.assert_allclose(plane_rescale(f, 1.0), f, atol=1e-15)


def test_bilinear_top_left_alignment():
    f = np.array([[0.0, 1.0], [0.0, 1.0]])[..., None]
    out = plane_rescale(f, 2.0, "bilinear")[..., 0]
    assert out.shape == (4, 4)
    for row in out:
        np.testing.assert_allclose(row, [0, 0.5, 1, 1])


def test_nearest_doubles_by_replication(rng):
    f = rng.integers(0, 5, (3, 4, 1))
    np.testing.assert_array_equal(plane_rescale(f, 2.0, "nearest"), np.repeat(np.repeat(f, 2, 0), 2, 1))


def test_nearest_integer_downscale_is_the_action(rng):
    f = rng.normal(size=(12, 12, 1))
    np.testing.assert_array_equal(plane_rescale(f, 0.25, "nearest"), plane_subsample_action((2, (0, 0)), f))


@given(st.floats(0.2, 3.0), st.integers(3, 20), st.integers(3, 20))
def test_rescale_extent_is_rounded(factor, h, w):
    out = plane_rescale(np.zeros((h, w, 1)), factor)
    assert out.shape == (math.floor(h * factor + 0.5), math.floor(w * factor + 0.5), 1)


def test_rescale_to_nothing_rejected():
    with pytest.raises(ValueError):
        plane_rescale(np.zeros((2, 2, 1)), 0.1)


# ---------------------------------------------------------------- Gaussian scale-space


def test_zero_sigma_is_impulse():
    np.testing.assert_array_equal(gaussian_kernel(0.0), [1.0])


@given(st.floats(0.1, 12.0))
def test_kernel_normalised_and_symmetric(sigma):
    k = gaussian_kernel(sigma)
    assert len(k) == 2 * math.ceil(4 * sigma) + 1
    assert abs(k.sum() - 1) <= 1e-12
    np.testing.assert_array_equal(k, k[::-1])


def test_unit_sigma_centre_coefficient():
    norm = sum(math.exp(-t * t / 2) for t in range(-4, 5))
    assert gaussian_kernel(1.0)[4] == pytest.approx(1 / norm, rel=1e-14)


def test_constant_image_stays_constant_in_interior():
    c = 0.37
    lifted = gaussian_lift(np.full((40, 40, 1), c), 3).values
    for s, sigma in enumerate([1.0, 2.0, 4.0]):
        r = math.ceil(4 * sigma)
        np.testing.assert_allclose(lifted[s, r:-r, r:-r], c, rtol=1e-13)


def test_impulse_response_is_separable_kernel():
    f = np.zeros((41, 41, 1))
    f[20, 20] = 1
    lifted = gaussian_lift(f, 3).values
    for s in range(3):
        k = gaussian_kernel(2.0**s)
        r = len(k) // 2
        expect = np.zeros((41, 41))
        expect[20 - r : 21 + r, 20 - r : 21 + r] = np.outer(k, k)
        np.testing.assert_allclose(lifted[s, ..., 0], expect, atol=1e-16)


def test_identity_level_zero_policy(rng):
    f = rng.normal(size=(9, 9, 2))
    sig = gaussian_lift(f, 1, level0="identity")
    np.testing.assert_array_equal(sig.values[0], f)
    assert sig.sigmas() == [0.0]


def test_lifted_signal_validation(rng):
    with pytest.raises(ValueError):
        LiftedSignal(rng.normal(size=(3, 4, 4, 1)), gamma=1)
    with pytest.raises(ValueError):
        LiftedSignal(rng.normal(size=(4, 4, 1)))


@pytest.mark.parametrize("k", [1, 2])
def test_lifting_commutes_with_decimation_on_smooth_images(k):
    f = gaussian_blur(np.random.default_rng(k).normal(size=(160, 160, 1)), 2.0)
    S = 4
    lhs = gaussian_lift(plane_subsample_action((k, (0, 0)), f), S).values
    rhs = lifted_action((k, (0, 0)), gaussian_lift(f, S).values)
    num = den = 0.0
    for s in range(S - k):
        m = math.ceil(4 * 2.0**s) + 1
        a = lhs[s, m:-m, m:-m]
        b = rhs[s, m : lhs.shape[1] - m, m : lhs.shape[2] - m]
        num += np.sum((a - b) ** 2)
        den += np.sum(b**2)
    assert math.sqrt(num / den) <= 0.05


# ---------------------------------------------------------------- projection


def test_projection_of_scale_constant():
    f = np.repeat(np.random.default_rng(0).normal(size=(1, 5, 5, 2)), 4, axis=0)
    np.testing.assert_array_equal(max_project(f), f[0])


def test_projection_of_index_ramp():
    f = np.arange(4.0)[:, None, None, None] * np.ones((4, 3, 3, 1))
    np.testing.assert_array_equal(max_project(f), np.full((3, 3, 1), 3.0))


def test_projection_matches_loop(rng):
    f = rng.normal(size=(2, 4, 5, 6, 3))
    out = max_project(f)
    for n in range(2):
        for i in range(5):
            for j in range(6):
                for c in range(3):
                    assert out[n, i, j, c] == max(f[n, s, i, j, c] for s in range(4))


def test_projection_gradient_goes_to_first_maximum():
    x = Tensor(np.array([[[[1.0]]], [[[3.0]]], [[[3.0]]]]), requires_grad=True)
    backward(sum_all(max_project(x)))
    np.testing.assert_array_equal(x.grad.ravel(), [0, 1, 0])


@given(st.integers(1, 2), st.integers(0, 3), st.integers(0, 3), st.integers(0, 10**6))
def test_projection_equivariant_when_max_sits_high(k, zr, zc, seed):
    r = np.random.default_rng(seed)
    f = r.normal(size=(4, 20, 20, 1))
    f[k:] += 10.0  # every maximum at an index >= k
    lhs = max_project(lifted_action((k, (zr, zc)), f))
    rhs = plane_subsample_action((k, (zr, zc)), max_project(f))
    np.testing.assert_array_equal(lhs, rhs)


@given(st.integers(1, 3), st.integers(0, 10**6))
def test_projection_gap_is_low_scale_excess(k, seed):
    f = np.random.default_rng(seed).normal(size=(4, 16, 16, 1))
    lhs = max_project(lifted_action((k, (0, 0)), f))
    rhs = plane_subsample_action((k, (0, 0)), max_project(f))
    sub = f[:, ::2**k, ::2**k]
    excess = np.maximum(0, sub[:k].max(axis=0) - sub[k:].max(axis=0))
    np.testing.assert_allclose(rhs - lhs, excess, atol=1e-15)
