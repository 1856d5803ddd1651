import math

import numpy as np
import pytest

from blmetric import (bl_dual_form, bl_frame, bl_frame_field, bl_metric,
                      in_frame, profile_norm)
from chart import Chart
from errors import BLMetricError
from examples import rotation_matrix
from norms import (EuclideanNorm, FinslerField, PowerNorm, PulledNorm,
                   QuadratureParams, RandersNorm, TranslatedBallNorm,
                   unit_samples)


def test_euclidean_norm_is_a_fixed_point(small_quad):
    np.testing.assert_allclose(bl_metric(EuclideanNorm(np.eye(2)), small_quad),
                               np.eye(2), atol=1e-3)
    np.testing.assert_allclose(bl_metric(EuclideanNorm(np.eye(3)),
                                         QuadratureParams(2048, 8)),
                               np.eye(3), atol=1e-3)


def test_dual_form_of_a_linear_image(small_quad):
    A = np.array([[1.5, 0.4], [-0.3, 0.8]])
    dual = bl_dual_form(PulledNorm(EuclideanNorm(np.eye(2)), A), small_quad)
    np.testing.assert_allclose(dual, A @ A.T, atol=1e-3)


@pytest.mark.parametrize('norm', [
    RandersNorm(np.array([[1.0, 0.2], [0.2, 0.7]]), [0.3, -0.1]),
    TranslatedBallNorm(np.eye(2), [0.1, 0.6]),
    PowerNorm(6.0, 2),
])
def test_metric_is_equivariant(norm):
    quad = QuadratureParams(4096, 16)
    A = np.array([[0.9, 0.5], [-0.2, 1.3]])
    G = bl_metric(norm, quad)
    A_inv = np.linalg.inv(A)
    moved = bl_metric(PulledNorm(norm, A), quad)
    expected = A_inv.T @ G @ A_inv
    assert np.max(np.abs(moved - expected)) <= 1e-3 * np.max(np.abs(G))


def _seeded_pair(rng, k):
    dim = 3 if k % 4 == 3 else 2
    while True:
        A = rng.standard_normal((dim, dim))
        if np.linalg.cond(A) < 10.0:
            break
    family = k % 3
    if family == 0:
        norm = RandersNorm(np.eye(dim), rng.uniform(-0.3, 0.3, dim))
    elif family == 1:
        norm = TranslatedBallNorm(np.eye(dim), rng.uniform(-0.35, 0.35, dim))
    else:
        norm = PowerNorm(float(rng.choice([4.0, 6.0])), dim)
    return norm, A


@pytest.mark.slow
def test_metric_is_equivariant_for_seeded_pairs():
    rng = np.random.default_rng(2024)
    for k in range(20):
        norm, A = _seeded_pair(rng, k)
        quad = QuadratureParams(4096, 16) if norm.dim == 2 else QuadratureParams(8192, 8)
        G = bl_metric(norm, quad)
        A_inv = np.linalg.inv(A)
        moved = bl_metric(PulledNorm(norm, A), quad)
        expected = A_inv.T @ G @ A_inv
        assert np.linalg.norm(moved - expected) <= 2e-3 * np.linalg.norm(G), k


def test_frame_of_a_diagonal_metric():
    np.testing.assert_allclose(bl_frame(np.diag([4.0, 1.0])), np.diag([0.5, 1.0]))


def test_frame_is_orthonormal(rng):
    M = rng.standard_normal((3, 3))
    G = M @ M.T + np.eye(3)
    E = bl_frame(G)
    np.testing.assert_allclose(E.T @ G @ E, np.eye(3), atol=1e-12)
    assert np.allclose(E, np.triu(E))


@pytest.mark.parametrize('metric', [
    [[1.0, 0.5], [0.0, 1.0]],
    [[1.0, 0.0], [0.0, -2.0]],
    [[1.0, 0.0, 0.0]],
])
def test_bad_metrics(metric):
    with pytest.raises(BLMetricError):
        bl_frame(np.array(metric))


def test_isometries_become_orthogonal_in_the_frame():
    norm = PowerNorm(4.0, 2)
    quarter = rotation_matrix(math.pi / 2)
    xi = unit_samples(np.random.default_rng(0), 100, 2)
    np.testing.assert_allclose(norm.values(xi @ quarter.T), norm.values(xi))

    E = bl_frame(bl_metric(norm, QuadratureParams(4096, 16)))
    conjugated = np.linalg.inv(E) @ quarter @ E
    np.testing.assert_allclose(conjugated.T @ conjugated, np.eye(2), atol=1e-3)


def test_framed_norm_has_identity_metric(small_quad):
    norm = RandersNorm(np.array([[2.0, 0.5], [0.5, 1.0]]), [0.2, 0.4])
    profile = profile_norm(norm, small_quad)
    framed_metric = bl_metric(profile.framed(), small_quad)
    np.testing.assert_allclose(framed_metric, np.eye(2), atol=1e-8)

    c = unit_samples(np.random.default_rng(1), 20, 2)
    np.testing.assert_allclose(in_frame(norm, profile.frame).values(c),
                               norm.values(c @ profile.frame.T))


def test_profile_reference_integrals(small_quad):
    profile = profile_norm(EuclideanNorm(np.eye(2)), small_quad)
    assert profile.density == pytest.approx(1.0, abs=1e-8)
    assert profile.volume == pytest.approx(math.pi, abs=1e-6)
    assert profile.scale == pytest.approx(2.0 * math.pi / 3.0, abs=1e-6)
    assert profile.mean_value == pytest.approx(2.0 / 3.0, rel=1e-9)


def test_profile_integrals_are_invariant_under_linear_maps(small_quad):
    norm = RandersNorm(np.eye(2), [0.4, 0.1])
    A = np.array([[3.0, 1.0], [0.0, 0.5]])
    plain = profile_norm(norm, small_quad)
    moved = profile_norm(PulledNorm(norm, A), small_quad)
    assert moved.volume == pytest.approx(plain.volume, rel=1e-8)
    assert moved.scale == pytest.approx(plain.scale, rel=1e-8)


def _rotation_field(resolution):
    base = RandersNorm(np.eye(2), [0.5, 0.0])
    return FinslerField(
        Chart.torus([1.0, 1.0]), resolution,
        lambda x: PulledNorm(base, rotation_matrix(0.3 * math.sin(2 * math.pi * x[0]))))


def test_frame_field_follows_the_rotated_metric(small_quad):
    field = _rotation_field((8, 4))
    frames = bl_frame_field(field, quad=small_quad)
    G0 = bl_metric(RandersNorm(np.eye(2), [0.5, 0.0]), small_quad)

    for index in field.grid().indices():
        x = field.grid().point(index)
        R = rotation_matrix(0.3 * math.sin(2 * math.pi * x[0]))
        np.testing.assert_allclose(frames.metrics[index], R @ G0 @ R.T, atol=1e-10)
        E = frames.frame_at(index)
        np.testing.assert_allclose(E.T @ frames.metrics[index] @ E, np.eye(2),
                                   atol=1e-12)

    rows = list(frames.csv_rows())
    assert len(rows) == 32 * 4
    assert frames.summary()['node_count'] == 32


def test_frames_do_not_depend_on_the_grid(small_quad):
    field = _rotation_field((4, 4))
    coarse = bl_frame_field(field, quad=small_quad)
    fine = bl_frame_field(field, field.chart.grid((8, 8)), small_quad)
    np.testing.assert_allclose(fine.frames[::2, ::2], coarse.frames, atol=1e-10)
