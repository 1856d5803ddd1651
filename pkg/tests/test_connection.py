import dataclasses
import math

import numpy as np
import pytest

from chart import Chart, DifferenceScheme, Interpolation
from connection import (ConnectionGrid, ExpressionCurve, SegmentCurve,
                        check_holonomy, christoffels, curvature,
                        discrete_parallelism_residual, holonomy,
                        parallel_transport, random_curves, solve_frame_field,
                        transport_matrix, verify_preservation)
from errors import (CertificationError, CurveOutsideChartError,
                    NewtonConvergenceError)
from examples import (ExpressionVector, J, VectorFieldSpec,
                      analytic_gamma_rotation, constant_field,
                      power_rotation_field, randers_field, rotation_field,
                      rotation_matrix, torus_randers_field)
from expression import parse_expression
from isometry import isometry_defect
from norms import FinslerField, QuadratureParams, RandersNorm


QUAD = QuadratureParams(512, 8)
TORUS = Chart.torus([1.0, 1.0])
THETA = '0.3*sin(2*pi*x1)'
BASE = RandersNorm(np.eye(2), [0.5, 0.0])


def _theta(x):
    return 0.3 * math.sin(2 * math.pi * x[0])


def _rotated(resolution, theta=THETA, chart=TORUS):
    return rotation_field(BASE, parse_expression(theta), chart, resolution)


@pytest.fixture(scope='module')
def rotated_16():
    field = _rotated((16, 16))
    isofield = solve_frame_field(field, quad=QUAD)
    return field, isofield, christoffels(isofield, DifferenceScheme.SPECTRAL)


@pytest.fixture(scope='module')
def rotated_64():
    field = _rotated((64, 64))
    isofield = solve_frame_field(field, quad=QUAD)
    return field, isofield, christoffels(isofield, DifferenceScheme.SPECTRAL)


def test_constant_field_has_trivial_connection():
    field = constant_field(BASE, TORUS, (8, 8))
    isofield = solve_frame_field(field, quad=QUAD)
    np.testing.assert_allclose(isofield.matrices, np.broadcast_to(np.eye(2), (8, 8, 2, 2)),
                               atol=1e-12)
    assert isofield.decks == (None, None)

    conn = christoffels(isofield)
    assert conn.max_abs() <= 1e-10
    assert curvature(conn).max_norm() <= 1e-10

    curve = SegmentCurve([[0.1, 0.2], [0.7, 0.9], [1.3, 0.4]])
    vector = np.array([0.3, -1.2])
    np.testing.assert_allclose(parallel_transport(conn, curve, vector), vector,
                               atol=1e-10)

    report = verify_preservation(field, conn, random_curves(TORUS, 5, seed=2))
    assert report.max_error <= 1e-12


def test_rotated_field_recovers_the_rotation(rotated_16):
    field, isofield, _ = rotated_16
    for index in isofield.grid.indices():
        theta = _theta(isofield.grid.point(index))
        np.testing.assert_allclose(isofield.matrices[index], rotation_matrix(theta),
                                   atol=1e-9)
    assert isofield.anchor_residual(field) <= 1e-10
    assert isofield.isotropy.m == 1
    assert np.max(isofield.defects) <= isofield.threshold


def test_spectral_christoffels_match_the_closed_form(rotated_16):
    field, isofield, conn = rotated_16
    exact = analytic_gamma_rotation(parse_expression(THETA), isofield.grid)
    np.testing.assert_allclose(conn.gamma, exact.gamma, atol=1e-8)
    assert discrete_parallelism_residual(isofield, conn) <= 1e-11


def test_central_differences_converge_at_second_order():
    errors = []
    for count in (16, 32):
        field = _rotated((count, 4))
        isofield = solve_frame_field(field, quad=QUAD)
        conn = christoffels(isofield, DifferenceScheme.CENTRAL2)
        exact = analytic_gamma_rotation(parse_expression(THETA), isofield.grid)
        errors.append(np.max(np.abs(conn.gamma - exact.gamma)))
    assert errors[0] / errors[1] > 3.0


def test_isomorphisms_do_not_depend_on_the_grid():
    coarse = solve_frame_field(_rotated((8, 4)), quad=QUAD)
    fine = solve_frame_field(_rotated((16, 8)), quad=QUAD)
    np.testing.assert_allclose(fine.matrices[::2, ::2], coarse.matrices, atol=1e-9)


def test_christoffels_are_gauge_invariant(rotated_16):
    _, isofield, conn = rotated_16
    C = np.array([[1.2, 0.3], [-0.4, 0.9]])
    moved = dataclasses.replace(isofield, matrices=isofield.matrices @ C)
    np.testing.assert_allclose(christoffels(moved).gamma, conn.gamma, atol=1e-10)


def test_connection_csv_layout(rotated_16):
    _, isofield, conn = rotated_16
    assert conn.csv_header() == ['x1', 'x2', 'i', 'j', 's', 'gamma']
    rows = list(conn.csv_rows())
    assert len(rows) == 16 * 16 * 8
    assert rows[0][2:5] == [1, 1, 1]
    assert conn.metadata()['scheme'] == 'spectral'


def test_box_chart_solve():
    box = Chart.box([0.0, 0.0], [1.0, 1.0])
    field = _rotated((16, 6), chart=box)
    isofield = solve_frame_field(field, quad=QUAD)
    assert isofield.decks == (None, None)
    for index in isofield.grid.indices():
        np.testing.assert_allclose(isofield.matrices[index],
                                   rotation_matrix(_theta(isofield.grid.point(index))),
                                   atol=1e-9)

    conn = christoffels(isofield, DifferenceScheme.CENTRAL4)
    exact = analytic_gamma_rotation(parse_expression(THETA), isofield.grid)
    assert np.max(np.abs(conn.gamma - exact.gamma)) <= 0.05

    with pytest.raises(CurveOutsideChartError):
        transport_matrix(conn, SegmentCurve([[0.5, 0.5], [1.5, 0.5]]), steps=10)


def test_varying_randers_field_cannot_be_certified():
    b = ExpressionVector.of([parse_expression('0.3 + 0.1*sin(2*pi*x1)'), 0.0])
    field = randers_field(np.eye(2), b, TORUS, (8, 4))
    with pytest.raises(CertificationError) as info:
        solve_frame_field(field, quad=QUAD)
    assert info.value.point is not None
    assert info.value.defect > info.value.threshold


def _turning_translation(dim, resolution):
    components = ['cos(2*pi*x1)', 'sin(2*pi*x1)'] + ['0'] * (dim - 2)
    V = VectorFieldSpec(ExpressionVector.of([parse_expression(c) for c in components]))
    return torus_randers_field(np.eye(dim), V, Chart.torus([1.0] * dim), resolution)


def _turn_about_last_axis(angle, dim):
    R = np.eye(dim)
    R[:2, :2] = rotation_matrix(angle)
    return R


def test_torus_randers_isomorphisms_are_rotations():
    field = _turning_translation(2, (16, 4))
    isofield = solve_frame_field(field, quad=QUAD)
    for index in isofield.grid.indices():
        angle = 2 * math.pi * isofield.grid.point(index)[0]
        np.testing.assert_allclose(isofield.matrices[index], rotation_matrix(angle),
                                   atol=1e-9)
    assert isofield.decks == (None, None)
    assert np.max(isofield.defects) <= isofield.threshold
    assert isofield.anchor_residual(field) <= 1e-10


def test_three_torus_continuation_through_a_half_turn():
    field = _turning_translation(3, (16, 4, 4))
    isofield = solve_frame_field(field, quad=QuadratureParams(2048, 8))
    assert isofield.isotropy.m == 2
    assert isofield.decks == (None, None, None)
    assert np.max(isofield.defects) <= isofield.threshold
    for index in isofield.grid.indices():
        angle = 2 * math.pi * isofield.grid.point(index)[0]
        np.testing.assert_allclose(isofield.matrices[index],
                                   _turn_about_last_axis(angle, 3), atol=1e-8)

    conn = christoffels(isofield, DifferenceScheme.SPECTRAL)
    turn = np.zeros((3, 3))
    turn[:2, :2] = J
    np.testing.assert_allclose(conn.gamma[..., 0, :, :],
                               np.broadcast_to(-2 * math.pi * turn, (16, 4, 4, 3, 3)),
                               atol=1e-7)
    np.testing.assert_allclose(conn.gamma[..., 1:, :, :], 0.0, atol=1e-8)


class _UndefinedSlope(RandersNorm):
    def gradients(self, xi):
        return np.full(np.shape(xi), np.nan)


def test_non_finite_anchor_equations_fail_at_the_point():
    def norm_at(x):
        if x[0] >= 0.5:
            return _UndefinedSlope(np.eye(2), [0.5, 0.0])
        return BASE

    field = FinslerField(TORUS, (8, 8), norm_at)
    with pytest.raises(NewtonConvergenceError, match='not finite') as info:
        solve_frame_field(field, quad=QUAD)
    assert info.value.point[0] >= 0.5


@pytest.mark.slow
def test_random_loops_have_isometric_holonomy():
    field = _turning_translation(2, (32, 32))
    conn = christoffels(solve_frame_field(field, quad=QUAD), DifferenceScheme.SPECTRAL)
    loops = random_curves(TORUS, 20, seed=7, loops=True)
    report = check_holonomy(field, conn, loops, quad=QUAD)
    assert len(report.loops) == 20
    assert report.passed
    assert report.max_defect <= 1e-5


@pytest.mark.slow
def test_transport_preserves_the_norm(rotated_64):
    field, _, conn = rotated_64
    curves = random_curves(TORUS, 100, seed=0)
    report = verify_preservation(field, conn, curves, method=Interpolation.CUBIC)
    assert report.passed, report.max_error
    assert report.max_error <= 1e-5


@pytest.mark.slow
def test_perturbed_connection_fails_verification(rotated_64):
    field, _, conn = rotated_64
    curves = random_curves(TORUS, 10, seed=0)
    report = verify_preservation(field, conn.perturbed(0, 0, 0, 0.1), curves)
    assert not report.passed
    assert report.max_error >= 1e-2


@pytest.mark.slow
def test_contractible_and_winding_loops_have_trivial_holonomy(rotated_64):
    field, _, conn = rotated_64
    circle = ExpressionCurve.parse(['0.5 + 0.25*cos(2*pi*t)',
                                    '0.5 + 0.25*sin(2*pi*t)'])
    winding = SegmentCurve([[0.0, 0.0], [1.0, 0.0]])
    for loop in (circle, winding):
        np.testing.assert_allclose(holonomy(conn, loop, method=Interpolation.CUBIC),
                                   np.eye(2), atol=1e-6)

    report = check_holonomy(field, conn, [circle, winding],
                            method=Interpolation.CUBIC, quad=QUAD)
    assert report.passed


def test_open_curves_have_no_holonomy(rotated_16):
    _, _, conn = rotated_16
    with pytest.raises(ValueError):
        holonomy(conn, SegmentCurve([[0.0, 0.0], [0.5, 0.0]]))


def test_twisted_torus_has_quarter_turn_holonomy():
    field = power_rotation_field(4.0, parse_expression('pi/2*x1'), TORUS, (32, 4))
    isofield = solve_frame_field(field, quad=QUAD)

    deck = isofield.decks[0]
    assert deck is not None
    np.testing.assert_allclose(deck, rotation_matrix(math.pi / 2), atol=1e-8)
    assert isofield.decks[1] is None

    conn = christoffels(isofield, DifferenceScheme.SPECTRAL)
    np.testing.assert_allclose(conn.gamma[..., 0, :, :],
                               np.broadcast_to(-math.pi / 2 * J, (32, 4, 2, 2)),
                               atol=1e-5)
    np.testing.assert_allclose(conn.gamma[..., 1, :, :], 0.0, atol=1e-10)

    loop = SegmentCurve([[0.0, 0.0], [1.0, 0.0]])
    H = holonomy(conn, loop)
    np.testing.assert_allclose(H, rotation_matrix(math.pi / 2), atol=1e-5)

    norm = field.norm_at(np.zeros(2))
    assert isometry_defect(norm, norm, H, QUAD) <= 1e-5
    assert check_holonomy(field, conn, [loop], quad=QUAD).passed


def _constant_gamma(rate, resolution=(8, 8)):
    grid = TORUS.grid(resolution)
    gamma = np.zeros(grid.shape + (2, 2, 2))
    gamma[..., 0, :, :] = -rate * J
    return ConnectionGrid(grid, gamma)


def test_transport_along_a_constant_connection():
    conn = _constant_gamma(1.0)
    curve = SegmentCurve([[0.0, 0.5], [0.75, 0.5]])
    np.testing.assert_allclose(transport_matrix(conn, curve, steps=200),
                               rotation_matrix(0.75), atol=1e-10)


def test_rk4_converges_at_fourth_order():
    conn = _constant_gamma(4 * math.pi)
    curve = SegmentCurve([[0.0, 0.5], [0.5, 0.5]])
    errors = [np.max(np.abs(transport_matrix(conn, curve, steps) - np.eye(2)))
              for steps in (16, 32, 64)]
    assert math.log2(errors[0] / errors[1]) > 3.5
    assert math.log2(errors[1] / errors[2]) > 3.5


def test_linear_and_cubic_interpolation_agree_on_constant_data():
    conn = _constant_gamma(2.0)
    curve = SegmentCurve([[0.1, 0.3], [0.4, 0.9]])
    cubic = transport_matrix(conn, curve, 100, Interpolation.CUBIC)
    linear = transport_matrix(conn, curve, 100, Interpolation.LINEAR)
    np.testing.assert_allclose(cubic, linear, atol=1e-12)


def test_curvature_of_constant_christoffels_is_the_bracket():
    grid = TORUS.grid((8, 8))
    C1 = np.array([[0.1, 0.4], [-0.2, 0.3]])
    C2 = np.array([[0.0, 1.0], [0.5, -0.7]])
    gamma = np.zeros(grid.shape + (2, 2, 2))
    gamma[..., 0, :, :] = C1
    gamma[..., 1, :, :] = C2
    result = curvature(ConnectionGrid(grid, gamma))
    assert result.pairs == ((0, 1),)
    np.testing.assert_allclose(result.values[..., 0, :, :],
                               np.broadcast_to(C1 @ C2 - C2 @ C1, (8, 8, 2, 2)),
                               atol=1e-12)
    assert len(list(result.csv_rows())) == 64 * 4


def test_analytic_rotation_connection_is_flat():
    grid = TORUS.grid((32, 32))
    mixed = parse_expression('0.3*sin(2*pi*x1)*sin(2*pi*x2)')
    assert curvature(analytic_gamma_rotation(mixed, grid)).max_norm() <= 1e-9


@pytest.mark.slow
def test_discrete_curvature_vanishes_at_second_order():
    theta = '0.3*sin(2*pi*x1)*sin(2*pi*x2)'
    norms = []
    for count in (32, 64, 128):
        isofield = solve_frame_field(_rotated((count, count), theta), quad=QUAD)
        conn = christoffels(isofield, DifferenceScheme.CENTRAL2)
        norms.append(curvature(conn).max_norm())
    assert norms[-1] > 0.0
    for coarse, fine in zip(norms, norms[1:]):
        assert math.log2(coarse / fine) >= 1.7
