import math

import numpy as np
import pytest

from chart import Chart, DifferenceScheme, Interpolation, derivative, interpolate
from errors import CurveOutsideChartError


def _rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def test_torus_grid_excludes_the_period_endpoint():
    grid = Chart.torus([1.0, 2.0]).grid([4, 8])
    assert grid.spacing == (0.25, 0.25)
    np.testing.assert_allclose(grid.axes[0], [0.0, 0.25, 0.5, 0.75])
    assert grid.points.shape == (4, 8, 2)
    assert grid.size == 32


def test_box_grid_includes_both_ends():
    grid = Chart.box([0.0, -1.0], [1.0, 1.0]).grid([5, 3])
    np.testing.assert_allclose(grid.axes[1], [-1.0, 0.0, 1.0])
    assert grid.spacing == (0.25, 1.0)


@pytest.mark.parametrize('make', [
    lambda: Chart.torus([1.0]),
    lambda: Chart.torus([1.0, 0.0]),
    lambda: Chart.box([0.0, 0.0], [1.0, 0.0]),
])
def test_bad_charts(make):
    with pytest.raises(ValueError):
        make()


def test_grid_needs_two_nodes():
    with pytest.raises(ValueError):
        Chart.torus([1.0, 1.0]).grid([1, 4])


def test_nearest_index_wraps_on_torus():
    grid = Chart.torus([1.0, 1.0]).grid([8, 8])
    assert grid.nearest_index([0.99, 1.26]) == (0, 2)
    assert grid.contains_node([1.0, 0.25])
    assert not grid.contains_node([0.06, 0.25])


def test_nearest_index_clamps_on_box():
    grid = Chart.box([0.0, 0.0], [1.0, 1.0]).grid([5, 5])
    assert grid.nearest_index([-0.3, 0.49]) == (0, 2)


def test_sweep_covers_every_node_once():
    grid = Chart.torus([1.0, 1.0]).grid([7, 6])
    start = (2, 3)
    rings = grid.sweep_rings(start)
    nodes = [node for ring in rings for node, _ in ring]
    assert len(nodes) == grid.size
    assert len(set(nodes)) == grid.size
    assert rings[0] == [(start, start)]

    placed = {start}
    for ring in rings[1:]:
        for node, pred in ring:
            assert pred in placed
            assert node in grid.neighbors(pred, start)
        placed.update(node for node, _ in ring)


def test_cut_open_neighbours_skip_the_seam():
    grid = Chart.torus([1.0, 1.0]).grid([8, 8])
    start = (0, 0)
    first = grid.cut_position(start, 0)
    inner = ((first - 1) % 8, 0)
    across = (first, 0)
    assert across not in grid.neighbors(inner, start)
    assert across in grid.neighbors(inner)
    assert len(grid.cut_crossings(start, 0)) == 8
    assert (inner, across) in grid.cut_crossings(start, 0)


def test_offsets_are_centred_on_start():
    grid = Chart.torus([1.0, 1.0]).grid([16, 4])
    offsets = [grid.offset((i, 0), (0, 0), 0) for i in range(16)]
    assert min(offsets) == -7
    assert max(offsets) == 8


def test_spectral_derivative_is_exact_for_trigonometric_data():
    grid = Chart.torus([1.0, 1.0]).grid([16, 8])
    x = grid.points
    f = np.sin(2 * math.pi * x[..., 0]) * np.cos(4 * math.pi * x[..., 1])
    df = derivative(f, grid, 1)
    expected = -4 * math.pi * np.sin(2 * math.pi * x[..., 0]) * np.sin(4 * math.pi * x[..., 1])
    np.testing.assert_allclose(df, expected, atol=1e-11)


@pytest.mark.parametrize('scheme,order', [
    (DifferenceScheme.CENTRAL2, 2),
    (DifferenceScheme.CENTRAL4, 4),
])
def test_torus_stencils_converge_at_their_order(scheme, order):
    errors = []
    for count in (16, 32):
        grid = Chart.torus([1.0, 1.0]).grid([count, 4])
        x = grid.points[..., 0]
        df = derivative(np.sin(2 * math.pi * x), grid, 0, scheme)
        errors.append(np.max(np.abs(df - 2 * math.pi * np.cos(2 * math.pi * x))))
    assert math.log2(errors[0] / errors[1]) == pytest.approx(order, abs=0.2)


def test_box_stencils_are_exact_for_low_degree_polynomials():
    grid = Chart.box([0.0, 0.0], [2.0, 1.0]).grid([9, 3])
    x = grid.points[..., 0]

    df = derivative(x ** 4, grid, 0, DifferenceScheme.CENTRAL4)
    np.testing.assert_allclose(df, 4 * x ** 3, atol=1e-10)

    df = derivative(x ** 2, grid, 0, DifferenceScheme.CENTRAL2)
    np.testing.assert_allclose(df, 2 * x, atol=1e-12)


def test_trailing_matrix_axes_are_carried():
    grid = Chart.torus([1.0, 1.0]).grid([8, 8])
    values = np.zeros(grid.shape + (2, 2))
    values[..., 0, 1] = np.sin(2 * math.pi * grid.points[..., 1])
    df = derivative(values, grid, 1)
    assert df.shape == values.shape
    np.testing.assert_allclose(df[..., 0, 1],
                               2 * math.pi * np.cos(2 * math.pi * grid.points[..., 1]),
                               atol=1e-11)
    np.testing.assert_allclose(df[..., 1, 0], 0.0)


def test_deck_continues_a_twisted_field_across_the_cut():
    grid = Chart.torus([1.0, 1.0]).grid([32, 4])
    start = (0, 0)
    twist = math.pi / 2

    offsets = np.array([grid.offset((i, 0), start, 0) for i in range(32)])
    unwrapped = offsets * grid.spacing[0]
    values = np.broadcast_to(_rotation(twist * unwrapped)[:, None], (32, 4, 2, 2))
    deck = _rotation(twist)

    df = derivative(values, grid, 0, DifferenceScheme.CENTRAL4, start=start,
                    deck=deck)
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    np.testing.assert_allclose(df, twist * J @ values, atol=1e-6)

    # without the deck the seam produces a jump
    plain = derivative(values, grid, 0, DifferenceScheme.CENTRAL4, start=start)
    assert np.max(np.abs(plain - twist * J @ values)) > 1.0


def test_cubic_interpolation_is_exact_for_cubics_on_a_box():
    grid = Chart.box([0.0, 0.0], [1.0, 1.0]).grid([6, 6])
    x = grid.points
    values = x[..., 0] ** 3 - 2 * x[..., 0] * x[..., 1] ** 2
    for point in ([0.13, 0.77], [0.0, 1.0], [0.98, 0.02]):
        expected = point[0] ** 3 - 2 * point[0] * point[1] ** 2
        assert interpolate(values, grid, np.array(point)) == pytest.approx(expected, abs=1e-12)


def test_linear_interpolation_on_torus_wraps():
    grid = Chart.torus([1.0, 1.0]).grid([4, 4])
    values = np.zeros(grid.shape)
    values[0, 0] = 1.0
    point = np.array([0.875, 0.0])
    assert interpolate(values, grid, point, Interpolation.LINEAR) == pytest.approx(0.5)
    assert interpolate(values, grid, point + 1.0, Interpolation.LINEAR) == pytest.approx(0.5)


def test_interpolation_outside_a_box_raises():
    grid = Chart.box([0.0, 0.0], [1.0, 1.0]).grid([4, 4])
    with pytest.raises(CurveOutsideChartError) as info:
        interpolate(np.zeros(grid.shape), grid, np.array([1.5, 0.5]))
    assert info.value.point == (1.5, 0.5)
