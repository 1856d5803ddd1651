import logging as log
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Sequence, Tuple, Union

import numpy as np

from chart import Chart, DifferenceScheme, Grid
from connection import ConnectionGrid
from errors import ConfigError, FieldValidationError
from expression import Expression, Number, coordinate_env
from norms import (EuclideanNorm, FinslerField, MinkowskiNorm, PowerNorm,
                   PulledNorm, RandersNorm, TranslatedBallNorm)

if TYPE_CHECKING:
    import config


_log = log.getLogger('examples')

J = np.array([[0.0, -1.0], [1.0, 0.0]])
VECTOR_LENGTH = 0.5

Scalar = Union[Expression, float]


def rotation_matrix(theta: Union[float, np.ndarray]) -> np.ndarray:
    """R(theta) for scalars or arrays of angles, shape (..., 2, 2)"""

    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)],
                    axis=-2)


def _as_expression(value: Scalar) -> Expression:
    return value if isinstance(value, Expression) else Number(float(value))


def _evaluate(expr: Expression, point: np.ndarray) -> float:
    return float(expr.evaluate(coordinate_env(point)))


@dataclass(frozen=True, eq=False)
class ExpressionMatrix:
    """Matrix whose entries are expressions of the chart coordinates"""

    entries: Tuple[Tuple[Expression, ...], ...]

    @classmethod
    def of(cls, rows: Sequence[Sequence[Scalar]]) -> 'ExpressionMatrix':
        return cls(tuple(tuple(_as_expression(v) for v in row) for row in rows))

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.entries), len(self.entries[0])

    def at(self, point: np.ndarray) -> np.ndarray:
        return np.array([[_evaluate(e, point) for e in row] for row in self.entries])


@dataclass(frozen=True, eq=False)
class ExpressionVector:
    """Vector whose components are expressions of the chart coordinates"""

    components: Tuple[Expression, ...]

    @classmethod
    def of(cls, values: Sequence[Scalar]) -> 'ExpressionVector':
        return cls(tuple(_as_expression(v) for v in values))

    @property
    def dim(self) -> int:
        return len(self.components)

    def at(self, point: np.ndarray) -> np.ndarray:
        return np.array([_evaluate(e, point) for e in self.components])


MatrixSpec = Union[ExpressionMatrix, np.ndarray, Sequence[Sequence[float]]]


def _matrix_at(spec: MatrixSpec, point: np.ndarray) -> np.ndarray:
    if isinstance(spec, ExpressionMatrix):
        return spec.at(point)
    return np.asarray(spec, dtype=float)


@dataclass(frozen=True, eq=False)
class VectorFieldSpec:
    """Vector field to be rescaled to a fixed length in a Riemannian metric"""

    components: ExpressionVector
    target_norm_length: float = VECTOR_LENGTH

    def normalized(self, point: np.ndarray, metric: np.ndarray) -> np.ndarray:
        vector = self.components.at(point)
        length = float(np.sqrt(vector @ metric @ vector))
        if not length > 1e-12:
            raise FieldValidationError('Vector field vanishes', point)
        return vector * (self.target_norm_length / length)


def randers_from_translation(Q: np.ndarray, V: np.ndarray) -> MinkowskiNorm:
    """Norm whose unit ball is the Q-unit ball translated by V"""

    return TranslatedBallNorm(Q, V)


def constant_field(norm: MinkowskiNorm,
                   chart: Chart,
                   resolution: Sequence[int],
                   name: str = 'constant') -> FinslerField:
    return FinslerField(chart, tuple(resolution), lambda x: norm, name)


def torus_randers_field(g: MatrixSpec,
                        V: VectorFieldSpec,
                        chart: Chart,
                        resolution: Sequence[int]) -> FinslerField:
    """x -> translated g-ball with translation V(x) of g-length 1/2"""

    if V.components.dim != chart.dim:
        raise ValueError('Vector field dimension differs from chart')
    if not chart.periodic:
        _log.warning('Translated-ball field built on a box chart')

    def norm_at(point: np.ndarray) -> MinkowskiNorm:
        metric = _matrix_at(g, point)
        return randers_from_translation(metric, V.normalized(point, metric))

    return FinslerField(chart, tuple(resolution), norm_at, 'torus_randers')


def rotation_field(base: MinkowskiNorm,
                   theta: Scalar,
                   chart: Chart,
                   resolution: Sequence[int]) -> FinslerField:
    """F(x, xi) = base(R(-theta(x)) xi)"""

    if base.dim != 2:
        raise ValueError('Rotation fields are planar')
    theta = _as_expression(theta)

    def norm_at(point: np.ndarray) -> MinkowskiNorm:
        return PulledNorm(base, rotation_matrix(_evaluate(theta, point)))

    return FinslerField(chart, tuple(resolution), norm_at, 'rotation')


def power_rotation_field(p: float,
                         theta: Scalar,
                         chart: Chart,
                         resolution: Sequence[int]) -> FinslerField:
    """
    Rotated l^p norms. With p = 4 and theta = (pi / 2) x1 / L1 the field is
    periodic but the isomorphism field picks up a quarter turn per period.
    """
    result = rotation_field(PowerNorm(p, 2), theta, chart, resolution)
    return FinslerField(result.chart, result.resolution, result.norm_at,
                        'power_rotation')


def randers_field(Q: MatrixSpec,
                  b: ExpressionVector,
                  chart: Chart,
                  resolution: Sequence[int]) -> FinslerField:
    """sqrt(xi^T Q(x) xi) + b(x)^T xi"""

    def norm_at(point: np.ndarray) -> MinkowskiNorm:
        return RandersNorm(_matrix_at(Q, point), b.at(point))

    return FinslerField(chart, tuple(resolution), norm_at, 'randers')


def analytic_gamma_rotation(theta: Scalar, grid: Grid) -> ConnectionGrid:
    """Gamma_i = -theta_{,i} J for B = R(theta(x) - theta(p))"""

    theta = _as_expression(theta)
    env = coordinate_env(grid.points)
    gamma = np.zeros(grid.shape + (2, 2, 2))
    for axis, name in enumerate(('x1', 'x2')):
        slope = theta.derivative(name).evaluate(env)
        slope = np.broadcast_to(np.asarray(slope, dtype=float), grid.shape)
        gamma[..., axis, :, :] = -slope[..., None, None] * J
    # exact values; curvature of them is taken spectrally
    return ConnectionGrid(grid, gamma, DifferenceScheme.SPECTRAL)


NormBuilder = Callable[[np.ndarray], MinkowskiNorm]


def _constant_norm(spec: 'config.MetricSpec',
                   pointer: str,
                   chart: Chart,
                   resolution: Sequence[int]) -> MinkowskiNorm:
    origin = np.zeros(spec.dim)
    return _norm_builder(spec, pointer, chart, resolution)(origin)


def _norm_builder(spec: 'config.MetricSpec',
                  pointer: str,
                  chart: Chart,
                  resolution: Sequence[int]) -> NormBuilder:
    family = spec.family

    if family == 'euclidean':
        return lambda x: EuclideanNorm(_matrix_at(spec.matrix('Q'), x))

    if family == 'randers':
        return lambda x: RandersNorm(_matrix_at(spec.matrix('Q'), x),
                                     spec.vector('b').at(x))

    if family == 'translated_ball':
        return lambda x: TranslatedBallNorm(_matrix_at(spec.matrix('Q'), x),
                                            spec.vector('V').at(x))

    if family == 'power':
        base = PowerNorm(spec.number('p'), spec.dim)
        if spec.has('A'):
            return lambda x: PulledNorm(base, _matrix_at(spec.matrix('A'), x))
        return lambda x: base

    if family == 'pulled':
        inner = _norm_builder(spec.nested('base'), pointer + '/base', chart,
                              resolution)
        return lambda x: PulledNorm(inner(x), _matrix_at(spec.matrix('A'), x))

    if family == 'rotation':
        if spec.dim != 2:
            raise ConfigError('Rotation fields need a two-dimensional chart',
                              pointer + '/family')
        base = _constant_norm(spec.nested('base'), pointer + '/base', chart,
                              resolution)
        return rotation_field(base, spec.expression('theta'), chart,
                              resolution).norm_at

    if family == 'torus_randers':
        return torus_randers_field(spec.matrix('g'), VectorFieldSpec(spec.vector('V')),
                                   chart, resolution).norm_at

    raise ConfigError(f'Unknown metric family {family!r}', pointer + '/family')


def build_field(spec: 'config.MetricSpec',
                chart: Chart,
                resolution: Sequence[int],
                pointer: str = '/metric') -> FinslerField:
    """Finsler field of any configured family"""

    if spec.dim != chart.dim:
        raise ConfigError(f'Metric has dimension {spec.dim}, chart {chart.dim}',
                          pointer)
    return FinslerField(chart, tuple(resolution),
                        _norm_builder(spec, pointer, chart, resolution),
                        spec.family)
