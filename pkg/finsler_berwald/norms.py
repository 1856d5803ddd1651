import functools
import logging as log
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.stats
from scipy.spatial.transform import Rotation
from scipy.stats import qmc

import dispatch
from chart import Chart, Grid, Index
from errors import FieldValidationError, NormDomainError, NormValidationError


_log = log.getLogger('norms')

_FD_STEP = np.finfo(float).eps ** (1.0 / 3.0)


def _as_matrix(value: Any, name: str) -> np.ndarray:
    matrix = np.array(value, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise NormValidationError(f'{name} must be a square matrix')
    if matrix.shape[0] < 2:
        raise NormValidationError(f'{name} must have dimension >= 2')
    if not np.all(np.isfinite(matrix)):
        raise NormValidationError(f'{name} has non-finite entries')
    matrix.setflags(write=False)
    return matrix


def _as_spd(value: Any, name: str) -> np.ndarray:
    matrix = _as_matrix(value, name)
    scale = max(1.0, float(np.max(np.abs(matrix))))
    if np.max(np.abs(matrix - matrix.T)) > 1e-12 * scale:
        raise NormValidationError(f'{name} is not symmetric')
    try:
        scipy.linalg.cholesky(matrix, lower=True)
    except np.linalg.LinAlgError as err:
        raise NormValidationError(f'{name} is not positive definite') from err
    return matrix


def _as_vector(value: Any, dim: int, name: str) -> np.ndarray:
    vector = np.array(value, dtype=float).reshape(-1)
    if vector.shape != (dim,):
        raise NormValidationError(f'{name} must have {dim} components')
    if not np.all(np.isfinite(vector)):
        raise NormValidationError(f'{name} has non-finite entries')
    vector.setflags(write=False)
    return vector


def _quadratic(xi: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return np.einsum('...i,ij,...j->...', xi, Q, xi)


class MinkowskiNorm:
    """Positively homogeneous, subadditive, positive function on R^n"""

    dim: int
    family = 'abstract'

    def values(self, xi: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradients(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        flat = xi.reshape(-1, self.dim)
        grads = np.array([numerical_gradient(self, v) for v in flat])
        return grads.reshape(xi.shape)

    def is_admissible(self) -> bool:
        return True

    def describe(self) -> Dict[str, Any]:
        return {'family': self.family, 'dim': self.dim}

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        return self.values(xi)


@dataclass(frozen=True, eq=False)
class EuclideanNorm(MinkowskiNorm):
    Q: np.ndarray

    family = 'euclidean'

    def __post_init__(self) -> None:
        object.__setattr__(self, 'Q', _as_spd(self.Q, 'Q'))

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.Q.shape[0]

    def values(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        return np.sqrt(np.maximum(_quadratic(xi, self.Q), 0.0))

    def gradients(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        return (xi @ self.Q) / self.values(xi)[..., None]

    def describe(self) -> Dict[str, Any]:
        return {'family': self.family, 'Q': self.Q.tolist()}


@dataclass(frozen=True, eq=False)
class RandersNorm(MinkowskiNorm):
    """sqrt(xi^T Q xi) + b^T xi; admissible iff b^T Q^-1 b < 1"""

    Q: np.ndarray
    b: np.ndarray

    family = 'randers'

    def __post_init__(self) -> None:
        Q = _as_spd(self.Q, 'Q')
        object.__setattr__(self, 'Q', Q)
        object.__setattr__(self, 'b', _as_vector(self.b, Q.shape[0], 'b'))

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.Q.shape[0]

    @property
    def b_norm_squared(self) -> float:
        return float(self.b @ np.linalg.solve(self.Q, self.b))

    def values(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        alpha = np.sqrt(np.maximum(_quadratic(xi, self.Q), 0.0))
        return alpha + xi @ self.b

    def gradients(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        alpha = np.sqrt(_quadratic(xi, self.Q))
        return (xi @ self.Q) / alpha[..., None] + self.b

    def is_admissible(self) -> bool:
        return self.b_norm_squared < 1.0

    def describe(self) -> Dict[str, Any]:
        return {'family': self.family, 'Q': self.Q.tolist(),
                'b': self.b.tolist()}


@dataclass(frozen=True, eq=False)
class TranslatedBallNorm(MinkowskiNorm):
    """
    Minkowski functional of the Q-unit ball translated by V, i.e. the
    positive root F of |xi - F V|_Q = F.
    """

    Q: np.ndarray
    V: np.ndarray

    family = 'translated_ball'

    def __post_init__(self) -> None:
        Q = _as_spd(self.Q, 'Q')
        V = _as_vector(self.V, Q.shape[0], 'V')
        if float(V @ Q @ V) >= 1.0:
            raise NormValidationError('Translation must have Q-length < 1')
        object.__setattr__(self, 'Q', Q)
        object.__setattr__(self, 'V', V)

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.Q.shape[0]

    @property
    def _shrink(self) -> float:
        return 1.0 - float(self.V @ self.Q @ self.V)

    def values(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        lam = self._shrink
        s = xi @ (self.Q @ self.V)
        q = np.maximum(_quadratic(xi, self.Q), 0.0)
        return (-s + np.sqrt(s * s + lam * q)) / lam

    def gradients(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        lam = self._shrink
        QV = self.Q @ self.V
        s = xi @ QV
        r = np.sqrt(s * s + lam * _quadratic(xi, self.Q))
        inner = (s[..., None] * QV + lam * (xi @ self.Q)) / r[..., None]
        return (inner - QV) / lam

    def describe(self) -> Dict[str, Any]:
        return {'family': self.family, 'Q': self.Q.tolist(),
                'V': self.V.tolist()}


@dataclass(frozen=True, eq=False)
class PowerNorm(MinkowskiNorm):
    """(sum |xi_i|^p)^(1/p) for p >= 2"""

    p: float
    size: int

    family = 'power'

    def __post_init__(self) -> None:
        if not self.p >= 2.0:
            raise NormValidationError('Power norm needs p >= 2')
        if self.size < 2:
            raise NormValidationError('Power norm needs dimension >= 2')

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.size

    def values(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        scale = np.max(np.abs(xi), axis=-1)
        safe = np.where(scale > 0.0, scale, 1.0)
        ratio = np.sum((np.abs(xi) / safe[..., None]) ** self.p, axis=-1)
        return np.where(scale > 0.0, scale * ratio ** (1.0 / self.p), 0.0)

    def gradients(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        F = self.values(xi)[..., None]
        return np.sign(xi) * (np.abs(xi) / F) ** (self.p - 1.0)

    def describe(self) -> Dict[str, Any]:
        return {'family': self.family, 'p': self.p, 'dim': self.size}


@dataclass(frozen=True, eq=False)
class PulledNorm(MinkowskiNorm):
    """base(A^-1 xi): the image of base under the linear map A"""

    base: MinkowskiNorm
    A: np.ndarray
    A_inv: np.ndarray = field(init=False, repr=False)

    family = 'pulled'

    def __post_init__(self) -> None:
        A = _as_matrix(self.A, 'A')
        if A.shape[0] != self.base.dim:
            raise NormValidationError('A does not match the base dimension')
        if np.linalg.cond(A) > 1e12:
            raise NormValidationError('A is not invertible')
        A_inv = np.linalg.inv(A)
        A_inv.setflags(write=False)
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'A_inv', A_inv)

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.base.dim

    def values(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        return self.base.values(xi @ self.A_inv.T)

    def gradients(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        return self.base.gradients(xi @ self.A_inv.T) @ self.A_inv

    def is_admissible(self) -> bool:
        return self.base.is_admissible()

    def describe(self) -> Dict[str, Any]:
        return {'family': self.family, 'A': self.A.tolist(),
                'base': self.base.describe()}


def _checked_vector(norm: MinkowskiNorm, xi: Sequence[float]) -> np.ndarray:
    vector = np.asarray(xi, dtype=float)
    if vector.shape != (norm.dim,):
        raise NormDomainError(f'Expected a vector of dimension {norm.dim}')
    if not np.all(np.isfinite(vector)):
        raise NormDomainError('Vector has non-finite components')
    return vector


def eval_norm(norm: MinkowskiNorm, xi: Sequence[float]) -> float:
    return float(norm.values(_checked_vector(norm, xi)))


def grad_norm(norm: MinkowskiNorm, xi: Sequence[float]) -> np.ndarray:
    vector = _checked_vector(norm, xi)
    if not np.any(vector):
        raise NormDomainError('Norm is not differentiable at the origin')
    return np.asarray(norm.gradients(vector), dtype=float)


def numerical_gradient(norm: MinkowskiNorm, xi: Sequence[float]) -> np.ndarray:
    vector = np.asarray(xi, dtype=float)
    length = float(np.linalg.norm(vector))
    if length == 0.0:
        raise NormDomainError('Norm is not differentiable at the origin')

    step = _FD_STEP * length
    shifts = step * np.eye(vector.size)
    forward = norm.values(vector + shifts)
    backward = norm.values(vector - shifts)
    return (forward - backward) / (2.0 * step)


@dataclass
class ValidationReport:
    """Worst violation of each Minkowski norm condition on random samples"""

    sample_count: int
    tol: float
    worst: Dict[str, float]
    admissible: bool
    valid: bool

    def to_json(self) -> Dict[str, Any]:
        return {
            'sample_count': self.sample_count,
            'tol': self.tol,
            'worst': dict(self.worst),
            'admissible': self.admissible,
            'valid': self.valid,
        }


HOMOGENEITY_FACTORS = (0.5, 2.0, 7.0)


def unit_samples(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    samples = rng.standard_normal((count, dim))
    return samples / np.linalg.norm(samples, axis=1, keepdims=True)


def validate_norm(norm: MinkowskiNorm,
                  sample_count: int = 1000,
                  seed: int = 0,
                  tol: float = 1e-9) -> ValidationReport:
    if sample_count < 1:
        raise ValueError('sample_count must be positive')

    rng = np.random.default_rng(seed)
    axes = np.vstack([np.eye(norm.dim), -np.eye(norm.dim)])
    xi = np.vstack([unit_samples(rng, sample_count, norm.dim), axes])
    eta = np.vstack([unit_samples(rng, sample_count, norm.dim), axes[::-1]])

    with np.errstate(invalid='ignore'):
        f_xi = norm.values(xi)
        f_eta = norm.values(eta)

        homogeneity = max(
            float(np.max(np.abs(norm.values(lam * xi) - lam * f_xi)) / lam)
            for lam in HOMOGENEITY_FACTORS)
        triangle = float(np.max(np.maximum(norm.values(xi + eta)
                                           - f_xi - f_eta, 0.0)))
        positivity = float(np.max(np.maximum(-f_xi, 0.0)))

    worst = {
        'homogeneity': homogeneity,
        'triangle': triangle,
        'positivity': positivity,
    }
    for key, value in worst.items():
        if not np.isfinite(value):
            worst[key] = math.inf

    admissible = norm.is_admissible()
    valid = admissible and all(v <= tol for v in worst.values())

    return ValidationReport(sample_count, tol, worst, admissible, valid)


@dataclass(frozen=True)
class QuadratureParams:
    """Direction count, Gauss-Legendre radial nodes and direction seed"""

    directions: int = 4096
    radial_nodes: int = 16
    seed: int = 0
    shard_directions: int = 1024

    def __post_init__(self) -> None:
        if self.directions < 1 or self.radial_nodes < 1:
            raise ValueError('Quadrature needs at least one direction and node')
        if self.shard_directions < 1:
            raise ValueError('Quadrature shards must hold at least one direction')

    @classmethod
    def for_dim(cls, dim: int, seed: int = 0) -> 'QuadratureParams':
        return cls(directions=4096 if dim == 2 else 16384, seed=seed)


def sphere_area(dim: int) -> float:
    return 2.0 * math.pi ** (dim / 2.0) / math.gamma(dim / 2.0)


@functools.lru_cache(maxsize=32)
def sphere_directions(dim: int,
                      count: int,
                      seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Seeded direction set on the Euclidean unit sphere with weights summing to
    the sphere area.

    Circle: equispaced angles with a seeded phase. Two-sphere: Gauss-Legendre
    in height times equispaced azimuth, rotated by a seeded rotation. Higher
    dimensions: scrambled Halton points pushed through the Gaussian quantile.
    """
    rng = np.random.default_rng(seed)

    if dim == 2:
        phase = rng.uniform(0.0, 2.0 * math.pi / count)
        angles = phase + 2.0 * math.pi * np.arange(count) / count
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        weights = np.full(count, 2.0 * math.pi / count)
    elif dim == 3:
        n_height = max(1, int(round(math.sqrt(count / 2.0))))
        n_azimuth = max(1, count // n_height)
        heights, h_weights = np.polynomial.legendre.leggauss(n_height)
        azimuth = 2.0 * math.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
        z, phi = np.meshgrid(heights, azimuth, indexing='ij')
        ring = np.sqrt(1.0 - z * z)
        dirs = np.stack([ring * np.cos(phi), ring * np.sin(phi), z],
                        axis=-1).reshape(-1, 3)
        weights = np.repeat(h_weights, n_azimuth) * (2.0 * math.pi / n_azimuth)
        rotation = Rotation.random(random_state=rng.integers(2 ** 32))
        dirs = rotation.apply(dirs)
    else:
        sampler = qmc.Halton(d=dim, scramble=True, seed=rng)
        cube = np.clip(sampler.random(count), 1e-12, 1.0 - 1e-12)
        gauss = scipy.stats.norm.ppf(cube)
        dirs = gauss / np.linalg.norm(gauss, axis=1, keepdims=True)
        weights = np.full(count, sphere_area(dim) / count)

    dirs.setflags(write=False)
    weights.setflags(write=False)
    return dirs, weights


@dataclass(frozen=True, eq=False)
class BallNodes:
    """Quadrature nodes and weights on a unit ball, grouped by direction"""

    points: np.ndarray
    weights: np.ndarray
    shards: Tuple[slice, ...]

    @property
    def count(self) -> int:
        return self.weights.size


def ball_nodes(norm: MinkowskiNorm, quad: QuadratureParams) -> BallNodes:
    """
    Radial decomposition of K = {F <= 1}: every direction u carries the
    segment [0, 1/F(u)] sampled at Gauss-Legendre nodes with the r^(n-1)
    Jacobian folded into the weights.
    """
    dim = norm.dim
    dirs, dir_weights = sphere_directions(dim, quad.directions, quad.seed)

    radial = norm.values(dirs)
    if not np.all(np.isfinite(radial)) or np.any(radial <= 0.0):
        raise NormValidationError('Norm is not positive on the unit sphere')
    reach = 1.0 / radial

    nodes, node_weights = np.polynomial.legendre.leggauss(quad.radial_nodes)
    r = reach[:, None] * (nodes[None, :] + 1.0) / 2.0
    weights = (dir_weights[:, None] * (reach[:, None] / 2.0)
               * node_weights[None, :] * r ** (dim - 1))
    points = r[..., None] * dirs[:, None, :]

    per_dir = quad.radial_nodes
    step = quad.shard_directions
    shards = tuple(slice(start * per_dir, min(start + step, len(dirs)) * per_dir)
                   for start in range(0, len(dirs), step))

    return BallNodes(points.reshape(-1, dim), weights.reshape(-1), shards)


Integrand = Callable[[np.ndarray], np.ndarray]


def integrate_nodes(nodes: BallNodes,
                    f: Integrand,
                    executor: Optional[dispatch.Executor] = None) -> np.ndarray:
    def shard_sum(shard: slice) -> np.ndarray:
        values = np.asarray(f(nodes.points[shard]), dtype=float)
        return np.tensordot(nodes.weights[shard], values, axes=(0, 0))

    partials = dispatch.ordered_map(executor, shard_sum, nodes.shards)

    total = partials[0]
    for part in partials[1:]:
        total = total + part
    return total


def ball_quadrature(norm: MinkowskiNorm,
                    f: Integrand,
                    quad: QuadratureParams = QuadratureParams(),
                    executor: Optional[dispatch.Executor] = None) -> np.ndarray:
    """Integral of f over the unit ball of norm; f maps (M, n) to (M, ...)"""

    return integrate_nodes(ball_nodes(norm, quad), f, executor)


NormMap = Callable[[np.ndarray], MinkowskiNorm]


@dataclass
class FieldReport:
    """Validation summary of a Finsler field over its grid"""

    node_count: int
    worst: Dict[str, float]
    lipschitz: float
    lipschitz_point: Tuple[float, ...]

    def to_json(self) -> Dict[str, Any]:
        return {
            'node_count': self.node_count,
            'worst': dict(self.worst),
            'lipschitz': self.lipschitz,
            'lipschitz_point': list(self.lipschitz_point),
        }


@dataclass(frozen=True, eq=False)
class FinslerField:
    """Chart, grid resolution and a Minkowski norm at every chart point"""

    chart: Chart
    resolution: Tuple[int, ...]
    norm_at: NormMap
    name: str = 'field'

    @property
    def dim(self) -> int:
        return self.chart.dim

    def grid(self) -> Grid:
        return self.chart.grid(self.resolution)

    def norm_at_index(self, grid: Grid, index: Index) -> MinkowskiNorm:
        return self.norm_at(grid.point(index))

    def validate(self,
                 grid: Optional[Grid] = None,
                 sample_count: int = 200,
                 seed: int = 0,
                 tol: float = 1e-9,
                 lipschitz_budget: Optional[float] = None,
                 executor: Optional[dispatch.Executor] = None) -> FieldReport:
        grid = grid or self.grid()
        indices = list(grid.indices())

        def check(index: Index) -> ValidationReport:
            point = grid.point(index)
            try:
                norm = self.norm_at(point)
            except NormValidationError as err:
                raise FieldValidationError(str(err), point) from err
            if norm.dim != self.dim:
                raise FieldValidationError('Norm dimension differs from chart',
                                           point)
            return validate_norm(norm, sample_count, seed, tol)

        reports = dispatch.ordered_map(executor, check, indices)

        worst: Dict[str, float] = {}
        for index, report in zip(indices, reports):
            if not report.valid:
                failed = [k for k, v in report.worst.items() if v > tol]
                reason = ', '.join(failed) if failed else 'inadmissible'
                raise FieldValidationError(f'Invalid Minkowski norm ({reason})',
                                           grid.point(index))
            for key, value in report.worst.items():
                worst[key] = max(worst.get(key, 0.0), value)

        lipschitz, where = self._lipschitz(grid, seed)
        _log.debug('Field %s: Lipschitz estimate %.3e', self.name, lipschitz)
        if lipschitz_budget is not None and lipschitz > lipschitz_budget:
            raise FieldValidationError(
                f'Coefficient variation {lipschitz:.3e} exceeds the '
                f'Lipschitz budget {lipschitz_budget:.3e}', where)

        return FieldReport(len(indices), worst, lipschitz, tuple(where.tolist()))

    def _lipschitz(self, grid: Grid, seed: int) -> Tuple[float, np.ndarray]:
        rng = np.random.default_rng(seed)
        dirs = unit_samples(rng, 64, self.dim)

        values = np.empty(grid.shape + (len(dirs),))
        for index in grid.indices():
            values[index] = self.norm_at(grid.point(index)).values(dirs)

        ratio = np.zeros(grid.shape)
        for axis in range(grid.dim):
            if grid.chart.periodic:
                diff = np.roll(values, -1, axis=axis) - values
            else:
                diff = np.diff(values, axis=axis, append=np.take(
                    values, [-1], axis=axis))
            rel = np.max(np.abs(diff) / values, axis=-1) / grid.spacing[axis]
            ratio = np.maximum(ratio, rel)

        worst = np.unravel_index(int(np.argmax(ratio)), grid.shape)
        return float(ratio[worst]), grid.point(tuple(int(i) for i in worst))
