import logging as log
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
import scipy.linalg

import dispatch
from chart import Grid
from errors import BLMetricError
from norms import (BallNodes, FinslerField, MinkowskiNorm, PulledNorm,
                   QuadratureParams, ball_nodes, integrate_nodes)


_log = log.getLogger('blmetric')

MAX_CONDITION = 1e12


def _default_quad(norm: MinkowskiNorm,
                  quad: Optional[QuadratureParams]) -> QuadratureParams:
    return quad if quad is not None else QuadratureParams.for_dim(norm.dim)


def _moments(norm: MinkowskiNorm,
             nodes: BallNodes,
             executor: Optional[dispatch.Executor]) -> np.ndarray:
    # columns: 1, F(y), y_i y_j
    dim = norm.dim

    def integrand(y: np.ndarray) -> np.ndarray:
        outer = (y[:, :, None] * y[:, None, :]).reshape(len(y), dim * dim)
        return np.column_stack([np.ones(len(y)), norm.values(y), outer])

    return integrate_nodes(nodes, integrand, executor)


def _dual_from_moments(moments: np.ndarray, dim: int) -> np.ndarray:
    volume = moments[0]
    assert volume > 0.0, 'unit ball of a valid norm has positive volume'
    dual = (dim + 2.0) / volume * moments[2:].reshape(dim, dim)
    return (dual + dual.T) / 2.0


def bl_dual_form(norm: MinkowskiNorm,
                 quad: Optional[QuadratureParams] = None,
                 executor: Optional[dispatch.Executor] = None) -> np.ndarray:
    """G*_ij = (n + 2) / vol(K) * integral over K of y_i y_j"""

    nodes = ball_nodes(norm, _default_quad(norm, quad))
    return _dual_from_moments(_moments(norm, nodes, executor), norm.dim)


def _invert_dual(dual: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(dual)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise BLMetricError(f'Dual form is near singular (condition {cond:.3e})')
    metric = np.linalg.inv(dual)
    return (metric + metric.T) / 2.0


def bl_metric(norm: MinkowskiNorm,
              quad: Optional[QuadratureParams] = None,
              executor: Optional[dispatch.Executor] = None) -> np.ndarray:
    return _invert_dual(bl_dual_form(norm, quad, executor))


def bl_frame(metric: np.ndarray) -> np.ndarray:
    """E = L^-T for G = L L^T; columns are G-orthonormal"""

    metric = np.asarray(metric, dtype=float)
    if metric.ndim != 2 or metric.shape[0] != metric.shape[1]:
        raise BLMetricError('Metric must be a square matrix')

    scale = max(1.0, float(np.max(np.abs(metric))))
    if np.max(np.abs(metric - metric.T)) > 1e-12 * scale:
        raise BLMetricError('Metric is not symmetric')

    try:
        lower = scipy.linalg.cholesky(metric, lower=True)
    except np.linalg.LinAlgError as err:
        raise BLMetricError('Metric is not positive definite') from err

    identity = np.eye(metric.shape[0])
    return scipy.linalg.solve_triangular(lower, identity, lower=True).T


def in_frame(norm: MinkowskiNorm, frame: np.ndarray) -> MinkowskiNorm:
    """The norm in frame coordinates, c -> F(E c)"""

    return PulledNorm(norm, np.linalg.inv(frame))


@dataclass(frozen=True, eq=False)
class NormProfile:
    """
    Everything the isometry and connection code needs to know about one norm:
    its Binet-Legendre data, the quadrature nodes of its unit ball and the
    two reference integrals in the g-volume.
    """

    norm: MinkowskiNorm
    dual: np.ndarray
    metric: np.ndarray
    frame: np.ndarray
    nodes: BallNodes
    density: float
    volume: float
    scale: float

    @property
    def dim(self) -> int:
        return self.norm.dim

    @property
    def mean_value(self) -> float:
        """Mean of F over its unit ball in the g-volume"""

        return self.scale / self.volume

    def framed(self) -> MinkowskiNorm:
        return in_frame(self.norm, self.frame)

    def to_json(self) -> Dict[str, Any]:
        return {
            'metric': self.metric.tolist(),
            'frame': self.frame.tolist(),
            'volume': self.volume,
            'scale': self.scale,
            'mean_value': self.mean_value,
        }


def profile_norm(norm: MinkowskiNorm,
                 quad: Optional[QuadratureParams] = None,
                 executor: Optional[dispatch.Executor] = None) -> NormProfile:
    nodes = ball_nodes(norm, _default_quad(norm, quad))
    moments = _moments(norm, nodes, executor)

    dual = _dual_from_moments(moments, norm.dim)
    metric = _invert_dual(dual)
    frame = bl_frame(metric)
    # dvol_g = sqrt(det G) dy
    density = float(np.sqrt(np.linalg.det(metric)))

    return NormProfile(norm=norm,
                       dual=dual,
                       metric=metric,
                       frame=frame,
                       nodes=nodes,
                       density=density,
                       volume=density * float(moments[0]),
                       scale=density * float(moments[1]))


@dataclass(frozen=True, eq=False)
class FrameField:
    """Binet-Legendre metrics and frames on every node of a grid"""

    grid: Grid
    metrics: np.ndarray
    frames: np.ndarray

    def frame_at(self, index) -> np.ndarray:
        return self.frames[index]

    def csv_rows(self):
        dim = self.grid.dim
        for index in self.grid.indices():
            point = self.grid.point(index).tolist()
            frame = self.frames[index]
            for row in range(dim):
                for col in range(dim):
                    yield point + [row, col, float(frame[row, col])]

    def summary(self) -> Dict[str, Any]:
        flat = self.frames.reshape(-1, self.grid.dim, self.grid.dim)
        conds = np.linalg.cond(flat)
        return {
            'node_count': self.grid.size,
            'max_frame_condition': float(np.max(conds)),
            'min_metric_eigenvalue': float(np.min(
                np.linalg.eigvalsh(self.metrics.reshape(flat.shape)))),
        }


def bl_frame_field(field: FinslerField,
                   grid: Optional[Grid] = None,
                   quad: Optional[QuadratureParams] = None,
                   executor: Optional[dispatch.Executor] = None) -> FrameField:
    grid = grid or field.grid()
    quad = quad if quad is not None else QuadratureParams.for_dim(field.dim)
    indices = list(grid.indices())

    def frame_at(index):
        point = grid.point(index)
        try:
            metric = bl_metric(field.norm_at(point), quad)
            return metric, bl_frame(metric)
        except BLMetricError as err:
            raise BLMetricError(str(err), point) from err

    results = dispatch.ordered_map(executor, frame_at, indices)
    _log.debug('Computed %d Binet-Legendre frames', len(results))

    dim = field.dim
    metrics = np.empty(grid.shape + (dim, dim))
    frames = np.empty(grid.shape + (dim, dim))
    for index, (metric, frame) in zip(indices, results):
        metrics[index] = metric
        frames[index] = frame

    return FrameField(grid, metrics, frames)
