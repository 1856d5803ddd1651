import logging as log
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

import dispatch
from blmetric import FrameField, NormProfile, bl_frame_field, profile_norm
from chart import (Chart, DifferenceScheme, Grid, Index, Interpolation,
                   derivative, interpolate)
from errors import CertificationError, NewtonConvergenceError
from expression import Expression, parse_expression
from isometry import (ACCEPT_TOL, RANK_TOL, AnchorSet, IsotropyBasis,
                      accept_threshold, anchor_vectors, generator,
                      isometry_defect, isotropy_algebra)
from norms import FinslerField, MinkowskiNorm, QuadratureParams


_log = log.getLogger('connection')

MAX_JACOBIAN_CONDITION = 1e12
UNTWISTED_TOL = 1e-8


@dataclass(frozen=True)
class NewtonParams:
    """Newton iteration controls for the anchor equations"""

    tol: float = 1e-10
    max_iters: int = 50
    seed: int = 0
    rank_tol: float = RANK_TOL


@dataclass(frozen=True, eq=False)
class IsomorphismField:
    """Isometries B(x): T_pM -> T_xM on every grid node"""

    grid: Grid
    start: Index
    matrices: np.ndarray
    rotations: np.ndarray
    defects: np.ndarray
    threshold: float
    anchors: AnchorSet
    targets: np.ndarray
    base_frame: np.ndarray
    isotropy: IsotropyBasis
    decks: Tuple[Optional[np.ndarray], ...]
    deck_spread: Tuple[float, ...]
    max_iterations: int
    ill_conditioned: int

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def basepoint(self) -> np.ndarray:
        return self.grid.point(self.start)

    def anchor_vectors(self) -> np.ndarray:
        """Anchors in chart coordinates at the basepoint"""

        return self.anchors.vectors @ self.base_frame.T

    def anchor_residual(self, finsler: FinslerField) -> float:
        anchors = self.anchor_vectors()
        if not len(anchors):
            return 0.0
        worst = 0.0
        for index in self.grid.indices():
            norm = finsler.norm_at(self.grid.point(index))
            values = norm.values(anchors @ self.matrices[index].T)
            worst = max(worst, float(np.max(np.abs(values - self.targets))))
        return worst

    def summary(self) -> Dict[str, Any]:
        return {
            'basepoint': self.basepoint.tolist(),
            'node_count': self.grid.size,
            'isotropy_dim': self.isotropy.dim,
            'm': self.isotropy.m,
            'anchors': self.anchor_vectors().tolist(),
            'max_defect': float(np.max(self.defects)),
            'threshold': self.threshold,
            'max_newton_iterations': self.max_iterations,
            'ill_conditioned_solves': self.ill_conditioned,
            'decks': [None if d is None else d.tolist() for d in self.decks],
            'deck_spread': list(self.deck_spread),
        }


@dataclass
class _PointSolution:
    rotation: np.ndarray
    matrix: np.ndarray
    iterations: int
    ill_conditioned: bool


class FrameFieldSolver:
    """
    Breadth-first Newton continuation of the anchor equations
    F(x, E_x R c_j) = F(p, E_p c_j). Each node solves for a local increment,
    R = R_neighbor exp(sum a_k W_k) from a = 0, with W_k spanning the
    complement of the isotropy algebra at p.
    """

    def __init__(self,
                 finsler: FinslerField,
                 grid: Grid,
                 start: Index,
                 profile: NormProfile,
                 frames: FrameField,
                 isotropy: IsotropyBasis,
                 anchors: AnchorSet,
                 newton: NewtonParams,
                 accept_tol: float,
                 executor: Optional[dispatch.Executor]) -> None:
        self._field = finsler
        self._grid = grid
        self._start = start
        self._profile = profile
        self._frames = frames
        self._isotropy = isotropy
        self._anchors = anchors
        self._newton = newton
        self._executor = executor
        self._threshold = accept_threshold(profile, accept_tol)
        self._targets = profile.framed().values(anchors.vectors)
        self._base_inv = np.linalg.inv(profile.frame)
        self._log = log.getLogger('FrameFieldSolver')

    def _equations(self,
                   norm: MinkowskiNorm,
                   frame: np.ndarray,
                   neighbor: np.ndarray,
                   coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        gens = self._isotropy.complement
        anchors = self._anchors.vectors

        skew = generator(coords, gens)
        rot = neighbor @ scipy.linalg.expm(skew)
        moved = anchors @ (frame @ rot).T
        residual = norm.values(moved) - self._targets
        grads = norm.gradients(moved)

        jac = np.empty((len(anchors), len(gens)))
        for k, gen in enumerate(gens):
            d_rot = neighbor @ scipy.linalg.expm_frechet(skew, gen, compute_expm=False)
            jac[:, k] = np.sum(grads * (anchors @ (frame @ d_rot).T), axis=1)

        return residual, jac, rot

    def _newton_solve(self, index: Index, neighbor: np.ndarray) -> _PointSolution:
        point = self._grid.point(index)
        norm = self._field.norm_at(point)
        frame = self._frames.frames[index]

        if self._isotropy.m == 0:
            return _PointSolution(neighbor, frame @ neighbor @ self._base_inv, 0, False)

        coords = np.zeros(self._isotropy.m)
        flagged = False
        for iteration in range(1, self._newton.max_iters + 1):
            residual, jac, rot = self._equations(norm, frame, neighbor, coords)
            if not (np.all(np.isfinite(residual)) and np.all(np.isfinite(jac))):
                raise NewtonConvergenceError(
                    f'Anchor equations are not finite after {iteration - 1} '
                    f'iterations', point)
            if np.max(np.abs(residual)) <= self._newton.tol:
                break

            cond = np.linalg.cond(jac)
            if not flagged and cond > MAX_JACOBIAN_CONDITION:
                flagged = True
                self._log.warning('Ill-conditioned anchor Jacobian (condition '
                                  '%.3e) at %s', cond, point.tolist())
            try:
                coords = coords - np.linalg.solve(jac, residual)
            except np.linalg.LinAlgError as err:
                raise NewtonConvergenceError('Singular anchor Jacobian',
                                             point) from err
        else:
            raise NewtonConvergenceError(
                f'No convergence in {self._newton.max_iters} iterations '
                f'(residual {np.max(np.abs(residual)):.3e})', point)

        # one more step takes the quadratically converging iterate to roundoff
        refined = coords - np.linalg.lstsq(jac, residual, rcond=None)[0]
        refined_residual, _, refined_rot = self._equations(norm, frame, neighbor,
                                                           refined)
        if np.max(np.abs(refined_residual)) <= np.max(np.abs(residual)):
            rot = refined_rot

        matrix = frame @ rot @ self._base_inv
        return _PointSolution(rot, matrix, iteration, flagged)

    def _certify(self, index: Index, matrix: np.ndarray) -> float:
        point = self._grid.point(index)
        defect = isometry_defect(self._profile.norm, self._field.norm_at(point),
                                 matrix, profile=self._profile)
        if defect > self._threshold:
            raise CertificationError('Continuation left the isometry component',
                                     point, defect, self._threshold)
        return defect

    def _solve_certified(self,
                         job: Tuple[Index, np.ndarray]) -> Tuple[_PointSolution, float]:
        index, neighbor = job
        solution = self._newton_solve(index, neighbor)
        return solution, self._certify(index, solution.matrix)

    def _measure_decks(self,
                       rotations: np.ndarray,
                       matrices: np.ndarray) -> Tuple[Tuple[Optional[np.ndarray], ...],
                                                      Tuple[float, ...]]:
        if not self._grid.chart.periodic:
            return (None,) * self._grid.dim, (0.0,) * self._grid.dim

        decks: List[Optional[np.ndarray]] = []
        spreads: List[float] = []
        for axis in range(self._grid.dim):
            pairs = self._grid.cut_crossings(self._start, axis)
            jobs = [(across, rotations[inner]) for inner, across in pairs]
            continued = dispatch.ordered_map(self._executor,
                                             self._solve_certified, jobs)

            measured = [np.linalg.solve(matrices[across], solution.matrix)
                        for (_, across), (solution, _) in zip(pairs, continued)]

            line = [k for k, (inner, _) in enumerate(pairs)
                    if all(inner[a] == self._start[a]
                           for a in range(self._grid.dim) if a != axis)]
            deck = measured[line[0]]
            spread = max(float(np.max(np.abs(d - deck))) for d in measured)
            if spread > 1e-6:
                self._log.warning('Deck matrices of axis %d vary by %.3e',
                                  axis + 1, spread)

            if np.max(np.abs(deck - np.eye(self._grid.dim))) <= UNTWISTED_TOL:
                decks.append(None)
            else:
                self._log.info('Axis %d is twisted by deck %s', axis + 1,
                               np.round(deck, 12).tolist())
                decks.append(deck)
            spreads.append(spread)

        return tuple(decks), tuple(spreads)

    def run(self) -> IsomorphismField:
        grid = self._grid
        dim = grid.dim

        matrices = np.empty(grid.shape + (dim, dim))
        rotations = np.empty(grid.shape + (dim, dim))
        defects = np.empty(grid.shape)
        iterations = 0
        flagged = 0

        rings = grid.sweep_rings(self._start)
        self._log.info('Sweeping %d nodes in %d rings from %s', grid.size,
                       len(rings), grid.point(self._start).tolist())

        matrices[self._start] = np.eye(dim)
        rotations[self._start] = np.eye(dim)
        defects[self._start] = self._certify(self._start, np.eye(dim))

        for ring in rings[1:]:
            jobs = [(node, rotations[pred]) for node, pred in ring]
            solved = dispatch.ordered_map(self._executor,
                                          self._solve_certified, jobs)
            for (node, _), (solution, defect) in zip(ring, solved):
                matrices[node] = solution.matrix
                rotations[node] = solution.rotation
                defects[node] = defect
                iterations = max(iterations, solution.iterations)
                flagged += int(solution.ill_conditioned)

        decks, spreads = self._measure_decks(rotations, matrices)
        self._log.info('Certified %d nodes, max defect %.3e (threshold %.3e)',
                       grid.size, float(np.max(defects)), self._threshold)

        return IsomorphismField(grid=grid,
                                start=self._start,
                                matrices=matrices,
                                rotations=rotations,
                                defects=defects,
                                threshold=self._threshold,
                                anchors=self._anchors,
                                targets=self._targets,
                                base_frame=self._profile.frame,
                                isotropy=self._isotropy,
                                decks=decks,
                                deck_spread=spreads,
                                max_iterations=iterations,
                                ill_conditioned=flagged)


def solve_frame_field(finsler: FinslerField,
                      grid: Optional[Grid] = None,
                      basepoint: Optional[Sequence[float]] = None,
                      anchors: Optional[AnchorSet] = None,
                      isotropy: Optional[IsotropyBasis] = None,
                      frames: Optional[FrameField] = None,
                      newton: NewtonParams = NewtonParams(),
                      accept_tol: float = ACCEPT_TOL,
                      quad: Optional[QuadratureParams] = None,
                      executor: Optional[dispatch.Executor] = None) -> IsomorphismField:
    grid = grid or finsler.grid()
    quad = quad if quad is not None else QuadratureParams.for_dim(finsler.dim)
    if basepoint is None:
        basepoint = grid.point((0,) * grid.dim)
    start = grid.nearest_index(basepoint)
    if not grid.contains_node(basepoint):
        _log.warning('Basepoint snapped to grid node %s',
                     grid.point(start).tolist())

    profile = profile_norm(finsler.norm_at(grid.point(start)), quad, executor)
    framed = profile.framed()
    if isotropy is None:
        isotropy = isotropy_algebra(framed, rank_tol=newton.rank_tol,
                                    seed=newton.seed)
    if anchors is None:
        anchors = anchor_vectors(framed, isotropy, newton.seed)
    if frames is None:
        frames = bl_frame_field(finsler, grid, quad, executor)

    solver = FrameFieldSolver(finsler, grid, start, profile, frames, isotropy,
                              anchors, newton, accept_tol, executor)
    return solver.run()


@dataclass(frozen=True, eq=False)
class ConnectionGrid:
    """Christoffel matrices on grid nodes; gamma[..., i, j, s] is Gamma^j_{s i}"""

    grid: Grid
    gamma: np.ndarray
    scheme: DifferenceScheme = DifferenceScheme.CENTRAL2

    @property
    def dim(self) -> int:
        return self.grid.dim

    def gamma_at(self,
                 point: np.ndarray,
                 method: Interpolation = Interpolation.LINEAR) -> np.ndarray:
        return interpolate(self.gamma, self.grid, point, method)

    def perturbed(self, i: int, j: int, s: int, delta: float) -> 'ConnectionGrid':
        gamma = self.gamma.copy()
        gamma[..., i, j, s] += delta
        return ConnectionGrid(self.grid, gamma, self.scheme)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.gamma)))

    def csv_header(self) -> List[str]:
        coords = [f'x{k + 1}' for k in range(self.dim)]
        return coords + ['i', 'j', 's', 'gamma']

    def csv_rows(self) -> Iterator[List[Any]]:
        dim = self.dim
        for index in self.grid.indices():
            point = self.grid.point(index).tolist()
            block = self.gamma[index]
            for i in range(dim):
                for j in range(dim):
                    for s in range(dim):
                        yield point + [i + 1, j + 1, s + 1, float(block[i, j, s])]

    def metadata(self) -> Dict[str, Any]:
        chart = self.grid.chart
        return {
            'chart': chart.kind.name.lower(),
            'lower': list(chart.lower),
            'upper': list(chart.upper),
            'shape': list(self.grid.shape),
            'spacing': list(self.grid.spacing),
            'scheme': self.scheme.name.lower(),
            'layout': 'gamma[i, j, s] = Gamma^j_{s i}, indices 1-based',
        }


def _axis_derivative(values: np.ndarray,
                     isofield: IsomorphismField,
                     axis: int,
                     scheme: DifferenceScheme) -> np.ndarray:
    return derivative(values, isofield.grid, axis, scheme,
                      start=isofield.start, deck=isofield.decks[axis])


def christoffels(isofield: IsomorphismField,
                 scheme: DifferenceScheme = DifferenceScheme.CENTRAL2) -> ConnectionGrid:
    matrices = isofield.matrices
    inverse = np.linalg.inv(matrices)
    assert np.all(np.isfinite(inverse)), 'certified isomorphisms are invertible'

    blocks = [-_axis_derivative(matrices, isofield, axis, scheme) @ inverse
              for axis in range(isofield.dim)]
    return ConnectionGrid(isofield.grid, np.stack(blocks, axis=-3), scheme)


def discrete_parallelism_residual(isofield: IsomorphismField,
                                  conn: ConnectionGrid) -> float:
    """max |d_i B + Gamma_i B|: the discrete form of nabla b_j = 0"""

    worst = 0.0
    for axis in range(isofield.dim):
        d_b = _axis_derivative(isofield.matrices, isofield, axis, conn.scheme)
        mismatch = d_b + conn.gamma[..., axis, :, :] @ isofield.matrices
        worst = max(worst, float(np.max(np.abs(mismatch))))
    return worst


class Curve:
    """Parameterized curve on [0, 1]"""

    def position(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def pieces(self) -> List[Tuple[float, float]]:
        """Parameter intervals on which the curve is smooth"""

        return [(0.0, 1.0)]

    def endpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.position(0.0), self.position(1.0)


@dataclass(frozen=True, eq=False)
class SegmentCurve(Curve):
    """Polyline through points, each segment taking an equal parameter share"""

    points: np.ndarray

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=float)
        if points.ndim != 2 or len(points) < 2:
            raise ValueError('Polyline needs at least two points')
        object.__setattr__(self, 'points', points)

    def _segment(self, t: float) -> Tuple[int, float]:
        count = len(self.points) - 1
        seg = min(max(int(math.floor(t * count)), 0), count - 1)
        return seg, t * count - seg

    def position(self, t: float) -> np.ndarray:
        seg, local = self._segment(t)
        a, b = self.points[seg], self.points[seg + 1]
        return a + local * (b - a)

    def velocity(self, t: float) -> np.ndarray:
        seg, _ = self._segment(t)
        return (len(self.points) - 1) * (self.points[seg + 1] - self.points[seg])

    def pieces(self) -> List[Tuple[float, float]]:
        count = len(self.points) - 1
        return [(k / count, (k + 1) / count) for k in range(count)]

    def to_json(self) -> Dict[str, Any]:
        return {'points': self.points.tolist()}


@dataclass(frozen=True, eq=False)
class ExpressionCurve(Curve):
    """Curve t -> (c_1(t), ..., c_n(t)) given by expressions in t"""

    components: Tuple[Expression, ...]
    velocities: Tuple[Expression, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'velocities',
                           tuple(c.derivative('t') for c in self.components))

    @classmethod
    def parse(cls, components: Sequence[str]) -> 'ExpressionCurve':
        return cls(tuple(parse_expression(c, ['t']) for c in components))

    def position(self, t: float) -> np.ndarray:
        return np.array([float(c.evaluate({'t': t})) for c in self.components])

    def velocity(self, t: float) -> np.ndarray:
        return np.array([float(c.evaluate({'t': t})) for c in self.velocities])

    def to_json(self) -> Dict[str, Any]:
        return {'components': [str(c) for c in self.components]}


def random_curves(chart: Chart,
                  count: int,
                  seed: int = 0,
                  segments: int = 3,
                  loops: bool = False) -> List[SegmentCurve]:
    """Seeded polylines; on a torus they may wind around the periods"""

    rng = np.random.default_rng(seed)
    lower = np.asarray(chart.lower)
    extent = chart.extent

    curves = []
    for _ in range(count):
        if chart.periodic:
            steps = rng.uniform(-0.5, 0.5, (segments, chart.dim)) * extent
            start = lower + rng.uniform(0.0, 1.0, chart.dim) * extent
            points = np.vstack([start, start + np.cumsum(steps, axis=0)])
        else:
            points = lower + rng.uniform(0.0, 1.0, (segments + 1, chart.dim)) * extent
        if loops:
            points = np.vstack([points, points[:1]])
        curves.append(SegmentCurve(points))
    return curves


def _transport_rate(conn: ConnectionGrid,
                    curve: Curve,
                    t: float,
                    method: Interpolation) -> np.ndarray:
    gamma = conn.gamma_at(curve.position(t), method)
    return -np.einsum('i,ijs->js', curve.velocity(t), gamma)


def transport_matrix(conn: ConnectionGrid,
                     curve: Curve,
                     steps: int = 1000,
                     method: Interpolation = Interpolation.LINEAR) -> np.ndarray:
    """
    RK4 solution at t = 1 of dP/dt = -(sum_i gamma'^i Gamma_i) P, P(0) = I.
    Steps are shared out over the smooth pieces of the curve.
    """
    if steps < 1:
        raise ValueError('Transport needs at least one step')

    transport = np.eye(conn.dim)
    for t0, t1 in curve.pieces():
        count = max(1, int(round(steps * (t1 - t0))))
        h = (t1 - t0) / count
        # evaluate strictly inside the piece so polyline kinks are not sampled
        eps = 1e-12 * (t1 - t0)
        for k in range(count):
            t = t0 + k * h
            ta = max(t, t0 + eps)
            tb = min(t + h, t1 - eps)
            k1 = _transport_rate(conn, curve, ta, method) @ transport
            mid = _transport_rate(conn, curve, t + h / 2.0, method)
            k2 = mid @ (transport + h / 2.0 * k1)
            k3 = mid @ (transport + h / 2.0 * k2)
            k4 = _transport_rate(conn, curve, tb, method) @ (transport + h * k3)
            transport = transport + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return transport


def parallel_transport(conn: ConnectionGrid,
                       curve: Curve,
                       vector: Sequence[float],
                       steps: int = 1000,
                       method: Interpolation = Interpolation.LINEAR) -> np.ndarray:
    return transport_matrix(conn, curve, steps, method) @ np.asarray(vector, dtype=float)


@dataclass
class CurveCheck:
    """Norm preservation along one curve"""

    index: int
    max_error: float
    mean_error: float
    start: Tuple[float, ...]
    end: Tuple[float, ...]

    def to_json(self) -> Dict[str, Any]:
        return {
            'curve': self.index,
            'max_error': self.max_error,
            'mean_error': self.mean_error,
            'start': list(self.start),
            'end': list(self.end),
        }


@dataclass
class VerificationReport:
    """Relative change of F under transport for seeded vectors and curves"""

    max_error: float
    mean_error: float
    tol: float
    per_curve: List[CurveCheck]

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def to_json(self) -> Dict[str, Any]:
        return {
            'passed': self.passed,
            'max_error': self.max_error,
            'mean_error': self.mean_error,
            'tol': self.tol,
            'per_curve': [c.to_json() for c in self.per_curve],
        }


def verify_preservation(finsler: FinslerField,
                        conn: ConnectionGrid,
                        curves: Sequence[Curve],
                        vectors_per_curve: int = 10,
                        tol: float = 1e-5,
                        seed: int = 0,
                        steps: int = 1000,
                        method: Interpolation = Interpolation.LINEAR,
                        executor: Optional[dispatch.Executor] = None) -> VerificationReport:
    if not curves:
        raise ValueError('Verification needs at least one curve')

    chart = finsler.chart
    rng = np.random.default_rng(seed)
    vectors = [rng.standard_normal((vectors_per_curve, finsler.dim))
               for _ in curves]

    def check(job: Tuple[int, Curve, np.ndarray]) -> Tuple[CurveCheck, np.ndarray]:
        number, curve, vs = job
        start, end = curve.endpoints()
        transport = transport_matrix(conn, curve, steps, method)
        before = finsler.norm_at(chart.wrap(start)).values(vs)
        after = finsler.norm_at(chart.wrap(end)).values(vs @ transport.T)
        errors = np.abs(after - before) / before
        summary = CurveCheck(number, float(np.max(errors)), float(np.mean(errors)),
                             tuple(start.tolist()), tuple(end.tolist()))
        return summary, errors

    jobs = [(k, curve, vs) for k, (curve, vs) in enumerate(zip(curves, vectors))]
    results = dispatch.ordered_map(executor, check, jobs)

    all_errors = np.concatenate([errors for _, errors in results])
    report = VerificationReport(float(np.max(all_errors)),
                                float(np.mean(all_errors)), tol,
                                [summary for summary, _ in results])
    _log.info('Verification over %d curves: max relative error %.3e (%s)',
              len(curves), report.max_error,
              'pass' if report.passed else 'fail')
    return report


@dataclass(frozen=True, eq=False)
class CurvatureGrid:
    """R_il = d_i Gamma_l - d_l Gamma_i + [Gamma_i, Gamma_l] for i < l"""

    grid: Grid
    pairs: Tuple[Tuple[int, int], ...]
    values: np.ndarray

    def max_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def pair_max(self) -> Dict[str, float]:
        return {f'{i + 1},{l + 1}': float(np.max(np.abs(self.values[..., k, :, :])))
                for k, (i, l) in enumerate(self.pairs)}

    def csv_header(self) -> List[str]:
        coords = [f'x{k + 1}' for k in range(self.grid.dim)]
        return coords + ['i', 'l', 'row', 'col', 'value']

    def csv_rows(self) -> Iterator[List[Any]]:
        dim = self.grid.dim
        for index in self.grid.indices():
            point = self.grid.point(index).tolist()
            for k, (i, l) in enumerate(self.pairs):
                block = self.values[index + (k,)]
                for row in range(dim):
                    for col in range(dim):
                        yield point + [i + 1, l + 1, row + 1, col + 1,
                                       float(block[row, col])]


def curvature(conn: ConnectionGrid,
              scheme: Optional[DifferenceScheme] = None) -> CurvatureGrid:
    scheme = scheme or conn.scheme
    grid = conn.grid
    gammas = [conn.gamma[..., i, :, :] for i in range(conn.dim)]

    pairs = []
    blocks = []
    for i in range(conn.dim):
        for l in range(i + 1, conn.dim):
            d_i = derivative(gammas[l], grid, i, scheme)
            d_l = derivative(gammas[i], grid, l, scheme)
            bracket = gammas[i] @ gammas[l] - gammas[l] @ gammas[i]
            pairs.append((i, l))
            blocks.append(d_i - d_l + bracket)

    return CurvatureGrid(grid, tuple(pairs), np.stack(blocks, axis=-3))


def holonomy(conn: ConnectionGrid,
             loop: Curve,
             steps: int = 1000,
             method: Interpolation = Interpolation.LINEAR) -> np.ndarray:
    start, end = loop.endpoints()
    chart = conn.grid.chart
    gap = end - start
    if chart.periodic:
        gap = gap - np.round(gap / chart.extent) * chart.extent
    if np.max(np.abs(gap)) > 1e-9 * max(1.0, float(np.max(chart.extent))):
        raise ValueError('Holonomy needs a closed loop')
    return transport_matrix(conn, loop, steps, method)


@dataclass
class HolonomyCheck:
    """Holonomy of one loop and its distance to the isometry group"""

    matrix: np.ndarray
    defect: float

    def to_json(self) -> Dict[str, Any]:
        return {'matrix': self.matrix.tolist(), 'defect': self.defect}


@dataclass
class HolonomyReport:
    """Holonomy checks of several loops at a common basepoint norm"""

    threshold: float
    loops: List[HolonomyCheck]

    @property
    def max_defect(self) -> float:
        return max((c.defect for c in self.loops), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_defect <= self.threshold

    def to_json(self) -> Dict[str, Any]:
        return {
            'passed': self.passed,
            'threshold': self.threshold,
            'max_defect': self.max_defect,
            'loops': [c.to_json() for c in self.loops],
        }


def check_holonomy(finsler: FinslerField,
                   conn: ConnectionGrid,
                   loops: Sequence[Curve],
                   steps: int = 1000,
                   accept_tol: float = 1e-5,
                   method: Interpolation = Interpolation.LINEAR,
                   quad: Optional[QuadratureParams] = None,
                   executor: Optional[dispatch.Executor] = None) -> HolonomyReport:
    """
    Every holonomy of a loop based at x must be an isometry of F_x. Loops are
    checked against the norm at their own starting point.
    """
    def check(loop: Curve) -> HolonomyCheck:
        start, _ = loop.endpoints()
        norm = finsler.norm_at(finsler.chart.wrap(start))
        matrix = holonomy(conn, loop, steps, method)
        profile = profile_norm(norm, quad)
        defect = isometry_defect(norm, norm, matrix, profile=profile)
        return HolonomyCheck(matrix, defect / profile.mean_value)

    checks = dispatch.ordered_map(executor, check, loops)
    return HolonomyReport(accept_tol, checks)

