import logging as log
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.stats import special_ortho_group

import dispatch
from blmetric import NormProfile, profile_norm
from chart import Grid, Index
from errors import AnchorSelectionError, IsotropyError
from norms import FinslerField, MinkowskiNorm, QuadratureParams, unit_samples


_log = log.getLogger('isometry')

RANK_TOL = 1e-8
ACCEPT_TOL = 1e-6


def so_dim(dim: int) -> int:
    return dim * (dim - 1) // 2


def so_basis(dim: int) -> np.ndarray:
    """Frobenius-orthonormal basis (e_i e_j^T - e_j e_i^T) / sqrt(2), i < j"""

    basis = []
    for i in range(dim):
        for j in range(i + 1, dim):
            gen = np.zeros((dim, dim))
            gen[i, j] = -1.0
            gen[j, i] = 1.0
            basis.append(gen / math.sqrt(2.0))
    return np.array(basis).reshape(-1, dim, dim)


def generator(coords: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return np.tensordot(coords, basis, axes=(0, 0))


def _constraint_rows(norm: MinkowskiNorm,
                     xi: np.ndarray,
                     basis: np.ndarray) -> np.ndarray:
    # row s: E_k -> dF(xi_s) . (E_k xi_s) / F(xi_s)
    grads = norm.gradients(xi)
    moved = np.einsum('kij,sj->ski', basis, xi)
    rows = np.einsum('si,ski->sk', grads, moved)
    return rows / norm.values(xi)[:, None]


def _rank_threshold(singular: np.ndarray, rows: int, rank_tol: float) -> float:
    top = float(singular[0]) if singular.size else 0.0
    return rank_tol * max(top, math.sqrt(rows))


@dataclass(frozen=True, eq=False)
class IsotropyBasis:
    """Isotropy algebra of a framed norm and its orthogonal complement"""

    dim_so: int
    basis: np.ndarray
    complement: np.ndarray
    singular_values: np.ndarray
    rank_tol: float

    @property
    def dim(self) -> int:
        return len(self.basis)

    @property
    def m(self) -> int:
        return self.dim_so - self.dim

    def to_json(self) -> Dict[str, Any]:
        return {
            'dim_so': self.dim_so,
            'isotropy_dim': self.dim,
            'm': self.m,
            'rank_tol': self.rank_tol,
            'singular_values': self.singular_values.tolist(),
            'basis': self.basis.tolist(),
        }


def isotropy_algebra(norm: MinkowskiNorm,
                     sample_count: Optional[int] = None,
                     rank_tol: float = RANK_TOL,
                     seed: int = 0) -> IsotropyBasis:
    dim = norm.dim
    dim_so = so_dim(dim)
    if sample_count is None:
        sample_count = max(256, 32 * dim_so)
    if sample_count < dim_so:
        raise IsotropyError(
            f'{sample_count} samples cannot constrain so({dim}) of dimension {dim_so}')

    rng = np.random.default_rng(seed)
    xi = unit_samples(rng, sample_count, dim)
    gens = so_basis(dim)

    constraints = _constraint_rows(norm, xi, gens)
    _, singular, vt = np.linalg.svd(constraints, full_matrices=True)

    threshold = _rank_threshold(singular, sample_count, rank_tol)
    rank = int(np.sum(singular > threshold))

    basis = np.einsum('rk,kij->rij', vt[rank:], gens)
    complement = np.einsum('rk,kij->rij', vt[:rank], gens)

    result = IsotropyBasis(dim_so, basis, complement, singular, rank_tol)
    assert result.dim + result.m == dim_so
    _log.debug('Isotropy dimension %d, m = %d', result.dim, result.m)
    return result


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """Anchor vectors and the stacked differentials of their norm values"""

    vectors: np.ndarray
    jacobian: np.ndarray
    singular_values: np.ndarray

    @property
    def m(self) -> int:
        return len(self.vectors)

    def to_json(self) -> Dict[str, Any]:
        return {
            'vectors': self.vectors.tolist(),
            'singular_values': self.singular_values.tolist(),
        }


def _rank(rows: np.ndarray, rank_tol: float) -> Tuple[int, np.ndarray]:
    if not len(rows):
        return 0, np.zeros(0)
    singular = np.linalg.svd(rows, compute_uv=False)
    threshold = rank_tol * max(float(singular[0]), 1.0)
    return int(np.sum(singular > threshold)), singular


def _best_candidate(rows: np.ndarray,
                    candidates: np.ndarray,
                    rank_tol: float) -> Tuple[Optional[int], float]:
    best, score = None, 0.0
    for k, row in enumerate(candidates):
        rank, singular = _rank(np.vstack([rows, row]), rank_tol)
        if rank > len(rows) and singular[len(rows)] > score:
            best, score = k, float(singular[len(rows)])
    return best, score


def anchor_vectors(norm: MinkowskiNorm,
                   isotropy: IsotropyBasis,
                   seed: int = 0,
                   max_draws: int = 1024,
                   batch: int = 64,
                   maximality_samples: int = 100) -> AnchorSet:
    """
    Greedy selection over seeded batches of unit vectors. Each step keeps the
    candidate that maximizes the smallest singular value of the stacked
    constraint rows, so the anchor equations stay far from a double root.
    A batch in which no candidate raises the rank is replaced by the next.
    """
    dim = norm.dim
    gens = so_basis(dim)
    target = isotropy.m
    rng = np.random.default_rng(seed)

    vectors: List[np.ndarray] = []
    rows = np.zeros((0, isotropy.dim_so))
    draws = 0
    while len(vectors) < target:
        if draws >= max_draws:
            raise AnchorSelectionError(
                f'Reached rank {len(vectors)} of {target} after {max_draws} draws')
        xi = unit_samples(rng, batch, dim)
        draws += batch
        candidates = _constraint_rows(norm, xi, gens)
        best, score = _best_candidate(rows, candidates, isotropy.rank_tol)
        if best is not None:
            _log.debug('Anchor %d: smallest singular value %.3e', len(vectors) + 1,
                       score)
            vectors.append(xi[best])
            rows = np.vstack([rows, candidates[best]])

    rank, singular = _rank(rows, isotropy.rank_tol)

    fresh = unit_samples(rng, maximality_samples, dim)
    extra = _constraint_rows(norm, fresh, gens)
    for row in extra:
        grown, _ = _rank(np.vstack([rows, row]), isotropy.rank_tol)
        if grown > rank:
            raise AnchorSelectionError(
                'Anchor rank grows past m; isotropy algebra is inconsistent')

    _log.debug('Selected %d anchors in %d draws', len(vectors), draws)
    return AnchorSet(np.array(vectors).reshape(-1, dim), rows, singular)


def isometry_defect(norm_a: MinkowskiNorm,
                    norm_b: MinkowskiNorm,
                    transform: np.ndarray,
                    quad: Optional[QuadratureParams] = None,
                    profile: Optional[NormProfile] = None) -> float:
    """
    Integral over the unit ball of norm_a of |F_a(y) - F_b(T y)| in the
    Binet-Legendre volume of norm_a.
    """
    if profile is None:
        profile = profile_norm(norm_a, quad)
    nodes = profile.nodes
    transform = np.asarray(transform, dtype=float)

    total = 0.0
    for shard in nodes.shards:
        y = nodes.points[shard]
        gap = np.abs(norm_a.values(y) - norm_b.values(y @ transform.T))
        total += float(nodes.weights[shard] @ gap)
    return profile.density * total


def accept_threshold(profile: NormProfile, accept_tol: float = ACCEPT_TOL) -> float:
    return accept_tol * profile.mean_value


@dataclass
class IsometrySearch:
    """Outcome of a linear isometry search between two norms"""

    transform: Optional[np.ndarray]
    best_transform: np.ndarray
    defect: float
    threshold: float
    start: int
    starts_tried: int

    @property
    def found(self) -> bool:
        return self.transform is not None

    def to_json(self) -> Dict[str, Any]:
        return {
            'found': self.found,
            'defect': self.defect,
            'threshold': self.threshold,
            'start': self.start,
            'starts_tried': self.starts_tried,
            'transform': self.best_transform.tolist(),
        }


def _sample_directions(norm: MinkowskiNorm, seed: int) -> np.ndarray:
    dim = norm.dim
    rng = np.random.default_rng(seed)
    samples = unit_samples(rng, max(64, 16 * dim * dim), dim)
    return samples / norm.values(samples)[:, None]


def _orthogonal_starts(dim: int, restarts: int, seed: int) -> List[np.ndarray]:
    reflection = np.eye(dim)
    reflection[0, 0] = -1.0

    rng = np.random.default_rng(seed)
    rotations = [np.eye(dim)]
    for _ in range(max(restarts, 1) - 1):
        rotations.append(special_ortho_group.rvs(dim, random_state=rng))

    starts = []
    for rot in rotations:
        starts.append(rot)
        starts.append(rot @ reflection)
    return starts


def _fit_orthogonal(framed_a: MinkowskiNorm,
                    framed_b: MinkowskiNorm,
                    samples: np.ndarray,
                    start: np.ndarray) -> np.ndarray:
    gens = so_basis(framed_a.dim)
    targets = framed_a.values(samples)

    def rotation(coords: np.ndarray) -> np.ndarray:
        return start @ scipy.linalg.expm(generator(coords, gens))

    def residual(coords: np.ndarray) -> np.ndarray:
        return framed_b.values(samples @ rotation(coords).T) - targets

    fit = scipy.optimize.least_squares(residual, np.zeros(len(gens)),
                                       jac='3-point', xtol=1e-14,
                                       ftol=1e-14, gtol=1e-14)
    return rotation(fit.x)


def _polish(norm_a: MinkowskiNorm,
            norm_b: MinkowskiNorm,
            samples: np.ndarray,
            transform: np.ndarray) -> np.ndarray:
    dim = norm_a.dim
    targets = norm_a.values(samples)

    def residual(entries: np.ndarray) -> np.ndarray:
        return norm_b.values(samples @ entries.reshape(dim, dim).T) - targets

    fit = scipy.optimize.least_squares(residual, transform.reshape(-1),
                                       jac='3-point', xtol=1e-15,
                                       ftol=1e-15, gtol=1e-15)
    return fit.x.reshape(dim, dim)


def find_isometry(norm_a: MinkowskiNorm,
                  norm_b: MinkowskiNorm,
                  restarts: int = 8,
                  seed: int = 0,
                  accept_tol: float = ACCEPT_TOL,
                  quad: Optional[QuadratureParams] = None,
                  executor: Optional[dispatch.Executor] = None,
                  profile_a: Optional[NormProfile] = None,
                  profile_b: Optional[NormProfile] = None) -> IsometrySearch:
    """
    Search T with F_b(T y) = F_a(y) among T = E_b R E_a^-1, R in O(n).

    The identity start is tried alone first; when it is not accepted the
    remaining starts run on the executor and the lexicographically smallest
    (defect, start index) wins. The winner is polished over GL(n).
    """
    if norm_a.dim != norm_b.dim:
        raise ValueError('Norms live in different dimensions')

    pa = profile_a or profile_norm(norm_a, quad)
    pb = profile_b or profile_norm(norm_b, quad)
    threshold = accept_threshold(pa, accept_tol)

    framed_a = pa.framed()
    framed_b = pb.framed()
    frame_a_inv = np.linalg.inv(pa.frame)
    samples = _sample_directions(framed_a, seed)
    samples_a = samples @ pa.frame.T

    starts = _orthogonal_starts(norm_a.dim, restarts, seed)

    def attempt(number: int) -> Tuple[float, np.ndarray]:
        rot = _fit_orthogonal(framed_a, framed_b, samples, starts[number])
        transform = pb.frame @ rot @ frame_a_inv
        return isometry_defect(norm_a, norm_b, transform, profile=pa), transform

    def finish(defect: float,
               transform: np.ndarray,
               number: int,
               tried: int) -> IsometrySearch:
        polished = _polish(norm_a, norm_b, samples_a, transform)
        polished_defect = isometry_defect(norm_a, norm_b, polished, profile=pa)
        if polished_defect < defect:
            defect, transform = polished_defect, polished
        accepted = transform if defect <= threshold else None
        return IsometrySearch(accepted, transform, defect, threshold,
                              number, tried)

    defect, transform = attempt(0)
    first = finish(defect, transform, 0, 1)
    if first.found:
        return first

    rest = dispatch.ordered_map(executor, attempt, range(1, len(starts)))
    candidates = [(first.defect, 0, first.best_transform)]
    candidates += [(d, k + 1, t) for k, (d, t) in enumerate(rest)]
    defect, number, transform = min(candidates, key=lambda c: (c[0], c[1]))

    if number == 0:
        result = first
        result.starts_tried = len(starts)
    else:
        result = finish(defect, transform, number, len(starts))

    _log.debug('Isometry search: defect %.3e (threshold %.3e) from start %d',
               result.defect, result.threshold, result.start)
    return result


def solve_anchor_equations(framed: MinkowskiNorm,
                           anchors: AnchorSet,
                           targets: np.ndarray,
                           complement: np.ndarray,
                           start: np.ndarray) -> Tuple[np.ndarray, float]:
    """R = start exp(sum a_k W_k) with F(R xi_j) = targets_j, W_k spanning the complement"""

    def rotation(coords: np.ndarray) -> np.ndarray:
        return start @ scipy.linalg.expm(generator(coords, complement))

    def residual(coords: np.ndarray) -> np.ndarray:
        return framed.values(anchors.vectors @ rotation(coords).T) - targets

    fit = scipy.optimize.least_squares(residual, np.zeros(len(complement)),
                                       jac='3-point', xtol=1e-14,
                                       ftol=1e-14, gtol=1e-14)
    return rotation(fit.x), float(np.max(np.abs(fit.fun)))


def estimate_separation(profile: NormProfile,
                        anchors: AnchorSet,
                        isotropy: IsotropyBasis,
                        restarts: int = 200,
                        seed: int = 0,
                        accept_tol: float = ACCEPT_TOL,
                        solve_tol: float = 1e-9,
                        executor: Optional[dispatch.Executor] = None) -> float:
    """
    Smallest defect over solutions of the anchor equations that are not
    isometries, or inf when every solution found is an isometry.
    """
    if isotropy.m == 0:
        return math.inf

    framed = profile.framed()
    targets = framed.values(anchors.vectors)
    frame_inv = np.linalg.inv(profile.frame)
    threshold = accept_threshold(profile, accept_tol)

    rng = np.random.default_rng(seed)
    starts = [special_ortho_group.rvs(profile.dim, random_state=rng)
              for _ in range(restarts)]

    def defect_from(start: np.ndarray) -> float:
        rot, residual = solve_anchor_equations(framed, anchors, targets,
                                               isotropy.complement, start)
        if residual > solve_tol:
            return math.nan
        transform = profile.frame @ rot @ frame_inv
        return isometry_defect(profile.norm, profile.norm, transform,
                               profile=profile)

    defects = dispatch.ordered_map(executor, defect_from, starts)
    outside = [d for d in defects if np.isfinite(d) and d > threshold]
    gap = min(outside) if outside else math.inf
    _log.debug('Separation estimate %.3e from %d solutions', gap,
               sum(1 for d in defects if np.isfinite(d)))
    return gap


@dataclass
class PointDefect:
    """Isometry search result at one grid node"""

    index: Index
    x: Tuple[float, ...]
    defect: float
    transform: Optional[np.ndarray]

    def to_json(self) -> Dict[str, Any]:
        return {
            'x': list(self.x),
            'defect': self.defect,
            'T': None if self.transform is None else self.transform.tolist(),
        }


@dataclass
class MonochromacyReport:
    """Pairwise isometry verdict between the basepoint and every grid node"""

    verdict: bool
    basepoint: Tuple[float, ...]
    threshold: float
    per_point: List[PointDefect]
    worst: PointDefect
    gap_estimate: float
    isotropy_dim: int
    m: int
    params: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> Dict[str, Any]:
        gap = self.gap_estimate if math.isfinite(self.gap_estimate) else None
        return {
            'verdict': 'monochromatic' if self.verdict else 'not monochromatic',
            'basepoint': list(self.basepoint),
            'threshold': self.threshold,
            'worst_point': list(self.worst.x),
            'worst_defect': self.worst.defect,
            'gap_estimate': gap,
            'isotropy_dim': self.isotropy_dim,
            'm': self.m,
            'per_point': [p.to_json() for p in self.per_point],
            'params': dict(self.params),
        }


def monochromacy_check(field: FinslerField,
                       grid: Optional[Grid] = None,
                       basepoint: Optional[Sequence[float]] = None,
                       restarts: int = 8,
                       seed: int = 0,
                       accept_tol: float = ACCEPT_TOL,
                       quad: Optional[QuadratureParams] = None,
                       separation_restarts: int = 200,
                       rank_tol: float = RANK_TOL,
                       executor: Optional[dispatch.Executor] = None) -> MonochromacyReport:
    grid = grid or field.grid()
    quad = quad if quad is not None else QuadratureParams.for_dim(field.dim)
    if basepoint is None:
        basepoint = grid.point((0,) * grid.dim)
    start = grid.nearest_index(basepoint)
    base = grid.point(start)
    if not grid.contains_node(basepoint):
        _log.warning('Basepoint snapped to grid node %s', base.tolist())

    norm_p = field.norm_at(base)
    profile_p = profile_norm(norm_p, quad, executor)
    framed = profile_p.framed()
    isotropy = isotropy_algebra(framed, rank_tol=rank_tol, seed=seed)
    anchors = anchor_vectors(framed, isotropy, seed)
    gap = estimate_separation(profile_p, anchors, isotropy, separation_restarts,
                              seed, accept_tol, executor=executor)

    indices = list(grid.indices())

    # one level of fan-out: the per-node searches run serially inside
    def check(index: Index) -> PointDefect:
        point = grid.point(index)
        search = find_isometry(norm_p, field.norm_at(point), restarts, seed,
                               accept_tol, quad, profile_a=profile_p)
        return PointDefect(index, tuple(point.tolist()), search.defect,
                           search.transform)

    per_point = dispatch.ordered_map(executor, check, indices)
    worst = max(per_point, key=lambda p: p.defect)
    threshold = accept_threshold(profile_p, accept_tol)
    verdict = all(p.transform is not None for p in per_point)

    _log.info('Monochromacy: %s, worst defect %.3e at %s',
              'positive' if verdict else 'negative', worst.defect, list(worst.x))

    params = {
        'restarts': restarts,
        'seed': seed,
        'accept_tol': accept_tol,
        'directions': quad.directions,
        'radial_nodes': quad.radial_nodes,
    }
    return MonochromacyReport(verdict, tuple(base.tolist()), threshold,
                              per_point, worst, gap, isotropy.dim,
                              isotropy.m, params)
