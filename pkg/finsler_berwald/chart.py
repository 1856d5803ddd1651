import functools
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum, auto
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.fft

from errors import CurveOutsideChartError


Index = Tuple[int, ...]


class ChartKind(Enum):
    """Topology of a coordinate chart"""

    BOX = auto()
    TORUS = auto()


class DifferenceScheme(Enum):
    """Derivative stencil family"""

    SPECTRAL = auto()
    CENTRAL4 = auto()
    CENTRAL2 = auto()


class Interpolation(Enum):
    """Interpolation between grid nodes"""

    LINEAR = auto()
    CUBIC = auto()


@dataclass(frozen=True)
class Chart:
    """Box [lo, hi]^n or torus with the given periods"""

    kind: ChartKind
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> 'Chart':
        lower = tuple(float(v) for v in lower)
        upper = tuple(float(v) for v in upper)
        if len(lower) != len(upper) or len(lower) < 2:
            raise ValueError('Box chart needs matching bounds in dimension >= 2')
        if any(hi <= lo for lo, hi in zip(lower, upper)):
            raise ValueError('Box chart needs lower < upper on every axis')
        return cls(ChartKind.BOX, lower, upper)

    @classmethod
    def torus(cls,
              periods: Sequence[float],
              origin: Optional[Sequence[float]] = None) -> 'Chart':
        periods = tuple(float(v) for v in periods)
        if len(periods) < 2 or any(p <= 0.0 for p in periods):
            raise ValueError('Torus chart needs positive periods in dimension >= 2')
        if origin is None:
            origin = (0.0,) * len(periods)
        lower = tuple(float(v) for v in origin)
        upper = tuple(lo + p for lo, p in zip(lower, periods))
        return cls(ChartKind.TORUS, lower, upper)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def periodic(self) -> bool:
        return self.kind == ChartKind.TORUS

    @property
    def extent(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    def contains(self, point: np.ndarray, slack: float = 1e-12) -> bool:
        if self.periodic:
            return bool(np.all(np.isfinite(point)))
        scale = slack * np.maximum(1.0, np.abs(self.extent))
        return bool(np.all(point >= np.subtract(self.lower, scale))
                    and np.all(point <= np.add(self.upper, scale)))

    def wrap(self, point: np.ndarray) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        if not self.periodic:
            return point
        lower = np.asarray(self.lower)
        return lower + np.mod(point - lower, self.extent)

    def grid(self, resolution: Sequence[int]) -> 'Grid':
        resolution = tuple(int(r) for r in resolution)
        if len(resolution) != self.dim:
            raise ValueError(f'Expected {self.dim} resolutions, got {len(resolution)}')

        axes = []
        spacing = []
        for lo, hi, count in zip(self.lower, self.upper, resolution):
            if count < 2:
                raise ValueError('Grid needs at least two nodes per axis')
            if self.periodic:
                step = (hi - lo) / count
                axes.append(lo + step * np.arange(count))
            else:
                step = (hi - lo) / (count - 1)
                axes.append(np.linspace(lo, hi, count))
            spacing.append(step)

        return Grid(self, resolution, tuple(axes), tuple(spacing))


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor grid of chart nodes"""

    chart: Chart
    shape: Tuple[int, ...]
    axes: Tuple[np.ndarray, ...]
    spacing: Tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @functools.cached_property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing='ij')
        return np.stack(mesh, axis=-1)

    def point(self, index: Index) -> np.ndarray:
        return np.array([axis[i] for axis, i in zip(self.axes, index)])

    def indices(self) -> Iterator[Index]:
        return np.ndindex(*self.shape)

    def nearest_index(self, point: Sequence[float]) -> Index:
        point = self.chart.wrap(np.asarray(point, dtype=float))
        index = []
        for axis_no, (axis, step) in enumerate(zip(self.axes, self.spacing)):
            count = self.shape[axis_no]
            pos = (point[axis_no] - axis[0]) / step
            if self.chart.periodic:
                index.append(int(round(pos)) % count)
            else:
                index.append(int(min(max(round(pos), 0), count - 1)))
        return tuple(index)

    def contains_node(self, point: Sequence[float], tol: float = 1e-9) -> bool:
        node = self.point(self.nearest_index(point))
        offset = self.chart.wrap(np.asarray(point, dtype=float)) - node
        if self.chart.periodic:
            extent = self.chart.extent
            offset = (offset + extent / 2) % extent - extent / 2
        return bool(np.all(np.abs(offset) <= tol * np.asarray(self.spacing)))

    def offset(self, index: Index, start: Index, axis: int) -> int:
        """Signed offset from start along a periodic axis, cut opposite start"""

        count = self.shape[axis]
        back = (count - 1) // 2
        return (index[axis] - start[axis] + back) % count - back

    def cut_position(self, start: Index, axis: int) -> int:
        """Grid index just after the cut of a periodic axis"""

        count = self.shape[axis]
        return (start[axis] - (count - 1) // 2) % count

    def neighbors(self,
                  index: Index,
                  start: Optional[Index] = None) -> List[Index]:
        """
        Axis neighbours of a node. With a start node, periodic axes are cut
        open opposite the start.
        """
        result = []
        for axis in range(self.dim):
            count = self.shape[axis]
            for step in (-1, 1):
                pos = index[axis] + step
                if self.chart.periodic:
                    pos %= count
                    if start is not None:
                        here = self.offset(index, start, axis)
                        there = self.offset(index[:axis] + (pos,) + index[axis + 1:],
                                            start, axis)
                        if there - here != step:
                            continue
                elif not 0 <= pos < count:
                    continue
                if pos == index[axis]:
                    continue
                result.append(index[:axis] + (pos,) + index[axis + 1:])
        return result

    def sweep_rings(self, start: Index) -> List[List[Tuple[Index, Index]]]:
        """
        Breadth-first rings from start as (node, predecessor) pairs; the first
        ring is the start itself.
        """
        seen = {start}
        rings = [[(start, start)]]
        queue = deque([start])
        frontier_end = start

        ring: List[Tuple[Index, Index]] = []
        while queue:
            node = queue.popleft()
            for nb in self.neighbors(node, start):
                if nb not in seen:
                    seen.add(nb)
                    ring.append((nb, node))
                    queue.append(nb)
            if node == frontier_end and ring:
                rings.append(ring)
                frontier_end = ring[-1][0]
                ring = []

        return rings

    def cut_crossings(self,
                      start: Index,
                      axis: int) -> List[Tuple[Index, Index]]:
        """
        Pairs (inner, across) of a periodic axis: inner is the last node
        before the cut, across the first node after it.
        """
        count = self.shape[axis]
        first = self.cut_position(start, axis)
        last = (first - 1) % count

        pairs = []
        for index in self.indices():
            if index[axis] == last:
                across = index[:axis] + (first,) + index[axis + 1:]
                pairs.append((index, across))
        return pairs


def _pad_periodic(values: np.ndarray,
                  width: int,
                  cut: int,
                  deck: Optional[np.ndarray]) -> np.ndarray:
    # axis 0 is the differentiated axis; returns the cut-open array padded on
    # both ends, with the deck factor applied to the continued copies
    rolled = np.roll(values, -cut, axis=0)
    after = rolled[:width]
    before = rolled[-width:]
    if deck is not None:
        after = after @ deck
        before = before @ np.linalg.inv(deck)
    return np.concatenate([before, rolled, after], axis=0)


def _central(ext: np.ndarray, width: int, step: float, order: int) -> np.ndarray:
    count = ext.shape[0] - 2 * width

    def shift(k: int) -> np.ndarray:
        return ext[width + k:width + k + count]

    if order == 2:
        return (shift(1) - shift(-1)) / (2.0 * step)

    return (shift(-2) - 8.0 * shift(-1) + 8.0 * shift(1) - shift(2)) / (12.0 * step)


def _box_derivative(f: np.ndarray, step: float, order: int) -> np.ndarray:
    count = f.shape[0]
    out = np.empty_like(f)

    if order == 4 and count >= 5:
        out[2:-2] = (f[:-4] - 8.0 * f[1:-3] + 8.0 * f[3:-1] - f[4:]) / (12.0 * step)
        out[0] = (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2]
                  + 16.0 * f[3] - 3.0 * f[4]) / (12.0 * step)
        out[1] = (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2]
                  - 6.0 * f[3] + f[4]) / (12.0 * step)
        out[-1] = (25.0 * f[-1] - 48.0 * f[-2] + 36.0 * f[-3]
                   - 16.0 * f[-4] + 3.0 * f[-5]) / (12.0 * step)
        out[-2] = (3.0 * f[-1] + 10.0 * f[-2] - 18.0 * f[-3]
                   + 6.0 * f[-4] - f[-5]) / (12.0 * step)
        return out

    if count < 3:
        raise ValueError('Finite differences need at least three nodes per axis')

    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * step)
    out[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * step)
    out[-1] = (3.0 * f[-1] - 4.0 * f[-2] + f[-3]) / (2.0 * step)
    return out


def _spectral_derivative(f: np.ndarray, step: float) -> np.ndarray:
    count = f.shape[0]
    wavenumbers = 2.0 * math.pi * scipy.fft.fftfreq(count, d=step)
    if count % 2 == 0:
        wavenumbers[count // 2] = 0.0
    shape = (count,) + (1,) * (f.ndim - 1)
    spectrum = scipy.fft.fft(f, axis=0)
    return np.real(scipy.fft.ifft(1j * wavenumbers.reshape(shape) * spectrum,
                                  axis=0))


def derivative(values: np.ndarray,
               grid: Grid,
               axis: int,
               scheme: DifferenceScheme = DifferenceScheme.SPECTRAL,
               start: Optional[Index] = None,
               deck: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Partial derivative along a grid axis of values shaped grid.shape + (...).
    A deck matrix right-multiplies trailing (n, n) matrices continued across
    the cut of a periodic axis.
    """
    step = grid.spacing[axis]
    f = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    order = 2 if scheme == DifferenceScheme.CENTRAL2 else 4

    if not grid.chart.periodic:
        out = _box_derivative(f, step, order)
    elif scheme == DifferenceScheme.SPECTRAL and deck is None:
        out = _spectral_derivative(f, step)
    else:
        cut = 0 if start is None else grid.cut_position(start, axis)
        width = 1 if order == 2 else 2
        ext = _pad_periodic(f, width, cut, deck)
        out = np.roll(_central(ext, width, step, order), cut, axis=0)

    return np.moveaxis(out, 0, axis)


def _lagrange_weights(t: float) -> np.ndarray:
    # four-point Lagrange basis at nodes -1, 0, 1, 2
    return np.array([
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ])


def _axis_stencil(grid: Grid,
                  axis: int,
                  coord: float,
                  method: Interpolation) -> Tuple[np.ndarray, np.ndarray]:
    count = grid.shape[axis]
    pos = (coord - grid.axes[axis][0]) / grid.spacing[axis]
    cubic = method == Interpolation.CUBIC and count >= 4

    if grid.chart.periodic:
        base = math.floor(pos)
        t = pos - base
        if cubic:
            nodes = np.arange(base - 1, base + 3) % count
            return nodes, _lagrange_weights(t)
        nodes = np.array([base, base + 1]) % count
        return nodes, np.array([1.0 - t, t])

    if cubic:
        base = min(max(math.floor(pos), 1), count - 3)
        t = pos - base
        return np.arange(base - 1, base + 3), _lagrange_weights(t)

    base = min(max(math.floor(pos), 0), count - 2)
    t = pos - base
    return np.array([base, base + 1]), np.array([1.0 - t, t])


def interpolate(values: np.ndarray,
                grid: Grid,
                point: np.ndarray,
                method: Interpolation = Interpolation.CUBIC) -> np.ndarray:
    """Tensor-product interpolation of values shaped grid.shape + (...)"""

    point = np.asarray(point, dtype=float)
    if not grid.chart.contains(point):
        raise CurveOutsideChartError('Point outside of the chart', point)

    point = grid.chart.wrap(point)
    stencils = [_axis_stencil(grid, axis, point[axis], method)
                for axis in range(grid.dim)]

    block = values[np.ix_(*(nodes for nodes, _ in stencils))]
    for _, weights in stencils:
        block = np.tensordot(weights, block, axes=(0, 0))
    return block
