import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, TypeVar

import numpy as np

from chart import Chart, DifferenceScheme, Interpolation
from errors import ConfigError, ExpressionParseError
from examples import ExpressionMatrix, ExpressionVector
from expression import Expression, Number, coordinate_names, parse_expression


T = TypeVar('T')

MIN_RESOLUTION = 4


class Task(Enum):
    """Pipeline task selected on the command line or in the run file"""

    VALIDATE = auto()
    BL = auto()
    ISO_DIM = auto()
    MONOCHROMACY = auto()
    SYNTHESIZE = auto()
    TRANSPORT = auto()
    VERIFY = auto()
    CURVATURE = auto()

    @property
    def cli_name(self) -> str:
        return self.name.lower().replace('_', '-')

    @classmethod
    def from_name(cls, name: str) -> 'Task':
        try:
            return cls[name.upper().replace('-', '_')]
        except KeyError:
            raise ValueError(f'Unknown task {name!r}') from None


class ParamKind(Enum):
    """Shape of a metric family parameter"""

    MATRIX = auto()
    VECTOR = auto()
    NUMBER = auto()
    EXPRESSION = auto()
    METRIC = auto()


@dataclass(frozen=True)
class ParamDesc:
    kind: ParamKind
    required: bool = True


FAMILIES: Dict[str, Dict[str, ParamDesc]] = {
    'euclidean': {'Q': ParamDesc(ParamKind.MATRIX, False)},
    'randers': {'Q': ParamDesc(ParamKind.MATRIX, False),
                'b': ParamDesc(ParamKind.VECTOR)},
    'translated_ball': {'Q': ParamDesc(ParamKind.MATRIX, False),
                        'V': ParamDesc(ParamKind.VECTOR)},
    'power': {'p': ParamDesc(ParamKind.NUMBER),
              'A': ParamDesc(ParamKind.MATRIX, False)},
    'pulled': {'base': ParamDesc(ParamKind.METRIC),
               'A': ParamDesc(ParamKind.MATRIX)},
    'rotation': {'base': ParamDesc(ParamKind.METRIC),
                 'theta': ParamDesc(ParamKind.EXPRESSION)},
    'torus_randers': {'g': ParamDesc(ParamKind.MATRIX, False),
                      'V': ParamDesc(ParamKind.VECTOR)},
}

# Parameters defaulting to the identity matrix
_IDENTITY_DEFAULTS = {'Q', 'g'}


@dataclass(frozen=True, eq=False)
class MetricSpec:
    """Metric family name with parsed parameters"""

    family: str
    dim: int
    params: Mapping[str, Any]
    source: Mapping[str, Any] = field(default_factory=dict, repr=False)

    def has(self, key: str) -> bool:
        return key in self.params

    def matrix(self, key: str) -> ExpressionMatrix:
        return self.params[key]

    def vector(self, key: str) -> ExpressionVector:
        return self.params[key]

    def number(self, key: str) -> float:
        return self.params[key]

    def expression(self, key: str) -> Expression:
        return self.params[key]

    def nested(self, key: str) -> 'MetricSpec':
        return self.params[key]

    def variables(self) -> frozenset:
        names: set = set()
        for value in self.params.values():
            if isinstance(value, ExpressionMatrix):
                for row in value.entries:
                    for entry in row:
                        names |= entry.variables()
            elif isinstance(value, ExpressionVector):
                for entry in value.components:
                    names |= entry.variables()
            elif isinstance(value, Expression):
                names |= value.variables()
            elif isinstance(value, MetricSpec):
                names |= value.variables()
        return frozenset(names)

    def to_json(self) -> Dict[str, Any]:
        return dict(self.source)


@dataclass(frozen=True)
class ChartSpec:
    """Chart and grid resolution"""

    chart: Chart
    resolution: Tuple[int, ...]


@dataclass(frozen=True)
class QuadratureSpec:
    """Unit-ball quadrature; directions default by dimension"""

    directions: Optional[int] = None
    radial_nodes: int = 16
    seed: int = 0
    shard_directions: int = 1024


@dataclass(frozen=True)
class SolverSpec:
    """Newton continuation, isometry search and validation controls"""

    newton_tol: float = 1e-10
    max_iters: int = 50
    accept_tol: float = 1e-6
    restarts: int = 8
    rank_tol: float = 1e-8
    separation_restarts: int = 200
    validation_samples: int = 200
    validation_tol: float = 1e-9
    lipschitz_budget: Optional[float] = None
    scheme: DifferenceScheme = DifferenceScheme.CENTRAL2
    seed: int = 0


@dataclass(frozen=True)
class CurveSpec:
    """Polyline points or expression components in t"""

    points: Optional[Tuple[Tuple[float, ...], ...]] = None
    components: Optional[Tuple[str, ...]] = None


@dataclass(frozen=True)
class FaultSpec:
    """Constant added to one Christoffel entry (1-based indices)"""

    i: int
    j: int
    s: int
    delta: float


@dataclass(frozen=True)
class TransportSpec:
    """Curves, test vectors and tolerances of transport tasks"""

    steps: int = 1000
    interpolation: Interpolation = Interpolation.LINEAR
    curves: Tuple[CurveSpec, ...] = ()
    random_curves: int = 0
    loops: bool = False
    vectors_per_curve: int = 10
    tol: float = 1e-5
    holonomy_loops: Tuple[CurveSpec, ...] = ()
    holonomy_tol: float = 1e-5
    fault: Optional[FaultSpec] = None
    seed: int = 0


@dataclass(frozen=True)
class OutputSpec:
    directory: str = 'out'


@dataclass(frozen=True)
class RunConfig:
    """Validated run description"""

    chart: ChartSpec
    metric: MetricSpec
    basepoint: Tuple[float, ...]
    quadrature: QuadratureSpec
    solver: SolverSpec
    transport: TransportSpec
    task: Task
    output: OutputSpec

    @property
    def dim(self) -> int:
        return self.chart.chart.dim

    def with_overrides(self,
                       task: Optional[Task] = None,
                       out: Optional[str] = None,
                       seed: Optional[int] = None) -> 'RunConfig':
        result = self
        if task is not None:
            result = dataclasses.replace(result, task=task)
        if out is not None:
            result = dataclasses.replace(result, output=OutputSpec(out))
        if seed is not None:
            result = dataclasses.replace(
                result,
                quadrature=dataclasses.replace(result.quadrature, seed=seed),
                solver=dataclasses.replace(result.solver, seed=seed),
                transport=dataclasses.replace(result.transport, seed=seed))
        return result


_REQUIRED = object()


def _child(pointer: str, key: Any) -> str:
    token = str(key).replace('~', '~0').replace('/', '~1')
    return f'{pointer}/{token}'


def _expect_object(value: Any, pointer: str) -> Dict[str, Any]:
    if not isinstance(value, dict):
        raise ConfigError('Expected an object', pointer)
    return value


def _expect_list(value: Any, pointer: str, length: Optional[int] = None) -> List[Any]:
    if not isinstance(value, list):
        raise ConfigError('Expected an array', pointer)
    if length is not None and len(value) != length:
        raise ConfigError(f'Expected {length} entries, got {len(value)}', pointer)
    return value


def _check_keys(obj: Dict[str, Any], allowed: Any, pointer: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f'Unknown key {key!r}', _child(pointer, key))


def _get(obj: Dict[str, Any],
         key: str,
         pointer: str,
         parse: Callable[[Any, str], T],
         default: Any = _REQUIRED) -> T:
    if key not in obj:
        if default is _REQUIRED:
            raise ConfigError(f'Missing key {key!r}', pointer)
        return default
    return parse(obj[key], _child(pointer, key))


def _parse_number(value: Any, pointer: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError('Expected a number', pointer)
    if not np.isfinite(value):
        raise ConfigError('Expected a finite number', pointer)
    return float(value)


def _positive_number(value: Any, pointer: str) -> float:
    number = _parse_number(value, pointer)
    if number <= 0.0:
        raise ConfigError('Expected a positive number', pointer)
    return number


def _optional_positive(value: Any, pointer: str) -> Optional[float]:
    return None if value is None else _positive_number(value, pointer)


def _parse_int(value: Any, pointer: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError('Expected an integer', pointer)
    if value < minimum:
        raise ConfigError(f'Expected an integer >= {minimum}', pointer)
    return value


def _int_at_least(minimum: int) -> Callable[[Any, str], int]:
    return lambda value, pointer: _parse_int(value, pointer, minimum)


def _parse_bool(value: Any, pointer: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError('Expected true or false', pointer)
    return value


def _parse_string(value: Any, pointer: str) -> str:
    if not isinstance(value, str):
        raise ConfigError('Expected a string', pointer)
    return value


def _parse_enum(enum: Any) -> Callable[[Any, str], Any]:
    def parse(value: Any, pointer: str) -> Any:
        name = _parse_string(value, pointer)
        try:
            return enum[name.upper()]
        except KeyError:
            allowed = ', '.join(e.name.lower() for e in enum)
            raise ConfigError(f'Expected one of {allowed}', pointer) from None
    return parse


def _parse_scalar(value: Any, pointer: str, variables: List[str]) -> Expression:
    if isinstance(value, str):
        try:
            return parse_expression(value, variables)
        except ExpressionParseError as err:
            raise ConfigError(str(err), pointer) from err
    return Number(_parse_number(value, pointer))


def _parse_vector(value: Any,
                  pointer: str,
                  dim: int,
                  variables: List[str]) -> ExpressionVector:
    items = _expect_list(value, pointer, dim)
    return ExpressionVector(tuple(_parse_scalar(v, _child(pointer, k), variables)
                                  for k, v in enumerate(items)))


def _parse_matrix(value: Any,
                  pointer: str,
                  dim: int,
                  variables: List[str]) -> ExpressionMatrix:
    rows = _expect_list(value, pointer, dim)
    return ExpressionMatrix(tuple(
        _parse_vector(row, _child(pointer, r), dim, variables).components
        for r, row in enumerate(rows)))


def _points(value: Any, pointer: str, dim: int) -> Tuple[float, ...]:
    items = _expect_list(value, pointer, dim)
    return tuple(_parse_number(v, _child(pointer, k)) for k, v in enumerate(items))


def parse_metric(value: Any, pointer: str, dim: int) -> MetricSpec:
    obj = _expect_object(value, pointer)
    family = _get(obj, 'family', pointer, _parse_string)
    if family not in FAMILIES:
        allowed = ', '.join(sorted(FAMILIES))
        raise ConfigError(f'Unknown metric family {family!r} (expected one of '
                          f'{allowed})', _child(pointer, 'family'))

    schema = FAMILIES[family]
    _check_keys(obj, set(schema) | {'family'}, pointer)
    variables = coordinate_names(dim)

    params: Dict[str, Any] = {}
    for key, desc in schema.items():
        where = _child(pointer, key)
        if key not in obj:
            if desc.required:
                raise ConfigError(f'Missing key {key!r}', pointer)
            if key in _IDENTITY_DEFAULTS:
                params[key] = ExpressionMatrix.of(np.eye(dim).tolist())
            continue

        raw = obj[key]
        if desc.kind == ParamKind.MATRIX:
            params[key] = _parse_matrix(raw, where, dim, variables)
        elif desc.kind == ParamKind.VECTOR:
            params[key] = _parse_vector(raw, where, dim, variables)
        elif desc.kind == ParamKind.NUMBER:
            params[key] = _parse_number(raw, where)
        elif desc.kind == ParamKind.EXPRESSION:
            params[key] = _parse_scalar(raw, where, variables)
        else:
            params[key] = parse_metric(raw, where, dim)

    if family == 'power' and params['p'] < 2.0:
        raise ConfigError('Power norms need p >= 2', _child(pointer, 'p'))

    spec = MetricSpec(family, dim, params, obj)
    if family == 'rotation':
        if dim != 2:
            raise ConfigError('Rotation fields need a two-dimensional chart',
                              _child(pointer, 'family'))
        if spec.nested('base').variables():
            raise ConfigError('Base norm of a rotation field must be constant',
                              _child(pointer, 'base'))
    return spec


def parse_chart(value: Any, pointer: str = '/chart') -> ChartSpec:
    obj = _expect_object(value, pointer)
    kind = _get(obj, 'type', pointer, _parse_string)

    if kind == 'torus':
        _check_keys(obj, {'type', 'periods', 'origin', 'resolution'}, pointer)
        periods = _get(obj, 'periods', pointer,
                       lambda v, p: [_positive_number(x, _child(p, k))
                                     for k, x in enumerate(_expect_list(v, p))])
        if len(periods) < 2:
            raise ConfigError('Expected at least two periods',
                              _child(pointer, 'periods'))
        origin = _get(obj, 'origin', pointer,
                      lambda v, p: _points(v, p, len(periods)), None)
        chart = Chart.torus(periods, origin)
    elif kind == 'box':
        _check_keys(obj, {'type', 'lower', 'upper', 'resolution'}, pointer)
        lower = _get(obj, 'lower', pointer,
                     lambda v, p: [_parse_number(x, _child(p, k))
                                   for k, x in enumerate(_expect_list(v, p))])
        if len(lower) < 2:
            raise ConfigError('Expected at least two bounds',
                              _child(pointer, 'lower'))
        upper = _get(obj, 'upper', pointer, lambda v, p: _points(v, p, len(lower)))
        for axis, (lo, hi) in enumerate(zip(lower, upper)):
            if hi <= lo:
                raise ConfigError('Upper bound must exceed the lower bound',
                                  _child(_child(pointer, 'upper'), axis))
        chart = Chart.box(lower, upper)
    else:
        raise ConfigError('Expected chart type torus or box', _child(pointer, 'type'))

    def parse_resolution(v: Any, p: str) -> Tuple[int, ...]:
        if isinstance(v, int) and not isinstance(v, bool):
            v = [v] * chart.dim
        items = _expect_list(v, p, chart.dim)
        result = []
        for k, item in enumerate(items):
            where = _child(p, k)
            count = _parse_int(item, where)
            if count < MIN_RESOLUTION:
                raise ConfigError(f'Resolution {count} is below the minimum of '
                                  f'{MIN_RESOLUTION}', where)
            result.append(count)
        return tuple(result)

    resolution = _get(obj, 'resolution', pointer, parse_resolution)
    return ChartSpec(chart, resolution)


def _parse_quadrature(value: Any, pointer: str) -> QuadratureSpec:
    obj = _expect_object(value, pointer)
    names = {f.name for f in dataclasses.fields(QuadratureSpec)}
    _check_keys(obj, names, pointer)
    return QuadratureSpec(
        directions=_get(obj, 'directions', pointer, _int_at_least(1), None),
        radial_nodes=_get(obj, 'radial_nodes', pointer, _int_at_least(1), 16),
        seed=_get(obj, 'seed', pointer, _parse_int, 0),
        shard_directions=_get(obj, 'shard_directions', pointer,
                              _int_at_least(1), 1024),
    )


def _parse_solver(value: Any, pointer: str) -> SolverSpec:
    obj = _expect_object(value, pointer)
    names = {f.name for f in dataclasses.fields(SolverSpec)}
    _check_keys(obj, names, pointer)
    defaults = SolverSpec()
    return SolverSpec(
        newton_tol=_get(obj, 'newton_tol', pointer, _positive_number,
                        defaults.newton_tol),
        max_iters=_get(obj, 'max_iters', pointer, _int_at_least(1),
                       defaults.max_iters),
        accept_tol=_get(obj, 'accept_tol', pointer, _positive_number,
                        defaults.accept_tol),
        restarts=_get(obj, 'restarts', pointer, _int_at_least(1),
                      defaults.restarts),
        rank_tol=_get(obj, 'rank_tol', pointer, _positive_number,
                      defaults.rank_tol),
        separation_restarts=_get(obj, 'separation_restarts', pointer,
                                 _int_at_least(0), defaults.separation_restarts),
        validation_samples=_get(obj, 'validation_samples', pointer,
                                _int_at_least(1), defaults.validation_samples),
        validation_tol=_get(obj, 'validation_tol', pointer, _positive_number,
                            defaults.validation_tol),
        lipschitz_budget=_get(obj, 'lipschitz_budget', pointer,
                              _optional_positive, None),
        scheme=_get(obj, 'scheme', pointer, _parse_enum(DifferenceScheme),
                    defaults.scheme),
        seed=_get(obj, 'seed', pointer, _parse_int, 0),
    )


def _parse_curve(value: Any, pointer: str, dim: int) -> CurveSpec:
    obj = _expect_object(value, pointer)
    _check_keys(obj, {'points', 'expression'}, pointer)
    if ('points' in obj) == ('expression' in obj):
        raise ConfigError('Curve needs exactly one of points or expression',
                          pointer)

    if 'points' in obj:
        where = _child(pointer, 'points')
        rows = _expect_list(obj['points'], where)
        if len(rows) < 2:
            raise ConfigError('Polyline needs at least two points', where)
        return CurveSpec(points=tuple(_points(r, _child(where, k), dim)
                                      for k, r in enumerate(rows)))

    where = _child(pointer, 'expression')
    items = _expect_list(obj['expression'], where, dim)
    components = []
    for k, item in enumerate(items):
        text = _parse_string(item, _child(where, k))
        try:
            parse_expression(text, ['t'])
        except ExpressionParseError as err:
            raise ConfigError(str(err), _child(where, k)) from err
        components.append(text)
    return CurveSpec(components=tuple(components))


def _parse_curves(dim: int) -> Callable[[Any, str], Tuple[CurveSpec, ...]]:
    def parse(value: Any, pointer: str) -> Tuple[CurveSpec, ...]:
        items = _expect_list(value, pointer)
        return tuple(_parse_curve(v, _child(pointer, k), dim)
                     for k, v in enumerate(items))
    return parse


def _parse_fault(dim: int) -> Callable[[Any, str], FaultSpec]:
    def parse(value: Any, pointer: str) -> FaultSpec:
        obj = _expect_object(value, pointer)
        _check_keys(obj, {'i', 'j', 's', 'delta'}, pointer)

        def index(v: Any, p: str) -> int:
            number = _parse_int(v, p, 1)
            if number > dim:
                raise ConfigError(f'Index must be <= {dim}', p)
            return number

        return FaultSpec(_get(obj, 'i', pointer, index),
                         _get(obj, 'j', pointer, index),
                         _get(obj, 's', pointer, index),
                         _get(obj, 'delta', pointer, _parse_number))
    return parse


def _parse_transport(value: Any, pointer: str, dim: int) -> TransportSpec:
    obj = _expect_object(value, pointer)
    names = {f.name for f in dataclasses.fields(TransportSpec)}
    _check_keys(obj, names, pointer)
    defaults = TransportSpec()
    return TransportSpec(
        steps=_get(obj, 'steps', pointer, _int_at_least(1), defaults.steps),
        interpolation=_get(obj, 'interpolation', pointer,
                           _parse_enum(Interpolation), defaults.interpolation),
        curves=_get(obj, 'curves', pointer, _parse_curves(dim), ()),
        random_curves=_get(obj, 'random_curves', pointer, _parse_int, 0),
        loops=_get(obj, 'loops', pointer, _parse_bool, False),
        vectors_per_curve=_get(obj, 'vectors_per_curve', pointer,
                               _int_at_least(1), defaults.vectors_per_curve),
        tol=_get(obj, 'tol', pointer, _positive_number, defaults.tol),
        holonomy_loops=_get(obj, 'holonomy_loops', pointer, _parse_curves(dim), ()),
        holonomy_tol=_get(obj, 'holonomy_tol', pointer, _positive_number,
                          defaults.holonomy_tol),
        fault=_get(obj, 'fault', pointer, _parse_fault(dim), None),
        seed=_get(obj, 'seed', pointer, _parse_int, 0),
    )


def _parse_output(value: Any, pointer: str) -> OutputSpec:
    obj = _expect_object(value, pointer)
    _check_keys(obj, {'directory'}, pointer)
    return OutputSpec(_get(obj, 'directory', pointer, _parse_string, 'out'))


def _parse_task(value: Any, pointer: str) -> Task:
    name = _parse_string(value, pointer)
    try:
        return Task.from_name(name)
    except ValueError:
        allowed = ', '.join(t.cli_name for t in Task)
        raise ConfigError(f'Unknown task {name!r} (expected one of {allowed})',
                          pointer) from None


_SECTIONS = {'chart', 'metric', 'basepoint', 'quadrature', 'solver',
             'transport', 'task', 'output'}


def parse_config_object(obj: Any, default_task: Optional[Task] = None) -> RunConfig:
    obj = _expect_object(obj, '')
    _check_keys(obj, _SECTIONS, '')

    chart = _get(obj, 'chart', '', parse_chart)
    dim = chart.chart.dim

    if 'task' in obj or default_task is None:
        task = _get(obj, 'task', '', _parse_task)
    else:
        task = default_task

    basepoint = _get(obj, 'basepoint', '', lambda v, p: _points(v, p, dim),
                     chart.chart.lower)
    if not chart.chart.contains(np.asarray(basepoint)):
        raise ConfigError('Basepoint lies outside the chart', '/basepoint')

    return RunConfig(
        chart=chart,
        metric=_get(obj, 'metric', '', lambda v, p: parse_metric(v, p, dim)),
        basepoint=tuple(basepoint),
        quadrature=_get(obj, 'quadrature', '', _parse_quadrature, QuadratureSpec()),
        solver=_get(obj, 'solver', '', _parse_solver, SolverSpec()),
        transport=_get(obj, 'transport', '',
                       lambda v, p: _parse_transport(v, p, dim), TransportSpec()),
        task=task,
        output=_get(obj, 'output', '', _parse_output, OutputSpec()),
    )


def parse_config(text: str, default_task: Optional[Task] = None) -> RunConfig:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f'Json decode error: {err}') from err
    return parse_config_object(obj, default_task)


def load_config(path: str, default_task: Optional[Task] = None) -> RunConfig:
    try:
        with open(path, encoding='utf-8') as cfg_file:
            text = cfg_file.read()
    except FileNotFoundError as err:
        raise ConfigError(f'Config file {path!r} not found') from err
    except UnicodeDecodeError as err:
        raise ConfigError(f'Config file {path!r} is not UTF-8') from err
    return parse_config(text, default_task)
