from typing import Optional, Sequence, Tuple


Span = Tuple[int, int]


def _format_point(point: Optional[Sequence[float]]) -> str:
    if point is None:
        return ''
    coords = ', '.join(f'{c:.6g}' for c in point)
    return f' at x=({coords})'


class BerwaldError(Exception):
    """Runtime exception of the connection toolkit"""


class ExpressionParseError(BerwaldError):
    """Scalar expression could not be parsed"""

    def __init__(self, message: str, span: Span) -> None:
        super().__init__(f'{message} (columns {span[0]}-{span[1]})')
        self.span = span


class ExpressionEvalError(BerwaldError):
    """Scalar expression could not be evaluated"""

    def __init__(self, message: str, span: Span) -> None:
        super().__init__(f'{message} (columns {span[0]}-{span[1]})')
        self.span = span


class ConfigError(BerwaldError):
    """Run configuration is malformed"""

    def __init__(self, message: str, pointer: str = '') -> None:
        super().__init__(f'{pointer or "/"}: {message}')
        self.pointer = pointer


class NormDomainError(BerwaldError):
    """Norm evaluated outside of its domain"""


class NormValidationError(BerwaldError):
    """Norm violates the Minkowski norm axioms"""


class PointError(BerwaldError):
    """Failure attached to a point of the chart"""

    def __init__(self,
                 message: str,
                 point: Optional[Sequence[float]] = None) -> None:
        super().__init__(message + _format_point(point))
        self.point = None if point is None else tuple(float(c) for c in point)


class FieldValidationError(PointError):
    """Finsler field is invalid at a grid point"""


class BLMetricError(PointError):
    """Binet-Legendre metric or frame could not be computed"""


class IsotropyError(BerwaldError):
    """Isotropy algebra computation is inconsistent"""


class AnchorSelectionError(BerwaldError):
    """Anchor vectors could not reach the required rank"""


class NewtonConvergenceError(PointError):
    """Newton continuation did not converge"""


class CertificationError(PointError):
    """Solved isomorphism is not a full isometry"""

    def __init__(self,
                 message: str,
                 point: Optional[Sequence[float]],
                 defect: float,
                 threshold: float) -> None:
        super().__init__(f'{message}: defect {defect:.3e} > {threshold:.3e}',
                         point)
        self.defect = defect
        self.threshold = threshold


class CurveOutsideChartError(PointError):
    """Curve leaves the coordinate chart"""
