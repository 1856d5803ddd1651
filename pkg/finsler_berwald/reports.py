import csv
import json
import logging as log
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np


@dataclass
class TaskReport:
    """Outcome of one pipeline task as written to <task>.json"""

    task: str
    status: str
    exit_code: int
    results: Dict[str, Any] = field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None

    def to_json(self) -> Dict[str, Any]:
        data = {
            'task': self.task,
            'status': self.status,
            'exit_code': self.exit_code,
            'results': self.results,
        }
        if self.error is not None:
            data['error'] = self.error
        return data


@dataclass
class RunMetadata:
    """Run facts that differ between identical runs"""

    started_at: str
    wall_seconds: float
    threads: int
    config_path: str

    def to_json(self) -> Dict[str, Any]:
        return {
            'started_at': self.started_at,
            'wall_seconds': self.wall_seconds,
            'threads': self.threads,
            'config_path': self.config_path,
        }


def jsonable(value: Any) -> Any:
    """Plain JSON values; non-finite floats become null"""

    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        number = float(value)
        return number if math.isfinite(number) else None
    if hasattr(value, 'to_json'):
        return jsonable(value.to_json())
    return value


def error_details(err: Exception, stage: str) -> Dict[str, Any]:
    details: Dict[str, Any] = {
        'type': type(err).__name__,
        'message': str(err),
        'stage': stage,
    }
    point = getattr(err, 'point', None)
    if point is not None:
        details['x'] = list(point)
    pointer = getattr(err, 'pointer', None)
    if pointer:
        details['pointer'] = pointer
    return details


class ReportWriter:
    """Writes task reports, metadata sidecars and CSV grids into one directory"""

    def __init__(self, directory: str) -> None:
        self._log = log.getLogger('ReportWriter')
        self._dir = directory

    @property
    def directory(self) -> str:
        return self._dir

    def _path(self, name: str) -> str:
        os.makedirs(self._dir, exist_ok=True)
        return os.path.join(self._dir, name)

    def write_json(self, name: str, data: Any) -> str:
        path = self._path(name)
        with open(path, 'w', encoding='utf-8') as out:
            json.dump(jsonable(data), out, sort_keys=True, indent=2,
                      allow_nan=False)
            out.write('\n')
        self._log.debug('Wrote %s', path)
        return path

    def write_report(self, report: TaskReport) -> str:
        path = self.write_json(f'{report.task}.json', report)
        self._log.info('Report written to %s', path)
        return path

    def write_meta(self, task: str, meta: RunMetadata) -> str:
        return self.write_json(f'{task}.meta.json', meta)

    def write_csv(self,
                  name: str,
                  header: Sequence[str],
                  rows: Iterable[Sequence[Any]]) -> str:
        path = self._path(name)
        count = 0
        with open(path, 'w', newline='', encoding='utf-8') as out:
            writer = csv.writer(out)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                                 else v for v in row])
                count += 1
        self._log.info('Wrote %d rows to %s', count, path)
        return path
