import asyncio
import functools
import logging as log
import time
from datetime import datetime, timezone
from typing import Any, Callable, Dict, Generator, List, Optional, Tuple

import numpy as np

import dispatch
from blmetric import bl_frame_field, profile_norm
from chart import Grid
from config import RunConfig, Task
from connection import (ConnectionGrid, Curve, ExpressionCurve,
                        IsomorphismField, NewtonParams, SegmentCurve,
                        check_holonomy, christoffels, curvature,
                        discrete_parallelism_residual, random_curves,
                        solve_frame_field, transport_matrix,
                        verify_preservation)
from errors import BerwaldError, FieldValidationError
from examples import build_field
from isometry import anchor_vectors, isotropy_algebra, monochromacy_check
from norms import FinslerField, QuadratureParams
from reports import ReportWriter, RunMetadata, TaskReport, error_details


EXIT_OK = 0
EXIT_NEGATIVE = 1
EXIT_ERROR = 2

Outcome = Tuple[int, Dict[str, Any]]


class PipelineRunner:
    """
    Runs one task of the connection pipeline. Stages run off the event loop;
    fan-out inside a stage goes to the worker executor.
    """

    def __init__(self,
                 config: RunConfig,
                 executor: Optional[dispatch.Executor],
                 config_path: str = 'config.json',
                 threads: int = 1) -> None:
        self._cfg = config
        self._executor = executor
        self._config_path = config_path
        self._threads = threads
        self._writer = ReportWriter(config.output.directory)
        self._log = log.getLogger('PipelineRunner')
        self._stage = 'setup'

        self._field = build_field(config.metric, config.chart.chart,
                                  config.chart.resolution)
        self._grid: Grid = self._field.grid()

        quad = config.quadrature
        defaults = QuadratureParams.for_dim(config.dim, quad.seed)
        self._quad = QuadratureParams(quad.directions or defaults.directions,
                                      quad.radial_nodes, quad.seed,
                                      quad.shard_directions)

    def __await__(self) -> Generator:
        return self.run().__await__()

    @property
    def writer(self) -> ReportWriter:
        return self._writer

    async def _in_stage(self, stage: str, func: Callable, *args: Any, **kwargs: Any) -> Any:
        self._stage = stage
        self._log.info('Stage %s', stage)
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(None, functools.partial(func, *args, **kwargs))

    def _newton(self) -> NewtonParams:
        solver = self._cfg.solver
        return NewtonParams(solver.newton_tol, solver.max_iters, solver.seed,
                            solver.rank_tol)

    async def _validated_field(self) -> FinslerField:
        solver = self._cfg.solver
        await self._in_stage('validate', self._field.validate, self._grid,
                             solver.validation_samples, solver.seed,
                             solver.validation_tol, solver.lipschitz_budget,
                             self._executor)
        return self._field

    async def _process_validate_task(self) -> Outcome:
        solver = self._cfg.solver
        try:
            report = await self._in_stage(
                'validate', self._field.validate, self._grid,
                solver.validation_samples, solver.seed, solver.validation_tol,
                solver.lipschitz_budget, self._executor)
        except FieldValidationError as err:
            self._log.warning('Field is invalid: %s', err)
            return EXIT_NEGATIVE, {'valid': False,
                                   'failure': error_details(err, self._stage)}
        return EXIT_OK, {'valid': True, 'field': report.to_json()}

    async def _process_bl_task(self) -> Outcome:
        await self._validated_field()
        frames = await self._in_stage('bl', bl_frame_field, self._field,
                                      self._grid, self._quad, self._executor)
        self._writer.write_csv('frames.csv',
                               [f'x{k + 1}' for k in range(self._grid.dim)]
                               + ['row', 'col', 'value'],
                               frames.csv_rows())
        base = self._field.norm_at(self._basepoint())
        profile = await self._in_stage('bl', profile_norm, base, self._quad)
        return EXIT_OK, {'frames': frames.summary(),
                         'basepoint': self._basepoint().tolist(),
                         'basepoint_profile': profile.to_json()}

    def _basepoint(self) -> np.ndarray:
        return self._grid.point(self._grid.nearest_index(self._cfg.basepoint))

    def _isotropy_data(self) -> Dict[str, Any]:
        solver = self._cfg.solver
        profile = profile_norm(self._field.norm_at(self._basepoint()), self._quad,
                               self._executor)
        framed = profile.framed()
        isotropy = isotropy_algebra(framed, rank_tol=solver.rank_tol,
                                    seed=solver.seed)
        anchors = anchor_vectors(framed, isotropy, solver.seed)
        return {
            'isotropy': isotropy.to_json(),
            'anchors': anchors.to_json(),
            'anchors_chart': (anchors.vectors @ profile.frame.T).tolist(),
            'frame': profile.frame.tolist(),
        }

    async def _process_iso_dim_task(self) -> Outcome:
        await self._validated_field()
        data = await self._in_stage('iso-dim', self._isotropy_data)
        return EXIT_OK, data

    async def _process_monochromacy_task(self) -> Outcome:
        await self._validated_field()
        solver = self._cfg.solver
        report = await self._in_stage(
            'monochromacy', monochromacy_check, self._field, self._grid,
            self._cfg.basepoint, solver.restarts, solver.seed,
            solver.accept_tol, self._quad, solver.separation_restarts,
            solver.rank_tol, self._executor)
        return (EXIT_OK if report.verdict else EXIT_NEGATIVE), report.to_json()

    async def _synthesize(self) -> Tuple[IsomorphismField, ConnectionGrid, Dict[str, Any]]:
        await self._validated_field()
        solver = self._cfg.solver
        isofield = await self._in_stage(
            'synthesize', solve_frame_field, self._field, self._grid,
            self._cfg.basepoint, newton=self._newton(),
            accept_tol=solver.accept_tol, quad=self._quad,
            executor=self._executor)
        conn = await self._in_stage('christoffels', christoffels, isofield,
                                    solver.scheme)
        summary = isofield.summary()
        summary['anchor_residual'] = isofield.anchor_residual(self._field)
        summary['parallelism_residual'] = discrete_parallelism_residual(isofield, conn)
        summary['max_abs_gamma'] = conn.max_abs()
        return isofield, conn, summary

    async def _process_synthesize_task(self) -> Outcome:
        _, conn, summary = await self._synthesize()
        self._writer.write_csv('christoffels.csv', conn.csv_header(),
                               conn.csv_rows())
        self._writer.write_json('christoffels.json', conn.metadata())
        return EXIT_OK, {'isomorphism_field': summary}

    def _curves(self) -> List[Curve]:
        transport = self._cfg.transport
        curves: List[Curve] = []
        for spec in transport.curves:
            if spec.points is not None:
                curves.append(SegmentCurve(np.array(spec.points)))
            else:
                curves.append(ExpressionCurve.parse(spec.components))
        curves += random_curves(self._cfg.chart.chart, transport.random_curves,
                                transport.seed, loops=transport.loops)
        return curves

    def _loops(self) -> List[Curve]:
        return [SegmentCurve(np.array(spec.points)) if spec.points is not None
                else ExpressionCurve.parse(spec.components)
                for spec in self._cfg.transport.holonomy_loops]

    def _connection_for_transport(self, conn: ConnectionGrid) -> ConnectionGrid:
        fault = self._cfg.transport.fault
        if fault is None:
            return conn
        self._log.warning('Injecting %.3g into Gamma^%d_{%d %d}', fault.delta,
                          fault.j, fault.s, fault.i)
        return conn.perturbed(fault.i - 1, fault.j - 1, fault.s - 1, fault.delta)

    async def _process_transport_task(self) -> Outcome:
        _, conn, summary = await self._synthesize()
        conn = self._connection_for_transport(conn)
        transport = self._cfg.transport
        curves = self._curves()
        if not curves:
            raise BerwaldError('Transport needs configured or random curves')

        self._stage = 'transport'
        matrices = await dispatch.gather_in_executor(
            self._executor,
            lambda curve: transport_matrix(conn, curve, transport.steps,
                                           transport.interpolation),
            curves)

        rng = np.random.default_rng(transport.seed)
        chart = self._cfg.chart.chart
        results = []
        for curve, matrix in zip(curves, matrices):
            start, end = curve.endpoints()
            vectors = rng.standard_normal((transport.vectors_per_curve, chart.dim))
            moved = vectors @ matrix.T
            results.append({
                'start': start.tolist(),
                'end': end.tolist(),
                'transport': matrix.tolist(),
                'vectors': vectors.tolist(),
                'transported': moved.tolist(),
                'norm_before': self._field.norm_at(chart.wrap(start)).values(vectors).tolist(),
                'norm_after': self._field.norm_at(chart.wrap(end)).values(moved).tolist(),
            })
        return EXIT_OK, {'isomorphism_field': summary, 'curves': results}

    async def _process_verify_task(self) -> Outcome:
        _, conn, summary = await self._synthesize()
        conn = self._connection_for_transport(conn)
        transport = self._cfg.transport
        curves = self._curves()
        if not curves:
            raise BerwaldError('Verification needs configured or random curves')

        report = await self._in_stage(
            'verify', verify_preservation, self._field, conn, curves,
            transport.vectors_per_curve, transport.tol, transport.seed,
            transport.steps, transport.interpolation, self._executor)
        results: Dict[str, Any] = {'isomorphism_field': summary,
                                   'verification': report.to_json()}
        passed = report.passed

        loops = self._loops()
        if loops:
            holonomy = await self._in_stage(
                'holonomy', check_holonomy, self._field, conn, loops,
                transport.steps, transport.holonomy_tol,
                transport.interpolation, self._quad, self._executor)
            results['holonomy'] = holonomy.to_json()
            passed = passed and holonomy.passed

        return (EXIT_OK if passed else EXIT_NEGATIVE), results

    async def _process_curvature_task(self) -> Outcome:
        _, conn, summary = await self._synthesize()
        grid_curvature = await self._in_stage('curvature', curvature, conn)
        self._writer.write_csv('curvature.csv', grid_curvature.csv_header(),
                               grid_curvature.csv_rows())
        return EXIT_OK, {'isomorphism_field': summary,
                         'max_norm': grid_curvature.max_norm(),
                         'pair_max': grid_curvature.pair_max()}

    async def _process_task(self, task: Task) -> Outcome:
        self._log.info('Handle %s task', task.cli_name)

        if task == Task.VALIDATE:
            return await self._process_validate_task()
        if task == Task.BL:
            return await self._process_bl_task()
        if task == Task.ISO_DIM:
            return await self._process_iso_dim_task()
        if task == Task.MONOCHROMACY:
            return await self._process_monochromacy_task()
        if task == Task.SYNTHESIZE:
            return await self._process_synthesize_task()
        if task == Task.TRANSPORT:
            return await self._process_transport_task()
        if task == Task.VERIFY:
            return await self._process_verify_task()
        if task == Task.CURVATURE:
            return await self._process_curvature_task()

        assert False, f'Unknown task {task}'

    async def run(self) -> int:
        task = self._cfg.task
        started = datetime.now(timezone.utc).isoformat(timespec='seconds')
        clock = time.perf_counter()

        try:
            code, results = await self._process_task(task)
            status = 'ok' if code == EXIT_OK else 'negative'
            report = TaskReport(task.cli_name, status, code, results)
        except (BerwaldError, ValueError) as err:
            self._log.error('Stage %s failed: %s', self._stage, err)
            report = TaskReport(task.cli_name, 'error', EXIT_ERROR,
                                error=error_details(err, self._stage))

        report.results['params'] = {
            'basepoint': list(self._cfg.basepoint),
            'resolution': list(self._cfg.chart.resolution),
            'metric': self._cfg.metric.to_json(),
            'directions': self._quad.directions,
            'radial_nodes': self._quad.radial_nodes,
            'seed': self._quad.seed,
        }
        self._writer.write_report(report)
        self._writer.write_meta(task.cli_name, RunMetadata(
            started, time.perf_counter() - clock, self._threads,
            self._config_path))

        self._log.info('Task %s finished with exit code %d', task.cli_name,
                       report.exit_code)
        return report.exit_code
