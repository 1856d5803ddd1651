import argparse
import asyncio
import concurrent.futures
import functools
import logging as log
import os
import signal
import sys
from typing import List, Optional

from config import Task, load_config
from errors import BerwaldError
from pipeline import EXIT_ERROR, PipelineRunner
from reports import ReportWriter, TaskReport, error_details


Executor = concurrent.futures.ThreadPoolExecutor


def _parse_args(argv: Optional[List[str]]) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog='finsler_berwald',
        description='Monochromacy checks and associated connections of '
                    'Finsler metrics on coordinate charts')

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default='config.json',
                        help='JSON run file (default: config.json)')
    common.add_argument('--out', default=None,
                        help='output directory (overrides the run file)')
    common.add_argument('--threads', type=int, default=None,
                        help='worker thread cap')
    common.add_argument('--seed', type=int, default=None,
                        help='seed for every random choice (overrides the run file)')
    common.add_argument('--verbose', action='store_true',
                        help='debug logging')

    commands = parser.add_subparsers(dest='command', required=True)
    for task in Task:
        commands.add_parser(task.cli_name, parents=[common])

    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error('--threads must be at least 1')
    if args.seed is not None and args.seed < 0:
        parser.error('--seed must be non-negative')
    return args


async def _run(args: argparse.Namespace, executor: Executor, threads: int) -> int:
    task = Task.from_name(args.command)
    try:
        config = load_config(args.config, task)
        config = config.with_overrides(task=task, out=args.out, seed=args.seed)
        runner = PipelineRunner(config, executor, args.config, threads)
    except BerwaldError as err:
        log.error('Setup failed: %s', err)
        writer = ReportWriter(args.out or 'out')
        writer.write_report(TaskReport(task.cli_name, 'error', EXIT_ERROR,
                                       error=error_details(err, 'config')))
        return EXIT_ERROR

    return await runner


async def _shutdown(executor, loop, sig=None):
    if sig is not None:
        log.warning("Received exit signal %s", sig.name)

    tasks = [t for t in asyncio.all_tasks(loop) if t is not asyncio.current_task()]

    for task in tasks:
        task.cancel()

    log.warning('Cancelling %d tasks', len(tasks))
    await asyncio.gather(*tasks, return_exceptions=True)

    log.warning("Shutting down executor")
    executor.shutdown(wait=False, cancel_futures=True)


def _handle_exception(executor, loop, context):
    msg = context.get('exception', context['message'])
    log.error('Caught exception: %s', msg)
    log.info('Shutting down...')
    asyncio.create_task(_shutdown(executor, loop))


def main(argv: Optional[List[str]] = None) -> int:
    args = _parse_args(argv)

    log.basicConfig(
        level=log.DEBUG if args.verbose else log.INFO,
        format='%(asctime)s,%(msecs)d %(levelname)s %(name)s: %(message)s',
        datefmt='%H:%M:%S',
    )

    threads = args.threads or min(32, (os.cpu_count() or 1) + 4)
    executor = Executor(max_workers=threads)
    loop = asyncio.new_event_loop()
    asyncio.set_event_loop(loop)

    signals = (signal.SIGHUP, signal.SIGTERM, signal.SIGINT)
    for s in signals:
        loop.add_signal_handler(
            s, lambda s=s: asyncio.create_task(_shutdown(executor, loop, s)))

    handle_exc_func = functools.partial(_handle_exception, executor)
    loop.set_exception_handler(handle_exc_func)

    try:
        status = loop.run_until_complete(_run(args, executor, threads))
    except asyncio.CancelledError:
        log.error('Run cancelled')
        status = EXIT_ERROR
    except OSError as err:
        log.error('Output error: %s', err)
        status = EXIT_ERROR
    finally:
        executor.shutdown(wait=True)
        loop.close()
        log.info('Successfully shutdown')

    return status


if __name__ == '__main__':
    sys.exit(main())
