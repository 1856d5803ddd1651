import asyncio
import concurrent.futures
import logging as log
from typing import Callable, Iterable, List, Optional, TypeVar


T = TypeVar('T')
R = TypeVar('R')

Executor = concurrent.futures.Executor

_log = log.getLogger('dispatch')


def ordered_map(executor: Optional[Executor],
                func: Callable[[T], R],
                items: Iterable[T]) -> List[R]:
    """
    Apply func to every item, on the executor when one is given.
    Results always come back in input order, so any reduction done over
    them does not depend on the number of workers.
    """
    items = list(items)
    if executor is None or len(items) < 2:
        return [func(item) for item in items]
    return list(executor.map(func, items))


async def gather_in_executor(executor: Optional[Executor],
                             func: Callable[[T], R],
                             items: Iterable[T]) -> List[R]:
    loop = asyncio.get_running_loop()

    futures = [loop.run_in_executor(executor, func, item) for item in items]
    _log.debug('Dispatched %d jobs', len(futures))

    return list(await asyncio.gather(*futures))
