""" Bounded-queue batch prefetching.

A producer task collates batches in a worker thread and puts them on an
asyncio.Queue of limited size; the consumer (the training loop) takes
them in order. The batch order is fixed by the index order passed in.
"""
from __future__ import annotations

import asyncio
import logging
import typing

import numpy as np

from .errors import ContractError
from .sample import TryOnBatch, TryOnSample, collate


def batch_indices(order: typing.Sequence[int], batch_size: int) -> list[list[int]]:
    if batch_size < 1:
        raise ContractError(f"batch_size must be at least 1, got {batch_size}.")
    order = [int(i) for i in order]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """ Permutation of range(n) that depends only on seed and epoch. """
    return np.random.default_rng([seed, epoch]).permutation(n)


class BatchPrefetcher(object):
    """ Asynchronous iterator over batches.

    Parameters
    ----------
    samples : sequence of TryOnSample
    order : sequence of int
        sample indices in the order they are served
    batch_size : int
    prefetch : int
        maximum number of collated batches waiting in the queue
    """
    def __init__(self, samples: typing.Sequence[TryOnSample], order: typing.Sequence[int],
                 batch_size: int, prefetch: int = 2):
        self.samples = samples
        self.chunks = batch_indices(order, batch_size)
        self.prefetch = max(1, prefetch)
        self.queue: asyncio.Queue | None = None
        self._task: asyncio.Task | None = None

    def __len__(self) -> int:
        return len(self.chunks)

    async def produce(self) -> None:
        for chunk in self.chunks:
            batch = await asyncio.to_thread(collate, [self.samples[i] for i in chunk], chunk)
            await self.queue.put(batch)
        await self.queue.put(None)

    def __aiter__(self) -> "BatchPrefetcher":
        self.queue = asyncio.Queue(maxsize=self.prefetch)
        self._task = asyncio.create_task(self.produce())
        return self

    async def __anext__(self) -> TryOnBatch:
        get = asyncio.create_task(self.queue.get())
        done, _ = await asyncio.wait({get, self._task}, return_when=asyncio.FIRST_COMPLETED)
        if get not in done and self._task.exception() is not None:
            get.cancel()
            raise self._task.exception()
        batch = await get
        if batch is None:
            await self._task
            raise StopAsyncIteration
        return batch

    async def close(self) -> None:
        if self._task is None:
            return
        if self._task.done():
            # a producer failure has already been raised to the consumer
            if not self._task.cancelled():
                self._task.exception()
            return
        self._task.cancel()
        try:
            await self._task
        except asyncio.CancelledError:
            pass
        logger.debug("Batch prefetcher closed.")


def iterate_batches(samples: typing.Sequence[TryOnSample], order: typing.Sequence[int] | None = None,
                    batch_size: int = 4) -> typing.Iterator[TryOnBatch]:
    """ Synchronous batching in the given order, used for evaluation. """
    if order is None:
        order = range(len(samples))
    for chunk in batch_indices(order, batch_size):
        yield collate([samples[i] for i in chunk], chunk)


logger = logging.getLogger(__name__)
