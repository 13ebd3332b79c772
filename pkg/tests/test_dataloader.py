import asyncio

import numpy as np
import pytest

from gaflow import dataloader, synthdata
from gaflow.errors import ContractError, DimensionError
from gaflow.sample import TryOnSample, collate


@pytest.fixture(scope="module")
def samples():
    return synthdata.generate(21, 5, 16, 16, amplitude=1.0)


def test_batch_indices():
    assert dataloader.batch_indices([4, 2, 0, 1, 3], 2) == [[4, 2], [0, 1], [3]]
    with pytest.raises(ContractError):
        dataloader.batch_indices([0], 0)


def test_epoch_order_is_reproducible():
    a = dataloader.epoch_order(10, 7, 1)
    assert np.array_equal(a, dataloader.epoch_order(10, 7, 1))
    assert sorted(a) == list(range(10))
    assert not np.array_equal(a, dataloader.epoch_order(10, 7, 2))


def test_collate(samples):
    batch = collate(samples[:3], [0, 1, 2])
    assert len(batch) == 3
    assert batch.I_priors.shape == (3, 36, 16, 16)
    assert batch.gt_flow.shape == (3, 2, 16, 16)
    assert batch.indices == [0, 1, 2]
    with pytest.raises(AttributeError):
        batch.unknown


def test_collate_without_flow(samples):
    bare = TryOnSample(**dict(samples[0].arrays(), gt_flow=None))
    batch = collate([bare, samples[1]])
    assert batch.gt_flow is None


def test_collate_extent_mismatch(samples):
    other = synthdata.generate(1, 1, 32, 16, amplitude=1.0)[0]
    with pytest.raises(DimensionError):
        collate([samples[0], other])


def test_iterate_batches_follows_order(samples):
    batches = list(dataloader.iterate_batches(samples, [3, 1, 4, 0, 2], 2))
    assert [b.indices for b in batches] == [[3, 1], [4, 0], [2]]
    assert np.array_equal(batches[0].I_m.data[0], samples[3].I_m)


@pytest.mark.asyncio
async def test_prefetcher_serves_batches_in_order(samples):
    prefetcher = dataloader.BatchPrefetcher(samples, [4, 3, 2, 1, 0], batch_size=2, prefetch=1)
    indices = []
    try:
        async for batch in prefetcher:
            indices.append(batch.indices)
            await asyncio.sleep(0.01)
    finally:
        await prefetcher.close()
    assert indices == [[4, 3], [2, 1], [0]]
    assert len(prefetcher) == 3


@pytest.mark.asyncio
async def test_prefetcher_queue_is_bounded(samples):
    prefetcher = dataloader.BatchPrefetcher(samples, range(5), batch_size=1, prefetch=2)
    iterator = prefetcher.__aiter__()
    await asyncio.sleep(0.2)
    assert prefetcher.queue.qsize() <= 2
    first = await iterator.__anext__()
    assert first.indices == [0]
    await prefetcher.close()
    assert prefetcher._task.done()


@pytest.mark.asyncio
async def test_prefetcher_propagates_errors(samples):
    other = synthdata.generate(1, 1, 32, 16, amplitude=1.0)[0]
    prefetcher = dataloader.BatchPrefetcher(list(samples[:2]) + [other], [0, 2, 1], batch_size=2)
    with pytest.raises(DimensionError):
        try:
            async for _ in prefetcher:
                pass
        finally:
            await prefetcher.close()
