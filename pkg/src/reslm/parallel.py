"""BLAS thread control."""

from contextlib import contextmanager

from threadpoolctl import threadpool_limits


@contextmanager
def single_threaded():
    """Pin BLAS/OpenMP pools to one thread for comparable timings."""
    with threadpool_limits(limits=1):
        yield


def limit_threads(n: int):
    """Process-wide BLAS thread cap; keep the returned object alive."""
    return threadpool_limits(limits=n)
