"""Chunked work scheduling with thread-count-independent results.

Work over a batch of paths is cut into fixed-size chunks; the chunking depends
only on the batch size, never on how many worker threads run them, and results
are combined in chunk order with pairwise reductions.  Two runs of the same
config therefore produce bit-identical numbers whether --threads is 1 or 16.

numpy releases the GIL inside its kernels, so a plain thread pool gives real
CPU parallelism here without any pickling.
"""

import os
from concurrent.futures import ThreadPoolExecutor

CHUNK = 256


def default_threads():
    """Thread count from PGDPO_THREADS, else 1."""
    raw = os.environ.get("PGDPO_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return 1


def chunk_ranges(n_items, chunk=CHUNK):
    """[(start, stop)] slices covering range(n_items) in fixed order."""
    return [(s, min(s + chunk, n_items)) for s in range(0, n_items, chunk)]


def map_chunks(fn, n_items, threads=None, chunk=CHUNK):
    """Run fn(start, stop) over fixed chunks, returning results in chunk order.

    The schedule (chunk boundaries and result order) is identical for every
    thread count; only wall time changes.
    """
    ranges = chunk_ranges(n_items, chunk)
    if threads is None:
        threads = default_threads()
    if threads <= 1 or len(ranges) <= 1:
        return [fn(s, e) for s, e in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, s, e) for s, e in ranges]
        return [f.result() for f in futures]


def pairwise_sum(values):
    """Sum a list by fixed-order pairwise reduction (order-stable rounding)."""
    vals = list(values)
    if not vals:
        raise ValueError("pairwise_sum of empty list")
    while len(vals) > 1:
        nxt = []
        for i in range(0, len(vals) - 1, 2):
            nxt.append(vals[i] + vals[i + 1])
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]
