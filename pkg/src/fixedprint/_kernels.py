"""Compiled inner loops: bounded top-k heap and PQ asymmetric distances.

The heap keeps the ``k`` best ``(value, ordinal)`` pairs, where larger values
win and equal values prefer the smaller ordinal. Its root is the worst kept
entry, so each scanned value costs one comparison unless it enters the heap.
"""

import numba
import numpy as np

# Row stride of the flattened ADC table. Codes are bytes, so every table is
# padded to 256 columns; a compile-time stride lets the scan loop run about
# twice as fast as a runtime one.
STRIDE = 256


@numba.njit(cache=True, nogil=True, inline="always")
def _worse(v1, o1, v2, o2):
    return v1 < v2 or (v1 == v2 and o1 > o2)


@numba.njit(cache=True, nogil=True)
def heap_offer(heap_v, heap_o, size, k, v, o):
    """Offer one entry; returns the new heap size."""
    if size < k:
        j = size
        while j > 0:
            parent = (j - 1) >> 1
            if _worse(v, o, heap_v[parent], heap_o[parent]):
                heap_v[j] = heap_v[parent]
                heap_o[j] = heap_o[parent]
                j = parent
            else:
                break
        heap_v[j] = v
        heap_o[j] = o
        return size + 1
    if not _worse(heap_v[0], heap_o[0], v, o):
        return size
    j = 0
    while True:
        child = 2 * j + 1
        if child >= k:
            break
        right = child + 1
        if right < k and _worse(heap_v[right], heap_o[right], heap_v[child], heap_o[child]):
            child = right
        if _worse(heap_v[child], heap_o[child], v, o):
            heap_v[j] = heap_v[child]
            heap_o[j] = heap_o[child]
            j = child
        else:
            break
    heap_v[j] = v
    heap_o[j] = o
    return size


@numba.njit(cache=True, nogil=True)
def heap_push_block(values, base, heap_v, heap_o, size, k):
    """Offer ``values[i]`` with ordinal ``base + i`` for every i."""
    for i in range(values.shape[0]):
        size = heap_offer(heap_v, heap_o, size, k, np.float64(values[i]), base + i)
    return size


@numba.njit(cache=True, nogil=True)
def adc_push(codes, table, start, stop, heap_v, heap_o, size, k):
    """Scan PQ code rows ``[start, stop)`` and keep the k smallest distances.

    ``table`` is the flattened ``m x STRIDE`` distance table; each row costs
    exactly ``m`` lookups and additions. Distances are stored negated in the
    heap.
    """
    m = codes.shape[1]
    for r in range(start, stop):
        acc = 0.0
        row = codes[r]
        for i in range(m):
            acc += table[i * STRIDE + row[i]]
        # rows arrive in ordinal order, so a full heap only takes strict improvements
        if size == k and -acc <= heap_v[0]:
            continue
        size = heap_offer(heap_v, heap_o, size, k, -acc, r)
    return size


@numba.njit(cache=True, nogil=True)
def adc_all(codes, table, out):
    m = codes.shape[1]
    for r in range(codes.shape[0]):
        acc = 0.0
        row = codes[r]
        for i in range(m):
            acc += table[i * STRIDE + row[i]]
        out[r] = acc
    return out
