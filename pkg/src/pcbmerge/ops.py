"""Flat float32 kernels shared by the merge methods.

Every function here works on one granularity unit: a 1-D float32 array
holding either one flattened tensor or the whole flattened model.
"""

from __future__ import annotations

from typing import Iterator, Mapping, Sequence

import numpy as np

GRANULARITIES = ("per_tensor", "global")


def normalize(x: np.ndarray) -> np.ndarray:
    """Scale by the largest magnitude so values land in [-1, 1]; zero stays zero."""
    x = np.asarray(x, dtype=np.float32)
    peak = np.max(np.abs(x)) if x.size else 0
    if peak == 0:
        return np.zeros_like(x)
    return x / peak


def softmax_(x: np.ndarray) -> np.ndarray:
    """In-place max-subtracted softmax over a float vector."""
    if x.size == 0:
        return x
    x -= np.max(x)
    np.exp(x, out=x)
    x /= np.sum(x, dtype=np.float64).astype(x.dtype)
    return x


def softmax(x: np.ndarray) -> np.ndarray:
    return softmax_(np.array(x, dtype=np.float32, copy=True))


def keep_count(size: int, ratio: float) -> int:
    """Entries kept by a mask of ratio r: D - floor((1 - r) * D)."""
    # absorb binary rounding, e.g. (1 - 0.9) * 10 evaluating to 0.9999999999999998
    dropped = int(np.floor((1.0 - ratio) * size + 1e-9))
    return size - max(0, min(size, dropped))


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of exactly ``k`` largest scores.

    Ties at the threshold go to the lower flat index.
    """
    scores = np.asarray(scores)
    size = scores.size
    if k >= size:
        return np.ones(size, dtype=bool)
    if k <= 0:
        return np.zeros(size, dtype=bool)
    threshold = np.partition(scores, size - k)[size - k]
    mask = scores > threshold
    need = k - int(np.count_nonzero(mask))
    if need > 0:
        mask[np.flatnonzero(scores == threshold)[:need]] = True
    return mask


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


class UnitLayout:
    """Maps named tensors onto granularity units and back.

    ``per_tensor``: each name is its own unit. ``global``: all names are
    concatenated, in the given order, into one unit.
    """

    def __init__(self, names: Sequence[str], shapes: Mapping[str, tuple], granularity: str):
        if granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
        self.names = list(names)
        self.shapes = {n: tuple(shapes[n]) for n in self.names}
        self.granularity = granularity

    def units(self) -> list:
        """List of name groups, one group per unit."""
        if self.granularity == "global":
            return [self.names] if self.names else []
        return [[n] for n in self.names]

    def gather(self, group: Sequence[str], arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        """Flatten the group's arrays into one unit (a view when the group has one member)."""
        if len(group) == 1:
            return np.asarray(arrays[group[0]]).reshape(-1)
        return np.concatenate([np.asarray(arrays[n]).reshape(-1) for n in group])

    def scatter(self, group: Sequence[str], flat: np.ndarray) -> Iterator[tuple]:
        start = 0
        for n in group:
            size = int(np.prod(self.shapes[n], dtype=np.int64))
            yield n, flat[start:start + size].reshape(self.shapes[n])
            start += size
