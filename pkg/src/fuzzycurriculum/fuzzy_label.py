"""Intuitionistic fuzzy labels from crisp label volumes.

The membership of voxel ``x`` in class ``c`` is the fraction of its
neighbours (Chebyshev radius ``r``, centre excluded, clipped to the volume)
that carry label ``c``. Non-membership is ``(1 - mu) * rho2`` and hesitation
is whatever is left over.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from .errors import DegenerateVolume, InvalidParameter, ShapeMismatch
from .volume import FuzzyLabelVolume, LabelVolume, ScalarField

BOUNDARY_TOL = 1e-9

__all__ = [
    "FuzzyLabelVolume",
    "boundary_mask",
    "compute_membership",
    "fuzzify",
    "neighbor_counts",
]


def _summed_volume(arr, r):
    """Zero-padded 3D prefix sums over the spatial axes of ``arr``."""
    pad = [(r + 1, r), (r + 1, r), (r + 1, r)] + [(0, 0)] * (arr.ndim - 3)
    table = np.pad(arr, pad)
    for axis in range(3):
        np.cumsum(table, axis=axis, out=table)
    return table


def _box_sums(table, r, z0, z1, h, w):
    """Sum of each (2r+1)^3 box centred on voxels with z in [z0, z1)."""
    k = 2 * r + 1
    zs, ys, xs = slice(z0, z1), slice(0, h), slice(0, w)
    ze, ye, xe = slice(z0 + k, z1 + k), slice(k, h + k), slice(k, w + k)
    return (
        table[ze, ye, xe]
        - table[zs, ye, xe]
        - table[ze, ys, xe]
        - table[ze, ye, xs]
        + table[zs, ys, xe]
        + table[zs, ye, xs]
        + table[ze, ys, xs]
        - table[zs, ys, xs]
    )


def neighbor_counts(labels: LabelVolume, r: int, workers: int = 1):
    """Per-class neighbour counts and in-bounds neighbourhood sizes.

    Returns ``(counts, sizes)`` with integer shapes ``(d, h, w, C)`` and
    ``(d, h, w)``. The centre voxel is excluded from both.
    """
    if int(r) != r or r < 1:
        raise InvalidParameter(f"radius must be an integer >= 1, got {r}")
    r = int(r)
    d, h, w = labels.dims
    onehot = labels.one_hot(dtype=np.int64)
    class_table = _summed_volume(onehot, r)
    size_table = _summed_volume(np.ones((d, h, w), dtype=np.int64), r)

    counts = np.empty((d, h, w, labels.num_classes), dtype=np.int64)
    sizes = np.empty((d, h, w), dtype=np.int64)

    def fill(z0, z1):
        counts[z0:z1] = _box_sums(class_table, r, z0, z1, h, w) - onehot[z0:z1]
        sizes[z0:z1] = _box_sums(size_table, r, z0, z1, h, w) - 1

    bounds = np.linspace(0, d, max(1, min(int(workers), d)) + 1).astype(int)
    chunks = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(chunks) == 1:
        fill(*chunks[0])
    else:
        # Chunks write disjoint z-slabs, so the result is order independent.
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            list(pool.map(lambda c: fill(*c), chunks))
    return counts, sizes


def compute_membership(labels: LabelVolume, r: int = 1, workers: int = 1) -> np.ndarray:
    """Membership ``mu[z, y, x, c]`` as float64, summing to 1 over classes."""
    if labels.data.size == 1:
        raise DegenerateVolume("a 1x1x1 volume has no neighbours")
    counts, sizes = neighbor_counts(labels, r, workers=workers)
    return counts / sizes[..., None].astype(np.float64)


def fuzzify(labels: LabelVolume, r: int = 1, rho2: float = 0.5, workers: int = 1) -> FuzzyLabelVolume:
    if not 0.0 < rho2 <= 1.0:
        raise InvalidParameter(f"rho2 must lie in (0, 1], got {rho2}")
    mu = compute_membership(labels, r, workers=workers)
    nu = (1.0 - mu) * rho2
    pi = 1.0 - mu - nu
    return FuzzyLabelVolume(mu, nu, pi, radius=r, rho2=rho2)


def boundary_mask(fuzzy: FuzzyLabelVolume, labels: Optional[LabelVolume] = None) -> ScalarField:
    """1.0 on voxels with a disagreeing neighbour, else 0.0.

    With ``labels`` the test is ``mu[own label] < 1``, which also flags an
    isolated voxel whose neighbours all agree with each other. Without them
    the dominant membership stands in for the own-label membership.
    """
    mu = fuzzy.mu.astype(np.float64)
    if labels is None:
        own = mu.max(axis=-1)
    else:
        if labels.dims != fuzzy.dims:
            raise ShapeMismatch(f"labels {labels.dims} and fuzzy labels {fuzzy.dims} differ")
        own = np.take_along_axis(mu, labels.data[..., None].astype(np.intp), axis=-1)[..., 0]
    return ScalarField((own < 1.0 - BOUNDARY_TOL).astype(np.float32))
