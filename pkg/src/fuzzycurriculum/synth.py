"""Seeded synthetic label phantoms with controlled annotation noise.

Two corruptions are layered on the clean rasterisation:

* boundary jitter: voxels within a band of the clean class boundary are
  relabelled at random to a class found nearby;
* slice flips: each z-slice is, with some probability, either erased
  (foreground to background) or dilated by one voxel in-plane, mimicking an
  inconsistent annotation of one slice between its neighbours.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidSpec
from .volume import LabelVolume, ScalarField

SHAPES = ("sphere", "cuboid", "two-blob")


@dataclass(frozen=True)
class SynthSpec:
    dims: Sequence[int] = (16, 16, 16)
    num_classes: int = 2
    shape: str = "sphere"
    center: Optional[Sequence[float]] = None
    # sphere / two-blob: one radius per foreground class, painted in order
    radii: Sequence[float] = (5.0,)
    # cuboid: one (z, y, x) half-extent per foreground class
    extents: Sequence[Sequence[int]] = ((3, 3, 3),)
    blob_offset: float = 4.0
    slice_flip_prob: float = 0.2
    boundary_jitter_voxels: int = 1
    boundary_flip_prob: float = 0.3
    intensity_means: Optional[Sequence[float]] = None
    intensity_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims) if self.dims is not None else ()
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise InvalidSpec(f"dims must be three positive integers, got {self.dims!r}")
        object.__setattr__(self, "dims", dims)
        if not 2 <= self.num_classes <= 256:
            raise InvalidSpec("num_classes must be in [2, 256]")
        if self.shape not in SHAPES:
            raise InvalidSpec(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        for name in ("slice_flip_prob", "boundary_flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidSpec(f"{name} must lie in [0, 1], got {v}")
        if self.boundary_jitter_voxels < 0:
            raise InvalidSpec("boundary_jitter_voxels must be >= 0")
        if self.intensity_sigma < 0:
            raise InvalidSpec("intensity_sigma must be >= 0")
        if self.intensity_means is not None and len(self.intensity_means) != self.num_classes:
            raise InvalidSpec("intensity_means needs one entry per class")
        n_fg = self.num_classes - 1
        if self.shape == "cuboid":
            if len(self.extents) < 1 or len(self.extents) > n_fg:
                raise InvalidSpec(f"cuboid needs 1..{n_fg} extents")
        elif len(self.radii) < 1 or len(self.radii) > n_fg or any(r < 0 for r in self.radii):
            raise InvalidSpec(f"{self.shape} needs 1..{n_fg} non-negative radii")

    @property
    def resolved_center(self):
        if self.center is None:
            return tuple((d - 1) / 2.0 for d in self.dims)
        if len(self.center) != 3:
            raise InvalidSpec("center must have three coordinates")
        return tuple(float(c) for c in self.center)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown synth keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc

    def to_dict(self):
        out = asdict(self)
        out["dims"] = list(self.dims)
        for k in ("center", "radii", "extents", "intensity_means"):
            if out[k] is not None:
                out[k] = [list(v) if isinstance(v, (list, tuple)) else v for v in out[k]]
        return out


def _check_fits(lo, hi, dims):
    for a, b, d in zip(lo, hi, dims):
        if a < 0 or b > d - 1:
            raise InvalidSpec(f"geometry [{lo}, {hi}] exceeds volume dims {dims}")


def _grid(dims):
    return np.indices(dims, dtype=np.float64)


def rasterize(spec: SynthSpec) -> np.ndarray:
    """Clean label array for the spec geometry."""
    dims = spec.dims
    labels = np.zeros(dims, dtype=np.uint8)
    zz, yy, xx = _grid(dims)
    cz, cy, cx = spec.resolved_center
    if spec.shape == "cuboid":
        for k, ext in enumerate(spec.extents, start=1):
            ez, ey, ex = (int(e) for e in ext)
            _check_fits((cz - ez, cy - ey, cx - ex), (cz + ez, cy + ey, cx + ex), dims)
            inside = (np.abs(zz - cz) <= ez) & (np.abs(yy - cy) <= ey) & (np.abs(xx - cx) <= ex)
            labels[inside] = k
        return labels
    centers = [(cz, cy, cx)]
    if spec.shape == "two-blob":
        centers = [(cz, cy, cx - spec.blob_offset), (cz, cy, cx + spec.blob_offset)]
    for k, radius in enumerate(spec.radii, start=1):
        for j, (qz, qy, qx) in enumerate(centers):
            _check_fits((qz - radius, qy - radius, qx - radius), (qz + radius, qy + radius, qx + radius), dims)
            cls = k
            if spec.shape == "two-blob" and j == 1 and spec.num_classes > 2 and len(spec.radii) == 1:
                cls = 2
            inside = (zz - qz) ** 2 + (yy - qy) ** 2 + (xx - qx) ** 2 <= radius**2
            labels[inside] = cls
    return labels


def class_boundary(labels: np.ndarray) -> np.ndarray:
    """Voxels with at least one 26-neighbour of a different class."""
    hi = ndimage.maximum_filter(labels, size=3, mode="nearest")
    lo = ndimage.minimum_filter(labels, size=3, mode="nearest")
    return hi != lo


def _jitter(clean, width, prob, num_classes, rng):
    d, h, w = clean.shape
    u_flip = rng.random(clean.shape)
    u_pick = rng.random(clean.shape)
    out = clean.copy()
    if width == 0 or prob == 0.0:
        return out
    boundary = class_boundary(clean)
    if width > 1:
        band = ndimage.binary_dilation(boundary, structure=np.ones((3, 3, 3), bool), iterations=width - 1)
    else:
        band = boundary
    for z, y, x in zip(*np.nonzero(band & (u_flip < prob))):
        window = clean[
            max(0, z - width) : z + width + 1,
            max(0, y - width) : y + width + 1,
            max(0, x - width) : x + width + 1,
        ]
        own = clean[z, y, x]
        candidates = [c for c in range(num_classes) if c != own and np.any(window == c)]
        if candidates:
            out[z, y, x] = candidates[int(u_pick[z, y, x] * len(candidates))]
    return out


def _slice_flips(labels, prob, rng):
    d = labels.shape[0]
    u_hit = rng.random(d)
    u_mode = rng.random(d)
    out = labels.copy()
    for z in range(d):
        if u_hit[z] >= prob:
            continue
        sl = out[z]
        if u_mode[z] < 0.5:
            sl[sl > 0] = 0
        else:
            grown = ndimage.maximum_filter(sl, size=(3, 3), mode="constant", cval=0)
            out[z] = np.where(sl > 0, sl, grown)
    return out


def generate(spec: SynthSpec):
    """Return ``(clean, corrupted, intensity)`` for a spec; fully seeded."""
    clean = rasterize(spec)
    jitter_rng, slice_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))
    corrupted = _jitter(clean, spec.boundary_jitter_voxels, spec.boundary_flip_prob, spec.num_classes, jitter_rng)
    corrupted = _slice_flips(corrupted, spec.slice_flip_prob, slice_rng)

    means = spec.intensity_means
    if means is None:
        means = np.linspace(0.0, 1.0, spec.num_classes)
    means = np.asarray(means, dtype=np.float64)
    intensity = means[clean] + spec.intensity_sigma * noise_rng.standard_normal(spec.dims)
    return (
        LabelVolume(clean, spec.num_classes),
        LabelVolume(corrupted, spec.num_classes),
        ScalarField(intensity),
    )
