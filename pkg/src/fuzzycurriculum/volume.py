"""Voxel-grid containers and the FVOL binary file format.

FVOL layout::

    b"FVOL" | u32 LE header length N | N bytes UTF-8 JSON header | payload

The payload is C-order (z, y, x[, c[, channel]]) little-endian, ``u8`` for
labels and IEEE-754 ``f32`` for every real-valued kind. Fuzzy volumes store
the triple (mu, nu, pi) for each voxel-class pair.

All containers are immutable: arrays are copied into canonical dtype and
flagged read-only on construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import CorruptPayload, InvariantViolation, IoError, ParseError

MAGIC = b"FVOL"
KINDS = ("labels", "fuzzy", "logits", "prob", "scalar")
PROB_SUM_TOL = 1e-6
FUZZY_TOL = 1e-6

_U8 = np.dtype("u1")
_F32 = np.dtype("<f4")


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


def _check_dims(dims):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise InvariantViolation(f"dims must be three positive integers, got {dims}")


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise InvariantViolation(f"{name} contains non-finite values")


def _same_bits(a, b):
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Crisp class indices of shape ``(depth, height, width)``."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise InvariantViolation(f"label data must be 3D, got shape {raw.shape}")
        _check_dims(raw.shape)
        if not 2 <= int(self.num_classes) <= 256:
            raise InvariantViolation(f"num_classes must be in [2, 256], got {self.num_classes}")
        if raw.size and (raw.min() < 0 or raw.max() >= self.num_classes):
            raise InvariantViolation(
                f"label values must lie in [0, {self.num_classes}), "
                f"got range [{raw.min()}, {raw.max()}]"
            )
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "data", _frozen(raw, _U8))

    @property
    def dims(self):
        return tuple(self.data.shape)

    def one_hot(self, dtype=np.float64):
        return np.eye(self.num_classes, dtype=dtype)[self.data]

    def __eq__(self, other):
        return (
            isinstance(other, LabelVolume)
            and self.num_classes == other.num_classes
            and _same_bits(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Finite real value per voxel, shape ``(depth, height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise InvariantViolation(f"scalar data must be 3D, got shape {raw.shape}")
        _check_dims(raw.shape)
        arr = _frozen(raw, _F32)
        _check_finite("scalar field", arr)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self):
        return tuple(self.data.shape)

    def __eq__(self, other):
        return isinstance(other, ScalarField) and _same_bits(self.data, other.data)


class _ClassField:
    """Shared behaviour of per-voxel, per-class real fields."""

    data: np.ndarray

    def _coerce(self, label):
        raw = np.asarray(self.data)
        if raw.ndim != 4:
            raise InvariantViolation(f"{label} data must be (d, h, w, C), got shape {raw.shape}")
        _check_dims(raw.shape[:3])
        if raw.shape[3] < 1:
            raise InvariantViolation(f"{label} needs at least one class channel")
        arr = _frozen(raw, _F32)
        _check_finite(label, arr)
        return arr

    @property
    def dims(self):
        return tuple(self.data.shape[:3])

    @property
    def num_classes(self):
        return int(self.data.shape[3])

    def __eq__(self, other):
        return type(other) is type(self) and _same_bits(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LogitField(_ClassField):
    """Real-valued logits z_c(x), shape ``(depth, height, width, C)``."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", self._coerce("logit field"))


@dataclass(frozen=True, eq=False)
class ProbField(_ClassField):
    """Per-voxel class probabilities, shape ``(depth, height, width, C)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = self._coerce("probability field")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvariantViolation("probabilities must lie in [0, 1]")
        sums = arr.astype(np.float64).sum(axis=-1)
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > PROB_SUM_TOL:
            raise InvariantViolation(f"class probabilities must sum to 1 (max deviation {worst:.3g})")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True, eq=False)
class FuzzyLabelVolume:
    """Intuitionistic fuzzy labels: membership, non-membership and hesitation.

    Each channel has shape ``(depth, height, width, C)``. ``rho2`` is the
    snapshot of the non-membership scale used to fill ``nu`` and ``pi``.
    """

    mu: np.ndarray
    nu: np.ndarray
    pi: np.ndarray
    radius: int
    rho2: float

    def __post_init__(self):
        mu, nu, pi = (np.asarray(a) for a in (self.mu, self.nu, self.pi))
        if mu.ndim != 4 or mu.shape != nu.shape or mu.shape != pi.shape:
            raise InvariantViolation(
                f"mu/nu/pi must share a (d, h, w, C) shape, got {mu.shape}, {nu.shape}, {pi.shape}"
            )
        _check_dims(mu.shape[:3])
        if int(self.radius) < 1:
            raise InvariantViolation(f"radius must be >= 1, got {self.radius}")
        if not 0.0 < float(self.rho2) <= 1.0:
            raise InvariantViolation(f"rho2 must lie in (0, 1], got {self.rho2}")
        mu, nu, pi = (_frozen(a, _F32) for a in (mu, nu, pi))
        for name, arr in (("mu", mu), ("nu", nu), ("pi", pi)):
            _check_finite(name, arr)
            if arr.min() < -FUZZY_TOL or arr.max() > 1.0 + FUZZY_TOL:
                raise InvariantViolation(f"{name} must lie in [0, 1]")
        m, n, h = (a.astype(np.float64) for a in (mu, nu, pi))
        if np.any(m + n > 1.0 + FUZZY_TOL):
            raise InvariantViolation("mu + nu exceeds 1")
        if np.max(np.abs(h - (1.0 - m - n))) > FUZZY_TOL:
            raise InvariantViolation("pi != 1 - mu - nu")
        if np.max(np.abs(m.sum(axis=-1) - 1.0)) > FUZZY_TOL:
            raise InvariantViolation("memberships of a voxel must sum to 1")
        if np.max(np.abs(n - (1.0 - m) * float(self.rho2))) > FUZZY_TOL:
            raise InvariantViolation("nu != (1 - mu) * rho2")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "radius", int(self.radius))
        object.__setattr__(self, "rho2", float(self.rho2))

    @property
    def dims(self):
        return tuple(self.mu.shape[:3])

    @property
    def num_classes(self):
        return int(self.mu.shape[3])

    def __eq__(self, other):
        return (
            isinstance(other, FuzzyLabelVolume)
            and self.radius == other.radius
            and self.rho2 == other.rho2
            and all(_same_bits(a, b) for a, b in zip((self.mu, self.nu, self.pi), (other.mu, other.nu, other.pi)))
        )


Volume = Union[LabelVolume, FuzzyLabelVolume, LogitField, ProbField, ScalarField]


def _header_for(vol):
    if isinstance(vol, LabelVolume):
        return {"kind": "labels", "dims": list(vol.dims), "classes": vol.num_classes, "dtype": "u8"}
    if isinstance(vol, FuzzyLabelVolume):
        return {
            "kind": "fuzzy",
            "dims": list(vol.dims),
            "classes": vol.num_classes,
            "dtype": "f32",
            "radius": vol.radius,
            "rho2": vol.rho2,
        }
    if isinstance(vol, LogitField):
        return {"kind": "logits", "dims": list(vol.dims), "classes": vol.num_classes, "dtype": "f32"}
    if isinstance(vol, ProbField):
        return {"kind": "prob", "dims": list(vol.dims), "classes": vol.num_classes, "dtype": "f32"}
    if isinstance(vol, ScalarField):
        return {"kind": "scalar", "dims": list(vol.dims), "dtype": "f32"}
    raise TypeError(f"cannot serialise {type(vol).__name__}")


def _payload_for(vol):
    if isinstance(vol, FuzzyLabelVolume):
        return np.stack([vol.mu, vol.nu, vol.pi], axis=-1).astype(_F32).tobytes(order="C")
    return np.ascontiguousarray(vol.data).tobytes(order="C")


def encode_volume(vol) -> bytes:
    """Serialise a volume to FVOL bytes, re-checking its invariants first."""
    # Re-validate: instances patched with object.__setattr__ must not reach disk.
    type(vol).__post_init__(vol)
    header = json.dumps(_header_for(vol), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + _payload_for(vol)


def write_volume(vol, path) -> None:
    blob = encode_volume(vol)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _parse_header(blob):
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise ParseError("missing FVOL magic bytes")
    (n,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + n:
        raise ParseError(f"header declares {n} bytes but file is shorter")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ParseError("header must be a JSON object")
    kind = header.get("kind")
    if kind not in KINDS:
        raise ParseError(f"unknown kind {kind!r}")
    dims = header.get("dims")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 1 for d in dims)
    ):
        raise ParseError(f"dims must be a list of three positive integers, got {dims!r}")
    dtype = header.get("dtype")
    expected = "u8" if kind == "labels" else "f32"
    if dtype != expected:
        raise ParseError(f"kind {kind!r} requires dtype {expected!r}, got {dtype!r}")
    if kind != "scalar":
        classes = header.get("classes")
        if not isinstance(classes, int) or isinstance(classes, bool) or classes < 1:
            raise ParseError(f"classes must be a positive integer, got {classes!r}")
    if kind == "fuzzy" and ("radius" not in header or "rho2" not in header):
        raise ParseError("fuzzy header needs radius and rho2")
    return header, blob[8 + n :]


def decode_volume(blob: bytes):
    header, payload = _parse_header(blob)
    kind = header["kind"]
    dims = tuple(header["dims"])
    shape = dims
    if kind not in ("scalar", "labels"):
        shape = dims + (header["classes"],)
    if kind == "fuzzy":
        shape = shape + (3,)
    dtype = _U8 if kind == "labels" else _F32
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise CorruptPayload(f"payload holds {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if kind == "labels":
        return LabelVolume(arr, header["classes"])
    if kind == "fuzzy":
        return FuzzyLabelVolume(arr[..., 0], arr[..., 1], arr[..., 2], header["radius"], header["rho2"])
    if kind == "logits":
        return LogitField(arr)
    if kind == "prob":
        return ProbField(arr)
    return ScalarField(arr)


def read_volume(path):
    """Load any FVOL file and return the matching container."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_volume(blob)
