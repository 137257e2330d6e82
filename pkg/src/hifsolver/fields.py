"""Coefficient fields for the variable-coefficient diffusion operator.

A field carries edge-centered conductivities and a point-centered
zeroth-order term for

    -div(a(x) grad u) + b(x) u = f,

discretized on the periodic grid.  Conductivities live on the half-integer
edges between neighboring points; ``ax[i, j, k]`` is the value on the edge
from point (i, j, k) to (i+1, j, k) (periodic in i), and likewise ay/az.
Edge values are the arithmetic means of the two adjacent point values.

Three canonical fields are provided: a constant field, a smoothed seeded
random field quantized to a two-value high-contrast medium, and a periodic
two-value checkerboard with 7-point tiles.  The zeroth-order term is the
constant 0.1 throughout, which keeps the operator positive definite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .grid import GridSpec

FIELD_KINDS = ("constant", "random-high-contrast", "checkerboard")

_MAGIC = b"CFLD"
_FORMAT_VERSION = 1


@dataclass
class CoefficientField:
    """Edge conductivities and zeroth-order term on an n^3 periodic grid."""

    kind: str
    n: int
    ax: np.ndarray
    ay: np.ndarray
    az: np.ndarray
    b: np.ndarray
    seed: int = 0

    def __post_init__(self):
        shape = (self.n, self.n, self.n)
        for name in ("ax", "ay", "az", "b"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if min(self.ax.min(), self.ay.min(), self.az.min()) <= 0.0:
            raise ValueError("conductivities must be strictly positive")


def _edges_from_points(a: np.ndarray) -> tuple:
    """Arithmetic-mean edge values from point values, periodic wrap."""
    ax = 0.5 * (a + np.roll(a, -1, axis=0))
    ay = 0.5 * (a + np.roll(a, -1, axis=1))
    az = 0.5 * (a + np.roll(a, -1, axis=2))
    return ax, ay, az


def field_constant(spec: GridSpec) -> CoefficientField:
    """Unit conductivity, b = 0.1."""
    n = spec.n
    one = np.ones((n, n, n))
    return CoefficientField(
        kind="constant",
        n=n,
        ax=one.copy(),
        ay=one.copy(),
        az=one.copy(),
        b=np.full((n, n, n), 0.1),
    )


def field_random_high_contrast(seed: int, spec: GridSpec) -> CoefficientField:
    """Seeded two-value random medium with unit correlation length.

    Uniform noise per point is smoothed by a periodic isotropic Gaussian of
    one grid unit (truncated at four standard deviations) and thresholded at
    its median level: smoothed values at or below 0.5 map to 0.1, the rest
    to 1000.
    """
    n = spec.n
    rng = np.random.default_rng(seed)
    noise = rng.random((n, n, n))
    smooth = ndimage.gaussian_filter(noise, sigma=1.0, mode="wrap", truncate=4.0)
    a = np.where(smooth <= 0.5, 0.1, 1000.0)
    ax, ay, az = _edges_from_points(a)
    return CoefficientField(
        kind="random-high-contrast",
        n=n,
        ax=ax,
        ay=ay,
        az=az,
        b=np.full((n, n, n), 0.1),
        seed=seed,
    )


def field_checkerboard(spec: GridSpec) -> CoefficientField:
    """Periodic two-value checkerboard with 7-point tiles.

    A point (j1, j2, j3) gets conductivity 1000 when
    floor(j1/7) + floor(j2/7) + floor(j3/7) is even, else 0.1.  Since 7 does
    not divide the power-of-two-ish grid sizes, the pattern breaks the mesh
    alignment on purpose.
    """
    n = spec.n
    tile = np.arange(n) // 7
    parity = (tile[:, None, None] + tile[None, :, None] + tile[None, None, :]) % 2
    a = np.where(parity == 0, 1000.0, 0.1)
    ax, ay, az = _edges_from_points(a)
    return CoefficientField(
        kind="checkerboard",
        n=n,
        ax=ax,
        ay=ay,
        az=az,
        b=np.full((n, n, n), 0.1),
    )


def make_field(kind: str, spec: GridSpec, seed: int = 0) -> CoefficientField:
    """Field factory keyed by kind name."""
    if kind == "constant":
        return field_constant(spec)
    if kind == "random-high-contrast":
        return field_random_high_contrast(seed, spec)
    if kind == "checkerboard":
        return field_checkerboard(spec)
    raise ValueError(f"unknown field kind {kind!r}; expected one of {FIELD_KINDS}")


def save_field(field: CoefficientField, path: str) -> None:
    """Dump a field to a small self-describing binary file.

    Layout: 4-byte magic, u32 version, u32 n, u32 kind length, kind bytes,
    i64 seed, then ax, ay, az, b as little-endian float64 in C order.
    """
    kind_bytes = field.kind.encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", _FORMAT_VERSION, field.n, len(kind_bytes)))
        fh.write(kind_bytes)
        fh.write(struct.pack("<q", field.seed))
        for arr in (field.ax, field.ay, field.az, field.b):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_field(path: str) -> CoefficientField:
    """Read back a field written by save_field."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a coefficient-field file (magic {magic!r})")
        version, n, kind_len = struct.unpack("<III", fh.read(12))
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported field file version {version}")
        kind = fh.read(kind_len).decode()
        (seed,) = struct.unpack("<q", fh.read(8))
        count = n * n * n
        arrays = []
        for _ in range(4):
            buf = fh.read(8 * count)
            arrays.append(
                np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(n, n, n)
            )
    ax, ay, az, b = arrays
    return CoefficientField(kind=kind, n=n, ax=ax, ay=ay, az=az, b=b, seed=seed)
