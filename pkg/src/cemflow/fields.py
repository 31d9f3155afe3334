"""Permeability fields and the compressible fluid constitutive law.

Permeability is carried in millidarcy and converted to SI at assembly
time via :data:`MD_TO_M2`.
"""

import numpy as np
from dataclasses import dataclass, field

from .errors import ConfigurationError, RasterIOError, ValidationError

# 1 millidarcy in m^2
MD_TO_M2 = 9.869233e-16


@dataclass(frozen=True)
class FluidProps:
    """Constitutive constants: reference density/pressure, compressibility,
    viscosity and porosity."""

    rho_ref: float  # kg/m^3
    p_ref: float    # Pa
    c: float        # 1/Pa
    mu: float       # Pa s
    phi: float      # dimensionless (taken verbatim from config)

    def __post_init__(self):
        if self.rho_ref <= 0 or self.mu <= 0 or self.phi <= 0 or self.c < 0:
            raise ConfigurationError("fluid constants out of range: %r" % (self,))


def density(p, props):
    """rho(p) = rho_ref * exp(c (p - p_ref)); strictly positive."""
    expo = props.c * (np.asarray(p, dtype=float) - props.p_ref)
    if not np.all(np.isfinite(expo)):
        raise ValidationError("non-finite pressure in density evaluation")
    return props.rho_ref * np.exp(expo)


def density_derivative(p, props):
    """d rho / d p = c * rho(p)."""
    return props.c * density(p, props)


def density_second_derivative(p, props):
    """d^2 rho / d p^2 = c^2 * rho(p)."""
    return props.c ** 2 * density(p, props)


class PermeabilityField:
    """Per-fine-cell scalar permeability in millidarcy."""

    def __init__(self, values):
        values = np.asarray(values, dtype=float).ravel()
        if values.size == 0 or np.any(values <= 0.0) or not np.all(np.isfinite(values)):
            raise ValidationError("permeability values must be positive and finite")
        self.values = values
        self.bounds = (float(values.min()), float(values.max()))

    def si_values(self):
        """Cell values converted to m^2."""
        return self.values * MD_TO_M2


@dataclass
class FractureGeometry:
    """Uniform matrix permeability with thin high-permeability boxes.

    Each fracture is an axis-aligned cell-index box (lo, hi, value) that is
    one cell thick along at least one axis; later fractures win on overlap.
    """

    matrix_value: float
    fractures: list = field(default_factory=list)  # (lo, hi, value) triples


def _check_box(lo, hi, dims):
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    if len(lo) != len(dims) or len(hi) != len(dims):
        raise ConfigurationError("box rank does not match grid rank")
    if np.any(lo < 0) or np.any(hi > dims) or np.any(lo >= hi):
        raise ConfigurationError("box [%r, %r) outside domain %r" % (lo, hi, dims))
    return lo, hi


def _box_cells(lo, hi, dims):
    ranges = [np.arange(lo[a], hi[a]) for a in range(len(dims))]
    grids = np.meshgrid(*ranges, indexing="ij")
    multi = np.stack([g.ravel(order="F") for g in grids], axis=1)
    strides = np.concatenate(([1], np.cumprod(np.asarray(dims)[:-1])))
    return multi @ strides


def load_raster_field(path, dims):
    """Read a raw raster of 64-bit little-endian floats, row-major x fastest."""
    dims = np.asarray(dims, dtype=np.int64)
    expected = int(np.prod(dims))
    try:
        raw = np.fromfile(path, dtype="<f8")
    except OSError as exc:
        raise RasterIOError("cannot read raster %r: %s" % (path, exc)) from exc
    if raw.size != expected:
        raise RasterIOError(
            "raster %r has %d values, expected %d" % (path, raw.size, expected)
        )
    return PermeabilityField(raw)


def save_raster_field(field, path):
    """Write a field in the raster format accepted by :func:`load_raster_field`."""
    np.asarray(field.values, dtype="<f8").tofile(path)


def gen_inclusions(dims, background, inclusion, shapes, seed=0):
    """Background field with high-permeability box inclusions.

    ``shapes`` is a list of (lo, hi) cell-index boxes, or an integer count of
    random boxes drawn deterministically from ``seed``.
    """
    dims = np.asarray(dims, dtype=np.int64)
    values = np.full(int(np.prod(dims)), float(background))
    if isinstance(shapes, int):
        rng = np.random.default_rng(seed)
        boxes = []
        for _ in range(shapes):
            size = rng.integers(np.maximum(dims // 8, 1), np.maximum(dims // 3, 2) + 1)
            lo = rng.integers(0, dims - size + 1)
            boxes.append((lo, lo + size))
        shapes = boxes
    for lo, hi in shapes:
        lo, hi = _check_box(lo, hi, dims)
        values[_box_cells(lo, hi, dims)] = float(inclusion)
    return PermeabilityField(values)


def rasterize_fractures(geom, dims):
    """Rasterize a fracture geometry onto the fine cell grid."""
    dims = np.asarray(dims, dtype=np.int64)
    values = np.full(int(np.prod(dims)), float(geom.matrix_value))
    for lo, hi, value in geom.fractures:
        lo, hi = _check_box(lo, hi, dims)
        values[_box_cells(lo, hi, dims)] = float(value)
    return PermeabilityField(values)
