"""Grids, boundary descriptors and quadrature shared by all solvers.

Space is either a periodic box or (in 1D) an interval with reflecting
walls; velocity space is the box [-v_max, v_max]^d truncating the
unbounded velocity domain.  All grids are uniform and cell centered, and
integrals are midpoint sums, so quadrature of a constant is exact and
smooth non-periodic integrands converge at second order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PERIODIC = "periodic"
INTERVAL = "interval"

_MIN_CELLS = 4


class DomainError(ValueError):
    """Raised when a domain specification is inconsistent."""


@dataclass(frozen=True)
class DomainSpec:
    """Geometry, resolution and physical parameters of the phase domain.

    Parameters
    ----------
    spatial_dim : 1 or 2.
    geometry : ``"periodic"`` or ``"interval"`` (interval only in 1D;
        walls reflect particles specularly and carry a zero-flux
        condition for the potential).
    lengths : box edge length per spatial dimension.
    n_x : cells per spatial dimension (scalar or one value per dim).
    velocity_dim : 1 or 2, at least ``spatial_dim``.
    v_max : velocity cutoff; the grid covers [-v_max, v_max]^velocity_dim.
    n_v : cells per velocity dimension.
    lambda_d : dimensionless screening (Debye) length in the field
        equations, default 1.
    """

    spatial_dim: int = 1
    geometry: str = PERIODIC
    lengths: tuple = (2.0 * np.pi,)
    n_x: tuple = (64,)
    velocity_dim: int = 1
    v_max: float = 6.0
    n_v: int = 64
    lambda_d: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lengths", _as_tuple(self.lengths, float))
        object.__setattr__(self, "n_x", _as_tuple(self.n_x, int))
        errors = []
        if self.spatial_dim not in (1, 2):
            errors.append(f"spatial_dim must be 1 or 2, got {self.spatial_dim}")
        if self.velocity_dim not in (1, 2):
            errors.append(f"velocity_dim must be 1 or 2, got {self.velocity_dim}")
        if self.velocity_dim < self.spatial_dim:
            errors.append("velocity_dim must be >= spatial_dim")
        if self.geometry not in (PERIODIC, INTERVAL):
            errors.append(f"unknown geometry {self.geometry!r}")
        if self.geometry == INTERVAL and self.spatial_dim != 1:
            errors.append("interval geometry is supported only in 1D")
        if self.spatial_dim == 2 and self.geometry != PERIODIC:
            errors.append("2D domains must be periodic")
        if len(self.lengths) != self.spatial_dim:
            errors.append(f"lengths must have {self.spatial_dim} entries")
        elif any(L <= 0 for L in self.lengths):
            errors.append("lengths must be positive")
        if len(self.n_x) != self.spatial_dim:
            errors.append(f"n_x must have {self.spatial_dim} entries")
        elif any(n < _MIN_CELLS for n in self.n_x):
            errors.append(f"n_x entries must be >= {_MIN_CELLS}")
        if self.n_v < _MIN_CELLS:
            errors.append(f"n_v must be >= {_MIN_CELLS}")
        if not self.v_max > 0:
            errors.append("v_max must be positive")
        if not self.lambda_d > 0:
            errors.append("lambda_d must be positive")
        if errors:
            raise DomainError("; ".join(errors))


def _as_tuple(value, kind):
    if np.isscalar(value):
        return (kind(value),)
    return tuple(kind(v) for v in value)


@dataclass(frozen=True)
class SpatialGrid:
    """Cell-centered uniform spatial grid."""

    geometry: str
    lengths: tuple
    shape: tuple
    coords: tuple = field(repr=False)  # one 1D array of centers per dim
    spacing: tuple

    @property
    def dim(self):
        return len(self.shape)

    @property
    def cell_measure(self):
        return float(np.prod(self.spacing))

    @property
    def total_measure(self):
        return float(np.prod(self.lengths))

    @property
    def n_cells(self):
        return int(np.prod(self.shape))

    def key(self):
        """Hashable identity used to cache per-grid operators."""
        return (self.geometry, self.shape, self.lengths)

    def meshgrid(self):
        return np.meshgrid(*self.coords, indexing="ij")


@dataclass(frozen=True)
class VelocityGrid:
    """Cell-centered uniform grid on [-v_max, v_max]^dim."""

    v_max: float
    shape: tuple
    coords: tuple = field(repr=False)
    spacing: tuple

    @property
    def dim(self):
        return len(self.shape)

    @property
    def cell_measure(self):
        return float(np.prod(self.spacing))

    @property
    def total_measure(self):
        return float((2.0 * self.v_max) ** self.dim)

    @property
    def n_cells(self):
        return int(np.prod(self.shape))

    def meshgrid(self):
        return np.meshgrid(*self.coords, indexing="ij")

    def speed_squared(self):
        """|v|^2 on the velocity grid."""
        vv = self.meshgrid()
        return sum(v * v for v in vv)


def build_domain(spec: DomainSpec) -> tuple[SpatialGrid, VelocityGrid]:
    """Create the spatial and velocity grids for a validated spec.

    Raises
    ------
    DomainError
        If the spec violates any invariant (re-validated here so that
        callers constructing specs through ``dataclasses.replace`` still
        get checked).
    """
    # DomainSpec.__post_init__ validates; reconstructing re-triggers it.
    spec = DomainSpec(**{f: getattr(spec, f) for f in spec.__dataclass_fields__})
    x_coords = []
    x_spacing = []
    for L, n in zip(spec.lengths, spec.n_x):
        h = L / n
        x_coords.append((np.arange(n) + 0.5) * h)
        x_spacing.append(h)
    sgrid = SpatialGrid(
        geometry=spec.geometry,
        lengths=spec.lengths,
        shape=tuple(spec.n_x),
        coords=tuple(x_coords),
        spacing=tuple(x_spacing),
    )
    hv = 2.0 * spec.v_max / spec.n_v
    v_axis = -spec.v_max + (np.arange(spec.n_v) + 0.5) * hv
    vgrid = VelocityGrid(
        v_max=spec.v_max,
        shape=(spec.n_v,) * spec.velocity_dim,
        coords=(v_axis,) * spec.velocity_dim,
        spacing=(hv,) * spec.velocity_dim,
    )
    return sgrid, vgrid


@dataclass
class SpatialField:
    """Scalar field sampled at the spatial cell centers."""

    values: np.ndarray
    grid: SpatialGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise DomainError(
                f"field shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise DomainError("field contains non-finite values")

    def copy(self):
        return SpatialField(self.values.copy(), self.grid)


def integrate_spatial(field: SpatialField) -> float:
    """Midpoint quadrature of a spatial field over the whole domain."""
    return integrate_values(field.values, field.grid)


def integrate_values(values: np.ndarray, grid: SpatialGrid) -> float:
    """Midpoint quadrature of raw cell values on ``grid``."""
    values = np.asarray(values)
    if values.shape != grid.shape:
        raise DomainError(
            f"value shape {values.shape} does not match grid {grid.shape}"
        )
    return float(values.sum() * grid.cell_measure)
