"""Phase-space transport, moments, Maxwellians and BGK relaxation.

Transport is semi-Lagrangian in flux form: every substep is a constant
shift along one axis, evaluated as reconstruct-and-integrate fluxes so
that the column sums telescope.  Mass is therefore conserved to machine
precision on periodic boundaries regardless of the reconstruction, and
the reconstruction controls only accuracy and positivity:

* ``linear``  - MC-limited piecewise-linear (monotone, positive, diffusive),
* ``cubic``   - piecewise-parabolic with a positivity limiter (default),
* ``spectral``- Fourier phase shift (translation exact to roundoff for
  resolved data; not sign-preserving, velocity boundary wraps).

Reflecting walls are handled by unfolding the interval to a double-length
periodic domain in which the +v and mirrored -v columns are one periodic
profile, so a reflection mid-step is exact.

The BGK operator relaxes toward a per-cell Maxwellian fitted so that its
*discrete* moments match the cell's mass, momentum and energy (a few
Newton iterations on the exponential-family parameters).  That makes the
relaxation conserve the discrete moments exactly and gives the update a
clean entropy inequality cell by cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import INTERVAL, PERIODIC, SpatialField, SpatialGrid, VelocityGrid
from .fields import ElectricField

INTERP_MODES = ("linear", "cubic", "spectral")


class CflError(RuntimeError):
    """Raised when a transport step exceeds its displacement guard."""


class ReflectionLimitError(RuntimeError):
    """Raised when a traced trajectory bounces more than allowed."""


@dataclass
class PhaseDistribution:
    """Nonnegative density on the tensor product of the two grids.

    ``values`` has shape ``spatial.shape + velocity.shape``.  Tiny
    negative entries (roundoff from conservative transport) are
    tolerated; anything beyond roundoff scale is rejected.
    """

    values: np.ndarray
    spatial: SpatialGrid
    velocity: VelocityGrid
    species: str = "ion"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = self.spatial.shape + self.velocity.shape
        if self.values.shape != expected:
            raise ValueError(
                f"phase array shape {self.values.shape}, expected {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("phase distribution contains non-finite values")
        vmin = self.values.min()
        if vmin < -1e-10 * max(1.0, self.values.max()):
            raise ValueError(f"phase distribution significantly negative ({vmin})")

    @property
    def cell_measure(self):
        return self.spatial.cell_measure * self.velocity.cell_measure

    def copy(self):
        return PhaseDistribution(
            self.values.copy(), self.spatial, self.velocity, self.species
        )


@dataclass
class Moments:
    """Velocity moments: density, momentum density and kinetic energy density."""

    density: SpatialField
    momentum: np.ndarray  # spatial.shape + (velocity_dim,)
    kinetic_energy_density: SpatialField


# --------------------------------------------------------------------------
# velocity-space weights (cached per velocity grid signature)

_vbasis_cache: dict = {}


def _velocity_basis(vgrid: VelocityGrid):
    """Flattened arrays (ones, v_1..v_d, |v|^2) on the velocity grid."""
    key = (vgrid.v_max, vgrid.shape)
    basis = _vbasis_cache.get(key)
    if basis is None:
        mesh = vgrid.meshgrid()
        comps = [m.ravel() for m in mesh]
        speed2 = sum(c * c for c in comps)
        basis = (np.ones(vgrid.n_cells), comps, speed2)
        _vbasis_cache[key] = basis
    return basis


def moments(f: PhaseDistribution) -> Moments:
    """Integrate {1, v, |v|^2 / 2} against f over velocity space."""
    vgrid = f.velocity
    dv = vgrid.cell_measure
    ones, comps, speed2 = _velocity_basis(vgrid)
    flat = f.values.reshape(f.spatial.shape + (vgrid.n_cells,))
    density = flat @ ones * dv
    momentum = np.stack([flat @ c * dv for c in comps], axis=-1)
    kinetic = flat @ (0.5 * speed2) * dv
    return Moments(
        density=SpatialField(density, f.spatial),
        momentum=momentum,
        kinetic_energy_density=SpatialField(kinetic, f.spatial),
    )


def total_mass(f: PhaseDistribution) -> float:
    return float(f.values.sum() * f.cell_measure)


def kinetic_energy(f: PhaseDistribution) -> float:
    """Total kinetic energy int <|v|^2/2 f> dx."""
    _, _, speed2 = _velocity_basis(f.velocity)
    flat = f.values.reshape(-1, f.velocity.n_cells)
    return float(flat.sum(axis=0) @ (0.5 * speed2) * f.cell_measure)


def support_mass_fraction(f: PhaseDistribution, radius_fraction: float = 0.9) -> float:
    """Fraction of total mass at speeds beyond radius_fraction * v_max."""
    _, _, speed2 = _velocity_basis(f.velocity)
    outside = speed2 > (radius_fraction * f.velocity.v_max) ** 2
    flat = f.values.reshape(-1, f.velocity.n_cells)
    total = flat.sum()
    if total <= 0.0:
        return 0.0
    return float(flat[:, outside].sum() / total)


def maxwellian(
    beta: float,
    phi: SpatialField,
    velocity: VelocityGrid,
    species: str = "electron",
) -> PhaseDistribution:
    """The Maxwellian (beta/2pi)^{d/2} exp(-beta(|v|^2/2 - phi(x)))."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    z = beta * phi.values
    if z.max() > 700.0:
        raise ValueError("exp(beta*phi) overflows; state unphysical")
    speed2 = velocity.speed_squared()
    kernel = (beta / (2.0 * np.pi)) ** (velocity.dim / 2.0) * np.exp(
        -0.5 * beta * speed2
    )
    values = np.multiply.outer(np.exp(z), kernel)
    return PhaseDistribution(values, phi.grid, velocity, species)


# --------------------------------------------------------------------------
# constant-shift kernels along one axis (columns move independently)


def _mc_slopes(g):
    up = g - np.roll(g, 1, axis=0)
    dn = np.roll(g, -1, axis=0) - g
    slope = np.where(
        up * dn > 0.0,
        np.sign(up) * np.minimum(np.minimum(2.0 * np.abs(up), 2.0 * np.abs(dn)),
                                 0.5 * np.abs(up + dn)),
        0.0,
    )
    return slope


def _fluxes_linear(g, alpha):
    sigma = _mc_slopes(g)
    return alpha * (g + 0.5 * sigma * (1.0 - alpha))


def _fluxes_ppm(g, alpha):
    # fourth-order interface values, then a positivity limiter that
    # rescales each parabola about its cell average
    gm1 = np.roll(g, 1, axis=0)
    gp1 = np.roll(g, -1, axis=0)
    gp2 = np.roll(g, -2, axis=0)
    face = (7.0 * (g + gp1) - (gm1 + gp2)) / 12.0  # value at right face
    f_r = face
    f_l = np.roll(face, 1, axis=0)
    delta = f_r - f_l
    p6 = 6.0 * (g - 0.5 * (f_l + f_r))
    # interior extremum of the parabola p(s) = fl + delta*s + p6*s*(1-s)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_star = (delta + p6) / (2.0 * p6)
    interior = np.isfinite(s_star) & (s_star > 0.0) & (s_star < 1.0)
    p_star = f_l + delta * np.where(interior, s_star, 0.0)
    p_star = p_star + p6 * np.where(interior, s_star * (1.0 - s_star), 0.0)
    m = np.minimum(f_l, f_r)
    m = np.where(interior, np.minimum(m, p_star), m)
    need = m < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        theta = np.where(need, g / (g - m), 1.0)
    theta = np.clip(np.nan_to_num(theta, nan=0.0), 0.0, 1.0)
    f_l = g + theta * (f_l - g)
    delta = theta * delta
    p6 = theta * p6
    return alpha * f_l + delta * alpha * (1.0 - 0.5 * alpha) + p6 * alpha * alpha * (
        0.5 - alpha / 3.0
    )


def _shift_columns_periodic(f, shift, interp):
    """Shift column j of ``f`` by shift[j] cells (periodic, conservative)."""
    n, m = f.shape
    cols = np.arange(m)[None, :]
    if interp == "spectral":
        freqs = np.fft.rfftfreq(n)[:, None]
        spec = np.fft.rfft(f, axis=0) * np.exp(-2j * np.pi * freqs * shift[None, :])
        return np.fft.irfft(spec, n=n, axis=0)
    k = np.floor(shift).astype(np.int64)
    alpha = shift - k
    rows = (np.arange(n)[:, None] - k[None, :]) % n
    g = f[rows, cols]
    flux = _fluxes_linear(g, alpha) if interp == "linear" else _fluxes_ppm(g, alpha)
    return g - flux + np.roll(flux, 1, axis=0)


def _shift_columns_absorbing(f, shift, interp):
    """Shift with zero inflow; mass leaving [0, n) is dropped.

    Returns the new array; callers account the loss as a mass difference.
    """
    n, m = f.shape
    if interp == "spectral":
        # velocity boundary wrap; the support monitor guards the tails
        return _shift_columns_periodic(f, shift, interp)
    k = np.floor(shift).astype(np.int64)
    alpha = shift - k
    pad = int(max(2, np.abs(k).max() + 3))
    total = n + 2 * pad
    g = np.zeros((total, m))
    rows = np.arange(total)[:, None] - k[None, :] - pad
    valid = (rows >= 0) & (rows < n)
    g[valid] = f[np.clip(rows, 0, n - 1), np.broadcast_to(np.arange(m), rows.shape)][valid]
    flux = _fluxes_linear(g, alpha) if interp == "linear" else _fluxes_ppm(g, alpha)
    inflow = np.vstack([np.zeros((1, m)), flux[:-1]])
    g = g - flux + inflow
    return g[pad : pad + n]


# --------------------------------------------------------------------------
# advection operators


def _check_interp(interp):
    if interp not in INTERP_MODES:
        raise ValueError(f"unknown interpolation {interp!r}; choose from {INTERP_MODES}")


def advect_x(
    f: PhaseDistribution,
    dt: float,
    *,
    interp: str = "cubic",
    cfl_max: float = 1.0,
) -> PhaseDistribution:
    """Free streaming f(x, v) <- f(x - v dt, v) for one substep.

    Periodic domains wrap; interval domains unfold each (+v, -v) column
    pair onto a double-length periodic profile, which realizes specular
    wall reflection exactly (speed preserved, velocity sign flipped).
    """
    _check_interp(interp)
    if not dt > 0:
        raise ValueError("dt must be positive")
    sgrid, vgrid = f.spatial, f.velocity
    span = min(sgrid.lengths)
    if vgrid.v_max * dt > cfl_max * span:
        raise CflError(
            f"x displacement {vgrid.v_max * dt:.3g} exceeds {cfl_max} * L = "
            f"{cfl_max * span:.3g}"
        )
    values = f.values
    if sgrid.geometry == PERIODIC:
        for axis in range(sgrid.dim):
            values = _advect_spatial_axis_periodic(
                values, axis, sgrid, vgrid, dt, interp
            )
    else:
        values = _advect_interval(values, sgrid, vgrid, dt, interp)
    return PhaseDistribution(values, sgrid, vgrid, f.species)


def _advect_spatial_axis_periodic(values, axis, sgrid, vgrid, dt, interp):
    d_x = sgrid.dim
    v_axis_full = d_x + axis  # velocity component conjugate to this axis
    work = np.moveaxis(values, axis, 0)
    lead = work.shape[0]
    rest_shape = work.shape[1:]
    flat = work.reshape(lead, -1)
    v_coord = vgrid.coords[axis]
    shape = [1] * len(rest_shape)
    shape[v_axis_full - 1] = v_coord.size
    shift = np.broadcast_to(
        v_coord.reshape(shape), rest_shape
    ).ravel() * (dt / sgrid.spacing[axis])
    out = _shift_columns_periodic(flat, shift, interp)
    return np.moveaxis(out.reshape((lead,) + rest_shape), 0, axis)


def _advect_interval(values, sgrid, vgrid, dt, interp):
    # unfold [0, L] x {+v, -v} to a periodic profile on [0, 2L)
    n_x = sgrid.shape[0]
    n_v = vgrid.shape[0]
    v_coord = vgrid.coords[0]
    work = values.reshape(n_x, n_v, -1)  # trailing extra velocity dims
    out = np.empty_like(work)
    neg = np.nonzero(v_coord < 0)[0]
    pos = n_v - 1 - neg  # mirror partners, v[pos] = -v[neg] exactly
    unfolded = np.concatenate([work[:, pos, :], work[::-1, neg, :]], axis=0)
    flat = unfolded.reshape(2 * n_x, -1)
    shift = np.broadcast_to(
        (v_coord[pos] * (dt / sgrid.spacing[0]))[:, None],
        (pos.size, work.shape[2]),
    ).ravel()
    moved = _shift_columns_periodic(flat, shift, interp).reshape(unfolded.shape)
    out[:, pos, :] = moved[:n_x]
    out[:, neg, :] = moved[n_x:][::-1]
    zero = np.nonzero(v_coord == 0)[0]
    if zero.size:
        out[:, zero, :] = work[:, zero, :]
    return out.reshape(values.shape)


def advect_v(
    f: PhaseDistribution,
    efield: ElectricField,
    sign: float,
    dt: float,
    *,
    interp: str = "cubic",
    cfl_max: float = 0.5,
) -> PhaseDistribution:
    """Velocity kick f(x, v) <- f(x, v - a dt) with a = sign * E(x).

    Ions carry sign +1 (acceleration -grad phi), electrons -1.  Values
    pushed past the velocity cutoff are dropped; callers account the
    loss by comparing masses before and after.
    """
    _check_interp(interp)
    if not dt > 0:
        raise ValueError("dt must be positive")
    sgrid, vgrid = f.spatial, f.velocity
    amax = max(np.abs(c).max() for c in efield.components) * abs(sign)
    if amax * dt > cfl_max * 2.0 * vgrid.v_max:
        raise CflError(
            f"velocity displacement {amax * dt:.3g} exceeds {cfl_max} * (2 v_max)"
        )
    values = f.values
    d_x = sgrid.dim
    for comp in range(min(d_x, vgrid.dim)):
        accel = sign * efield.components[comp]
        values = _advect_velocity_axis(values, comp, sgrid, vgrid, accel, dt, interp)
    return PhaseDistribution(values, sgrid, vgrid, f.species)


def _advect_velocity_axis(values, comp, sgrid, vgrid, accel, dt, interp):
    d_x = sgrid.dim
    axis = d_x + comp
    work = np.moveaxis(values, axis, 0)
    lead = work.shape[0]
    rest_shape = work.shape[1:]  # spatial dims then remaining velocity dims
    flat = work.reshape(lead, -1)
    shape = [1] * len(rest_shape)
    for k in range(d_x):
        shape[k] = sgrid.shape[k]
    shift = np.broadcast_to(
        np.asarray(accel).reshape(shape), rest_shape
    ).ravel() * (dt / vgrid.spacing[comp])
    out = _shift_columns_absorbing(flat, shift, interp)
    return np.moveaxis(out.reshape((lead,) + rest_shape), 0, axis)


# --------------------------------------------------------------------------
# characteristics


def specular_reflect(v: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Reflect velocity v off a wall with unit outward normal: v - 2(v.n)n.

    Accepts scalars (1D) or arrays whose last axis is the velocity
    component axis; an involution that preserves |v| exactly.
    """
    v = np.asarray(v, dtype=float)
    normal = np.asarray(normal, dtype=float)
    if v.ndim == 0 or normal.ndim == 0:
        return v - 2.0 * (v * normal) * normal
    vn = np.sum(v * normal, axis=-1, keepdims=True)
    return v - 2.0 * vn * normal


def trace_characteristic(
    x0: float,
    v0: float,
    field,
    t0: float,
    t1: float,
    *,
    grid: SpatialGrid,
    n_steps: int = 256,
    max_reflections: int = 64,
):
    """Integrate dX/dt = V, dV/dt = field(t, X) from t0 to t1 (1D).

    ``field`` is a callable (t, x) -> acceleration.  Periodic domains
    wrap; interval walls reflect specularly (the speed is continuous
    across each bounce).  Fourth-order Runge-Kutta between events.
    """
    if grid.dim != 1:
        raise ValueError("characteristic tracing is implemented for 1D domains")
    length = grid.lengths[0]
    x, v = float(x0), float(v0)
    h = (t1 - t0) / n_steps
    t = t0
    bounces = 0
    for _ in range(n_steps):
        if grid.geometry == PERIODIC:
            x, v = _rk4(field, t, x, v, h)
            x %= length
            t += h
            continue
        remaining = h
        while True:
            x_new, v_new = _rk4(field, t, x, v, remaining)
            if 0.0 <= x_new <= length:
                x, v = x_new, v_new
                t += remaining
                break
            bounces += 1
            if bounces > max_reflections:
                raise ReflectionLimitError(
                    f"more than {max_reflections} reflections in one trace"
                )
            wall = 0.0 if x_new < 0.0 else length
            tau = _bisect_crossing(field, t, x, v, remaining, wall)
            x, v = _rk4(field, t, x, v, tau)
            x = wall
            v = -v  # 1D specular reflection, |v| preserved
            t += tau
            remaining -= tau
    return x, v


def _rk4(field, t, x, v, h):
    k1x, k1v = v, field(t, x)
    k2x, k2v = v + 0.5 * h * k1v, field(t + 0.5 * h, x + 0.5 * h * k1x)
    k3x, k3v = v + 0.5 * h * k2v, field(t + 0.5 * h, x + 0.5 * h * k2x)
    k4x, k4v = v + h * k3v, field(t + h, x + h * k3x)
    x_new = x + h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
    v_new = v + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return x_new, v_new


def _bisect_crossing(field, t, x, v, h, wall):
    lo, hi = 0.0, h
    sign0 = np.sign(x - wall) or 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        xm, _ = _rk4(field, t, x, v, mid)
        if np.sign(xm - wall) == sign0 or xm == wall:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------
# BGK relaxation toward the discrete local Maxwellian


def local_maxwellian(
    f: PhaseDistribution,
    *,
    density_floor: float | None = None,
    match_tol: float = 1e-13,
    max_newton: int = 40,
):
    """Per-cell Maxwellian whose discrete moments match f exactly.

    Returns (values, active) where ``active`` marks the spatial cells
    that were fitted; cells below the density floor (or with collapsed
    temperature) keep their original values and are marked inactive.
    """
    sgrid, vgrid = f.spatial, f.velocity
    dv = vgrid.cell_measure
    ones, comps, speed2 = _velocity_basis(vgrid)
    d_v = vgrid.dim
    psi = np.column_stack([ones] + list(comps) + [speed2])  # (Nv, P)
    flat = f.values.reshape(-1, vgrid.n_cells)
    targets = flat @ psi * dv  # (S, P): n, n u_k, n(|u|^2 + d theta)

    n = targets[:, 0]
    if density_floor is None:
        density_floor = 1e-12 * max(n.mean(), 1e-300)
    active = n > density_floor
    u = np.zeros((flat.shape[0], d_v))
    u[active] = targets[active, 1 : 1 + d_v] / n[active, None]
    e2 = np.zeros_like(n)
    e2[active] = targets[active, -1] / n[active]
    theta = (e2 - np.sum(u * u, axis=1)) / d_v
    active &= theta > 1e-12 * vgrid.v_max**2

    out = flat.copy()
    if not active.any():
        return out.reshape(f.values.shape), active.reshape(sgrid.shape)

    idx = np.nonzero(active)[0]
    na, ua, tha = n[idx], u[idx], theta[idx]
    # exponential-family parameters (a, b_k, c): M = exp(a + b.v + c|v|^2)
    params = np.empty((idx.size, 2 + d_v))
    params[:, 0] = (
        np.log(na)
        + 0.5 * d_v * np.log(1.0 / (2.0 * np.pi * tha))
        - 0.5 * np.sum(ua * ua, axis=1) / tha
    )
    params[:, 1 : 1 + d_v] = ua / tha[:, None]
    params[:, -1] = -0.5 / tha

    tgt = targets[idx]
    # convergence scale: n times the natural size of each basis function
    basis_scale = np.concatenate(
        [[1.0], np.full(d_v, max(vgrid.v_max, 1.0)), [max(vgrid.v_max**2, 1.0)]]
    )
    scale = na[:, None] * basis_scale[None, :]
    params0 = params.copy()
    m_vals = np.exp(params @ psi.T)
    for _ in range(max_newton):
        res = (m_vals * dv) @ psi - tgt
        live = np.abs(res / scale).max(axis=1) > match_tol
        if not live.any():
            break
        mw = m_vals[live] * dv
        jac = np.einsum("sj,jp,jq->spq", mw, psi, psi)
        try:
            step = np.linalg.solve(jac, -res[live])
        except np.linalg.LinAlgError:
            break
        step = np.clip(step, -5.0, 5.0)
        params[live] += step
        params[live, -1] = np.minimum(params[live, -1], -1e-12)  # keep c < 0
        m_vals[live] = np.exp(params[live] @ psi.T)
    bad = ~np.all(np.isfinite(m_vals), axis=1)
    if bad.any():
        m_vals[bad] = np.exp(params0[bad] @ psi.T)
    out[idx] = m_vals
    return out.reshape(f.values.shape), active.reshape(sgrid.shape)


def bgk_relax(
    f: PhaseDistribution,
    rate: float,
    dt: float,
    *,
    density_floor: float | None = None,
    match_tol: float = 1e-13,
) -> PhaseDistribution:
    """Exact integrating-factor BGK update toward the local Maxwellian.

    f <- w f + (1 - w) M[f] with w = exp(-rate*dt).  M[f] carries the
    cell's discrete (n, u, theta), so mass, momentum and kinetic energy
    are invariant and the discrete entropy cannot increase.  Cells whose
    fitted Maxwellian already coincides with f (resolved equilibrium)
    are returned bitwise unchanged.
    """
    if rate < 0:
        raise ValueError("relaxation rate must be nonnegative")
    if rate == 0.0 or dt == 0.0:
        return f
    m_vals, active = local_maxwellian(
        f, density_floor=density_floor, match_tol=match_tol
    )
    if not active.any():
        return f
    diff = m_vals - f.values
    fmax = np.abs(f.values).max()
    if np.abs(diff).max() <= 1e-13 * max(fmax, 1e-300):
        return f
    w = np.exp(-rate * dt)
    mask = active.reshape(active.shape + (1,) * f.velocity.dim)
    values = np.where(mask, f.values + (1.0 - w) * diff, f.values)
    return PhaseDistribution(values, f.spatial, f.velocity, f.species)
