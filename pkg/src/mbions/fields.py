"""Elliptic field solvers.

Two problems are solved on the spatial grid:

* the screened nonlinear problem  -lambda^2 * Lap(phi) + exp(beta*phi) = n_I
  for a fixed inverse temperature ``beta`` (damped Newton; the monotone
  exponential makes the Jacobian an M-matrix plus a positive diagonal,
  so damped Newton converges from the logarithmic initial guess), and

* the constrained problem that picks ``beta`` so the electron energy
  budget  E(beta) = m0*d_v/(2*beta) + (lambda^2/2) * int |grad phi|^2
  matches a prescribed value.  E is strictly decreasing in beta and
  blows up as beta -> 0+, so a bracketed bisection seeded at the exact
  lower bound m0*d_v/(2*E1) followed by a safeguarded Newton polish is
  unconditionally safe.

The discrete Laplacian is the standard second-order stencil with
periodic wrap or mirrored ghosts (zero-flux walls); its row and column
sums vanish, which is what makes the discrete mass identity
``int exp(beta*phi) = int n_I`` hold to solver tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .domain import INTERVAL, PERIODIC, SpatialField, SpatialGrid, integrate_values

_EXP_LIMIT = 700.0  # exp overflow threshold for beta*phi

DEFAULT_TOL_PDE = 1e-10
DEFAULT_TOL_ENERGY = 1e-10
DEFAULT_TOL_MASS = 1e-8


class FieldSolveError(RuntimeError):
    """Raised when an elliptic solve cannot be completed."""


# --------------------------------------------------------------------------
# discrete Laplacian and linear solves

_laplacian_cache: dict = {}
_poisson_lu_cache: dict = {}


def laplacian_matrix(grid: SpatialGrid) -> sp.csr_matrix:
    """Second-order Laplacian on ``grid`` (no lambda factor), cached."""
    key = grid.key()
    mat = _laplacian_cache.get(key)
    if mat is None:
        mat = _build_laplacian(grid)
        _laplacian_cache[key] = mat
    return mat


def _build_laplacian_1d(n, h, geometry):
    inv_h2 = 1.0 / (h * h)
    main = np.full(n, -2.0 * inv_h2)
    off = np.full(n - 1, inv_h2)
    mat = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    if geometry == PERIODIC:
        mat[0, n - 1] = inv_h2
        mat[n - 1, 0] = inv_h2
    else:  # mirrored ghost: zero-flux wall
        mat[0, 0] = -inv_h2
        mat[n - 1, n - 1] = -inv_h2
    return mat.tocsr()


def _build_laplacian(grid: SpatialGrid):
    if grid.dim == 1:
        return _build_laplacian_1d(grid.shape[0], grid.spacing[0], grid.geometry)
    lx = _build_laplacian_1d(grid.shape[0], grid.spacing[0], grid.geometry)
    ly = _build_laplacian_1d(grid.shape[1], grid.spacing[1], grid.geometry)
    ix = sp.identity(grid.shape[0], format="csr")
    iy = sp.identity(grid.shape[1], format="csr")
    return (sp.kron(lx, iy) + sp.kron(ix, ly)).tocsr()


def apply_laplacian(values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    """Lap(values) on the grid, returned with the grid's shape."""
    flat = laplacian_matrix(grid) @ np.asarray(values, dtype=float).ravel()
    return flat.reshape(grid.shape)


def gradient_square_integral(values: np.ndarray, grid: SpatialGrid) -> float:
    """Discrete int |grad phi|^2 dx in the energy (Dirichlet) form.

    Evaluated as -<phi, Lap phi> * cell measure, the quadratic form whose
    beta derivative matches the linearized problem exactly.
    """
    flat = np.asarray(values, dtype=float).ravel()
    return float(-flat @ (laplacian_matrix(grid) @ flat) * grid.cell_measure)


def _solve_shifted_1d(grid, lam2, diag_add, rhs):
    """Solve (-lam2*Lap + diag(diag_add)) x = rhs on a 1D grid."""
    n = grid.shape[0]
    h = grid.spacing[0]
    w = -lam2 / (h * h)  # off-diagonal entry
    main = -2.0 * w + diag_add
    if grid.geometry == INTERVAL:
        main = main.copy()
        main[0] += w
        main[-1] += w
        ab = np.zeros((3, n))
        ab[0, 1:] = w
        ab[1, :] = main
        ab[2, :-1] = w
        return solve_banded((1, 1), ab, rhs)
    # periodic: Sherman-Morrison rank-1 removal of the wrap entries
    gamma = -main[0]
    b = main.copy()
    b[0] -= gamma
    b[-1] -= w * w / gamma
    ab = np.zeros((3, n))
    ab[0, 1:] = w
    ab[1, :] = b
    ab[2, :-1] = w
    u = np.zeros(n)
    u[0] = gamma
    u[-1] = w
    sol = solve_banded((1, 1), ab, np.column_stack([rhs, u]))
    y, q = sol[:, 0], sol[:, 1]
    vy = y[0] + (w / gamma) * y[-1]
    vq = q[0] + (w / gamma) * q[-1]
    return y - q * (vy / (1.0 + vq))


def _solve_shifted(grid, lam2, diag_add, rhs):
    """Solve (-lam2*Lap + diag(diag_add)) x = rhs, shapes per grid."""
    flat_rhs = rhs.ravel()
    if grid.dim == 1:
        out = _solve_shifted_1d(grid, lam2, diag_add.ravel(), flat_rhs)
    else:
        mat = (-lam2) * laplacian_matrix(grid) + sp.diags(diag_add.ravel())
        out = spla.spsolve(mat.tocsc(), flat_rhs)
    return out.reshape(grid.shape)


def solve_poisson_zero_mean(source: np.ndarray, grid: SpatialGrid, lambda_d: float) -> np.ndarray:
    """Solve -lambda^2 * Lap(phi) = source with the zero-mean gauge.

    The operator is singular on the constants, so the mean of the source
    is projected out (callers check charge compatibility beforehand) and
    the bordered system enforcing sum(phi) = 0 is solved with a cached
    factorization.
    """
    key = (grid.key(), float(lambda_d))
    lu = _poisson_lu_cache.get(key)
    if lu is None:
        a = (-(lambda_d**2)) * laplacian_matrix(grid)
        n = a.shape[0]
        ones = np.ones((n, 1))
        bordered = sp.bmat([[a, ones], [ones.T, None]], format="csc")
        lu = spla.splu(bordered)
        _poisson_lu_cache[key] = lu
    flat = np.asarray(source, dtype=float).ravel()
    flat = flat - flat.mean()
    sol = lu.solve(np.concatenate([flat, [0.0]]))
    return sol[:-1].reshape(grid.shape)


# --------------------------------------------------------------------------
# nonlinear screened solve


@dataclass
class PhiSolveInfo:
    iterations: int
    residual: float
    residual_history: list


def _exp_beta_phi(beta, phi):
    z = beta * phi
    zmax = z.max() if z.size else 0.0
    if not np.isfinite(zmax) or zmax > _EXP_LIMIT:
        raise FieldSolveError(
            f"exponential overflow: max(beta*phi) = {zmax:.3g}; "
            "state is unphysical or the time step is too large"
        )
    return np.exp(z)


def _solve_phi(n_I, grid, beta, lambda_d, tol_pde, max_iter, phi0, max_halvings=30):
    lam2 = lambda_d * lambda_d
    lap = laplacian_matrix(grid)
    rho = np.asarray(n_I, dtype=float)
    mass = rho.sum() * grid.cell_measure

    if phi0 is None:
        floor = 1e-12 * mass / grid.total_measure
        phi = np.log(np.maximum(rho, floor)) / beta
    else:
        phi = np.asarray(phi0, dtype=float).copy()

    def residual(p):
        lap_p = (lap @ p.ravel()).reshape(grid.shape)
        return -lam2 * lap_p + _exp_beta_phi(beta, p) - rho

    res = residual(phi)
    rnorm = float(np.abs(res).max())
    history = [rnorm]
    for it in range(max_iter):
        if rnorm <= tol_pde:
            return phi, PhiSolveInfo(it, rnorm, history)
        diag = beta * _exp_beta_phi(beta, phi)
        step = _solve_shifted(grid, lam2, diag, -res)
        scale = 1.0
        for _ in range(max_halvings + 1):
            trial = phi + scale * step
            try:
                trial_res = residual(trial)
            except FieldSolveError:
                scale *= 0.5
                continue
            trial_norm = float(np.abs(trial_res).max())
            if trial_norm < rnorm or trial_norm <= tol_pde:
                break
            scale *= 0.5
        else:
            raise FieldSolveError(
                f"Newton stalled at residual {rnorm:.3e} (no descent after "
                f"{max_halvings} halvings)"
            )
        phi, res, rnorm = trial, trial_res, trial_norm
        history.append(rnorm)
    if rnorm <= tol_pde:
        return phi, PhiSolveInfo(max_iter, rnorm, history)
    raise FieldSolveError(
        f"Newton did not reach residual {tol_pde:.1e} in {max_iter} iterations "
        f"(reached {rnorm:.3e})"
    )


def solve_phi_given_beta(
    n_I: SpatialField,
    beta: float,
    lambda_d: float = 1.0,
    *,
    tol_pde: float = DEFAULT_TOL_PDE,
    max_iter: int = 60,
    phi0: np.ndarray | None = None,
) -> SpatialField:
    """Solve -lambda^2*Lap(phi) + exp(beta*phi) = n_I for fixed beta > 0.

    Parameters
    ----------
    n_I : nonnegative density with positive total mass.
    beta : inverse temperature, > 0.
    phi0 : optional warm-start values; defaults to log(max(n_I, floor))/beta.

    Returns
    -------
    SpatialField with max-norm residual at most ``tol_pde``.
    """
    _check_density(n_I)
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    phi, _ = _solve_phi(n_I.values, n_I.grid, beta, lambda_d, tol_pde, max_iter, phi0)
    return SpatialField(phi, n_I.grid)


def _check_density(n_I: SpatialField):
    if np.any(n_I.values < 0):
        raise ValueError("density must be nonnegative")
    if n_I.values.sum() <= 0.0:
        raise ValueError("density must have positive total mass")


# --------------------------------------------------------------------------
# energy as a function of beta, and its derivative


def energy_of_beta(
    n_I: SpatialField,
    m0: float,
    beta: float,
    lambda_d: float = 1.0,
    velocity_dim: int = 1,
    *,
    tol_pde: float = DEFAULT_TOL_PDE,
    phi0: np.ndarray | None = None,
) -> float:
    """Electron energy E(beta) = m0*d_v/(2*beta) + (lambda^2/2)*int|grad phi|^2."""
    phi = solve_phi_given_beta(n_I, beta, lambda_d, tol_pde=tol_pde, phi0=phi0)
    lam2 = lambda_d * lambda_d
    return m0 * velocity_dim / (2.0 * beta) + 0.5 * lam2 * gradient_square_integral(
        phi.values, n_I.grid
    )


def d_energy_d_beta(
    n_I: SpatialField,
    m0: float,
    beta: float,
    phi: SpatialField,
    lambda_d: float = 1.0,
    velocity_dim: int = 1,
) -> float:
    """Exact derivative of the discrete E(beta), given the solved phi.

    Solves the linearized problem
    (-lambda^2*Lap + beta*exp(beta*phi)) dphi = -exp(beta*phi)*phi
    and returns -m0*d_v/(2*beta^2) - lambda^2 * <phi, Lap dphi> * h.
    Strictly negative for admissible inputs.
    """
    grid = phi.grid
    lam2 = lambda_d * lambda_d
    ebp = _exp_beta_phi(beta, phi.values)
    dphi = _solve_shifted(grid, lam2, beta * ebp, -(ebp * phi.values))
    lap_dphi = apply_laplacian(dphi, grid)
    coupling = float((phi.values * lap_dphi).sum() * grid.cell_measure)
    return -m0 * velocity_dim / (2.0 * beta * beta) - lam2 * coupling


# --------------------------------------------------------------------------
# the constrained (beta, phi) problem


@dataclass
class BetaSolution:
    """Solved (beta, phi) pair with solver metadata."""

    beta: float
    phi: SpatialField
    newton_iters: int
    bisect_iters: int
    pde_residual: float
    energy_residual: float
    mass_residual: float
    bracket: tuple


def find_beta(
    n_I: SpatialField,
    m0: float,
    E1: float,
    lambda_d: float = 1.0,
    velocity_dim: int = 1,
    *,
    tol_pde: float = DEFAULT_TOL_PDE,
    tol_energy: float = DEFAULT_TOL_ENERGY,
    tol_mass: float = DEFAULT_TOL_MASS,
    beta_hint: float | None = None,
    phi_hint: np.ndarray | None = None,
    max_doublings: int = 60,
    max_bisect: int = 200,
    max_newton: int = 60,
) -> BetaSolution:
    """Solve for the unique (beta, phi) with E(beta) = E1.

    The search bisects E(beta) - E1 starting from the exact lower bound
    beta_lo = m0*d_v/(2*E1) (E(beta) >= m0*d_v/(2*beta) makes the sign
    there guaranteed) and an upper end found by doubling, then polishes
    with bracketed Newton steps using the exact derivative.

    ``beta_hint``/``phi_hint`` warm-start the search; time steppers pass
    the previous step's solution, which typically reduces the solve to a
    couple of Newton iterations.
    """
    _check_density(n_I)
    if not E1 > 0:
        raise ValueError(f"energy budget E1 must be positive, got {E1}")
    if not m0 > 0:
        raise ValueError(f"total mass m0 must be positive, got {m0}")
    grid = n_I.grid
    mass_in = integrate_values(n_I.values, grid)
    if abs(mass_in - m0) > tol_mass * m0:
        raise ValueError(
            f"density mass {mass_in!r} inconsistent with m0 = {m0!r} "
            f"(tolerance {tol_mass:.1e} relative)"
        )

    phi_ws = {"phi": phi_hint}
    evals = {"count": 0}

    def energy_at(beta):
        phi, info = _solve_phi(
            n_I.values, grid, beta, lambda_d, tol_pde, 60, phi_ws["phi"]
        )
        phi_ws["phi"] = phi
        evals["count"] += 1
        lam2 = lambda_d * lambda_d
        e = m0 * velocity_dim / (2.0 * beta) + 0.5 * lam2 * gradient_square_integral(
            phi, grid
        )
        return e, phi, info

    beta_lo_bound = m0 * velocity_dim / (2.0 * E1)
    lo = beta_lo_bound
    e_lo, phi_lo, info_lo = energy_at(lo)
    tol_abs = tol_energy * E1
    if e_lo - E1 <= tol_abs:
        return _make_solution(
            lo, phi_lo, grid, info_lo, e_lo - E1, m0, 0, 0, (lo, lo)
        )

    # bracket the root
    bisect_iters = 0
    hi = None
    if beta_hint is not None and beta_hint > beta_lo_bound:
        cand_lo = max(beta_lo_bound, beta_hint / 1.3)
        cand_hi = beta_hint * 1.3
        e_cand_hi, _, _ = energy_at(cand_hi)
        if e_cand_hi < E1:
            e_cand_lo, _, _ = energy_at(cand_lo)
            if e_cand_lo >= E1:
                lo, hi = cand_lo, cand_hi
    if hi is None:
        lo = beta_lo_bound
        hi = 2.0 * lo
        for _ in range(max_doublings):
            e_hi, _, _ = energy_at(hi)
            if e_hi < E1:
                break
            lo = hi
            hi *= 2.0
        else:
            raise FieldSolveError(
                f"E(beta) never dropped below E1 = {E1!r} after {max_doublings} "
                "doublings; the energy budget is inconsistent with the density"
            )
    bracket = (lo, hi)

    # coarse bisection
    while (hi - lo) > 1e-2 * lo and bisect_iters < max_bisect:
        mid = 0.5 * (lo + hi)
        e_mid, _, _ = energy_at(mid)
        if e_mid >= E1:
            lo = mid
        else:
            hi = mid
        bisect_iters += 1

    # Newton polish, safeguarded inside the bracket
    beta = 0.5 * (lo + hi)
    newton_iters = 0
    for _ in range(max_newton):
        e_b, phi_b, info_b = energy_at(beta)
        g = e_b - E1
        if abs(g) <= tol_abs:
            return _make_solution(
                beta, phi_b, grid, info_b, g, m0, newton_iters, bisect_iters, bracket
            )
        if g >= 0:
            lo = beta
        else:
            hi = beta
        de = d_energy_d_beta(
            n_I, m0, beta, SpatialField(phi_b, grid), lambda_d, velocity_dim
        )
        nxt = beta - g / de
        if not np.isfinite(nxt) or not (lo < nxt < hi):
            nxt = 0.5 * (lo + hi)
            bisect_iters += 1
        else:
            newton_iters += 1
        beta = nxt
    raise FieldSolveError(
        f"beta search did not converge to relative {tol_energy:.1e} "
        f"(bracket {lo!r}..{hi!r}, {evals['count']} energy evaluations)"
    )


def _make_solution(beta, phi_values, grid, info, energy_residual, m0, newton, bisect, bracket):
    mass_residual = abs(
        float(np.exp(beta * phi_values).sum() * grid.cell_measure) - m0
    )
    return BetaSolution(
        beta=float(beta),
        phi=SpatialField(phi_values, grid),
        newton_iters=newton,
        bisect_iters=bisect,
        pde_residual=info.residual,
        energy_residual=float(energy_residual),
        mass_residual=mass_residual,
        bracket=bracket,
    )


# --------------------------------------------------------------------------
# electric field


@dataclass
class ElectricField:
    """E = -grad(phi), central differences at cell centers."""

    components: tuple  # one array of grid.shape per spatial dim
    grid: SpatialGrid

    def sup_norm(self) -> float:
        mag2 = sum(c * c for c in self.components)
        return float(np.sqrt(mag2.max()))

    def component_max(self) -> float:
        return float(max(np.abs(c).max() for c in self.components))


def electric_field(phi: SpatialField) -> ElectricField:
    """Discrete E = -grad(phi) with wrap or mirrored-ghost closure.

    At reflecting walls the mirrored ghost enforces the zero-flux
    condition, so the normal component vanishes identically on the wall
    faces.
    """
    grid = phi.grid
    comps = []
    for axis in range(grid.dim):
        h = grid.spacing[axis]
        vals = phi.values
        if grid.geometry == PERIODIC:
            fwd = np.roll(vals, -1, axis=axis)
            bwd = np.roll(vals, 1, axis=axis)
            comp = -(fwd - bwd) / (2.0 * h)
        else:
            comp = np.empty_like(vals)
            comp[1:-1] = -(vals[2:] - vals[:-2]) / (2.0 * h)
            # mirrored ghosts phi[-1] = phi[0], phi[n] = phi[n-1]
            comp[0] = -(vals[1] - vals[0]) / (2.0 * h)
            comp[-1] = -(vals[-1] - vals[-2]) / (2.0 * h)
        comps.append(comp)
    return ElectricField(tuple(comps), grid)
