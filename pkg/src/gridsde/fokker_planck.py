"""Verification core: discrete chain-rule residuals, the weak-form density
equation, and an independent finite-volume solver for cross-validation.

The discrete chain rule estimates the one-step change of phi(t, x(t)) by
``phi_t + phi_x * r + (1/(2n)) * phi_xx * r^2`` with r the difference
quotient of x; its residual decays like 1/n on smooth paths and like
n^(-1/2) on coin-flip paths (the cube of r enters the remainder there).

The weak form tests the empirical density rho against
``eps^2 * sum_t sum_x (phi_t + f phi_x + h^2/2 phi_xx) rho + phi(0, x0) = 0``
for compactly supported smooth phi vanishing before t = 1.  The report also
splits the underlying ensemble average into its four algebraic pieces
(drift, terms linear in the noise, the f^2 step correction, and the
quadratic noise term); the pieces are an exact regrouping, so they must sum
to the directly computed total to roundoff, and the linear-in-noise piece
vanishes exactly on exhaustive ensembles.

The finite-volume solver shares nothing with the ensemble simulator beyond
expression evaluation, so agreement between the two is evidence, not
circularity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expr import TestFunction, as_expr
from .noise import NoiseEnsemble
from .sde import (
    CauchyProblem,
    Trajectory,
    TrajectorySet,
    density,
    simulate_ensemble,
    write_density_csv,
)

__all__ = [
    "VerificationError",
    "FPStabilityError",
    "ItoReport",
    "WeakFormReport",
    "FPSolution",
    "CrossValReport",
    "ito_residual",
    "weak_form_residual",
    "fp_solve",
    "cross_validate",
]


class VerificationError(ValueError):
    """Unusable inputs for a verification run."""


class FPStabilityError(VerificationError):
    """Requested time step violates the explicit stability bound."""


def _arr(value, like: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=np.float64), like.shape)


# ----------------------------------------------------------------------
# discrete chain-rule residual


@dataclass(frozen=True)
class ItoReport:
    """Residual of the discrete chain rule along one trajectory.

    ``hypothesis_ok`` records whether max |dx/dt| stayed within n^(2/3),
    the growth bound under which the second-order estimate is valid.
    """

    n: int
    residuals: np.ndarray
    max_abs_residual: float
    mean_abs_residual: float
    max_rate: float
    rate_bound: float
    hypothesis_ok: bool
    phi_label: str

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "max_abs_residual": self.max_abs_residual,
            "mean_abs_residual": self.mean_abs_residual,
            "max_rate": self.max_rate,
            "rate_bound": self.rate_bound,
            "hypothesis_ok": self.hypothesis_ok,
            "phi": self.phi_label,
        }


def ito_residual(phi: TestFunction, trajectory: Trajectory, problem: CauchyProblem | None = None) -> ItoReport:
    """Per-step residual of the second-order chain-rule estimate, k = 0..n-2."""
    n = trajectory.level.n
    if n < 2:
        raise VerificationError("need at least 2 steps for a residual")
    xv = trajectory.values
    times = np.arange(n + 1, dtype=np.float64) / n
    with np.errstate(all="ignore"):
        pv = _arr(phi.value_fn(times, xv), xv)
        rate = (xv[1:] - xv[:-1]) * n
        tk, xk = times[:-1], xv[:-1]
        estimate = (
            phi.dt_fn(tk, xk)
            + phi.dx_fn(tk, xk) * rate
            + (0.5 / n) * phi.dxx_fn(tk, xk) * rate * rate
        )
        residuals = ((pv[1:] - pv[:-1]) * n - estimate)[: n - 1]
    if not np.all(np.isfinite(residuals)):
        raise VerificationError("residuals are not finite")
    max_rate = float(np.max(np.abs(rate)))
    bound = float(n) ** (2.0 / 3.0)
    return ItoReport(
        n=n,
        residuals=residuals,
        max_abs_residual=float(np.max(np.abs(residuals))),
        mean_abs_residual=float(np.mean(np.abs(residuals))),
        max_rate=max_rate,
        rate_bound=bound,
        hypothesis_ok=max_rate <= bound,
        phi_label=phi.label or str(phi.expr),
    )


# ----------------------------------------------------------------------
# weak form


@dataclass(frozen=True)
class WeakFormReport:
    """Weak-form residual plus the four-piece ensemble decomposition."""

    n: int
    residual: float
    double_sum: float
    initial_term: float
    drift_term: float
    noise_term: float
    correction_term: float
    quadratic_term: float
    taylor_total: float
    pieces_sum_error: float
    ensemble_descriptor: dict
    phi_label: str

    def pieces_sum(self) -> float:
        return self.drift_term + self.noise_term + self.correction_term + self.quadratic_term

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "residual": self.residual,
            "double_sum": self.double_sum,
            "initial_term": self.initial_term,
            "drift_term": self.drift_term,
            "noise_term": self.noise_term,
            "correction_term": self.correction_term,
            "quadratic_term": self.quadratic_term,
            "taylor_total": self.taylor_total,
            "pieces_sum_error": self.pieces_sum_error,
            "ensemble": self.ensemble_descriptor,
            "phi": self.phi_label,
        }


def weak_form_residual(
    problem: CauchyProblem,
    ensemble: NoiseEnsemble,
    phi: TestFunction,
    batch_size: int = 1 << 15,
    threads: int = 1,
) -> WeakFormReport:
    """Residual of the weak-form density equation for one test function.

    The headline residual uses the empirical density with f, h, and the phi
    derivatives evaluated at bin left edges.  The four decomposition pieces
    are ensemble averages accumulated along the same trajectories:
    E[phi_t + f phi_x], E[(phi_x h + eps phi_xx f h) xi],
    E[(eps/2) phi_xx f^2], and E[(eps/2) phi_xx h^2 xi^2], each summed over
    t with weight eps.
    """
    level = problem.level
    n = level.n
    if not phi.t_support[1] < 1.0:
        raise VerificationError(
            "test function must vanish at t = 1 (its time support must end before 1)"
        )
    halfwidth = float(level.spatial_halfwidth)
    if phi.x_support[0] < -halfwidth - 1e-12 or phi.x_support[1] > halfwidth + 1e-12:
        raise VerificationError("window too small for the test function's spatial support")

    k_window = level.window_steps
    counts = np.zeros((n, 2 * k_window), dtype=np.int64)
    drift_sum = noise_sum = corr_sum = quad_sum = taylor_sum = 0.0
    eps = 1.0 / n

    fdrift = problem.drift.vectorized()
    fdiff = problem.diffusion.vectorized()
    trajset = simulate_ensemble(problem, ensemble, batch_size=batch_size, threads=threads)
    with np.errstate(all="ignore"):
        for _, noise_block, values in trajset.batches(with_noise=True):
            for k in range(n):
                tk = k / n
                xk = values[:, k]
                xik = noise_block[:, k]
                fv = _arr(fdrift(tk, xk), xk)
                hv = _arr(fdiff(tk, xk), xk)
                pt = _arr(phi.dt_fn(tk, xk), xk)
                px = _arr(phi.dx_fn(tk, xk), xk)
                pxx = _arr(phi.dxx_fn(tk, xk), xk)
                q = fv + hv * xik
                drift_sum += float((pt + fv * px).sum())
                noise_sum += float(((px * hv + eps * pxx * fv * hv) * xik).sum())
                corr_sum += float((0.5 * eps * pxx * fv * fv).sum())
                quad_sum += float((0.5 * eps * pxx * hv * hv * xik * xik).sum())
                taylor_sum += float((pt + px * q + 0.5 * eps * pxx * q * q).sum())
                bins = np.floor(xk * n).astype(np.int64)
                inside = (bins >= -k_window) & (bins < k_window)
                counts[k] += np.bincount(bins[inside] + k_window, minlength=2 * k_window)

    total = trajset.count
    drift_term = eps * drift_sum / total
    noise_term = eps * noise_sum / total
    correction_term = eps * corr_sum / total
    quadratic_term = eps * quad_sum / total
    taylor_total = eps * taylor_sum / total
    pieces_error = abs(
        (drift_term + noise_term + correction_term + quadratic_term) - taylor_total
    )

    edges = np.arange(-k_window, k_window, dtype=np.float64) / n
    weighted = 0.0
    with np.errstate(all="ignore"):
        for k in range(n):
            tk = k / n
            g = (
                _arr(phi.dt_fn(tk, edges), edges)
                + _arr(fdrift(tk, edges), edges) * _arr(phi.dx_fn(tk, edges), edges)
                + 0.5 * _arr(fdiff(tk, edges), edges) ** 2 * _arr(phi.dxx_fn(tk, edges), edges)
            )
            weighted += float((g * counts[k]).sum())
    double_sum = weighted / (n * total)
    initial_term = phi(0.0, problem.x0)

    return WeakFormReport(
        n=n,
        residual=double_sum + initial_term,
        double_sum=double_sum,
        initial_term=initial_term,
        drift_term=drift_term,
        noise_term=noise_term,
        correction_term=correction_term,
        quadratic_term=quadratic_term,
        taylor_total=taylor_total,
        pieces_sum_error=pieces_error,
        ensemble_descriptor=ensemble.descriptor(),
        phi_label=phi.label or str(phi.expr),
    )


# ----------------------------------------------------------------------
# finite-volume Fokker-Planck solver


@dataclass(frozen=True)
class FPSolution:
    """Conservative finite-volume solution P(t, x) on cells of width dx.

    Flux form with upwinded drift and central diffusion, zero-flux
    boundaries; mass is conserved to rounding and the explicit stability
    bound keeps P nonnegative.  Moments use cell left edges to match the
    density convention.
    """

    lo: float
    hi: float
    dx: float
    times: tuple[float, ...]
    values: np.ndarray
    masses: tuple[float, ...]

    @property
    def cells(self) -> int:
        return self.values.shape[1]

    def cell_left_edges(self) -> np.ndarray:
        return self.lo + np.arange(self.cells, dtype=np.float64) * self.dx

    def moment(self, slice_index: int, power: int = 1) -> float:
        edges = self.cell_left_edges()
        return float(np.sum(self.values[slice_index] * edges**power) * self.dx)

    def to_csv(self, path) -> None:
        write_density_csv(path, np.asarray(self.times), self.cell_left_edges(), self.values)

    def to_dict(self) -> dict:
        return {
            "window": [self.lo, self.hi],
            "dx": self.dx,
            "times": list(self.times),
            "masses": list(self.masses),
        }


def _max_over_window(fn, t_samples: np.ndarray, xs: np.ndarray) -> float:
    worst = 0.0
    with np.errstate(all="ignore"):
        for t in t_samples:
            vals = np.broadcast_to(np.asarray(fn(float(t), xs), dtype=np.float64), xs.shape)
            if not np.all(np.isfinite(vals)):
                raise VerificationError("coefficient is not finite on the solver window")
            worst = max(worst, float(np.max(np.abs(vals))))
    return worst


def fp_solve(
    drift,
    diffusion,
    x0: float,
    window: tuple[float, float],
    dx: float,
    dt: float | None = None,
    t_end: float = 1.0,
    save_times: Sequence[float] | None = None,
) -> FPSolution:
    """Solve the forward density equation from a delta at the cell containing x0.

    Requires dt <= dx^2 / (2 max h^2 + dx max |f|); passing dt=None picks
    90% of that bound.  Snapshots land exactly on the requested save times
    (the step is shortened per interval as needed, never lengthened).
    """
    drift = as_expr(drift)
    diffusion = as_expr(diffusion)
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise VerificationError("window must satisfy lo < hi")
    if not lo <= x0 < hi:
        raise VerificationError("window must contain x0")
    cells_f = (hi - lo) / dx
    cells = round(cells_f)
    if cells < 3 or abs(cells_f - cells) > 1e-9:
        raise VerificationError("window width must be an integer number (>= 3) of dx cells")
    if save_times is None:
        save_times = (t_end,)
    save_times = tuple(float(t) for t in save_times)
    if any(t < 0 or t > t_end + 1e-12 for t in save_times):
        raise VerificationError("save times must lie in [0, t_end]")
    if any(t2 <= t1 for t1, t2 in zip(save_times, save_times[1:])):
        raise VerificationError("save times must be strictly increasing")

    centers = lo + (np.arange(cells, dtype=np.float64) + 0.5) * dx
    faces = lo + np.arange(1, cells, dtype=np.float64) * dx
    drift_fn = drift.vectorized()
    diffusion_fn = diffusion.vectorized()

    t_samples = np.linspace(0.0, t_end, 33)
    max_h2 = _max_over_window(diffusion_fn, t_samples, centers) ** 2
    max_f = _max_over_window(drift_fn, t_samples, faces)
    denom = 2.0 * max_h2 + dx * max_f
    limit = dx * dx / denom if denom > 0 else math.inf
    if dt is None:
        dt = 0.9 * limit if math.isfinite(limit) else max(t_end, 1e-9)
    elif dt > limit * (1.0 + 1e-12):
        raise FPStabilityError(
            f"dt = {dt} violates the explicit stability bound; maximal admissible dt is {limit}"
        )
    if dt <= 0:
        raise VerificationError("dt must be positive")

    state = np.zeros(cells)
    i0 = min(int(math.floor((x0 - lo) / dx + 1e-12)), cells - 1)
    state[i0] = 1.0 / dx

    snapshots = []
    masses = []
    now = 0.0

    def check(p: np.ndarray, t: float) -> float:
        mass = float(np.sum(p) * dx)
        if abs(mass - 1.0) > 1e-6:
            raise VerificationError(f"mass conservation violated: mass = {mass} at t = {t}")
        if float(np.min(p)) < -1e-12:
            raise VerificationError(f"negative density {float(np.min(p))} at t = {t}")
        return mass

    with np.errstate(all="ignore"):
        for target in save_times:
            span = target - now
            if span > 1e-15:
                substeps = max(1, math.ceil(span / dt - 1e-9))
                dt_local = span / substeps
                for step in range(substeps):
                    t_here = now + step * dt_local
                    v_face = _arr(drift_fn(t_here, faces), faces)
                    d_cell = _arr(diffusion_fn(t_here, centers), centers) ** 2
                    upwind = np.where(v_face >= 0.0, state[:-1], state[1:])
                    flux = v_face * upwind - (d_cell[1:] * state[1:] - d_cell[:-1] * state[:-1]) / (
                        2.0 * dx
                    )
                    full = np.concatenate(([0.0], flux, [0.0]))
                    state = state - (dt_local / dx) * (full[1:] - full[:-1])
                    check(state, t_here + dt_local)
            now = target
            snapshots.append(state.copy())
            masses.append(check(state, now))

    return FPSolution(
        lo=lo,
        hi=hi,
        dx=float(dx),
        times=save_times,
        values=np.asarray(snapshots),
        masses=tuple(masses),
    )


# ----------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class CrossValReport:
    """L1 distance per slice between the empirical and finite-volume densities."""

    slice_times: tuple[float, ...]
    l1: tuple[float, ...]
    max_l1: float
    outside_mass: tuple[float, ...]
    fp_params: dict
    ensemble_descriptor: dict

    def to_dict(self) -> dict:
        return {
            "slice_times": list(self.slice_times),
            "l1": list(self.l1),
            "max_l1": self.max_l1,
            "outside_mass": list(self.outside_mass),
            "fp": self.fp_params,
            "ensemble": self.ensemble_descriptor,
        }


def cross_validate(
    problem: CauchyProblem,
    ensemble: NoiseEnsemble,
    window: tuple[float, float] = (-3.0, 3.0),
    dx: float = 1.0 / 64,
    dt: float | None = None,
    slice_times: Sequence[float] = (0.5, 0.75, 1.0),
    batch_size: int = 1 << 15,
    threads: int = 1,
) -> CrossValReport:
    """Compare the empirical density with the finite-volume solution.

    The empirical bins (width 1/n) are regrouped onto the solver cells, so
    dx must be a whole number of grid steps and the solver window must sit
    on the 1/n lattice inside the density window.

    Early slices are a poor comparison: a coin-flip walk initially lives on
    a parity lattice of spacing 2/sqrt(n) which fine cells resolve as a
    comb against the smooth solution, so the default slices start at 0.5,
    by when drift dispersion has smeared the lattice.
    """
    level = problem.level
    n = level.n
    grid = level.time_grid()
    slice_times = tuple(float(t) for t in slice_times)
    slice_indices = [grid.index_of(t) for t in slice_times]

    ratio_f = dx * n
    ratio = round(ratio_f)
    if ratio < 1 or abs(ratio_f - ratio) > 1e-9:
        raise VerificationError("incompatible bin alignment: dx must be a whole number of 1/n steps")
    lo, hi = float(window[0]), float(window[1])
    lo_idx, hi_idx = lo * n, hi * n
    if abs(lo_idx - round(lo_idx)) > 1e-9 or abs(hi_idx - round(hi_idx)) > 1e-9:
        raise VerificationError("incompatible bin alignment: window edges must sit on the 1/n lattice")
    lo_idx, hi_idx = round(lo_idx), round(hi_idx)
    k_window = level.window_steps
    if lo_idx < -k_window or hi_idx > k_window:
        raise VerificationError("solver window must fit inside the density window")

    trajset = simulate_ensemble(problem, ensemble, batch_size=batch_size, threads=threads)
    dens = density(trajset, time_indices=slice_indices)
    fp = fp_solve(
        problem.drift,
        problem.diffusion,
        problem.x0,
        (lo, hi),
        dx,
        dt=dt,
        t_end=max(slice_times),
        save_times=slice_times,
    )
    cells = fp.cells
    assert cells * ratio == hi_idx - lo_idx

    total = dens.ensemble_size
    l1_list = []
    outside_list = []
    for pos in range(len(slice_times)):
        fine = dens.counts[pos]
        segment = fine[lo_idx + k_window : hi_idx + k_window].reshape(cells, ratio).sum(axis=1)
        cell_mass = segment / total
        emp = cell_mass / dx
        l1_list.append(float(np.sum(np.abs(emp - fp.values[pos])) * dx))
        outside_list.append(float((total - segment.sum()) / total))

    return CrossValReport(
        slice_times=slice_times,
        l1=tuple(l1_list),
        max_l1=max(l1_list),
        outside_mass=tuple(outside_list),
        fp_params={"window": [lo, hi], "dx": dx, "dt": dt, "times": list(slice_times)},
        ensemble_descriptor=ensemble.descriptor(),
    )
