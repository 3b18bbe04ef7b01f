"""Monotone explicit finite-difference solver for the value equation.

The generalized value PDE in one spatial dimension,

    -v_t + sup_u G(t, x, -v, -v_x, -v_xx, u) = 0,   v(T, x) = -phi(x),
    G(t, x, r, p, A, u) = 0.5 sigma^2 A + p b + f(t, x, r, sigma p, u),

is swept backward in time with upwind first differences (side chosen by
the sign of b), central second differences, and linear extrapolation of
the outermost two nodes as the boundary rule.  The explicit update is
monotone in the neighboring values provided dt satisfies the CFL bound

    dt <= dx^2 / (max sigma^2 + dx max|b| + c0),

where c0 absorbs the driver's dependence on its value and z arguments;
`cfl_max_dt` computes the bound by pre-scanning the grid, and the solver
refuses to run when it is violated.  Monotone schemes of this type
converge to the PDE's viscosity solution, which is why one is used here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .forward import TimeGrid
from .problem import ControlBoxError, ProblemError


class CFLError(ProblemError):
    def __init__(self, dt, dt_max, n_required, span):
        self.dt_max = dt_max
        self.n_required = n_required
        super().__init__(
            f"time step {dt:.3e} violates the monotonicity bound {dt_max:.3e}; "
            f"use at least N = {n_required} steps on [{span[0]}, {span[1]}]"
        )


@dataclass
class ValueGrid:
    """Finite-difference value approximation on [-L, L] x time grid."""

    space_half_width: float
    n_cells: int
    grid: TimeGrid
    values: np.ndarray  # (N+1, J+1)
    control_grid_size: int
    boundary_rule: str = "linear-extrapolation"

    @property
    def dx(self):
        return 2.0 * self.space_half_width / self.n_cells

    @property
    def xs(self):
        return np.linspace(
            -self.space_half_width, self.space_half_width, self.n_cells + 1
        )

    def slice_at(self, t):
        """(time index, value row) at the grid time nearest to t."""
        i = int(np.argmin(np.abs(self.grid.times - t)))
        return i, self.values[i]


def generalized_hamiltonian(spec, t, x, r, p_var, big_a, u):
    """G(t, x, r, p, A, u) for state dimension n (A symmetric n x n)."""
    x1 = np.atleast_1d(np.asarray(x, dtype=float))
    u1 = np.atleast_1d(np.asarray(u, dtype=float))
    p1 = np.atleast_1d(np.asarray(p_var, dtype=float))
    a2 = np.asarray(big_a, dtype=float).reshape(spec.n, spec.n)
    if not np.allclose(a2, a2.T, atol=1e-12):
        raise ProblemError("second-order argument A must be symmetric")
    if not spec.control_inside(u1):
        raise ControlBoxError(f"control {u} outside the control box")
    b = spec.drift(t, x1, u1)
    sg = spec.diffusion(t, x1, u1)
    z = sg.T @ p1  # sigma^T p, shape (d,)
    trace = float(np.einsum("ad,ae,ed->", sg, a2, sg)) * 0.5
    return float(trace + p1 @ b + spec.driver(t, x1, r, z, u1))


def _control_grid(spec, size):
    axes = [
        np.linspace(spec.control_lo[j], spec.control_hi[j], size)
        for j in range(spec.k)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


def _scan_coefficients(spec, half_width, n_cells, control_grid_size, t_start):
    """Max |b|, sigma^2 and driver-gradient magnitudes over the grid."""
    xs = np.linspace(-half_width, half_width, n_cells + 1)
    times = np.linspace(t_start, spec.horizon, 5)
    controls = _control_grid(spec, control_grid_size)
    max_b = 0.0
    max_sig2 = 0.0
    max_fy = 0.0
    max_sfz = 0.0
    x_cols = xs[:, None]
    y_probe = -spec.terminal(x_cols)
    z_probe = np.zeros((xs.size, spec.d))
    for t in times:
        for u in controls:
            uu = np.broadcast_to(u, (xs.size, spec.k))
            b = spec.drift(t, x_cols, uu)
            sg = spec.diffusion(t, x_cols, uu)
            max_b = max(max_b, float(np.max(np.abs(b))))
            max_sig2 = max(max_sig2, float(np.max(sg[..., 0, 0] ** 2)))
            fy = spec.driver_y(t, x_cols, y_probe, z_probe, uu)
            fz = spec.driver_z(t, x_cols, y_probe, z_probe, uu)
            max_fy = max(max_fy, float(np.max(np.abs(fy))))
            max_sfz = max(
                max_sfz, float(np.max(np.abs(sg[..., 0, 0]) * np.abs(fz[..., 0])))
            )
    return max_b, max_sig2, max_fy, max_sfz


def cfl_max_dt(spec, half_width, n_cells, control_grid_size=11, t_start=0.0):
    """Largest monotone time step for the explicit sweep on this grid."""
    dx = 2.0 * half_width / n_cells
    max_b, max_sig2, max_fy, max_sfz = _scan_coefficients(
        spec, half_width, n_cells, control_grid_size, t_start
    )
    c0 = dx * max_sfz + dx * dx * max_fy
    denom = max_sig2 + dx * max_b + c0
    return np.inf if denom == 0.0 else dx * dx / denom


def cfl_time_grid(spec, half_width, n_cells, control_grid_size=11, t_start=0.0):
    """TimeGrid on [t_start, T] with the smallest CFL-admissible step count."""
    dt_max = cfl_max_dt(spec, half_width, n_cells, control_grid_size, t_start)
    n = max(1, int(np.ceil((spec.horizon - t_start) / dt_max)))
    return TimeGrid(t_start, spec.horizon, n)


def _pad_linear(v):
    """Extend one ghost node per side by linear extrapolation."""
    return np.concatenate(
        ([2.0 * v[0] - v[1]], v, [2.0 * v[-1] - v[-2]])
    )


class _Sweep:
    """Backward-in-time sweep state with loop invariants hoisted.

    Spatial derivatives use upwind first differences (forward where
    b >= 0), central second differences, and linear-extrapolation ghost
    nodes at both ends.  When the problem's expression variables show b
    and sigma are time-independent, they are evaluated once per control;
    when the driver ignores z and u it is evaluated once per step.
    """

    def __init__(self, spec, xs, controls):
        self.spec = spec
        self.xs = xs
        self.dx = xs[1] - xs[0]
        self.x_cols = xs[:, None]
        self.uu = [np.broadcast_to(u, (xs.size, spec.k)) for u in controls]
        fvars = spec.f_variables
        self.f_uses_u = fvars is None or any(v.startswith("u") for v in fvars)
        self.f_uses_z = fvars is None or any(v.startswith("z") for v in fvars)
        bs_static = (
            spec.b_variables is not None
            and spec.sigma_variables is not None
            and "s" not in spec.b_variables
            and "s" not in spec.sigma_variables
        )
        self.static_coeffs = None
        if bs_static:
            self.static_coeffs = [self._coeffs(0.0, uu) for uu in self.uu]
        self.zeros_z = np.zeros((xs.size, spec.d))

    def _coeffs(self, t, uu):
        b = self.spec.drift(t, self.x_cols, uu)[:, 0]
        sg = self.spec.diffusion(t, self.x_cols, uu)[:, 0, 0]
        return b, sg

    def step(self, v, t, dt):
        """One explicit update of a value row at known time level t."""
        vp = _pad_linear(v)
        dxx = (vp[2:] - 2.0 * vp[1:-1] + vp[:-2]) / (self.dx * self.dx)
        fwd = (vp[2:] - vp[1:-1]) / self.dx
        bwd = (vp[1:-1] - vp[:-2]) / self.dx
        r = -v
        shared_f = None
        if not (self.f_uses_u or self.f_uses_z):
            shared_f = self.spec.driver(t, self.x_cols, r, self.zeros_z, self.uu[0])
        best = None
        for c, uu in enumerate(self.uu):
            if self.static_coeffs is not None:
                b, sg = self.static_coeffs[c]
            else:
                b, sg = self._coeffs(t, uu)
            d1 = np.where(b >= 0.0, fwd, bwd)
            if shared_f is not None:
                fval = shared_f
            else:
                fval = self.spec.driver(t, self.x_cols, r, (-sg * d1)[:, None], uu)
            g = 0.5 * sg * sg * (-dxx) + (-d1) * b + fval
            best = g if best is None else np.maximum(best, g)
        return v - dt * best


def sweep_step(spec, xs, v, t, dt, control_grid_size=11):
    """Single explicit update of a value row (used directly by probes)."""
    return _Sweep(spec, xs, _control_grid(spec, control_grid_size)).step(v, t, dt)


def solve_hjb_fd(spec, half_width, n_cells, grid, control_grid_size=11):
    """Solve the value PDE on [-L, L] x [grid.start, T].

    One-dimensional only (spec.n == 1); raises CFLError when grid.dt
    exceeds the monotonicity bound.  The terminal row is -phi exactly.
    """
    if spec.n != 1:
        raise ProblemError("the finite-difference solver is one-dimensional")
    if control_grid_size < 2:
        raise ProblemError("control_grid_size must be >= 2")
    if abs(grid.end - spec.horizon) > 1e-12:
        raise ProblemError("grid must end at the problem horizon")
    dt_max = cfl_max_dt(
        spec, half_width, n_cells, control_grid_size, t_start=grid.start
    )
    if grid.dt > dt_max * (1.0 + 1e-12):
        n_req = int(np.ceil((grid.end - grid.start) / dt_max))
        raise CFLError(grid.dt, dt_max, n_req, (grid.start, grid.end))

    xs = np.linspace(-half_width, half_width, n_cells + 1)
    sweep = _Sweep(spec, xs, _control_grid(spec, control_grid_size))
    times = grid.times
    n_steps = grid.steps
    values = np.empty((n_steps + 1, n_cells + 1))
    values[n_steps] = -spec.terminal(xs[:, None])
    for i in range(n_steps - 1, -1, -1):
        values[i] = sweep.step(values[i + 1], times[i + 1], grid.dt)
        if not np.all(np.isfinite(values[i])):
            raise ProblemError(f"non-finite value at time level {i}")
    return ValueGrid(
        space_half_width=half_width,
        n_cells=n_cells,
        grid=grid,
        values=values,
        control_grid_size=control_grid_size,
    )


# --------------------------------------------------------------------------
# Viscosity-inequality probes
# --------------------------------------------------------------------------


@dataclass
class ProbeResult:
    t: float
    x: float
    sub_residual: float = None  # None: no test function touches from above
    super_residual: float = None  # None: no test function touches from below


@dataclass
class ViscosityCheckReport:
    """Sub/supersolution residuals from locally fitted quadratics.

    At each probe point a full quadratic in (t, x) is least-squares
    fitted over the window; its linear part is then replaced by the
    midpoints of one-sided slopes at the probe (a least-squares slope is
    branch-averaged at a kink and no vertical shift can restore
    domination), and the result is shifted to touch the grid at the
    probe.  If it stays above (below) the grid on the window it is a
    valid from-above (from-below) test function; the corresponding
    inequality residual -phi_t + sup_u G(..., -phi_x, -phi_xx, u) should
    be <= 0 (>= 0).  worst_violation aggregates signed violations.
    """

    points: list
    worst_violation: float


_TOUCH_TOL = 1e-9
# quadratic-in-distance allowance: the touching notion is first-order
# (o(|x - x_hat|)), so remainders of order distance^2 -- e.g. the t|x|
# cross term a quadratic cannot represent at a kink -- must not veto a
# test function; 0.5 d^2 separates them from genuine first-order gaps
_TOUCH_CURVATURE = 0.5


def _one_sided_slope(vals, idx, h, side):
    """Two-step Richardson one-sided slope of a sampled axis at vals[idx]."""
    s1 = side * (vals[idx + side] - vals[idx]) / h
    s2 = side * (vals[idx + 2 * side] - vals[idx]) / (2.0 * h)
    return 2.0 * s1 - s2


def viscosity_check(vgrid, spec, probe_points, fit_radius=3):
    """Test the viscosity inequalities at interior probe points."""
    if fit_radius < 2:
        raise ProblemError("fit_radius must be >= 2")
    times = vgrid.grid.times
    xs = vgrid.xs
    v = vgrid.values
    n_t, n_x = v.shape
    results = []
    worst = 0.0
    controls = _control_grid(spec, vgrid.control_grid_size)

    for t_probe, x_probe in probe_points:
        it = int(np.argmin(np.abs(times - t_probe)))
        jx = int(np.argmin(np.abs(xs - x_probe)))
        if not (
            fit_radius <= it < n_t - fit_radius
            and fit_radius <= jx < n_x - fit_radius
        ):
            raise ProblemError(
                f"probe point ({t_probe}, {x_probe}) too close to the grid edge"
            )
        t0, x0 = times[it], xs[jx]
        st = times[it + fit_radius] - times[it - fit_radius]
        sx = xs[jx + fit_radius] - xs[jx - fit_radius]
        window = v[
            it - fit_radius : it + fit_radius + 1,
            jx - fit_radius : jx + fit_radius + 1,
        ]
        tt = (times[it - fit_radius : it + fit_radius + 1] - t0) / st
        xx = (xs[jx - fit_radius : jx + fit_radius + 1] - x0) / sx
        tg, xg = np.meshgrid(tt, xx, indexing="ij")
        design = np.column_stack(
            [
                np.ones(tg.size),
                tg.ravel(),
                xg.ravel(),
                tg.ravel() ** 2,
                (tg * xg).ravel(),
                xg.ravel() ** 2,
            ]
        )
        coef, *_ = np.linalg.lstsq(design, window.ravel(), rcond=None)

        # replace the least-squares linear part by one-sided midpoints
        rc = fit_radius
        t_col = window[:, rc]
        x_row = window[rc, :]
        ht = times[it + 1] - times[it]
        hx = xs[jx + 1] - xs[jx]
        phi_t = 0.5 * (
            _one_sided_slope(t_col, rc, ht, +1) + _one_sided_slope(t_col, rc, ht, -1)
        )
        phi_x = 0.5 * (
            _one_sided_slope(x_row, rc, hx, +1) + _one_sided_slope(x_row, rc, hx, -1)
        )
        phi_xx = 2.0 * coef[5] / (sx * sx)
        coef = coef.copy()
        coef[1] = phi_t * st
        coef[2] = phi_x * sx

        fit = (design @ coef).reshape(window.shape)
        center = fit[rc, rc]
        gap = (fit - center + v[it, jx]) - window
        scale = 1.0 + np.max(np.abs(window))
        dt_off = (times[it - fit_radius : it + fit_radius + 1] - t0)[:, None]
        dx_off = (xs[jx - fit_radius : jx + fit_radius + 1] - x0)[None, :]
        allowance = _TOUCH_TOL * scale + _TOUCH_CURVATURE * (
            dt_off**2 + dx_off**2
        )

        def inequality_lhs():
            r = -v[it, jx]
            b_best = None
            for u in controls:
                g = generalized_hamiltonian(
                    spec,
                    t0,
                    np.array([x0]),
                    r,
                    np.array([-phi_x]),
                    np.array([[-phi_xx]]),
                    u,
                )
                b_best = g if b_best is None else max(b_best, g)
            return -phi_t + b_best

        res = ProbeResult(t=t0, x=x0)
        if np.all(gap >= -allowance):  # touches from above
            res.sub_residual = inequality_lhs()
            worst = max(worst, res.sub_residual)
        if np.all(gap <= allowance):  # touches from below
            res.super_residual = inequality_lhs()
            worst = max(worst, -res.super_residual)
        results.append(res)
    return ViscosityCheckReport(points=results, worst_violation=worst)


def regularity_probe(vgrid):
    """(max adjacent slope, max |v| / (1 + |x|)) over all time slices."""
    dx = vgrid.dx
    slopes = np.abs(np.diff(vgrid.values, axis=1)) / dx
    growth = np.abs(vgrid.values) / (1.0 + np.abs(vgrid.xs)[None, :])
    return float(slopes.max()), float(growth.max())


# --------------------------------------------------------------------------
# Exports
# --------------------------------------------------------------------------


def value_grid_csv(vgrid, path, max_time_slices=101):
    """CSV of (t, x, v) rows, downsampling time to at most max_time_slices."""
    times = vgrid.grid.times
    stride = max(1, int(np.ceil(times.size / max_time_slices)))
    idx = list(range(0, times.size, stride))
    if idx[-1] != times.size - 1:
        idx.append(times.size - 1)
    xs = vgrid.xs
    with open(path, "w") as fh:
        fh.write("t,x,v\n")
        for i in idx:
            for j, x in enumerate(xs):
                fh.write(f"{times[i]!r},{x!r},{vgrid.values[i, j]!r}\n")


def value_grid_meta_json(vgrid, path, spec=None):
    meta = {
        "L": vgrid.space_half_width,
        "J": vgrid.n_cells,
        "N": vgrid.grid.steps,
        "control_grid_size": vgrid.control_grid_size,
        "dt": vgrid.grid.dt,
        "dx": vgrid.dx,
        "boundary_rule": vgrid.boundary_rule,
    }
    if spec is not None:
        dt_max = cfl_max_dt(
            spec,
            vgrid.space_half_width,
            vgrid.n_cells,
            vgrid.control_grid_size,
            t_start=vgrid.grid.start,
        )
        meta["cfl_ratio"] = vgrid.grid.dt / dt_max
    with open(path, "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")
