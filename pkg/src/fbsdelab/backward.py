"""Least-squares Monte Carlo solver for the controlled backward equation.

Given a simulated PathBatch, the pair (Y, Z) of

    -dY = f(s, X, Y, Z, u) ds - Z dW,   Y(T) = phi(X(T)),

is approximated by backward recursion with empirical conditional
expectations: at each step the projection E_hat[. | X_i] is least-squares
regression onto global polynomials in the state of total degree p_deg
(ridge-regularized), with

    Z_i = E_hat[Y_{i+1} dW_i | X_i] / dt,
    Y_i = E_hat[Y_{i+1} | X_i] + f(t_i, X_i, Y_reg, Z_i, u_i) dt,

where the driver consumes the regressed continuation value (explicit
scheme).  Passing n_picard > 0 re-evaluates the driver at the updated Y
that many times (implicit refinement).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .problem import ProblemError


class RegressionError(ProblemError):
    """Normal equations too ill-conditioned to trust; reports the step."""

    def __init__(self, step, condition, threshold):
        self.step = step
        self.condition = condition
        super().__init__(
            f"regression at step {step} has condition estimate "
            f"{condition:.3e} > {threshold:.3e}"
        )


_RIDGE_SCALE = 1e-8
_COND_THRESHOLD = 1e12


def _monomial_powers(n, degree):
    powers = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), total):
            p = [0] * n
            for i in combo:
                p[i] += 1
            powers.append(tuple(p))
    return powers


class _StepRegression:
    """Ridge-regularized polynomial projection onto functions of X_i.

    States are standardized coordinate-wise before taking powers; that
    spans the same polynomial space but keeps the Gram matrix tame.  The
    ridge term (1e-8 times the Gram trace) makes degenerate designs --
    e.g. a deterministic state column -- fall back to the plain mean.
    """

    def __init__(self, x, degree):
        x = np.asarray(x, dtype=float)
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd = np.where(sd > 1e-300, sd, 1.0)
        t = (x - mu) / sd
        powers = _monomial_powers(x.shape[1], degree)
        cols = [np.prod(t**np.array(p), axis=1) for p in powers]
        self.design = np.column_stack(cols)
        gram = self.design.T @ self.design
        lam = _RIDGE_SCALE * np.trace(gram)
        self.gram = gram + lam * np.eye(gram.shape[0])
        self.condition = float(np.linalg.cond(self.gram))
        self._chol = np.linalg.cholesky(self.gram)

    def fit(self, targets):
        """Fitted values at the design points; targets (M,) or (M, q)."""
        rhs = self.design.T @ targets
        coef = np.linalg.solve(self._chol.T, np.linalg.solve(self._chol, rhs))
        return self.design @ coef


@dataclass
class BackwardSolution:
    """Discrete (Y, Z) processes along a batch, plus diagnostics."""

    grid: object
    y: np.ndarray  # (M, N+1)
    z: np.ndarray  # (M, N, d)
    basis_degree: int
    state_dim: int
    conditions: np.ndarray  # per-step condition estimate of the Gram matrix
    policy_id: str
    pathwise_value: np.ndarray  # (M,) terminal + summed driver, for bootstraps


def solve_backward(
    spec, policy, batch, p_deg, n_picard=0, cond_threshold=_COND_THRESHOLD
):
    """Solve the backward equation along a batch by regression.

    Parameters
    ----------
    spec, policy : the problem and the control policy the batch was
        simulated under (the driver is evaluated at u_i = policy(t_i, X_i)).
    batch : PathBatch from `simulate_forward`.
    p_deg : total polynomial degree of the regression basis (>= 0).
    n_picard : extra driver passes at the updated Y (0 = explicit scheme).
    cond_threshold : raise RegressionError above this condition estimate.

    Returns a BackwardSolution with Y[:, N] = phi(X[:, N]) exactly.
    """
    if p_deg < 0:
        raise ProblemError("p_deg must be >= 0")
    x = batch.states
    dw = batch.increments
    m, n_steps = x.shape[0], batch.grid.steps
    times = batch.grid.times
    dt = batch.grid.dt

    y = np.empty((m, n_steps + 1))
    z = np.empty((m, n_steps, spec.d))
    conditions = np.empty(n_steps)
    y[:, n_steps] = spec.terminal(x[:, n_steps])
    driver_sum = np.zeros(m)

    for i in range(n_steps - 1, -1, -1):
        reg = _StepRegression(x[:, i], p_deg)
        conditions[i] = reg.condition
        if reg.condition > cond_threshold:
            raise RegressionError(i, reg.condition, cond_threshold)
        z[:, i] = reg.fit(y[:, i + 1][:, None] * dw[:, i]) / dt
        cont = reg.fit(y[:, i + 1])
        ui = policy.controls(times[i], x[:, i], spec)
        fval = spec.driver(times[i], x[:, i], cont, z[:, i], ui)
        ycur = cont + fval * dt
        for _ in range(n_picard):
            fval = spec.driver(times[i], x[:, i], ycur, z[:, i], ui)
            ycur = cont + fval * dt
        y[:, i] = ycur
        driver_sum += fval * dt

    # deterministic start: the time-t conditional expectation is a constant
    if np.ptp(x[:, 0], axis=0).max() == 0.0:
        y[:, 0] = y[:, 0].mean()

    return BackwardSolution(
        grid=batch.grid,
        y=y,
        z=z,
        basis_degree=p_deg,
        state_dim=spec.n,
        conditions=conditions,
        policy_id=batch.policy_id,
        pathwise_value=y[:, n_steps] + driver_sum,
    )


@dataclass
class CostReport:
    """Recursive cost J = -Y(t) with a bootstrap standard error."""

    j: float
    stderr: float
    n_paths: int
    steps: int
    seed: int

    def to_json(self):
        return json.dumps(
            {
                "J": self.j,
                "stderr": self.stderr,
                "M": self.n_paths,
                "N": self.steps,
                "seed": self.seed,
            },
            sort_keys=True,
        )


_N_BOOTSTRAP = 64


def _bootstrap_stderr(values, seed, n_resamples=_N_BOOTSTRAP):
    m = values.shape[0]
    rng = np.random.Generator(
        np.random.Philox(key=np.array([seed & (2**64 - 1), 2**63 + 1], dtype=np.uint64))
    )
    means = np.empty(n_resamples)
    for b in range(n_resamples):
        idx = rng.integers(0, m, size=m)
        means[b] = values[idx].mean()
    return float(means.std())


def cost(spec, policy, t, x, grid, n_paths, p_deg, seed, n_picard=0):
    """J(t, x; policy) = -Y(t), with a path-resampling standard error.

    The bootstrap resamples the pathwise accumulant (terminal value plus
    summed driver) whose mean equals the reported Y(t) up to the ridge
    regularization, keeping regression surfaces frozen.
    """
    from .forward import simulate_forward

    batch = simulate_forward(spec, policy, t, x, grid, n_paths, seed)
    sol = solve_backward(spec, policy, batch, p_deg, n_picard=n_picard)
    stderr = _bootstrap_stderr(sol.pathwise_value, seed)
    return CostReport(
        j=float(-sol.y[0, 0]),
        stderr=stderr,
        n_paths=n_paths,
        steps=grid.steps,
        seed=seed,
    )


@dataclass
class EnvelopePoint:
    x: np.ndarray
    best_cost: float
    best_policy_id: str
    costs: dict  # policy_id -> CostReport


def value_envelope(spec, policies, t, x_list, grid, n_paths, p_deg, seed, n_picard=0):
    """Min over candidate policies of the recursive cost, per start point.

    An upper bound on the value function at each x (the candidate set is
    finite).  Uses the same seed for every policy at a given x.
    """
    if not policies:
        raise ProblemError("policy list must be nonempty")
    out = []
    for x in x_list:
        reports = {}
        for pol in policies:
            if pol.policy_id in reports:
                raise ProblemError(f"duplicate policy_id {pol.policy_id!r}")
            reports[pol.policy_id] = cost(
                spec, pol, t, x, grid, n_paths, p_deg, seed, n_picard=n_picard
            )
        best = min(reports, key=lambda pid: reports[pid].j)
        out.append(
            EnvelopePoint(
                x=np.atleast_1d(np.asarray(x, dtype=float)),
                best_cost=reports[best].j,
                best_policy_id=best,
                costs=reports,
            )
        )
    return out


def backward_perturbation_probe(
    spec, policy, s, x_base, sizes, k, grid, n_paths, p_deg, seed, n_picard=0
):
    """Moment-bound probe for the backward pair under state perturbations.

    Couples batches from x_base and x_base + h*e1 with common random
    numbers, solves both backward, and fits constants for
    E[sup_r |Y_diff(r)|^{2k}] and E[(int |Z_diff|^2 dr)^k] against h^{2k}.
    Returns a pair of PerturbationReports (Y channel, Z channel).
    """
    from .forward import SimulationError, _check_sizes, _fit_constants, simulate_forward

    if k < 1:
        raise SimulationError("moment order k must be >= 1")
    sizes = _check_sizes(sizes)
    x_base = np.atleast_1d(np.asarray(x_base, dtype=float))
    base_batch = simulate_forward(spec, policy, s, x_base, grid, n_paths, seed)
    base_sol = solve_backward(spec, policy, base_batch, p_deg, n_picard=n_picard)
    dt = grid.dt
    y_moments, z_moments = [], []
    for h in sizes:
        shifted = x_base.copy()
        shifted[0] += h
        pert_batch = simulate_forward(spec, policy, s, shifted, grid, n_paths, seed)
        pert_sol = solve_backward(spec, policy, pert_batch, p_deg, n_picard=n_picard)
        ydiff = np.abs(pert_sol.y - base_sol.y)
        y_moments.append(float(np.mean(ydiff.max(axis=1) ** (2 * k))))
        zdiff = np.linalg.norm(pert_sol.z - base_sol.z, axis=-1)
        z_int = (zdiff**2).sum(axis=1) * dt
        z_moments.append(float(np.mean(z_int**k)))
    return (
        _fit_constants("Y", 2 * k, sizes, y_moments, seed),
        _fit_constants("Z", 2 * k, sizes, z_moments, seed),
    )


def backward_csv(sol, path):
    """Per-step CSV of (t, mean Y, std Y, mean |Z|)."""
    times = sol.grid.times
    zn = np.linalg.norm(sol.z, axis=-1)
    with open(path, "w") as fh:
        fh.write("t,mean_y,std_y,mean_abs_z\n")
        for i, t in enumerate(times):
            zcol = zn[:, i].mean() if i < sol.z.shape[1] else float("nan")
            fh.write(f"{t!r},{sol.y[:, i].mean()!r},{sol.y[:, i].std()!r},{zcol!r}\n")
