"""Sensitivities of the estimate, the multipliers and the objective at a KKT point.

Differentiating the optimality conditions gives the bordered system

    H_x [dx; dlambda] = -H_z dz - H_a da,    H_x = [[J_xx, C_x^T], [C_x, 0]]

and the objective sensitivity follows as ``J_z + J_x dx/dz``. ``H_x`` is
factored once and reused for every measurement and weight column.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ShapeError, SingularKKTError, StalePointError
from .estimator import EstimationProblem, SolverOptions, estimate_state
from .linalg import SymmetricFactor


@dataclass(frozen=True)
class KktBlocks:
    J_x: np.ndarray
    J_z: np.ndarray
    J_a: np.ndarray
    J_xx: np.ndarray
    J_xz: np.ndarray
    J_xa: np.ndarray
    C_x: np.ndarray
    C_a: np.ndarray
    H_x: np.ndarray
    H_z: np.ndarray
    H_a: np.ndarray

    @property
    def n(self):
        return self.J_xx.shape[0]

    @property
    def r(self):
        return self.C_x.shape[0]

    @property
    def p(self):
        return self.J_z.shape[0]


@dataclass(frozen=True)
class SensitivityResult:
    dx_dz: np.ndarray
    dlambda_dz: np.ndarray
    dJ_dz: np.ndarray
    condition_estimate: float
    dx_da: np.ndarray = None
    dlambda_da: np.ndarray = None
    dJ_da: np.ndarray = None
    solve_residual: float = field(default=np.nan)


def assemble_kkt_blocks(net, ms, est, max_residual=1e-8):
    """Build the sensitivity blocks at the estimator's KKT point (weights as parameters)."""
    if est.kkt_residual > max_residual:
        raise StalePointError(
            f"KKT residual {est.kkt_residual:.2e} exceeds {max_residual:.0e}; re-solve first"
        )
    prob = est.problem if est.problem.ms is ms else EstimationProblem(net, ms)
    x, lam = est.x_star, est.lambda_star
    n, r, p = prob.n, prob.r, len(ms)
    if x.shape != (n,) or lam.shape != (r,):
        raise ShapeError("estimation result does not match the measurement set")
    res = prob.residuals(x)
    w = prob.w
    cols = np.arange(p)

    J_x = prob.gradient(x)
    J_z = 2.0 * w * res
    J_a = res * res
    J_xx = prob.lagrangian_hessian(x, lam)
    J_xz = np.zeros((n, p))
    J_xz[prob.meas_var, cols] = -2.0 * w
    J_xa = np.zeros((n, p))
    J_xa[prob.meas_var, cols] = -2.0 * res
    C_x = prob.constraint_jacobian(x)
    C_a = np.zeros((r, p))

    if r:
        sv = np.linalg.svd(C_x, compute_uv=False)
        if sv[-1] <= 1e-10 * max(sv[0], 1.0):
            prob.diagnose_singular(x)

    H_x = np.block([[J_xx, C_x.T], [C_x, np.zeros((r, r))]])
    H_z = np.vstack([J_xz, np.zeros((r, p))])
    H_a = np.vstack([J_xa, C_a])
    return KktBlocks(J_x, J_z, J_a, J_xx, J_xz, J_xa, C_x, C_a, H_x, H_z, H_a)


def _factor(blocks):
    try:
        return SymmetricFactor(blocks.H_x)
    except SingularKKTError as exc:
        raise SingularKKTError(f"H_x is singular: {exc}", rcond=exc.rcond) from None


def measurement_sensitivities(blocks, factor=None, with_weights=False):
    """Solve ``H_x M = -H_z`` for dx/dz, dlambda/dz and form dJ/dz = J_z + J_x dx/dz."""
    n = blocks.n
    if blocks.H_x.shape != (n + blocks.r, n + blocks.r) or blocks.H_z.shape[0] != n + blocks.r:
        raise ShapeError("inconsistent KKT block dimensions")
    fac = factor or _factor(blocks)
    m = fac.solve(-blocks.H_z)
    dx_dz, dl_dz = m[:n], m[n:]
    dJ_dz = blocks.J_z + blocks.J_x @ dx_dz
    resid = float(np.max(np.abs(blocks.H_x @ m + blocks.H_z))) if m.size else 0.0
    extra = {}
    if with_weights:
        dx_da, dl_da, dJ_da = weight_sensitivities(blocks, fac)
        extra = dict(dx_da=dx_da, dlambda_da=dl_da, dJ_da=dJ_da)
    return SensitivityResult(
        dx_dz=dx_dz,
        dlambda_dz=dl_dz,
        dJ_dz=dJ_dz,
        condition_estimate=fac.rcond,
        solve_residual=resid,
        **extra,
    )


def weight_sensitivities(blocks, factor=None):
    """Sensitivities with respect to the measurement weights (constraints do not depend on them)."""
    fac = factor or _factor(blocks)
    m = fac.solve(-blocks.H_a)
    n = blocks.n
    dx_da, dl_da = m[:n], m[n:]
    dJ_da = blocks.J_a + blocks.J_x @ dx_da
    return dx_da, dl_da, dJ_da


def objective_curvature(ms, est, sens):
    """Second derivative of the optimal objective along each measurement, 2 w (1 - dx_l/dz_l)."""
    prob = est.problem
    self_sens = sens.dx_dz[prob.meas_var, np.arange(len(ms))]
    return 2.0 * ms.w * (1.0 - self_sens)


# --- finite-difference oracle ----------------------------------------------------

@dataclass
class FiniteDifferenceReport:
    step: float
    indices: list
    max_rel_dx: float
    mean_rel_dx: float
    worst_dx: int
    max_rel_dJ: float
    mean_rel_dJ: float
    worst_dJ: int
    rel_dx: dict
    rel_dJ: dict
    failed: list
    warnings: list

    @property
    def max_rel(self):
        return max(self.max_rel_dx, self.max_rel_dJ)


def column_relative_error(analytic, numeric, floor=1e-8):
    """Relative 2-norm error of a column; absolute when the reference norm is below ``floor``."""
    ref = np.linalg.norm(numeric)
    diff = np.linalg.norm(analytic - numeric)
    return diff / ref if ref >= floor else diff / floor


def entry_relative_error(analytic, numeric, floor=1e-8):
    """Relative error of a scalar; absolute (scaled by ``floor``) when |numeric| < floor."""
    diff = abs(analytic - numeric)
    return diff / abs(numeric) if abs(numeric) >= floor else diff / floor


def finite_difference_check(net, ms, est, step=1e-5, indices=None, sens=None, opts=None):
    """Compare analytic dx/dz and dJ/dz with central differences of re-solved estimates.

    Each sampled measurement is perturbed by ``+-step`` and the estimator is
    re-run from a warm start. Failed re-solves are listed and left out of the
    aggregates.
    """
    notes = []
    if step < 1e-8 or step > 1e-3:
        notes.append(
            f"step {step:g} outside [1e-8, 1e-3]: differences are dominated by "
            + ("roundoff" if step < 1e-8 else "truncation error")
        )
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    if sens is None:
        sens = measurement_sensitivities(assemble_kkt_blocks(net, ms, est))
    opts = opts or SolverOptions(tol=1e-10, polish=3)
    warm = SolverOptions(
        tol=opts.tol, max_iter=opts.max_iter, damping=opts.damping,
        warm_start=(est.x_star, est.lambda_star), polish=opts.polish,
    )
    z0 = ms.z
    idx = list(range(len(ms))) if indices is None else [int(k) for k in indices]
    rel_dx, rel_dJ, failed = {}, {}, []
    for k in idx:
        sols = []
        for sign in (1.0, -1.0):
            z = z0.copy()
            z[k] += sign * step
            try:
                sols.append(estimate_state(net, ms.with_values(z=z), warm))
            except ConvergenceError as exc:
                failed.append((k, str(exc)))
                break
        if len(sols) < 2:
            continue
        fd_dx = (sols[0].x_star - sols[1].x_star) / (2 * step)
        fd_dJ = (sols[0].j_star - sols[1].j_star) / (2 * step)
        rel_dx[k] = column_relative_error(sens.dx_dz[:, k], fd_dx)
        rel_dJ[k] = entry_relative_error(sens.dJ_dz[k], fd_dJ)

    def agg(d):
        if not d:
            return np.nan, np.nan, -1
        vals = np.array(list(d.values()))
        keys = list(d.keys())
        return float(vals.max()), float(vals.mean()), keys[int(vals.argmax())]

    mx, mn, wx = agg(rel_dx)
    mj, mjn, wj = agg(rel_dJ)
    return FiniteDifferenceReport(step, idx, mx, mn, wx, mj, mjn, wj, rel_dx, rel_dJ, failed, notes)


def block_finite_difference_check(net, ms, est, blocks=None, step=1e-6):
    """Central differences of the Lagrangian gradient and constraints against the analytic blocks.

    Returns the max relative error (Frobenius norm) of J_xx, C_x, J_xz and J_x.
    """
    prob = est.problem
    blocks = blocks or assemble_kkt_blocks(net, ms, est)
    x, lam = est.x_star, est.lambda_star
    n = prob.n

    def grad_l(xv, p=prob):
        return p.gradient(xv) + p.constraint_jacobian(xv).T @ lam

    fd_jxx = np.zeros((n, n))
    fd_cx = np.zeros((prob.r, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = step
        fd_jxx[:, k] = (grad_l(x + e) - grad_l(x - e)) / (2 * step)
        fd_cx[:, k] = (prob.constraints(x + e) - prob.constraints(x - e)) / (2 * step)

    fd_jxz = np.zeros((n, len(ms)))
    z0 = ms.z
    for k in range(len(ms)):
        z = z0.copy()
        z[k] += step
        plus = EstimationProblem(net, ms.with_values(z=z))
        z[k] -= 2 * step
        minus = EstimationProblem(net, ms.with_values(z=z))
        fd_jxz[:, k] = (grad_l(x, plus) - grad_l(x, minus)) / (2 * step)

    fd_jx = np.array([
        (prob.objective(x + step * e) - prob.objective(x - step * e)) / (2 * step)
        for e in np.eye(n)
    ])

    def rel(a, b):
        ref = np.linalg.norm(b)
        return float(np.linalg.norm(a - b) / ref) if ref > 0 else float(np.linalg.norm(a - b))

    return {
        "J_xx": rel(blocks.J_xx, fd_jxx),
        "C_x": rel(blocks.C_x, fd_cx),
        "J_xz": rel(blocks.J_xz, fd_jxz),
        "J_x": rel(blocks.J_x, fd_jx),
    }
