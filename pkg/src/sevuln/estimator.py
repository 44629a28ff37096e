"""Equality-constrained WLS state estimation and chi-square bad data detection.

The decision vector holds bus magnitudes, non-reference angles and one
explicit variable per metered injection or flow. Each metered quantity is tied
to ``(v, theta)`` by an equality constraint, and zero-injection buses add
``P_i(v, theta) = 0`` and ``Q_i(v, theta) = 0``. The objective is the
weighted squared distance between every measurement and its variable.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .errors import (
    ConvergenceError,
    DomainError,
    ObservabilityError,
    RegularityError,
    ShapeError,
    SingularKKTError,
)
from .expressions import P_INJ, Q_INJ, compile_expressions
from .linalg import SymmetricFactor
from .measurements import V_MAG, measurement_label
from .powerflow import StateVector


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-9
    max_iter: int = 50
    damping: float = 0.0
    significance: float = 0.05
    warm_start: tuple = None
    polish: int = 2


class EstimationProblem:
    """Layout, objective and constraints of the estimation problem for one measurement set."""

    def __init__(self, net, ms):
        self.net = net
        self.ms = ms
        n_bus = net.n_bus
        self.n_bus = n_bus
        self.ref = net.slack
        self.n_states = 2 * n_bus - 1
        self.polar_cols = np.array(
            list(range(n_bus)) + [n_bus + k for k in range(n_bus) if k != self.ref], dtype=int
        )

        power_keys = []
        seen = set()
        for m in ms.measurements:
            if m.kind != V_MAG and m.key not in seen:
                seen.add(m.key)
                power_keys.append(m.key)
        self.power_keys = power_keys
        self.n_power = len(power_keys)
        self.n = self.n_states + self.n_power
        var_of_key = {key: self.n_states + k for k, key in enumerate(power_keys)}
        self.meas_var = np.array(
            [m.location if m.kind == V_MAG else var_of_key[m.key] for m in ms.measurements],
            dtype=int,
        )

        self.zero_buses = list(ms.config.zero_inj_buses)
        self.zero_specs = [(P_INJ, i) for i in self.zero_buses] + [(Q_INJ, i) for i in self.zero_buses]
        self.n_zero_constraints = len(self.zero_specs)
        self.r = self.n_power + self.n_zero_constraints
        self.expr = compile_expressions(net, list(power_keys) + self.zero_specs)
        self.z = ms.z
        self.w = ms.w

    # --- naming ---------------------------------------------------------------

    @cached_property
    def variable_names(self):
        lab = self.net.label
        names = [f"v_{lab(i)}" for i in range(self.n_bus)]
        names += [f"theta_{lab(i)}" for i in range(self.n_bus) if i != self.ref]
        names += [measurement_label(kind, loc, self.net) for kind, loc in self.power_keys]
        return names

    @cached_property
    def constraint_names(self):
        names = [f"def:{measurement_label(k, loc, self.net)}" for k, loc in self.power_keys]
        names += [f"zero:{measurement_label(k, loc, self.net)}" for k, loc in self.zero_specs]
        return names

    # --- primal pieces --------------------------------------------------------

    def polar(self, x):
        v = np.asarray(x[: self.n_bus], dtype=float)
        theta = np.zeros(self.n_bus)
        mask = np.ones(self.n_bus, dtype=bool)
        mask[self.ref] = False
        theta[mask] = x[self.n_bus : self.n_states]
        return v, theta

    def state(self, x):
        v, theta = self.polar(x)
        return StateVector(v, theta)

    def residuals(self, x):
        return self.z - x[self.meas_var]

    def objective(self, x):
        res = self.residuals(x)
        return float(np.sum(self.w * res * res))

    def gradient(self, x):
        g = np.zeros(self.n)
        np.add.at(g, self.meas_var, -2.0 * self.w * self.residuals(x))
        return g

    def objective_hessian(self):
        h = np.zeros((self.n, self.n))
        np.add.at(h, (self.meas_var, self.meas_var), 2.0 * self.w)
        return h

    def constraints(self, x):
        v, theta = self.polar(x)
        hv = self.expr.values(v, theta)
        c = hv.copy()
        c[: self.n_power] = x[self.n_states :] - hv[: self.n_power]
        return c

    def constraint_jacobian(self, x):
        v, theta = self.polar(x)
        jp = self.expr.jacobian(v, theta)[:, self.polar_cols]
        cx = np.zeros((self.r, self.n))
        cx[: self.n_power, : self.n_states] = -jp[: self.n_power]
        cx[: self.n_power, self.n_states :] = np.eye(self.n_power)
        cx[self.n_power :, : self.n_states] = jp[self.n_power :]
        return cx

    def constraint_curvature(self, x, lam):
        """sum_k lam_k * Hess(c_k), embedded in the n x n variable space."""
        v, theta = self.polar(x)
        mult = np.asarray(lam, dtype=float).copy()
        mult[: self.n_power] *= -1.0
        hp = self.expr.weighted_hessian(v, theta, mult)
        out = np.zeros((self.n, self.n))
        idx = self.polar_cols
        out[: self.n_states, : self.n_states] = hp[np.ix_(idx, idx)]
        return out

    def lagrangian_hessian(self, x, lam):
        return self.objective_hessian() + self.constraint_curvature(x, lam)

    def kkt_vector(self, x, lam):
        cx = self.constraint_jacobian(x)
        return np.concatenate([self.gradient(x) + cx.T @ lam, self.constraints(x)])

    def kkt_matrix(self, x, lam, damping=0.0):
        hl = self.lagrangian_hessian(x, lam)
        if damping:
            hl = hl + damping * np.eye(self.n)
        cx = self.constraint_jacobian(x)
        return np.block([[hl, cx.T], [cx, np.zeros((self.r, self.r))]])

    def flat_start(self):
        x = np.zeros(self.n)
        x[: self.n_bus] = 1.0
        sums = np.zeros(self.n)
        counts = np.zeros(self.n)
        np.add.at(sums, self.meas_var, self.z)
        np.add.at(counts, self.meas_var, 1.0)
        power = slice(self.n_states, self.n)
        x[power] = sums[power] / np.maximum(counts[power], 1.0)
        return x

    # --- diagnostics ----------------------------------------------------------

    def diagnose_singular(self, x):
        """Raise the regularity or observability error explaining a singular KKT matrix."""
        cx = self.constraint_jacobian(x)
        if self.r:
            _, rdiag, piv = scipy.linalg.qr(cx.T, mode="economic", pivoting=True)
            d = np.abs(np.diag(rdiag)) if rdiag.ndim == 2 else np.abs(rdiag)
            scale = max(d[0], 1.0) if d.size else 1.0
            rank = int(np.sum(d > 1e-10 * scale))
            if rank < self.r:
                dependent = [self.constraint_names[k] for k in piv[rank:]]
                raise RegularityError(
                    "constraint gradients are linearly dependent: " + ", ".join(dependent),
                    dependent,
                )
        raise ObservabilityError(
            "measurement configuration is not observable (singular KKT matrix)"
        )


@dataclass(frozen=True)
class EstimationResult:
    x_star: np.ndarray
    lambda_star: np.ndarray
    j_star: float
    iterations: int
    kkt_residual: float
    method: str
    problem: EstimationProblem
    history: tuple = ()

    @property
    def state(self):
        return self.problem.state(self.x_star)

    @property
    def n(self):
        return len(self.x_star)

    @property
    def r(self):
        return len(self.lambda_star)


def _inf(a):
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def _newton(prob, x, lam, opts, history):
    """Damped Newton on the KKT system. Returns (x, lam, iterations, converged)."""
    damping = opts.damping
    scale = max(1.0, float(np.max(prob.w)))
    f = prob.kkt_vector(x, lam)
    norm = _inf(f)
    history.append(norm)
    it = 0
    extra = 0
    while it < opts.max_iter:
        if norm <= opts.tol:
            if extra >= opts.polish:
                return x, lam, it, True
            extra += 1
        it += 1
        accepted = False
        while not accepted:
            try:
                fac = SymmetricFactor(prob.kkt_matrix(x, lam, damping))
            except SingularKKTError:
                if damping == 0 and extra == 0 and it == 1:
                    prob.diagnose_singular(x)
                damping = max(10 * damping, 1e-8 * scale)
                if damping > 1e4 * scale:
                    return x, lam, it, False
                continue
            step = fac.solve(-f)
            dx, dl = step[: prob.n], step[prob.n :]
            merit = np.linalg.norm(f)
            alpha = 1.0
            while alpha >= 1.0 / 64:
                x_new, lam_new = x + alpha * dx, lam + alpha * dl
                if np.all(x_new[: prob.n_bus] > 0):
                    f_new = prob.kkt_vector(x_new, lam_new)
                    if np.linalg.norm(f_new) < merit or (extra and _inf(f_new) <= opts.tol):
                        accepted = True
                        break
                alpha *= 0.5
            if accepted:
                break
            if extra:
                # already converged; roundoff floor reached
                return x, lam, it, True
            damping = max(10 * damping, 1e-8 * scale)
            if damping > 1e4 * scale:
                return x, lam, it, False
        x, lam, f = x_new, lam_new, f_new
        norm = _inf(f)
        history.append(norm)
        damping = damping / 10 if damping > 1e-12 * scale else 0.0
    return x, lam, it, norm <= opts.tol


def _gauss_newton(prob, x, max_iter=50):
    """Reduced Gauss-Newton in (v, theta) with zero injections as equality constraints."""
    n_s, n_p = prob.n_states, prob.n_power
    ms = prob.ms
    is_v = np.array([m.kind == V_MAG for m in ms.measurements])
    for _ in range(max_iter):
        v, theta = prob.polar(x)
        hv = prob.expr.values(v, theta)
        jp = prob.expr.jacobian(v, theta)[:, prob.polar_cols]
        x = x.copy()
        x[n_s:] = hv[:n_p]
        h_meas = x[prob.meas_var]
        hm = np.zeros((len(ms), n_s))
        for k, var in enumerate(prob.meas_var):
            if is_v[k]:
                hm[k, var] = 1.0
            else:
                hm[k] = jp[var - n_s]
        cz = jp[n_p:]
        res = prob.z - h_meas
        gain = hm.T @ (prob.w[:, None] * hm)
        nz = cz.shape[0]
        mat = np.block([[gain, cz.T], [cz, np.zeros((nz, nz))]])
        rhs = np.concatenate([hm.T @ (prob.w * res), -hv[n_p:]])
        try:
            step = np.linalg.solve(mat, rhs)[:n_s]
        except np.linalg.LinAlgError:
            prob.diagnose_singular(x)
        x[:n_s] += step
        if np.any(x[: prob.n_bus] <= 0):
            raise ConvergenceError("Gauss-Newton produced non-positive voltages")
        if _inf(step) < 1e-10:
            break
    v, theta = prob.polar(x)
    x[n_s:] = prob.expr.values(v, theta)[:n_p]
    return x


def _multipliers(prob, x):
    """Least-squares multipliers from the stationarity condition at fixed x."""
    cx = prob.constraint_jacobian(x)
    g = prob.gradient(x)
    lam, *_ = np.linalg.lstsq(cx.T, -g, rcond=None)
    return lam


def estimate_state(net, ms, opts=None):
    """Solve the constrained WLS problem and return its KKT point."""
    opts = opts or SolverOptions()
    prob = EstimationProblem(net, ms)
    if len(ms) + prob.n_zero_constraints < prob.n_states:
        raise ObservabilityError(
            f"{len(ms)} measurements and {prob.n_zero_constraints} zero-injection constraints "
            f"cannot determine {prob.n_states} states"
        )
    if opts.warm_start is not None:
        x0, lam0 = (np.asarray(a, dtype=float).copy() for a in opts.warm_start)
        if x0.shape != (prob.n,) or lam0.shape != (prob.r,):
            raise ShapeError("warm start does not match the problem dimensions")
    else:
        x0, lam0 = prob.flat_start(), np.zeros(prob.r)

    history = []
    x, lam, its, ok = _newton(prob, x0, lam0, opts, history)
    method = "newton"
    if not ok:
        x = _gauss_newton(prob, prob.flat_start(), opts.max_iter)
        lam = _multipliers(prob, x)
        x, lam, its2, ok = _newton(prob, x, lam, opts, history)
        its += its2
        method = "gauss-newton+newton"
    if not ok:
        raise ConvergenceError(
            f"state estimation did not converge (KKT residual {history[-1]:.3e})", history
        )
    return EstimationResult(
        x_star=x,
        lambda_star=lam,
        j_star=prob.objective(x),
        iterations=its,
        kkt_residual=_inf(prob.kkt_vector(x, lam)),
        method=method,
        problem=prob,
        history=tuple(history),
    )


def kkt_residual(net, ms, candidate):
    """Infinity norms of the Lagrangian gradient and of the constraint vector at ``(x, lam)``."""
    prob = EstimationProblem(net, ms)
    x, lam = (np.asarray(a, dtype=float) for a in candidate)
    if x.shape != (prob.n,) or lam.shape != (prob.r,):
        raise ShapeError(
            f"candidate shapes {x.shape}, {lam.shape} do not match n={prob.n}, r={prob.r}"
        )
    cx = prob.constraint_jacobian(x)
    return _inf(prob.gradient(x) + cx.T @ lam), _inf(prob.constraints(x))


def degrees_of_freedom(p, n_states, n_zero_constraints):
    return p + n_zero_constraints - n_states


def redundancy_ratio(p, n_states, n_zero_constraints):
    return (p + n_zero_constraints) / n_states


def bdd_chi_square(j_star, p, n_states, n_zero_constraints, significance=0.05):
    """Chi-square bad-data test on the optimal objective.

    Zero-injection constraints count as pseudo-measurements in the degrees of freedom.
    Returns ``(threshold, detected, dof)``.
    """
    if not 0 < significance < 1:
        raise DomainError("significance must lie in (0, 1)")
    dof = degrees_of_freedom(p, n_states, n_zero_constraints)
    if dof < 1:
        raise DomainError(f"insufficient redundancy: {dof} degrees of freedom")
    threshold = float(chi2.ppf(1.0 - significance, dof))
    return threshold, bool(j_star > threshold), dof
