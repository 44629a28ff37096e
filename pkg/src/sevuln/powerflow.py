"""Newton-Raphson AC power flow in complex form.

This is the ground-truth generator for synthetic measurements. It works with
complex phasors and the complex bus admittance matrix, a separate code path
from the trigonometric expressions used by the estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, SingularityError, ValidationError
from .network import PQ, PV, SLACK


@dataclass(frozen=True)
class StateVector:
    """Bus voltage magnitudes (p.u.) and angles (rad), indexed by internal bus id."""

    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float).copy()
        theta = np.asarray(self.theta, dtype=float).copy()
        if v.shape != theta.shape or v.ndim != 1:
            raise ValidationError("v and theta must be 1-D arrays of equal length")
        if np.any(v <= 0):
            raise ValidationError("voltage magnitudes must be positive")
        v.flags.writeable = False
        theta.flags.writeable = False
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def flat(cls, n):
        return cls(np.ones(n), np.zeros(n))

    @property
    def phasor(self):
        return self.v * np.exp(1j * self.theta)

    def theta_degrees(self):
        return np.degrees(self.theta)


def scheduled_injection(net):
    p = np.array([bus.gen_p - bus.demand_p for bus in net.buses])
    q = np.array([bus.gen_q - bus.demand_q for bus in net.buses])
    return p + 1j * q


def bus_injections(net, state):
    """Complex power injected at every bus, S = V * conj(Y V)."""
    y = net.admittance.complex
    vc = state.phasor
    return vc * np.conj(y @ vc)


def branch_flow(net, state, i, j):
    """Complex power leaving bus ``i`` on the branch towards ``j``."""
    br, at_from = net.find_branch(i, j)
    y_ff, y_ft, y_tf, y_tt = br.end_admittances()
    y_self, y_mut = (y_ff, y_ft) if at_from else (y_tt, y_tf)
    vc = state.phasor
    return vc[i] * np.conj(y_self * vc[i] + y_mut * vc[j])


def _mismatch(net, vc, s_spec, pvpq, pq):
    y = net.admittance.complex
    ds = vc * np.conj(y @ vc) - s_spec
    return np.concatenate([ds.real[pvpq], ds.imag[pq]])


def solve_power_flow(net, start=None, tol=1e-10, max_iter=30, full_output=False):
    """Solve the AC power flow from ``start`` (flat start by default).

    PV and slack magnitudes are held at their setpoints and the slack angle is
    zero. Returns the solved :class:`StateVector`; with ``full_output`` also
    the iteration count and the final mismatch infinity-norm.
    """
    n = net.n_bus
    if start is None:
        start = StateVector.flat(n)
    if len(start.v) != n:
        raise ValidationError("start state does not match the network size")
    kinds = [bus.bus_kind for bus in net.buses]
    slack = net.slack
    pv = np.array([k for k in range(n) if kinds[k] == PV], dtype=int)
    pq = np.array([k for k in range(n) if kinds[k] == PQ], dtype=int)
    pvpq = np.concatenate([pv, pq]).astype(int)
    pvpq.sort()

    vm = np.array(start.v, dtype=float)
    va = np.array(start.theta, dtype=float)
    for k in range(n):
        if kinds[k] in (PV, SLACK):
            vm[k] = net.buses[k].v_setpoint
    va -= va[slack]

    y = net.admittance.complex
    s_spec = scheduled_injection(net)
    vc = vm * np.exp(1j * va)
    f = _mismatch(net, vc, s_spec, pvpq, pq)
    norm = np.max(np.abs(f)) if f.size else 0.0
    history = [norm]
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"power flow did not converge in {max_iter} iterations (mismatch {norm:.3e})",
                history,
            )
        it += 1
        ibus = y @ vc
        vnorm = vc / np.abs(vc)
        ds_dva = 1j * np.diag(vc) @ np.conj(np.diag(ibus) - y @ np.diag(vc))
        ds_dvm = np.diag(vc) @ np.conj(y @ np.diag(vnorm)) + np.conj(np.diag(ibus)) @ np.diag(vnorm)
        jac = np.block(
            [
                [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
                [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
            ]
        )
        try:
            lu = scipy.linalg.lu_factor(jac, check_finite=True)
            if np.min(np.abs(np.diag(lu[0]))) < 1e-14 * max(1.0, np.max(np.abs(jac))):
                raise np.linalg.LinAlgError
            dx = scipy.linalg.lu_solve(lu, -f)
        except (np.linalg.LinAlgError, ValueError):
            raise SingularityError("power-flow Jacobian is singular", history) from None
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        if np.any(vm <= 0) or not np.all(np.isfinite(dx)):
            raise ConvergenceError("power flow diverged (non-positive voltage)", history)
        vc = vm * np.exp(1j * va)
        f = _mismatch(net, vc, s_spec, pvpq, pq)
        norm = np.max(np.abs(f)) if f.size else 0.0
        history.append(norm)

    state = StateVector(vm, va)
    if full_output:
        return state, it, norm
    return state
