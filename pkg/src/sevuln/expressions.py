"""Polar power expressions as sums of trigonometric terms.

Every injection or branch-flow expression is a sum of

* quadratic terms ``q * v_a**2`` and
* coupling terms ``v_a * v_b * (cc * cos(theta_a - theta_b) + ss * sin(theta_a - theta_b))``.

Compiling a list of expressions into flat term arrays gives values, the
Jacobian and multiplier-weighted Hessians with a handful of vectorised
scatter operations. Derivatives are taken with respect to the full polar
vector ``[v_0..v_{N-1}, theta_0..theta_{N-1}]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LookupFailure

P_INJ, Q_INJ, P_FLOW, Q_FLOW = "Pinj", "Qinj", "Pflow", "Qflow"


@dataclass(frozen=True)
class PowerExpressions:
    n_bus: int
    kinds: tuple
    quad_f: np.ndarray
    quad_a: np.ndarray
    quad_q: np.ndarray
    pair_f: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_cc: np.ndarray
    pair_ss: np.ndarray

    def __len__(self):
        return len(self.kinds)

    def _pair_trig(self, v, theta):
        phi = theta[self.pair_a] - theta[self.pair_b]
        c, s = np.cos(phi), np.sin(phi)
        t = self.pair_cc * c + self.pair_ss * s
        dt = -self.pair_cc * s + self.pair_ss * c
        return t, dt

    def values(self, v, theta):
        out = np.zeros(len(self))
        np.add.at(out, self.quad_f, self.quad_q * v[self.quad_a] ** 2)
        t, _ = self._pair_trig(v, theta)
        np.add.at(out, self.pair_f, v[self.pair_a] * v[self.pair_b] * t)
        return out

    def jacobian(self, v, theta):
        n = self.n_bus
        jac = np.zeros((len(self), 2 * n))
        np.add.at(jac, (self.quad_f, self.quad_a), 2.0 * self.quad_q * v[self.quad_a])
        t, dt = self._pair_trig(v, theta)
        va, vb = v[self.pair_a], v[self.pair_b]
        f, a, b = self.pair_f, self.pair_a, self.pair_b
        np.add.at(jac, (f, a), vb * t)
        np.add.at(jac, (f, b), va * t)
        np.add.at(jac, (f, n + a), va * vb * dt)
        np.add.at(jac, (f, n + b), -va * vb * dt)
        return jac

    def weighted_hessian(self, v, theta, mult):
        """Hessian of ``sum_k mult[k] * h_k`` with respect to the polar vector."""
        n = self.n_bus
        hess = np.zeros((2 * n, 2 * n))
        mult = np.asarray(mult, dtype=float)
        mq = mult[self.quad_f]
        np.add.at(hess, (self.quad_a, self.quad_a), 2.0 * self.quad_q * mq)

        t, dt = self._pair_trig(v, theta)
        m = mult[self.pair_f]
        va, vb = v[self.pair_a], v[self.pair_b]
        a, b = self.pair_a, self.pair_b
        ta, tb = n + a, n + b
        entries = (
            (a, b, m * t),
            (a, ta, m * vb * dt),
            (a, tb, -m * vb * dt),
            (b, ta, m * va * dt),
            (b, tb, -m * va * dt),
            (ta, tb, m * va * vb * t),
        )
        # accumulate one triangle and mirror it so the result is exactly symmetric
        off = np.zeros_like(hess)
        for rows, cols, vals in entries:
            np.add.at(off, (rows, cols), vals)
        np.add.at(hess, (ta, ta), -m * va * vb * t)
        np.add.at(hess, (tb, tb), -m * va * vb * t)
        return hess + off + off.T


def compile_expressions(net, specs):
    """Compile expression specs into a :class:`PowerExpressions`.

    ``specs`` is a sequence of ``(kind, location)`` with ``location`` an
    internal bus index for injections or an internal ``(i, j)`` pair for flows
    metered at bus ``i``.
    """
    adm = net.admittance
    g, b = adm.g, adm.b
    n = net.n_bus
    quad, pair = [], []
    for k, (kind, loc) in enumerate(specs):
        if kind in (P_INJ, Q_INJ):
            i = int(loc)
            if not 0 <= i < n:
                raise LookupFailure(f"bus index {i} not in network")
            if kind == P_INJ:
                quad.append((k, i, g[i, i]))
            else:
                quad.append((k, i, -b[i, i]))
            for j in np.flatnonzero((g[i] != 0) | (b[i] != 0)):
                if j == i:
                    continue
                if kind == P_INJ:
                    pair.append((k, i, j, g[i, j], b[i, j]))
                else:
                    pair.append((k, i, j, -b[i, j], g[i, j]))
        elif kind in (P_FLOW, Q_FLOW):
            i, j = (int(e) for e in loc)
            try:
                br, at_from = net.find_branch(i, j)
            except Exception as exc:
                raise LookupFailure(str(exc)) from None
            y_ff, y_ft, y_tf, y_tt = br.end_admittances()
            y_self, y_mut = (y_ff, y_ft) if at_from else (y_tt, y_tf)
            if kind == P_FLOW:
                quad.append((k, i, y_self.real))
                pair.append((k, i, j, y_mut.real, y_mut.imag))
            else:
                quad.append((k, i, -y_self.imag))
                pair.append((k, i, j, -y_mut.imag, y_mut.real))
        else:
            raise LookupFailure(f"unknown expression kind {kind!r}")

    def cols(rows, width, dtypes):
        if not rows:
            return [np.zeros(0, dtype=d) for d in dtypes]
        arr = list(zip(*rows))
        return [np.asarray(arr[c], dtype=dtypes[c]) for c in range(width)]

    qf, qa, qq = cols(quad, 3, (int, int, float))
    pf, pa, pb, pcc, pss = cols(pair, 5, (int, int, int, float, float))
    return PowerExpressions(
        n_bus=n,
        kinds=tuple(kind for kind, _ in specs),
        quad_f=qf, quad_a=qa, quad_q=qq,
        pair_f=pf, pair_a=pa, pair_b=pb, pair_cc=pcc, pair_ss=pss,
    )
