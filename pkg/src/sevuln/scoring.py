"""Per-measurement stealthiness (S), leverage (L) and vulnerability (V) scores."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateResidualError, DomainError, ShapeError
from .sensitivity import assemble_kkt_blocks, measurement_sensitivities, objective_curvature

TWO_NORM, INF_NORM = "two_norm", "inf_norm"
NOISY, SURROGATE = "noisy", "surrogate"
CONSISTENT_RESIDUAL = 1e-9


@dataclass(frozen=True)
class ScoreParams:
    gamma: float = 10.0
    alpha: float = 0.3
    beta_s: float = 1.0
    beta_l: float = 1.5
    norm_kind: str = TWO_NORM

    def __post_init__(self):
        if not self.gamma > 0:
            raise DomainError("gamma must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError("alpha must lie in [0, 1]")
        if not (self.beta_s > 0 and self.beta_l > 0):
            raise DomainError("beta parameters must be positive")
        if self.norm_kind not in (TWO_NORM, INF_NORM):
            raise DomainError(f"unknown norm {self.norm_kind!r}")


def s_shape(xi, beta):
    """S-shaped map of [0, 1] onto itself: xi^b / (xi^b + (1 - xi)^b), clamped outside."""
    if not beta > 0:
        raise DomainError("beta must be positive")
    xi = float(xi)
    if math.isnan(xi):
        raise DomainError("s_shape of NaN")
    if xi <= 0.0:
        return 0.0
    if xi >= 1.0:
        return 1.0
    a = xi**beta
    return a / (a + (1.0 - xi) ** beta)


def _s_shape_vec(xi, beta):
    return np.array([s_shape(v, beta) for v in np.ravel(xi)])


def stealth_statistic(dJ_dz, z):
    return np.abs(np.asarray(z, dtype=float) * np.asarray(dJ_dz, dtype=float))


def s_score(dJ_dz, z, params=ScoreParams(), raw=None):
    """Stealthiness score. ``raw`` overrides |z * dJ/dz| (used by the surrogate mode)."""
    dJ_dz = np.ravel(np.asarray(dJ_dz, dtype=float))
    z = np.ravel(np.asarray(z, dtype=float))
    if dJ_dz.shape != z.shape:
        raise ShapeError("dJ_dz and z must have equal length")
    stat = stealth_statistic(dJ_dz, z) if raw is None else np.abs(np.asarray(raw, dtype=float))
    top = float(np.max(stat)) if stat.size else 0.0
    if not top > 0:
        raise DegenerateResidualError(
            "all |z * dJ/dz| are zero (consistent measurements); use the surrogate mode"
        )
    xi = params.gamma ** (-stat / top)
    return _s_shape_vec(xi, params.beta_s)


def column_norms(dx_dz, norm_kind=TWO_NORM):
    dx_dz = np.asarray(dx_dz, dtype=float)
    if norm_kind == INF_NORM:
        return np.max(np.abs(dx_dz), axis=0) if dx_dz.shape[0] else np.zeros(dx_dz.shape[1])
    return np.linalg.norm(dx_dz, axis=0)


def l_score(dx_dz, params=ScoreParams()):
    """Leverage score from the norm of each column of dx/dz, normalised by the largest."""
    raw = column_norms(dx_dz, params.norm_kind)
    if not np.all(np.isfinite(raw)):
        raise DomainError("dx_dz contains non-finite entries")
    top = float(np.max(raw)) if raw.size else 0.0
    if not top > 0:
        raise DegenerateResidualError("dx_dz is identically zero")
    return _s_shape_vec(raw / top, params.beta_l)


def v_score(s, l, alpha=0.3):
    s = np.asarray(s, dtype=float)
    l = np.asarray(l, dtype=float)
    if s.shape != l.shape:
        raise ShapeError("S and L score vectors differ in length")
    if not 0.0 <= alpha <= 1.0:
        raise DomainError("alpha must lie in [0, 1]")
    return alpha * s + (1.0 - alpha) * l


@dataclass(frozen=True)
class ScoreTable:
    ids: tuple
    kinds: tuple
    locations: tuple
    raw_dJdz: np.ndarray
    raw_stat: np.ndarray
    raw_colnorm: np.ndarray
    s_score: np.ndarray
    l_score: np.ndarray
    v_score: np.ndarray
    mode: str = NOISY

    def __len__(self):
        return len(self.ids)

    def ranking(self):
        """Indices by descending V-score, ties by canonical index."""
        return sorted(range(len(self)), key=lambda k: (-self.v_score[k], k))

    def ranks(self):
        out = np.zeros(len(self), dtype=int)
        for pos, k in enumerate(self.ranking(), start=1):
            out[k] = pos
        return out


def rank_measurements(table, threshold):
    """Return ``(ranked indices, vulnerable indices)`` with vulnerable = V-score >= threshold."""
    order = table.ranking()
    vulnerable = [k for k in order if table.v_score[k] >= threshold]
    return order, vulnerable


def build_score_table(ms, sens, params=ScoreParams(), mode=NOISY, curvature=None, net=None):
    z = ms.z
    if mode == SURROGATE:
        if curvature is None:
            raise DomainError("surrogate mode needs the objective curvature")
        stat = np.abs(z * z * curvature)
    else:
        # dJ/dz = 2 w (z - x_m) at the optimum, so this is the largest residual
        resid = np.max(np.abs(sens.dJ_dz / (2.0 * ms.w))) if len(ms) else 0.0
        if resid <= CONSISTENT_RESIDUAL:
            raise DegenerateResidualError(
                f"largest residual {resid:.1e} is at round-off level (consistent measurements); "
                "use the surrogate mode"
            )
        stat = stealth_statistic(sens.dJ_dz, z)
    s = s_score(sens.dJ_dz, z, params, raw=stat)
    l = l_score(sens.dx_dz, params)
    return ScoreTable(
        ids=tuple(ms.labels(net)),
        kinds=tuple(m.kind for m in ms.measurements),
        locations=tuple(m.location for m in ms.measurements),
        raw_dJdz=np.asarray(sens.dJ_dz, dtype=float),
        raw_stat=stat,
        raw_colnorm=column_norms(sens.dx_dz, params.norm_kind),
        s_score=s,
        l_score=l,
        v_score=v_score(s, l, params.alpha),
        mode=mode,
    )


def score_measurements(net, ms, est, params=ScoreParams(), mode=NOISY):
    """Blocks -> sensitivities -> S/L/V scores for every measurement.

    ``mode="surrogate"`` replaces |z dJ/dz| with z^2 * d2J*/dz^2, the structural
    stealth signal left when residuals vanish on consistent data. For noisy
    data the expected square of |z dJ/dz| is proportional to it.
    """
    blocks = assemble_kkt_blocks(net, ms, est)
    sens = measurement_sensitivities(blocks)
    curvature = objective_curvature(ms, est, sens) if mode == SURROGATE else None
    table = build_score_table(ms, sens, params, mode, curvature, net)
    return sens, table
