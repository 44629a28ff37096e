"""Operating-condition sweeps and SVD-based invariance analysis of the sensitivities."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SEVulnError, ShapeError, ZeroEnergyError
from .estimator import SolverOptions, estimate_state
from .measurements import synthesize_measurements
from .network import scale_demands
from .scoring import build_score_table
from .sensitivity import assemble_kkt_blocks, measurement_sensitivities

log = logging.getLogger(__name__)

PER_CONDITION, FIXED = "per_condition", "fixed"


def default_factors(t=24, low=0.55, high=1.15):
    return np.linspace(low, high, t)


@dataclass(frozen=True)
class SeedPolicy:
    """Noise seeds across conditions.

    ``fixed`` reuses one realization (in units of each meter's sigma) for every
    condition, so the rows of the dJ/dz ensemble differ only through the
    operating point. ``per_condition`` draws seed ``base + k`` for condition k.
    """

    base: int = 1
    kind: str = FIXED
    noise: float = 1.0

    def seed_for(self, k):
        if self.kind == FIXED:
            return self.base
        if self.kind == PER_CONDITION:
            return self.base + k
        raise DomainError(f"unknown seed policy {self.kind!r}")


@dataclass(frozen=True)
class SensitivityEnsemble:
    scale_factors: np.ndarray
    x_matrix: np.ndarray
    j_matrix: np.ndarray
    n: int
    p: int
    variable_names: tuple = ()
    measurement_ids: tuple = ()
    failures: dict = field(default_factory=dict)

    @property
    def t(self):
        return self.x_matrix.shape[0]

    def column_index(self, col):
        """Map a flat column of X to ``(variable, measurement)``; vec() is column-major."""
        if not 0 <= col < self.n * self.p:
            raise ShapeError(f"column {col} outside X")
        return col % self.n, col // self.n


def condition_sensitivities(net, cfg, factor, seed, noise, opts=None):
    """One operating condition: scale, synthesize, estimate, differentiate."""
    scaled = scale_demands(net, factor)
    ms = synthesize_measurements(scaled, cfg, noise, seed)
    est = estimate_state(scaled, ms, opts or SolverOptions())
    sens = measurement_sensitivities(assemble_kkt_blocks(scaled, ms, est))
    return ms, est, sens


def _run_condition(args):
    net, cfg, factor, seed, noise, opts, params = args
    try:
        ms, est, sens = condition_sensitivities(net, cfg, factor, seed, noise, opts)
        table = None
        if params is not None:
            table = build_score_table(ms, sens, params, net=net)
    except SEVulnError as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return {
        "vec_x": sens.dx_dz.ravel(order="F"),
        "dJ_dz": np.asarray(sens.dJ_dz),
        "shape": sens.dx_dz.shape,
        "variable_names": tuple(est.problem.variable_names),
        "measurement_ids": tuple(ms.labels(net)),
        "scores": table,
    }, None


def run_conditions(net, cfg, factors, seed_policy=SeedPolicy(), opts=None, jobs=1, params=None):
    """Per-condition pipeline results, ``[(result dict or None, error or None), ...]``."""
    tasks = [
        (net, cfg, float(f), seed_policy.seed_for(k), seed_policy.noise, opts, params)
        for k, f in enumerate(factors)
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_condition, tasks))
    return [_run_condition(t) for t in tasks]


def assemble_ensemble(factors, outs):
    """Stack per-condition results in factor order; fails if fewer than two succeed."""
    factors = np.asarray(factors, dtype=float)
    rows_x, rows_j, kept, failures = [], [], [], {}
    first = None
    for k, (out, err) in enumerate(outs):
        if err is not None:
            failures[float(factors[k])] = err
            log.warning("condition %d (factor %.4f) failed: %s", k, factors[k], err)
            continue
        if first is None:
            first = out
        elif out["shape"] != first["shape"]:
            raise ShapeError(
                f"condition {k} has sensitivity shape {out['shape']}, expected {first['shape']}; "
                "topology and measurement configuration must be fixed across the sweep"
            )
        rows_x.append(out["vec_x"])
        rows_j.append(out["dJ_dz"])
        kept.append(factors[k])
    if len(rows_x) < 2 and len(factors) >= 2:
        raise SEVulnError(f"only {len(rows_x)} operating conditions succeeded: {failures}")
    if not rows_x:
        raise SEVulnError(f"no operating condition succeeded: {failures}")
    return SensitivityEnsemble(
        scale_factors=np.array(kept),
        x_matrix=np.vstack(rows_x),
        j_matrix=np.vstack(rows_j),
        n=first["shape"][0],
        p=first["shape"][1],
        variable_names=first["variable_names"],
        measurement_ids=first["measurement_ids"],
        failures=failures,
    )


def sweep_operating_conditions(net, cfg, factors, seed_policy=SeedPolicy(), opts=None, jobs=1):
    """Stack vec(dx/dz) (column-major) and dJ/dz for each scale factor, in factor order."""
    return assemble_ensemble(factors, run_conditions(net, cfg, factors, seed_policy, opts, jobs))


def center_columns(m):
    """Subtract each column's mean. Returns ``(centered, means)``."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"cannot center an empty matrix of shape {m.shape}")
    means = m.mean(axis=0)
    return m - means[None, :], means


def cumulative_energy(sigma, squared=False):
    """Fraction of total singular-value mass captured by the leading r values, r = 1..len."""
    s = np.asarray(sigma, dtype=float)
    if squared:
        s = s * s
    total = s.sum()
    if not total > 0:
        raise ZeroEnergyError("all singular values are zero; cumulative energy is undefined")
    ce = np.cumsum(s) / total
    ce[-1] = 1.0
    return ce


@dataclass(frozen=True)
class SvdSummary:
    singular_values: np.ndarray
    cumulative_energy: np.ndarray
    u: np.ndarray
    vt: np.ndarray


def svd_analysis(centered, squared=False):
    centered = np.asarray(centered, dtype=float)
    if not np.all(np.isfinite(centered)):
        raise DomainError("matrix has non-finite entries")
    try:
        u, s, vt = np.linalg.svd(centered, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SEVulnError(
            f"SVD did not converge (shape {centered.shape}, max |entry| "
            f"{np.max(np.abs(centered)):.3e})"
        ) from exc
    return SvdSummary(s, cumulative_energy(s, squared), u, vt)


@dataclass(frozen=True)
class SvdReport:
    singular_values_x: np.ndarray
    singular_values_j: np.ndarray
    cumulative_energy_x: np.ndarray
    cumulative_energy_j: np.ndarray
    mean_x: np.ndarray
    mean_j: np.ndarray
    squared: bool = False


def analyze_ensemble(ens, squared=False):
    xc, xm = center_columns(ens.x_matrix)
    jc, jm = center_columns(ens.j_matrix)
    sx = svd_analysis(xc, squared)
    sj = svd_analysis(jc, squared)
    return SvdReport(
        sx.singular_values, sj.singular_values,
        sx.cumulative_energy, sj.cumulative_energy,
        xm, jm, squared,
    )


def invariance_verdict(report, r=1, energy_threshold=0.8):
    if r < 1:
        raise DomainError("r must be at least 1")
    ce_x = float(report.cumulative_energy_x[min(r, len(report.cumulative_energy_x)) - 1])
    ce_j = float(report.cumulative_energy_j[min(r, len(report.cumulative_energy_j)) - 1])
    invariant = ce_x >= energy_threshold and ce_j >= energy_threshold
    return {
        "r": int(r),
        "energy_threshold": float(energy_threshold),
        "ce_x": ce_x,
        "ce_j": ce_j,
        "invariant": bool(invariant),
        "note": (
            "sensitivities are dominated by a few directions across operating conditions"
            if invariant
            else "sensitivities change materially with the operating condition"
        ),
    }
