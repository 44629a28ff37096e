"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

from sevuln import data_path, estimate_state, load_case, load_config, synthesize_measurements
from sevuln.cli import main as cli_main
from sevuln.estimator import bdd_chi_square, degrees_of_freedom, redundancy_ratio
from sevuln.network import scale_demands
from sevuln.reporting import csv_body
from sevuln.robustness import (
    analyze_ensemble,
    center_columns,
    default_factors,
    svd_analysis,
    sweep_operating_conditions,
)
from sevuln.scoring import SURROGATE, ScoreParams, l_score, s_shape, score_measurements, v_score
from sevuln.sensitivity import assemble_kkt_blocks, finite_difference_check, measurement_sensitivities

RESULTS = []


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _inputs(size):
    net = load_case(data_path(f"case{size}.m"))
    return net, load_config(data_path(f"meas{size}.json"), net)


@pytest.fixture(scope="module")
def case4():
    return _inputs(4)


@pytest.fixture(scope="module")
def case39():
    return _inputs(39)


def test_criterion_1_noiseless_consistency(case4, case39):
    t0 = time.perf_counter()
    worst_j, worst_x = 0.0, 0.0
    for net, cfg in (case4, case39):
        for f in default_factors():
            scaled = scale_demands(net, f)
            ms = synthesize_measurements(scaled, cfg, 0.0)
            est = estimate_state(scaled, ms)
            st = est.state
            worst_j = max(worst_j, est.j_star)
            worst_x = max(worst_x, np.max(np.abs(st.v - ms.truth.v)), np.max(np.abs(st.theta - ms.truth.theta)))
    dt = time.perf_counter() - t0
    ok = worst_j <= 1e-10 and worst_x <= 1e-8 and dt < 30
    record(1, "noiseless consistency", ok, f"max J* {worst_j:.1e}, max state error {worst_x:.1e}, {dt:.1f} s")


def test_criterion_2_sensitivity_oracle(case4, case39):
    t0 = time.perf_counter()
    net, cfg = case4
    ms = synthesize_measurements(net, cfg, 1.0, seed=1)
    rep4 = finite_difference_check(net, ms, estimate_state(net, ms), step=1e-5)
    net, cfg = case39
    ms = synthesize_measurements(net, cfg, 1.0, seed=1)
    idx = np.random.default_rng(1).choice(len(ms), 10, replace=False)
    rep39 = finite_difference_check(net, ms, estimate_state(net, ms), step=1e-5, indices=idx)
    dt = time.perf_counter() - t0
    ok = (not rep4.failed and not rep39.failed and rep4.max_rel <= 1e-4
          and rep39.max_rel <= 1e-3 and dt < 120)
    record(2, "sensitivity oracle", ok,
           f"4-bus max rel {rep4.max_rel:.1e} (dx {rep4.max_rel_dx:.1e}, dJ {rep4.max_rel_dJ:.1e}), "
           f"39-bus sample max rel {rep39.max_rel:.1e}, {dt:.1f} s")


def test_criterion_3_kkt_invariants(case4, case39):
    sym = res = ident = 0.0
    for net, cfg in (case4, case39):
        ms = synthesize_measurements(net, cfg, 1.0, seed=1)
        est = estimate_state(net, ms)
        blocks = assemble_kkt_blocks(net, ms, est)
        sens = measurement_sensitivities(blocks)
        sym = max(sym, np.max(np.abs(blocks.H_x - blocks.H_x.T)))
        m = np.vstack([sens.dx_dz, sens.dlambda_dz])
        res = max(res, np.max(np.abs(blocks.H_x @ m + blocks.H_z)))
        # objective sensitivity by the chain rule and by the Lagrangian (envelope) path
        via_lagrangian = blocks.J_z + (blocks.C_x.T @ est.lambda_star + blocks.J_x) @ sens.dx_dz
        ident = max(ident, np.max(np.abs(sens.dJ_dz - via_lagrangian)))
    ok = sym <= 1e-12 and res <= 1e-8 and ident <= 1e-12
    record(3, "KKT and linear-algebra invariants", ok,
           f"symmetry {sym:.1e}, solve residual {res:.1e}, dJ/dz identity {ident:.1e}")


def test_criterion_4_score_properties():
    rng = np.random.default_rng(4)
    mid = all(s_shape(0.5, b) == 0.5 for b in rng.uniform(0.1, 10, 100))
    pairs = np.sort(rng.random((10_000, 2)), axis=1)
    beta = rng.uniform(0.2, 5.0, 10_000)
    mono = all(s_shape(a, b) <= s_shape(c, b) for (a, c), b in zip(pairs, beta))
    s, l, alpha = rng.random(1000), rng.random(1000), rng.random(1000)
    v = alpha * s + (1 - alpha) * l
    v_lib = np.array([v_score(s[i:i + 1], l[i:i + 1], alpha[i])[0] for i in range(1000)])
    bounds = bool(np.all(v_lib >= np.minimum(s, l) - 1e-15) and np.all(v_lib <= np.maximum(s, l) + 1e-15))
    bounds = bounds and np.allclose(v, v_lib)
    m = rng.standard_normal((15, 10))
    scale_inv = all(np.allclose(l_score(k * m), l_score(m), atol=1e-12) for k in (1e-3, 0.5, 7.0, 1e4))
    net, cfg = _inputs(4)
    ms = synthesize_measurements(net, cfg, 1.0, seed=1)
    _, table = score_measurements(net, ms, estimate_state(net, ms))
    in_unit = all(np.all((a >= 0) & (a <= 1)) for a in (table.s_score, table.l_score, table.v_score))
    ok = mid and mono and bounds and scale_inv and in_unit
    record(4, "score function properties", ok,
           f"midpoint {mid}, monotone {mono}, V bounds {bounds}, L scale-invariant {scale_inv}, unit range {in_unit}")


def test_criterion_5_four_bus_pattern(case4):
    net, cfg = case4
    ms = synthesize_measurements(net, cfg, 0.0)
    _, table = score_measurements(net, ms, estimate_state(net, ms), ScoreParams(), SURROGATE)
    ids = table.ids
    max_stat = ids[int(np.argmax(table.raw_stat))]
    min_s = ids[int(np.argmin(table.s_score))]
    top_l = {ids[k] for k in np.argsort(-table.l_score)[:2]}
    top_v = [ids[k] for k in table.ranking()[:2]]
    ok_a = max_stat == "P_1" and min_s == "P_1"
    ok_b = top_l == {"v_1", "v_2"}
    ok_c = top_v == ["Q_1", "Q_3"]

    noisy = synthesize_measurements(net, cfg, 1.0, seed=1)
    _, nt = score_measurements(net, noisy, estimate_state(net, noisy))
    info = (f"single noisy draw: max stat {nt.ids[int(np.argmax(nt.raw_stat))]}, "
            f"top V {[nt.ids[k] for k in nt.ranking()[:2]]}")
    record(5, "4-bus qualitative pattern (curvature stealth statistic)", ok_a and ok_b and ok_c,
           f"(a) max stat/min S {max_stat}/{min_s}, (b) top L {sorted(top_l)}, (c) top V {top_v}; {info}")


def test_criterion_6_redundancy(case4):
    net, cfg = case4
    ms = synthesize_measurements(net, cfg, 0.0)
    prob = estimate_state(net, ms).problem
    p, nz = len(ms), prob.n_zero_constraints
    ratio = redundancy_ratio(p, prob.n_states, nz)
    dof = degrees_of_freedom(p, prob.n_states, nz)
    ok = (p == 10 and prob.r == 10 and prob.n_power == 8 and nz == 2
          and abs(ratio - 12 / 7) <= 1e-3 and dof == 5)
    record(6, "redundancy arithmetic", ok,
           f"p {p}, constraints {prob.r} ({prob.n_power} defining + {nz} zero-injection), ratio {ratio:.4f}, dof {dof}")


def test_criterion_7_svd_low_rank(case4, case39):
    t0 = time.perf_counter()
    rep4 = analyze_ensemble(sweep_operating_conditions(*case4, default_factors()))
    ens39 = sweep_operating_conditions(*case39, default_factors())
    rep39 = analyze_ensemble(ens39)
    dt = time.perf_counter() - t0
    rng = np.random.default_rng(7)
    ctrl_x = svd_analysis(center_columns(rng.standard_normal((24, 150)))[0]).cumulative_energy[0]
    ctrl_j = svd_analysis(center_columns(rng.standard_normal((24, 10)))[0]).cumulative_energy[0]
    cx1, cj1 = rep4.cumulative_energy_x[0], rep4.cumulative_energy_j[0]
    cj3, cx4 = rep39.cumulative_energy_j[2], rep39.cumulative_energy_x[3]
    ok = cx1 >= 0.8 and cj1 >= 0.8 and cj3 >= 0.9 and cx4 >= 0.9 and ctrl_x < 0.8 and ctrl_j < 0.8 and dt < 300
    record(7, "SVD low-rank verdict", ok,
           f"4-bus CE_X(1) {cx1:.4f} CE_J(1) {cj1:.4f}; 39-bus CE_J(3) {cj3:.4f} CE_X(4) {cx4:.4f}; "
           f"Gaussian control CE(1) {ctrl_x:.3f}/{ctrl_j:.3f}; {dt:.1f} s")


def test_criterion_8_determinism(tmp_path):
    bodies = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli_main(["assess", "--case", "case4", "--meas", "meas4", "--seed", "1", "--out", str(out)]) == 0
        assert cli_main(["sweep", "--case", "case4", "--meas", "meas4", "--factors", "0.8", "1.0", "1.2",
                         "--out", str(out / "sweep")]) == 0
        files = sorted(p for p in out.rglob("*.csv"))
        bodies.append({str(p.relative_to(out)): csv_body(p.read_text()) for p in files})
    ok = bodies[0] == bodies[1] and len(bodies[0]) >= 5
    record(8, "determinism", ok, f"{len(bodies[0])} CSV bodies compared")


def test_criterion_9_bad_data_detection(case4):
    net, cfg = case4
    clean_flags = 0
    for f in default_factors():
        scaled = scale_demands(net, f)
        ms = synthesize_measurements(scaled, cfg, 0.0)
        est = estimate_state(scaled, ms)
        p = est.problem
        clean_flags += bdd_chi_square(est.j_star, len(ms), p.n_states, p.n_zero_constraints, 0.05)[1]
    ms = synthesize_measurements(net, cfg, 1.0, seed=1)
    k = ms.index_of("Pinj", 2)
    z = ms.z.copy()
    z[k] += 20.0 / np.sqrt(ms.w[k])
    est = estimate_state(net, ms.with_values(z=z))
    p = est.problem
    thr, flagged, dof = bdd_chi_square(est.j_star, len(ms), p.n_states, p.n_zero_constraints, 0.05)
    ok = clean_flags == 0 and flagged and dof == 5
    record(9, "bad-data detection sanity", ok,
           f"noiseless flags {clean_flags}/24, +20 sigma on P_3: J* {est.j_star:.2f} vs threshold {thr:.4f} (dof {dof})")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
