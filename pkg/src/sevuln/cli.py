"""Command-line front end: ``sevuln assess | sweep | validate``.

Exit codes: 0 success, 1 other failure, 2 parse/validation/missing input,
3 observability/regularity, 4 convergence, 5 degenerate residuals,
6 validation tolerance breached.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, data_path
from .errors import (
    DegenerateResidualError,
    DomainError,
    SEVulnError,
    ToleranceBreach,
)
from .estimator import (
    SolverOptions,
    bdd_chi_square,
    degrees_of_freedom,
    estimate_state,
    redundancy_ratio,
)
from .measurements import (
    evaluate_entries,
    load_config,
    measurement_jacobian,
    synthesize_measurements,
)
from .network import load_case, scale_demands
from .powerflow import StateVector, solve_power_flow
from .reporting import (
    RunManifest,
    SensitivityCache,
    file_hash,
    matrix_csv,
    score_csv,
    score_json,
    svd_csv,
    top_table,
)
from .robustness import (
    FIXED,
    PER_CONDITION,
    SeedPolicy,
    analyze_ensemble,
    assemble_ensemble,
    default_factors,
    run_conditions,
    invariance_verdict,
)
from .scoring import INF_NORM, NOISY, SURROGATE, TWO_NORM, ScoreParams, ScoreTable, score_measurements
from .sensitivity import (
    assemble_kkt_blocks,
    block_finite_difference_check,
    finite_difference_check,
    measurement_sensitivities,
)

log = logging.getLogger("sevuln")

BUNDLED = {"case4": "case4.m", "case39": "case39.m", "meas4": "meas4.json", "meas39": "meas39.json"}
NORMS = {"l2": TWO_NORM, "linf": INF_NORM}
FAULTS = ("jacobian",)


def resolve_input(name):
    """A path on disk, or one of the bundled names (``case4``, ``meas39.json``, ...)."""
    p = Path(name)
    if p.exists():
        return p
    stem = p.name[: -len(p.suffix)] if p.suffix else p.name
    if stem in BUNDLED and (p.parent == Path(".") or not p.parent.exists()):
        return Path(str(data_path(BUNDLED[stem])))
    return p


def _common(sub):
    sub.add_argument("--case", required=True, help="MATPOWER case file or bundled name (case4, case39)")
    sub.add_argument("--meas", required=True, help="measurement config JSON or bundled name (meas4, meas39)")
    sub.add_argument("--seed", type=int, default=1)
    sub.add_argument("--noise", type=float, default=1.0, help="noise scale in units of each meter's sigma")
    sub.add_argument("--consistent", action="store_true",
                     help="noiseless data; stealth scores from the objective curvature")
    sub.add_argument("--surrogate", action="store_true",
                     help="curvature-based stealth statistic even with noisy data")
    sub.add_argument("--gamma", type=float, default=10.0)
    sub.add_argument("--alpha", type=float, default=0.3)
    sub.add_argument("--beta-s", type=float, default=1.0)
    sub.add_argument("--beta-l", type=float, default=1.5)
    sub.add_argument("--norm", choices=sorted(NORMS), default="l2")
    sub.add_argument("--threshold", type=float, default=None, help="V-score cut for the vulnerable set")
    sub.add_argument("--tol", type=float, default=1e-9)
    sub.add_argument("--max-iter", type=int, default=50)
    sub.add_argument("--damping", type=float, default=0.0)
    sub.add_argument("--significance", type=float, default=0.05)
    sub.add_argument("--out", default="out", help="output directory")
    sub.add_argument("--top", type=int, default=10)
    sub.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="sevuln", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    a = subs.add_parser("assess", help="score every measurement at one operating condition")
    _common(a)
    a.add_argument("--emit-matrices", action="store_true", help="also write dx/dz, dlambda/dz, dJ/dz")

    s = subs.add_parser("sweep", help="sensitivities across scaled loadings plus SVD verdict")
    _common(s)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--factors", type=float, nargs="+", help="demand scale factors")
    g.add_argument("--factors-default", action="store_true", help="24 factors on [0.55, 1.15]")
    s.add_argument("--seed-policy", choices=(FIXED, PER_CONDITION), default=FIXED)
    s.add_argument("--ce-squared", action="store_true", help="cumulative energy of squared singular values")
    s.add_argument("--r", type=int, default=1, help="leading directions for the verdict")
    s.add_argument("--energy-threshold", type=float, default=0.8)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--cache-dir", default=None, help="reuse sweep results across runs")
    s.add_argument("--emit-matrices", action="store_true", help="also write the X and J ensembles")

    v = subs.add_parser("validate", help="finite-difference and consistency oracles")
    _common(v)
    v.add_argument("--step", type=float, default=1e-5)
    v.add_argument("--fd-tol", type=float, default=None,
                   help="max relative FD error (default 1e-4, or 1e-3 when sampling)")
    v.add_argument("--sample", type=int, default=None,
                   help="number of measurements to differentiate (default all up to 20, else 10)")
    v.add_argument("--blocks", action="store_true", help="also check the KKT blocks by finite differences")
    v.add_argument("--inject-fault", choices=FAULTS, default=None, help=argparse.SUPPRESS)
    return parser


# --- shared pipeline pieces ----------------------------------------------------

def _load_inputs(args):
    case_path = resolve_input(args.case)
    meas_path = resolve_input(args.meas)
    net = load_case(case_path)
    cfg = load_config(meas_path, net)
    return net, cfg, case_path, meas_path


def _params(args):
    return ScoreParams(args.gamma, args.alpha, args.beta_s, args.beta_l, NORMS[args.norm])


def _opts(args):
    if not args.tol > 0:
        raise DomainError("--tol must be positive")
    return SolverOptions(tol=args.tol, max_iter=args.max_iter, damping=args.damping,
                         significance=args.significance)


def _noise(args):
    return 0.0 if args.consistent else args.noise


def _mode(args):
    return SURROGATE if (args.consistent or args.surrogate) else NOISY


def _manifest(args, case_path, meas_path, extra=None):
    params = {
        "seed": args.seed, "noise": _noise(args), "mode": _mode(args),
        "gamma": args.gamma, "alpha": args.alpha, "beta_s": args.beta_s, "beta_l": args.beta_l,
        "norm": args.norm, "threshold": args.threshold, "tol": args.tol,
        "max_iter": args.max_iter, "damping": args.damping, "significance": args.significance,
    }
    params.update(extra or {})
    return RunManifest(
        command=args.command,
        case_path=str(case_path), case_hash=file_hash(case_path),
        meas_path=str(meas_path), meas_hash=file_hash(meas_path),
        parameters=params,
    )


def _finish(manifest):
    manifest.finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    return json.dumps(manifest.to_dict(), indent=2, default=str)


def _write_all(out, files):
    """Write every report at once; nothing is written unless the run succeeded."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        target = out / name
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_text(text)
        tmp.replace(target)


def _vulnerable_line(table, threshold):
    if threshold is None:
        return None
    hits = [table.ids[k] for k in table.ranking() if table.v_score[k] >= threshold]
    return f"vulnerable (V >= {threshold:g}): {len(hits)} " + (" ".join(hits) if hits else "-")


# --- commands ------------------------------------------------------------------

def cmd_assess(args):
    net, cfg, case_path, meas_path = _load_inputs(args)
    params, opts, mode = _params(args), _opts(args), _mode(args)
    manifest = _manifest(args, case_path, meas_path)

    ms = synthesize_measurements(net, cfg, _noise(args), args.seed)
    est = estimate_state(net, ms, opts)
    sens, table = score_measurements(net, ms, est, params, mode)

    prob = est.problem
    p = len(ms)
    dof = degrees_of_freedom(p, prob.n_states, prob.n_zero_constraints)
    summary = [
        f"case {case_path.name}: {net.n_bus} buses, p = {p}, zero-injection constraints = "
        f"{prob.n_zero_constraints}, redundancy = "
        f"{redundancy_ratio(p, prob.n_states, prob.n_zero_constraints):.3f}",
        f"estimator: {est.method}, {est.iterations} iterations, J* = {est.j_star:.6g}",
    ]
    if dof >= 1:
        thr, detected, _ = bdd_chi_square(est.j_star, p, prob.n_states, prob.n_zero_constraints,
                                          args.significance)
        summary.append(f"chi-square test: dof {dof}, threshold {thr:.4f}, "
                       + ("BAD DATA FLAGGED" if detected else "passed"))
    summary.append(f"stealth statistic: {mode}")

    files = {
        "scores.csv": score_csv(table, net, manifest),
        "scores.json": score_json(table, net, manifest),
    }
    if args.emit_matrices:
        ids = table.ids
        files["dx_dz.csv"] = matrix_csv(sens.dx_dz, prob.variable_names, ids, manifest)
        files["dlambda_dz.csv"] = matrix_csv(sens.dlambda_dz, prob.constraint_names, ids, manifest)
        files["dJ_dz.csv"] = matrix_csv(sens.dJ_dz[None, :], ["J"], ids, manifest)
    files["manifest.json"] = _finish(manifest)
    _write_all(args.out, files)

    print("\n".join(summary))
    print(top_table(table, args.top, args.threshold))
    line = _vulnerable_line(table, args.threshold)
    if line:
        print(line)
    return 0


def _sweep_factors(args):
    if args.factors:
        factors = np.asarray(args.factors, dtype=float)
    else:
        factors = default_factors()
    if len(factors) < 2:
        raise DomainError("a sweep needs at least two scale factors")
    return factors


def _cache_store(cache, key, outs, factors):
    arrays = {"factors": factors}
    errors = {}
    for k, (out, err) in enumerate(outs):
        if err is not None:
            errors[k] = err
            continue
        t = out["scores"]
        arrays.update({
            f"vec_x_{k}": out["vec_x"], f"dJ_dz_{k}": out["dJ_dz"],
            f"shape_{k}": np.array(out["shape"]),
            f"stat_{k}": t.raw_stat, f"colnorm_{k}": t.raw_colnorm,
            f"s_{k}": t.s_score, f"l_{k}": t.l_score, f"v_{k}": t.v_score,
        })
        arrays["variable_names"] = np.array(out["variable_names"])
        arrays["measurement_ids"] = np.array(out["measurement_ids"])
    arrays["errors"] = np.array(json.dumps(errors))
    cache.store(key, **arrays)


def _cache_load(data, cfg, mode):
    errors = {int(k): v for k, v in json.loads(str(data["errors"])).items()}
    entries = cfg.entries()
    outs = []
    for k in range(len(data["factors"])):
        if k in errors:
            outs.append((None, errors[k]))
            continue
        ids = tuple(str(s) for s in data["measurement_ids"])
        table = ScoreTable(
            ids=ids, kinds=tuple(e[0] for e in entries), locations=tuple(e[1] for e in entries),
            raw_dJdz=data[f"dJ_dz_{k}"], raw_stat=data[f"stat_{k}"], raw_colnorm=data[f"colnorm_{k}"],
            s_score=data[f"s_{k}"], l_score=data[f"l_{k}"], v_score=data[f"v_{k}"], mode=mode,
        )
        outs.append(({
            "vec_x": data[f"vec_x_{k}"], "dJ_dz": data[f"dJ_dz_{k}"],
            "shape": tuple(int(d) for d in data[f"shape_{k}"]),
            "variable_names": tuple(str(s) for s in data["variable_names"]),
            "measurement_ids": ids, "scores": table,
        }, None))
    return outs


def cmd_sweep(args):
    factors = _sweep_factors(args)
    net, cfg, case_path, meas_path = _load_inputs(args)
    params, opts, mode = _params(args), _opts(args), _mode(args)
    if args.r < 1:
        raise DomainError("--r must be at least 1")
    policy = SeedPolicy(base=args.seed, kind=args.seed_policy, noise=_noise(args))
    manifest = _manifest(args, case_path, meas_path, {
        "factors": [float(f) for f in factors], "seed_policy": args.seed_policy,
        "ce_squared": args.ce_squared, "r": args.r, "energy_threshold": args.energy_threshold,
    })
    cache = SensitivityCache(args.cache_dir) if args.cache_dir else None
    key = manifest.content_hash()[:32]
    cached = cache.load(key) if cache else None
    if cached is not None:
        outs = _cache_load(cached, cfg, mode)
        log.info("loaded sweep from cache %s", key)
    else:
        sweep_params = params if mode == NOISY else None
        outs = run_conditions(net, cfg, factors, policy, opts, args.jobs, sweep_params)
        if mode == SURROGATE:
            outs = _attach_surrogate_scores(net, cfg, factors, policy, opts, params, outs)
        if cache is not None:
            _cache_store(cache, key, outs, factors)

    ens = assemble_ensemble(factors, outs)
    report = analyze_ensemble(ens, args.ce_squared)
    verdict = invariance_verdict(report, args.r, args.energy_threshold)
    verdict.update({
        "t": int(ens.t), "n": int(ens.n), "p": int(ens.p),
        "failures": {str(k): v for k, v in ens.failures.items()},
        "squared": bool(args.ce_squared), "manifest": manifest.to_dict(),
    })

    files = {"svd_report.csv": svd_csv(report, manifest)}
    for k, (out, err) in enumerate(outs):
        if err is None:
            files[f"scores/condition_{k:02d}_{factors[k]:.4f}.csv"] = score_csv(out["scores"], net, manifest)
    if args.emit_matrices:
        cols_x = [f"{ens.variable_names[c % ens.n]}|{ens.measurement_ids[c // ens.n]}"
                  for c in range(ens.n * ens.p)]
        rows = [f"{f:.6g}" for f in ens.scale_factors]
        files["x_matrix.csv"] = matrix_csv(ens.x_matrix, rows, cols_x, manifest)
        files["j_matrix.csv"] = matrix_csv(ens.j_matrix, rows, ens.measurement_ids, manifest)
    files["verdict.json"] = json.dumps(verdict, indent=2, default=str)
    files["manifest.json"] = _finish(manifest)
    _write_all(args.out, files)

    kx, kj = report.cumulative_energy_x, report.cumulative_energy_j
    print(f"sweep: {ens.t} conditions ({len(ens.failures)} failed), X {ens.x_matrix.shape}, "
          f"J {ens.j_matrix.shape}")
    for r in range(min(5, len(kx), len(kj))):
        print(f"  r={r + 1}: CE_X = {kx[r]:.4f}  CE_J = {kj[r]:.4f}")
    print(f"verdict (r = {args.r}, threshold {args.energy_threshold:g}): "
          + ("invariant" if verdict["invariant"] else "not invariant"))
    for f, err in ens.failures.items():
        print(f"  failed factor {f:.4f}: {err}")
    return 0


def _attach_surrogate_scores(net, cfg, factors, policy, opts, params, outs):
    """Replace per-condition score tables with curvature-based ones."""
    fixed = []
    for k, (out, err) in enumerate(outs):
        if err is not None:
            fixed.append((out, err))
            continue
        scaled = scale_demands(net, float(factors[k]))
        ms = synthesize_measurements(scaled, cfg, policy.noise, policy.seed_for(k))
        est = estimate_state(scaled, ms, opts)
        _, table = score_measurements(scaled, ms, est, params, SURROGATE)
        fixed.append((dict(out, scores=table), None))
    return fixed


def _sample_indices(p, sample, seed):
    if sample is None:
        sample = p if p <= 20 else 10
    if sample >= p:
        return list(range(p))
    rng = np.random.default_rng(seed)
    return sorted(int(k) for k in rng.choice(p, size=sample, replace=False))


def cmd_validate(args):
    net, cfg, case_path, meas_path = _load_inputs(args)
    opts = _opts(args)
    checks = []  # (name, value, tolerance)

    # power flow truth and noiseless consistency
    truth, iters, mismatch = solve_power_flow(net, full_output=True)
    checks.append(("power-flow mismatch", mismatch, 1e-8))
    clean = synthesize_measurements(net, cfg, 0.0, args.seed, truth=truth)
    est0 = estimate_state(net, clean, opts)
    st = est0.state
    state_err = max(np.max(np.abs(st.v - truth.v)), np.max(np.abs(st.theta - truth.theta)))
    checks.append(("noiseless J*", est0.j_star, 1e-10))
    checks.append(("noiseless state error", state_err, 1e-8))

    # measurement Jacobian against central differences
    entries = cfg.entries()
    jac = measurement_jacobian(truth, net, cfg)
    if args.inject_fault == "jacobian":
        jac = jac * 1.01
    fd = np.zeros_like(jac)
    n_bus = net.n_bus
    h = 1e-6
    for c in range(2 * n_bus):
        v, th = truth.v.copy(), truth.theta.copy()
        dv, dth = (h, 0.0) if c < n_bus else (0.0, h)
        j = c % n_bus
        v[j] += dv
        th[j] += dth
        plus = evaluate_entries(StateVector(v, th), net, entries)
        v[j] -= 2 * dv
        th[j] -= 2 * dth
        minus = evaluate_entries(StateVector(v, th), net, entries)
        fd[:, c] = (plus - minus) / (2 * h)
    jac_err = float(np.linalg.norm(jac - fd) / max(np.linalg.norm(fd), 1e-12))
    checks.append(("measurement Jacobian vs FD", jac_err, 1e-6))

    # sensitivities against re-solved estimates
    ms = synthesize_measurements(net, cfg, _noise(args), args.seed, truth=truth)
    est = estimate_state(net, ms, opts)
    blocks = assemble_kkt_blocks(net, ms, est)
    if args.inject_fault == "jacobian":
        blocks = dataclasses.replace(
            blocks, C_x=blocks.C_x * 1.01,
            H_x=np.block([[blocks.J_xx, 1.01 * blocks.C_x.T],
                          [1.01 * blocks.C_x, np.zeros((blocks.r, blocks.r))]]),
        )
    sens = measurement_sensitivities(blocks)
    p = len(ms)
    idx = _sample_indices(p, args.sample, args.seed)
    sampled = len(idx) < p
    fd_tol = args.fd_tol if args.fd_tol is not None else (1e-3 if sampled else 1e-4)
    rep = finite_difference_check(net, ms, est, step=args.step, indices=idx, sens=sens)
    labels = ms.labels(net)
    checks.append(("dx/dz vs FD (max column rel. error)", rep.max_rel_dx, fd_tol))
    checks.append(("dJ/dz vs FD (max entry rel. error)", rep.max_rel_dJ, fd_tol))
    checks.append(("sensitivity solve residual", sens.solve_residual, 1e-8))
    checks.append(("KKT symmetry", float(np.max(np.abs(blocks.H_x - blocks.H_x.T))), 1e-12))
    if rep.failed:
        checks.append(("FD re-solves failed", float(len(rep.failed)), 0.0))

    if args.blocks:
        for name, err in block_finite_difference_check(net, ms, est, blocks).items():
            checks.append((f"block {name} vs FD", err, 1e-5))

    width = max(len(c[0]) for c in checks)
    print(f"validate {case_path.name}: p = {p}, sampled {len(idx)} of {p} measurements, step {args.step:g}")
    failed = []
    for name, value, tol in checks:
        ok = bool(np.isfinite(value) and value <= tol)
        print(f"  {'PASS' if ok else 'FAIL'}  {name:<{width}}  {value:.3e}  (tol {tol:.0e})")
        if not ok:
            failed.append(name)
    worst = sorted(rep.rel_dx.items(), key=lambda kv: -kv[1])[:3]
    print("  worst dx/dz columns: " + ", ".join(f"{labels[k]} {e:.2e}" for k, e in worst))
    worst = sorted(rep.rel_dJ.items(), key=lambda kv: -kv[1])[:3]
    print("  worst dJ/dz entries: " + ", ".join(f"{labels[k]} {e:.2e}" for k, e in worst))
    for note in rep.warnings:
        print(f"  note: {note}")
    if failed:
        raise ToleranceBreach("tolerance exceeded: " + "; ".join(failed))
    return 0


COMMANDS = {"assess": cmd_assess, "sweep": cmd_sweep, "validate": cmd_validate}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DegenerateResidualError as exc:
        print(f"error: {exc}. Rerun with --consistent or --surrogate to score from the "
              "objective curvature.", file=sys.stderr)
        return exc.exit_code
    except SEVulnError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
