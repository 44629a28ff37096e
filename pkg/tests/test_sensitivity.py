import dataclasses

import numpy as np
import pytest

from sevuln.errors import StalePointError
from sevuln.estimator import SolverOptions, estimate_state
from sevuln.measurements import synthesize_measurements
from sevuln.sensitivity import (
    assemble_kkt_blocks,
    block_finite_difference_check,
    column_relative_error,
    entry_relative_error,
    finite_difference_check,
    measurement_sensitivities,
    objective_curvature,
    weight_sensitivities,
)


@pytest.fixture(scope="module")
def sens4(net4, noisy4):
    ms, est = noisy4
    blocks = assemble_kkt_blocks(net4, ms, est)
    return blocks, measurement_sensitivities(blocks, with_weights=True)


def test_block_shapes(sens4):
    blocks, sens = sens4
    assert blocks.H_x.shape == (25, 25)
    assert blocks.H_z.shape == (25, 10)
    assert sens.dx_dz.shape == (15, 10)
    assert sens.dlambda_dz.shape == (10, 10)
    assert sens.dJ_dz.shape == (10,)


def test_kkt_matrix_symmetric_and_solve_accurate(sens4):
    blocks, sens = sens4
    assert np.max(np.abs(blocks.H_x - blocks.H_x.T)) <= 1e-12
    assert sens.solve_residual <= 1e-8
    assert 0 < sens.condition_estimate <= 1


def test_objective_sensitivity_two_paths(sens4):
    """J_z + J_x dx/dz agrees with the envelope value J_z, since C_x dx/dz = 0."""
    blocks, sens = sens4
    assert np.max(np.abs(blocks.C_x @ sens.dx_dz)) <= 1e-12
    assert np.max(np.abs(sens.dJ_dz - blocks.J_z)) <= 1e-12


def test_blocks_match_finite_differences(net4, noisy4):
    ms, est = noisy4
    errs = block_finite_difference_check(net4, ms, est)
    assert max(errs.values()) <= 1e-6


def test_sensitivities_match_resolved_estimates(net4, noisy4, sens4):
    ms, est = noisy4
    rep = finite_difference_check(net4, ms, est, step=1e-5, sens=sens4[1])
    assert not rep.failed
    assert rep.max_rel_dx <= 1e-4 and rep.max_rel_dJ <= 1e-4


def test_weight_sensitivities_match_finite_differences(net4, noisy4, sens4):
    ms, est = noisy4
    _, sens = sens4
    warm = SolverOptions(tol=1e-11, warm_start=(est.x_star, est.lambda_star))
    for k in range(len(ms)):
        h = 1e-4 * ms.w[k]
        sols = []
        for sgn in (1, -1):
            w = ms.w.copy()
            w[k] += sgn * h
            sols.append(estimate_state(net4, ms.with_values(w=w), warm))
        fd_dx = (sols[0].x_star - sols[1].x_star) / (2 * h)
        fd_dJ = (sols[0].j_star - sols[1].j_star) / (2 * h)
        assert column_relative_error(sens.dx_da[:, k], fd_dx) <= 1e-3
        assert entry_relative_error(sens.dJ_da[k], fd_dJ) <= 1e-3


def test_weight_scaling(net4, noisy4, sens4):
    """Scaling every weight by k leaves the estimate and dx/dz unchanged and scales dJ/dz by k."""
    ms, est = noisy4
    _, sens = sens4
    kappa = 3.7
    scaled = ms.with_values(w=kappa * ms.w)
    est2 = estimate_state(net4, scaled)
    sens2 = measurement_sensitivities(assemble_kkt_blocks(net4, scaled, est2))
    assert np.allclose(est2.x_star, est.x_star, atol=1e-10)
    assert np.allclose(sens2.dx_dz, sens.dx_dz, atol=1e-8)
    assert np.allclose(sens2.dJ_dz, kappa * sens.dJ_dz, rtol=1e-8, atol=1e-8)


def test_curvature_matches_second_difference_of_optimal_objective(net4, noisy4, sens4):
    ms, est = noisy4
    curv = objective_curvature(ms, est, sens4[1])
    warm = SolverOptions(tol=1e-11, warm_start=(est.x_star, est.lambda_star))
    h = 1e-3
    for k in range(len(ms)):
        vals = []
        for d in (h, 0.0, -h):
            z = ms.z.copy()
            z[k] += d
            vals.append(estimate_state(net4, ms.with_values(z=z), warm).j_star)
        fd = (vals[0] - 2 * vals[1] + vals[2]) / h**2
        assert curv[k] == pytest.approx(fd, rel=1e-4, abs=1e-3)
    assert np.all(curv >= -1e-9)


def test_noiseless_point_has_zero_objective_sensitivity(net4, clean4):
    ms, est = clean4
    sens = measurement_sensitivities(assemble_kkt_blocks(net4, ms, est))
    assert np.max(np.abs(sens.dJ_dz)) <= 1e-8


def test_stale_point_rejected(net4, noisy4):
    ms, est = noisy4
    stale = dataclasses.replace(est, kkt_residual=1.0)
    with pytest.raises(StalePointError):
        assemble_kkt_blocks(net4, ms, stale)


def test_weight_sensitivity_standalone(sens4):
    blocks, sens = sens4
    dx_da, _, dJ_da = weight_sensitivities(blocks)
    assert np.allclose(dx_da, sens.dx_da)
    assert np.allclose(dJ_da, sens.dJ_da)


def test_out_of_range_step_is_flagged(net4, noisy4, sens4):
    ms, est = noisy4
    with pytest.warns(RuntimeWarning, match="truncation"):
        rep = finite_difference_check(net4, ms, est, step=1e-2, indices=[0], sens=sens4[1])
    assert rep.warnings


def test_relative_error_floor():
    assert entry_relative_error(1e-9, 0.0) == pytest.approx(0.1)
    assert column_relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0


@pytest.mark.slow
def test_39bus_sampled_sensitivities(net39, cfg39):
    ms = synthesize_measurements(net39, cfg39, 1.0, seed=1)
    est = estimate_state(net39, ms)
    idx = np.random.default_rng(1).choice(len(ms), 10, replace=False)
    rep = finite_difference_check(net39, ms, est, step=1e-5, indices=idx)
    assert rep.max_rel <= 1e-3
