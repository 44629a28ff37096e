import numpy as np
import pytest

from sevuln.errors import DomainError, SEVulnError, ShapeError, ZeroEnergyError
from sevuln.estimator import estimate_state
from sevuln.measurements import synthesize_measurements
from sevuln.robustness import (
    FIXED,
    PER_CONDITION,
    SeedPolicy,
    SvdReport,
    analyze_ensemble,
    center_columns,
    cumulative_energy,
    default_factors,
    invariance_verdict,
    svd_analysis,
    sweep_operating_conditions,
)
from sevuln.sensitivity import assemble_kkt_blocks, measurement_sensitivities


def test_default_factors():
    f = default_factors()
    assert len(f) == 24 and f[0] == 0.55 and f[-1] == pytest.approx(1.15)
    assert np.all(np.diff(f) > 0)


def test_seed_policy():
    assert SeedPolicy(5).seed_for(3) == 5
    assert SeedPolicy(5, PER_CONDITION).seed_for(3) == 8
    with pytest.raises(DomainError):
        SeedPolicy(1, "bogus").seed_for(0)


def test_center_columns():
    c, m = center_columns(np.array([[1.0], [3.0]]))
    assert np.array_equal(m, [2.0]) and np.array_equal(c, [[-1.0], [1.0]])
    same, _ = center_columns(np.tile([1.0, 2.0, 3.0], (5, 1)))
    assert np.all(same == 0)
    with pytest.raises(ShapeError):
        center_columns(np.zeros((0, 3)))


def test_diagonal_energy_by_hand():
    s = svd_analysis(np.diag([3.0, 4.0]))
    assert np.allclose(s.singular_values, [4.0, 3.0])
    assert s.cumulative_energy[0] == pytest.approx(4 / 7)
    assert svd_analysis(np.diag([3.0, 4.0]), squared=True).cumulative_energy[0] == pytest.approx(16 / 25)


def test_rank_one_energy():
    rng = np.random.default_rng(0)
    m = np.outer(rng.standard_normal(8), rng.standard_normal(5))
    s = svd_analysis(m)
    assert s.cumulative_energy[0] == pytest.approx(1.0, abs=1e-12)
    assert np.all(s.singular_values[1:] <= 1e-12 * s.singular_values[0])


def test_zero_matrix_energy_undefined():
    with pytest.raises(ZeroEnergyError):
        svd_analysis(np.zeros((3, 3)))
    with pytest.raises(ZeroDivisionError):
        cumulative_energy(np.zeros(2))


def test_non_finite_rejected():
    with pytest.raises(DomainError):
        svd_analysis(np.array([[1.0, np.nan]]))


def test_svd_invariants():
    rng = np.random.default_rng(2)
    m, _ = center_columns(rng.standard_normal((12, 7)) @ rng.standard_normal((7, 9)))
    s = svd_analysis(m)
    # trace norm from the eigenvalues of M^T M
    eig = np.clip(np.linalg.eigvalsh(m.T @ m), 0, None)
    assert s.singular_values.sum() == pytest.approx(np.sqrt(eig).sum(), rel=1e-8)
    assert np.all(np.diff(s.cumulative_energy) >= 0) and s.cumulative_energy[-1] == 1.0
    errs = [
        np.linalg.norm(m - (s.u[:, :k] * s.singular_values[:k]) @ s.vt[:k])
        for k in range(len(s.singular_values) + 1)
    ]
    assert np.all(np.diff(errs) <= 1e-10) and errs[-1] <= 1e-8
    perm = rng.permutation(m.shape[0])
    assert np.allclose(svd_analysis(m[perm]).singular_values, s.singular_values, atol=1e-10)


def test_random_gaussian_is_not_invariant():
    rng = np.random.default_rng(11)
    m, _ = center_columns(rng.standard_normal((24, 10)))
    s = svd_analysis(m)
    rep = SvdReport(s.singular_values, s.singular_values, s.cumulative_energy, s.cumulative_energy,
                    np.zeros(10), np.zeros(10))
    assert not invariance_verdict(rep, 1, 0.95)["invariant"]
    assert invariance_verdict(rep, 10, 1.0)["invariant"]
    with pytest.raises(DomainError):
        invariance_verdict(rep, 0)


def test_single_factor_ensemble_matches_direct_run(net4, cfg4):
    ens = sweep_operating_conditions(net4, cfg4, [1.0])
    ms = synthesize_measurements(net4, cfg4, 1.0, seed=1)
    est = estimate_state(net4, ms)
    sens = measurement_sensitivities(assemble_kkt_blocks(net4, ms, est))
    assert ens.t == 1
    assert np.array_equal(ens.x_matrix[0], sens.dx_dz.ravel(order="F"))
    assert np.array_equal(ens.j_matrix[0], sens.dJ_dz)
    var, meas = ens.column_index(17)
    assert ens.x_matrix[0, 17] == sens.dx_dz[var, meas]
    with pytest.raises(ShapeError):
        ens.column_index(ens.n * ens.p)


@pytest.fixture(scope="module")
def ens4(net4, cfg4):
    return sweep_operating_conditions(net4, cfg4, default_factors())


def test_sweep_shapes_and_centering(ens4):
    assert ens4.x_matrix.shape == (24, 150) and ens4.j_matrix.shape == (24, 10)
    xc, _ = center_columns(ens4.x_matrix)
    assert np.max(np.abs(xc.mean(axis=0))) <= 1e-12


def test_sweep_is_deterministic(net4, cfg4, ens4):
    again = sweep_operating_conditions(net4, cfg4, default_factors())
    assert np.array_equal(again.x_matrix, ens4.x_matrix)
    assert np.array_equal(again.j_matrix, ens4.j_matrix)


def test_parallel_sweep_matches_serial(net4, cfg4, ens4):
    par = sweep_operating_conditions(net4, cfg4, default_factors(), jobs=2)
    assert np.array_equal(par.x_matrix, ens4.x_matrix)


def test_failed_conditions_recorded(net4, cfg4):
    ens = sweep_operating_conditions(net4, cfg4, [0.9, 1.0, 40.0])
    assert ens.t == 2 and 40.0 in ens.failures
    with pytest.raises(SEVulnError):
        sweep_operating_conditions(net4, cfg4, [40.0, 50.0])


def test_energy_report(ens4):
    rep = analyze_ensemble(ens4)
    assert np.all(np.diff(rep.singular_values_x) <= 0)
    v = invariance_verdict(rep, 1, 0.8)
    assert set(v) >= {"ce_x", "ce_j", "invariant"}
    assert rep.cumulative_energy_j[-1] == 1.0
