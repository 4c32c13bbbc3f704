import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qmcforce.afqmc import AFQMCProtocol
from qmcforce.chem.geometry import diatomic, linear_chain
from qmcforce.corrsamp import (SCAN_COLUMNS, correlation_diagnostics, execute_force, plan_correlated_run,
                               prepare_leg, prepare_reference, scan_forces, working_orbitals, write_scan)
from qmcforce.hamiltonian import ActiveSpacePartition
from qmcforce.oracle import reference_force

SMALL = AFQMCProtocol(n_walkers=32, n_blocks=12, steps_per_block=5, dt=0.02, seed=2026)


@pytest.fixture(scope="module")
def h2_sd():
    return prepare_reference(diatomic("H", 0.7414), "single-determinant")


@pytest.fixture(scope="module")
def h2_fci():
    return prepare_reference(diatomic("H", 0.7414), "fci")


def test_nonpositive_delta_rejected(h2_sd):
    for d in (0.0, -1e-4):
        with pytest.raises(ValueError):
            plan_correlated_run(h2_sd, 0, 2, d, SMALL)


def test_unknown_trial_kind():
    with pytest.raises(ValueError):
        prepare_reference(diatomic("H", 0.74), "uccsd")


def test_short_series_rejected():
    with pytest.raises(ValueError):
        correlation_diagnostics(np.zeros(3), np.zeros(3), 1e-3)
    with pytest.raises(ValueError):
        correlation_diagnostics(np.zeros(5), np.zeros(6), 1e-3)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), scale=st.floats(0.1, 10), shift=st.floats(-100, 100))
def test_diagnostics_affine_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    common = rng.normal(size=64)
    a = common + 0.1 * rng.normal(size=64)
    b = common + 0.1 * rng.normal(size=64)
    d0 = correlation_diagnostics(a, b, 1e-3)
    d1 = correlation_diagnostics(scale * a + shift, scale * b + shift, 1e-3)
    assert d1.rho == pytest.approx(d0.rho, abs=1e-9)
    assert d1.sigma_F == pytest.approx(scale * d0.sigma_F, rel=1e-9)
    # exchanging the legs changes nothing but the sign of the force
    d2 = correlation_diagnostics(b, a, 1e-3)
    assert d2.sigma_F == pytest.approx(d0.sigma_F) and d2.rho == pytest.approx(d0.rho)


def test_diagnostics_correlated_beats_independent():
    rng = np.random.default_rng(0)
    common = rng.normal(size=256)
    d = correlation_diagnostics(common + 0.01 * rng.normal(size=256), common + 0.01 * rng.normal(size=256), 1.0)
    assert d.rho > 0.99 and d.reduction > 10
    assert d.sigma_F == pytest.approx(d.sigma_F_formula, rel=0.5)


def test_zero_variance_force_matches_oracle(h2_fci):
    est = execute_force(plan_correlated_run(h2_fci, 0, 2, 1e-4, SMALL))
    ref = reference_force(h2_fci.geometry, 0, 2, 1e-4)
    assert est.value == pytest.approx(ref, abs=1e-6)
    assert est.energy_error < 1e-9


def test_force_on_mirror_atom_is_opposite(h2_fci):
    a = execute_force(plan_correlated_run(h2_fci, 0, 2, 1e-4, SMALL)).value
    b = execute_force(plan_correlated_run(h2_fci, 1, 2, 1e-4, SMALL)).value
    assert a == pytest.approx(-b, abs=1e-6)


def test_same_seed_is_bitwise_and_legs_are_correlated(h2_sd):
    p = plan_correlated_run(h2_sd, 0, 2, 1e-4, SMALL)
    a, b = execute_force(p), execute_force(p)
    assert a.value == b.value and a.sigma == b.sigma and a.energies == b.energies
    assert a.rho > 0.99
    assert a.metadata["plan"]["pivot_hash"] == h2_sd.pivot_hash()


def test_independent_seed_control_is_noisier(h2_sd):
    p = plan_correlated_run(h2_sd, 0, 2, 1e-3, SMALL)
    ctrl = plan_correlated_run(h2_sd, 0, 2, 1e-3, SMALL)
    ctrl.seed_minus = SMALL.seed + 1
    a, c = execute_force(p), execute_force(ctrl)
    assert c.sigma > 2 * a.sigma
    assert c.rho < a.rho


def test_leg_at_reference_reproduces_reference_factorization():
    ref = prepare_reference(linear_chain("H", 4, 1.5), "single-determinant")
    leg = prepare_leg(ref, ref.geometry)
    assert [tuple(p) for p in leg.chol.pivots] == ref.pivots
    from qmcforce.hamiltonian import cholesky_reference
    direct = cholesky_reference(leg.ham, ref.chol_threshold)
    assert np.array_equal(direct.vectors, leg.chol.vectors)


def test_working_orbitals_order():
    C = np.arange(16.0).reshape(4, 4)
    part = ActiveSpacePartition((0,), (1, 3), (2,), 2)
    W = working_orbitals(C, part)
    np.testing.assert_array_equal(W, C[:, [0, 1, 3, 2]])


def test_empty_scan(tmp_path):
    rows = scan_forces([], lambda g: None)
    assert rows == []
    write_scan(rows, tmp_path / "s.csv", tmp_path / "s.json")
    assert next(csv.reader(open(tmp_path / "s.csv"))) == SCAN_COLUMNS
    assert json.load(open(tmp_path / "s.json")) == []


def test_scan_records_failures_and_continues(tmp_path, h2_fci):
    def make(g):
        if g.distance(0, 1) > 2:
            raise RuntimeError("boom")
        return plan_correlated_run(prepare_reference(g, "fci"), 0, 2, 1e-4, SMALL)

    pts = [("a", 0.74, diatomic("H", 0.74)), ("b", 1.5, diatomic("H", 1.5))]
    rows = scan_forces(pts, make)
    assert rows[0].error is None and rows[1].error.startswith("RuntimeError")
    write_scan(rows, tmp_path / "s.csv", tmp_path / "s.json")
    out = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert out[1]["force_HaA"] == "nan" and float(out[0]["seed"]) == 2026
    js = json.load(open(tmp_path / "s.json"))
    assert js[0]["provenance"]["trial_hash"] == rows[0].provenance["trial_hash"]


def test_estimate_serialises(h2_sd):
    est = execute_force(plan_correlated_run(h2_sd, 0, 2, 1e-4, SMALL))
    d = json.loads(json.dumps(est.to_dict(), default=float))
    assert {"force_HaA", "force_err", "rho", "energy_Ha"} <= set(d)
    assert d["metadata"]["afqmc"]["population_control"].startswith("comb")
