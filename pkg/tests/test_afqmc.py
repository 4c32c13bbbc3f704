import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dense import annihilators, det_vector, fock_hamiltonian, string_vector
from qmcforce.afqmc import (AFQMCProtocol, EnergyIntermediates, EnergySeries, FullSpaceTrial, OverlapCollapse,
                            _lu_inverse_numba, _lu_inverse_numpy, _orthonormalize, blocking_error,
                            build_context, evaluate_trial, force_bias, init_walkers, local_energy,
                            local_energy_batch, local_energy_direct, mixed_green, propagate_step,
                            run_projection, vce_overlap)
from qmcforce.hamiltonian import ActiveSpacePartition, build_embedding, cholesky_reference
from qmcforce.oracle import fci_ground_state
from qmcforce.trial import OverlapEstimator, TrialState, determinant_overlap


def _fci_trial(ham, n_pairs):
    res = fci_ground_state(ham, n_pairs, n_pairs, tol=1e-10)
    sa, sb = res.space.strings_a, res.space.strings_b
    return TrialState.from_ci(res.vector, ham.n_orb, n_pairs, n_pairs, sa, sb), res.E0


def _full_dets(ts, n_core):
    core = (1 << n_core) - 1
    return [(d.coef, core | (d.alpha << n_core), core | (d.beta << n_core)) for d in ts.determinants]


@pytest.fixture(scope="module")
def h4_setup(h4_module):
    """H4 with a frozen lowest orbital and a CI trial over the other three."""
    ham = h4_module.ham
    part = ActiveSpacePartition.from_indices(4, 4, [1, 2, 3])
    act, _ = build_embedding(ham, part)
    rng = np.random.default_rng(3)
    ci = fci_ground_state(act, 1, 1).vector + 0.2 * rng.normal(size=(3, 3))
    ci = 0.5 * (ci + ci.T)
    from qmcforce.oracle import make_strings
    s = make_strings(3, 1)
    ts = TrialState.from_ci(ci, 3, 1, 1, s, s)
    full = FullSpaceTrial.from_trial(ts, 4, 1)
    H = fock_hamiltonian(ham.h1, ham.eri, ham.e_nuc)
    T = string_vector(_full_dets(ts, 1), 4)
    return ham, ts, full, H, T / np.linalg.norm(T), EnergyIntermediates.build(ham, full)


@pytest.fixture(scope="module")
def h4_module():
    from conftest import System
    from qmcforce.chem.geometry import linear_chain
    return System(linear_chain("H", 4, 1.5))


def _walker(rng, n=4, N=2):
    return rng.normal(size=(n, N)) + 1j * rng.normal(size=(n, N))


def test_local_energy_matches_dense_200_instances(h4_setup):
    ham, ts, full, H, T, ei = h4_setup
    rng = np.random.default_rng(11)
    worst_b = worst_d = 0.0
    for _ in range(200):
        phi = _walker(rng)
        v = det_vector(phi, phi, 4)
        ref = np.vdot(T, H @ v) / np.vdot(T, v)
        ev = evaluate_trial(full, phi[None])
        eb = local_energy_batch(full, ev, ei)[0]
        ed = local_energy_direct(full, phi, ham)
        worst_b = max(worst_b, abs(eb - ref))
        worst_d = max(worst_d, abs(ed - ref))
    assert worst_b < 1e-8
    assert worst_d < 1e-8


def test_mixed_green_and_force_bias_match_dense(h4_setup):
    ham, ts, full, H, T, _ = h4_setup
    c = annihilators(8)
    rng = np.random.default_rng(5)
    chol = cholesky_reference(ham, 1e-10).vectors
    ctx = build_context(ham, chol, full, 0.01, 0)
    for _ in range(10):
        phi = _walker(rng)
        v = det_vector(phi, phi, 4)
        ov = np.vdot(T, v)
        ref = np.zeros((4, 4), dtype=complex)
        for p in range(4):
            for q in range(4):
                for s in (0, 4):
                    ref[q, p] += np.vdot(T, c[p + s].T @ (c[q + s] @ v)) / ov
        ev = evaluate_trial(full, phi[None])
        G = mixed_green(full, ev)[0]
        np.testing.assert_allclose(G, ref, atol=1e-9)
        vb = force_bias(ctx, full, ev)[0]
        np.testing.assert_allclose(vb, np.einsum("gpq,qp->g", chol, ref), atol=1e-9)


def test_fci_trial_is_zero_variance(h4_module):
    ham = h4_module.ham
    ts, e0 = _fci_trial(ham, 2)
    full = FullSpaceTrial.from_trial(ts, 4, 0)
    rng = np.random.default_rng(2)
    # the Hartree-Fock walker is orthogonal to most strings: exercises the singular route
    assert local_energy(full, np.eye(4)[:, :2], ham).real == pytest.approx(e0, abs=1e-9)
    for _ in range(5):
        assert local_energy(full, _walker(rng), ham) == pytest.approx(e0, abs=1e-8)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), n_w=st.integers(1, 6))
def test_lu_kernels_agree(seed, n_w):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(n_w, 6, 3)) + 1j * rng.normal(size=(n_w, 6, 3))
    phi[0, :3] = 0.0  # one exactly singular string set
    strings = np.array([[0, 1, 2], [0, 3, 4], [2, 4, 5], [1, 3, 5]])
    da, ia, va = _lu_inverse_numba(phi, strings, 1e-12)
    db, ib, vb = _lu_inverse_numpy(phi, strings, 1e-12)
    np.testing.assert_array_equal(va, vb)
    np.testing.assert_allclose(da, db, atol=1e-12)
    np.testing.assert_allclose(np.where(va[..., None, None], ia, 0), np.where(vb[..., None, None], ib, 0),
                               atol=1e-9)
    assert not va[0, 0]


def test_vce_overlap_matches_brute_force_200_instances():
    rng = np.random.default_rng(8)
    n, ncore, nact = 7, 2, 3
    part = ActiveSpacePartition((0, 1), (2, 3, 4), (5, 6), 2)
    worst = 0.0
    for _ in range(200):
        ts = TrialState("upCCD", nact, 1, 1, rng.normal(size=(1, 2)))
        pa = _walker(rng, n, ncore + 1)
        pb = _walker(rng, n, ncore + 1)
        ref = 0.0j
        for d in ts.determinants:
            oa = [0, 1] + [ncore + p for p in range(nact) if d.alpha >> p & 1]
            ob = [0, 1] + [ncore + p for p in range(nact) if d.beta >> p & 1]
            ref += np.conj(d.coef) * np.linalg.det(pa[oa]) * np.linalg.det(pb[ob])
        got = vce_overlap(ts, pa, pb, part).value
        worst = max(worst, abs(got - ref) / abs(ref))
    assert worst < 1e-10


def test_vce_singular_core_flagged():
    ts = TrialState("single-determinant", 2, 1, 1)
    part = ActiveSpacePartition((0,), (1, 2), (), 2)
    phi = np.zeros((3, 2), dtype=complex)
    phi[1, 0] = phi[2, 1] = 1.0
    assert vce_overlap(ts, phi, phi, part).singular


def test_vce_stochastic_is_relative_noise(rng):
    ts = TrialState("upCCD", 3, 1, 1, np.array([[0.3, -0.2]]))
    part = ActiveSpacePartition((0,), (1, 2, 3), (), 2)
    pa = _walker(rng, 4, 2)
    ex = vce_overlap(ts, pa, pa, part)
    st_ = vce_overlap(ts, pa, pa, part, OverlapEstimator("stochastic", 9, 400), walker_id=2, step=4)
    assert st_.prefactor == pytest.approx(ex.prefactor)
    assert abs(st_.value / ex.value - 1) < 0.5


def test_orthonormalization_preserves_ratios(h4_setup):
    ham, ts, full, H, T, ei = h4_setup
    rng = np.random.default_rng(4)
    phi = np.stack([_walker(rng) * 3.0 for _ in range(5)])
    ev = evaluate_trial(full, phi)
    ens = init_walkers(5, full, phi[0])
    ens.phi, ens.ev, ens.overlaps = phi, ev, ev.overlap.copy()
    e_before = local_energy_batch(full, ev, ei)
    _orthonormalize(ens)
    ev2 = evaluate_trial(full, ens.phi)
    np.testing.assert_allclose(ens.overlaps, ev2.overlap, rtol=1e-10)
    np.testing.assert_allclose(local_energy_batch(full, ev2, ei), e_before, atol=1e-10)


def test_init_rejects_orthogonal_start(h2):
    full = FullSpaceTrial.single_determinant(2, 1)
    with pytest.raises(OverlapCollapse):
        init_walkers(3, full, np.array([[0.0], [1.0]]))


def _h2_run(h2, seed, **kw):
    chol = cholesky_reference(h2.ham, 1e-10)
    full = FullSpaceTrial.single_determinant(2, 1)
    proto = AFQMCProtocol(n_walkers=64, n_blocks=20, steps_per_block=5, dt=0.02, seed=seed, **kw)
    return run_projection(h2.ham, chol, full, proto)


def test_projection_is_deterministic(h2):
    a = _h2_run(h2, 4)
    b = _h2_run(h2, 4)
    c = _h2_run(h2, 5)
    np.testing.assert_array_equal(a.series.block_energies, b.series.block_energies)
    assert not np.array_equal(a.series.block_energies, c.series.block_energies)


def test_weights_respect_cap(h2):
    run = _h2_run(h2, 1, weight_cap=1.2)
    assert run.ensemble.weights.max() <= 1.2


def test_h2_single_determinant_energy_near_fci(h2):
    """Two electrons: the phaseless constraint with an RHF trial is nearly exact."""
    e_fci = fci_ground_state(h2.ham, 1, 1).E0
    chol = cholesky_reference(h2.ham, 1e-10)
    full = FullSpaceTrial.single_determinant(2, 1)
    proto = AFQMCProtocol(n_walkers=200, n_blocks=60, steps_per_block=10, dt=0.01, seed=2026)
    s = run_projection(h2.ham, chol, full, proto).series
    assert abs(s.mean - e_fci) < max(4 * s.stderr, 1e-3)


def test_trotter_step_matches_exact_propagator_without_noise(h2):
    """With a zero field draw the step is exp(-dt h_mf/2) exp(sqrt(dt) i y.L) exp(-dt h_mf/2) to O(dt^7)."""
    import scipy.linalg
    from qmcforce.afqmc import _apply_propagator
    chol = cholesky_reference(h2.ham, 1e-10).vectors
    full = FullSpaceTrial.single_determinant(2, 1)
    ctx = build_context(h2.ham, chol, full, 0.05, 0)
    y = np.random.default_rng(0).normal(size=(1, ctx.n_fields))
    phi = np.eye(2, dtype=complex)[None, :, :1]
    A = 1j * np.sqrt(ctx.dt) * np.einsum("g,gpq->pq", y[0], chol)
    ref = ctx.exp_h_half @ scipy.linalg.expm(A) @ ctx.exp_h_half @ phi[0]
    np.testing.assert_allclose(_apply_propagator(ctx, phi, y, 6)[0], ref, atol=1e-9)


def test_blocking_error_behaviour():
    rng = np.random.default_rng(0)
    x = rng.normal(size=4096)
    assert blocking_error(x) == pytest.approx(1 / 64, rel=0.2)
    assert blocking_error(np.full(10, 3.0)) == 0.0
    assert np.isnan(blocking_error(np.ones(1)))
    ar = np.zeros(4096)
    for i in range(1, 4096):
        ar[i] = 0.9 * ar[i - 1] + rng.normal()
    naive = ar.std(ddof=1) / 64
    assert blocking_error(ar) > 2.5 * naive


def test_energy_series_csv(tmp_path):
    s = EnergySeries(np.linspace(-1, -1.1, 10), 5, 2)
    s.write_csv(tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["block", "energy", "cumulative_mean", "stderr", "equilibration"]
    assert len(rows) == 11 and rows[1][4] == "1" and rows[3][4] == "0"
    assert s.mean == pytest.approx(np.mean(s.block_energies[2:]))


def test_protocol_metadata_lists_choices():
    meta = AFQMCProtocol().metadata()
    for key in ("force_bias", "mean_field_subtraction", "population_control", "weight_cap"):
        assert key in meta


def test_propagate_step_uses_counter_rng(h2):
    chol = cholesky_reference(h2.ham, 1e-10).vectors
    full = FullSpaceTrial.single_determinant(2, 1)
    ctx = build_context(h2.ham, chol, full, 0.02, 17)
    proto = AFQMCProtocol()
    a = propagate_step(init_walkers(8, full), ctx, full, 3, -1.1, proto)
    sub = init_walkers(8, full)
    keep = [1, 5]
    sub.phi, sub.weights, sub.overlaps = sub.phi[keep], sub.weights[keep], sub.overlaps[keep]
    sub.cos_phase, sub.ids, sub.flags = sub.cos_phase[keep], sub.ids[keep], sub.flags[keep]
    sub.ev = evaluate_trial(full, sub.phi)
    b = propagate_step(sub, ctx, full, 3, -1.1, proto)
    np.testing.assert_allclose(b.phi, a.phi[keep], atol=1e-14)
    np.testing.assert_allclose(b.weights, a.weights[keep], atol=1e-14)


def _ensemble(rng, n_w=64):
    full = FullSpaceTrial.single_determinant(4, 2)
    phi = np.stack([_walker(rng) for _ in range(n_w)])
    ens = init_walkers(n_w, full)
    ens.phi = phi
    ens.ev = evaluate_trial(full, phi)
    ens.overlaps = ens.ev.overlap.copy()
    ens.weights = rng.exponential(size=n_w)
    return ens


def test_comb_preserves_total_weight_and_ids(rng):
    from qmcforce.afqmc import comb_reconfigure
    ens = _ensemble(rng)
    total = ens.weights.sum()
    ids = ens.ids.copy()
    idx, q = comb_reconfigure(ens, 3, 0)
    assert ens.weights.sum() == pytest.approx(total)
    np.testing.assert_allclose(ens.weights, total / len(ids))
    np.testing.assert_array_equal(ens.ids, ids)
    assert np.all(np.diff(idx) >= 0)


def test_comb_is_unbiased(rng):
    """Expected copy count of each walker equals n w_i / sum(w)."""
    from qmcforce.afqmc import comb_reconfigure
    w = rng.exponential(size=16)
    counts = np.zeros(16)
    for b in range(4000):
        ens = _ensemble(np.random.default_rng(0), 16)
        ens.weights = w.copy()
        idx, _ = comb_reconfigure(ens, 1, b)
        counts += np.bincount(idx, minlength=16)
    np.testing.assert_allclose(counts / 4000, 16 * w / w.sum(), atol=0.03)


def test_comb_replay_reweights_the_other_leg(rng):
    from qmcforce.afqmc import comb_reconfigure
    a = _ensemble(rng)
    b = _ensemble(np.random.default_rng(1))
    b.phi = a.phi.copy()
    b.weights = a.weights * (1 + 1e-3 * rng.normal(size=len(a.weights)))
    wb = b.weights.copy()
    idx, q = comb_reconfigure(a, 5, 2)
    comb_reconfigure(b, 5, 2, (idx, q))
    np.testing.assert_array_equal(b.phi, a.phi)
    np.testing.assert_allclose(b.weights, wb[idx] / q)
    assert b.weights.sum() == pytest.approx(wb.sum(), rel=0.05)


def test_protocol_rejects_unknown_population_control():
    with pytest.raises(ValueError):
        AFQMCProtocol(population_control="branch")
