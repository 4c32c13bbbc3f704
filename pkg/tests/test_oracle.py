import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dense import fock_hamiltonian, sector
from qmcforce.chem.geometry import diatomic, linear_chain
from qmcforce.hamiltonian import ActiveSpacePartition, MOHamiltonian, build_embedding
from qmcforce.oracle import (ActiveSpaceSpec, FCIDimensionError, FCIHamiltonian, FCISpace, EntropyError,
                             RDMs, compute_rdms, davidson, fci_energy, fci_ground_state, orbital_entropies,
                             reference_force)

# frozen values from an independent FCI code, STO-3G
H4_FCI = {1.0: -2.1663875, 1.5: -1.996150, 2.0: -1.8977807}
N2_FCI_12 = -107.6773398
H4_FORCE_15 = 0.1442402080


def _random_ham(rng, n):
    a = rng.normal(size=(n, n))
    L = rng.normal(size=(3, n, n))
    L = L + L.transpose(0, 2, 1)
    return MOHamiltonian(a + a.T, 0.3 * np.einsum("gpq,grs->pqrs", L, L), rng.normal())


def _explicit(H):
    sp = H.space
    M = np.zeros((sp.dim, sp.dim))
    for k in range(sp.dim):
        e = np.zeros(sp.dim)
        e[k] = 1.0
        M[:, k] = H.sigma(e.reshape(sp.shape)).ravel()
    return M


@pytest.mark.parametrize("r", sorted(H4_FCI))
def test_h4_fci_matches_frozen(r):
    _, e, _ = fci_energy(linear_chain("H", 4, r))
    assert e == pytest.approx(H4_FCI[r], abs=2e-6)


def test_n2_fci_matches_frozen():
    _, e, res = fci_energy(diatomic("N", 1.2))
    assert e == pytest.approx(N2_FCI_12, abs=2e-6)
    assert res.space.dim == 120 ** 2


def test_h4_fci_equals_dense_sector_minimum(h4):
    H = fock_hamiltonian(h4.ham.h1, h4.ham.eri, h4.ham.e_nuc)
    idx = sector(4, 2, 2)
    e_dense = np.linalg.eigvalsh(H[np.ix_(idx, idx)])[0]
    assert fci_ground_state(h4.ham, 2, 2, tol=1e-10).E0 == pytest.approx(e_dense, abs=1e-9)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), na=st.integers(0, 3), nb=st.integers(0, 3))
def test_sigma_spectrum_matches_dense(seed, na, nb):
    rng = np.random.default_rng(seed)
    ham = _random_ham(rng, 3)
    H = FCIHamiltonian(ham, FCISpace.build(3, na, nb))
    M = _explicit(H)
    np.testing.assert_allclose(M, M.T, atol=1e-10)
    np.testing.assert_allclose(np.diag(M).reshape(H.space.shape), H.diagonal(), atol=1e-10)
    D = fock_hamiltonian(ham.h1, ham.eri, ham.e_nuc)
    idx = sector(3, na, nb)
    np.testing.assert_allclose(np.linalg.eigvalsh(M), np.linalg.eigvalsh(D[np.ix_(idx, idx)]), atol=1e-9)


def test_numba_numpy_sigma_agree(rng):
    ham = _random_ham(rng, 5)
    sp = FCISpace.build(5, 2, 3)
    x = rng.normal(size=sp.shape)
    a = FCIHamiltonian(ham, sp, use_numba=True).sigma(x)
    b = FCIHamiltonian(ham, sp, use_numba=False).sigma(x)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_davidson_against_eigh(rng):
    A = rng.normal(size=(60, 60))
    A = A + A.T + np.diag(np.arange(60.0))
    w = np.linalg.eigvalsh(A)[0]
    x0 = np.zeros(60)
    x0[np.argmin(np.diag(A))] = 1
    e, v, _ = davidson(lambda x: A @ x, np.diag(A).copy(), x0, tol=1e-10)
    assert e == pytest.approx(w, abs=1e-8)
    np.testing.assert_allclose(A @ v, e * v, atol=1e-6)


def test_dimension_cap():
    with pytest.raises(FCIDimensionError):
        FCISpace.build(20, 10, 10)


def test_rdm_traces(h4):
    res = fci_ground_state(h4.ham, 2, 2)
    rd = compute_rdms(res)
    assert np.trace(rd.dm1_a) == pytest.approx(2.0)
    assert np.trace(rd.dm1_b) == pytest.approx(2.0)
    np.testing.assert_allclose(rd.dm1, rd.dm1.T, atol=1e-10)


def test_stretched_h2_entropy_is_ln2():
    _, _, res = fci_energy(diatomic("H", 10.0))
    rep = orbital_entropies(compute_rdms(res))
    np.testing.assert_allclose(rep.entropies, math.log(2), atol=1e-6)
    assert rep.candidates == [0, 1]


def test_equilibrium_h2_entropy_below_threshold(h2):
    rep = orbital_entropies(compute_rdms(fci_ground_state(h2.ham, 1, 1)))
    assert rep.candidates == []
    assert (rep.entropies >= 0).all()


def test_entropy_rejects_bad_probabilities():
    rd = RDMs(np.diag([1.2]), np.diag([0.0]), np.array([0.0]))
    with pytest.raises(EntropyError):
        orbital_entropies(rd)


def test_entropy_report_files(tmp_path, h4):
    rep = orbital_entropies(compute_rdms(fci_ground_state(h4.ham, 2, 2)))
    rep.write_csv(tmp_path / "e.csv")
    rep.write_json(tmp_path / "e.json")
    rows = (tmp_path / "e.csv").read_text().strip().splitlines()
    assert rows[0] == "orbital,entropy,threshold" and len(rows) == 5


def test_active_space_energy_above_full(n2):
    act, _ = build_embedding(n2.ham, ActiveSpacePartition.from_counts(10, 14, 6, 6))
    e_cas = fci_ground_state(act, 3, 3).E0
    assert n2.mos.e_total > e_cas > N2_FCI_12


def test_reference_force_h4():
    f = reference_force(linear_chain("H", 4, 1.5), 0, 2, 1e-4)
    assert f == pytest.approx(H4_FORCE_15, abs=1e-6)
