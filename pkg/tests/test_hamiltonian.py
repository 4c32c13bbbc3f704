import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qmcforce.hamiltonian import (ActiveSpacePartition, CholeskyBreakdown, MOHamiltonian, ReplayInvalid,
                                  build_embedding, cholesky_reference, cholesky_replay, load_pivots,
                                  read_fcidump, save_pivots, write_fcidump)
from qmcforce.chem.geometry import diatomic
from qmcforce.chem.integrals import compute_integrals
from qmcforce.scf import run_rhf
from qmcforce.hamiltonian import transform_to_mo


def test_hf_energy_from_mo_integrals(n2):
    occ = range(7)
    assert n2.ham.energy_of_determinant(occ, occ) == pytest.approx(n2.mos.e_total, abs=1e-9)


def test_fcidump_roundtrip(tmp_path, h4):
    p = tmp_path / "FCIDUMP"
    write_fcidump(p, h4.ham, 4)
    ham, hdr = read_fcidump(p)
    assert hdr["norb"] == 4 and hdr["nelec"] == 4 and hdr["ms2"] == 0
    np.testing.assert_allclose(ham.h1, h4.ham.h1, atol=1e-14)
    np.testing.assert_allclose(ham.eri, h4.ham.eri, atol=1e-14)
    assert ham.e_nuc == pytest.approx(h4.ham.e_nuc, abs=1e-14)


def test_fcidump_missing_header(tmp_path):
    p = tmp_path / "bad"
    p.write_text(" &FCI NELEC=2,\n &END\n 1.0 1 1 0 0\n")
    with pytest.raises(ValueError):
        read_fcidump(p)


@pytest.mark.parametrize("thr", [1e-4, 1e-6, 1e-8])
def test_cholesky_reconstruction(n2, thr):
    chol = cholesky_reference(n2.ham, thr)
    assert chol.max_error(n2.ham) <= thr * 1.0001
    assert chol.n_vectors <= n2.ham.n_orb * (n2.ham.n_orb + 1) // 2


def test_replay_same_hamiltonian_is_bitwise(n2):
    ref = cholesky_reference(n2.ham, 1e-8)
    rep = cholesky_replay(n2.ham, ref.pivots, 1e-8)
    assert rep.source == "replayed"
    assert np.array_equal(ref.vectors, rep.vectors)


def test_replay_at_displaced_geometry(n2):
    ref = cholesky_reference(n2.ham, 1e-8)
    g = diatomic("N", 1.2 + 1e-4)
    ints = compute_integrals(g)
    ham = transform_to_mo(ints, run_rhf(ints))
    rep = cholesky_replay(ham, ref.pivots, 1e-8)
    assert rep.n_vectors == ref.n_vectors
    assert rep.max_error(ham) < 1e-7


def test_replay_rejects_collapsed_pivot(h2):
    with pytest.raises(ReplayInvalid):
        cholesky_replay(h2.ham, [(0, 0), (0, 0)])
    with pytest.raises(ValueError):
        cholesky_replay(h2.ham, [(5, 0)])


def test_negative_diagonal_breakdown():
    eri = np.zeros((1, 1, 1, 1))
    eri[0, 0, 0, 0] = -1.0
    with pytest.raises(CholeskyBreakdown):
        cholesky_reference(MOHamiltonian(np.zeros((1, 1)), eri, 0.0))


def test_pivot_artifact_roundtrip(tmp_path, h4):
    chol = cholesky_reference(h4.ham)
    save_pivots(tmp_path / "p.json", chol)
    data = load_pivots(tmp_path / "p.json")
    assert data["pivots"] == chol.pivots and data["n_orb"] == 4


def test_embedding_reproduces_hf(n2):
    part = ActiveSpacePartition.from_counts(10, 14, 6, 6)
    act, e_core = build_embedding(n2.ham, part)
    occ = range(3)
    assert act.energy_of_determinant(occ, occ) == pytest.approx(n2.mos.e_total, abs=1e-9)
    assert e_core < 0


def test_partitions():
    p = ActiveSpacePartition.from_indices(10, 14, [4, 5, 6, 7, 8])
    assert p.core == (0, 1, 2, 3) and p.n_active_electrons == 6 and p.virtual == (9,)
    with pytest.raises(ValueError):
        ActiveSpacePartition.from_counts(10, 14, 4, 5)
    with pytest.raises(ValueError):
        ActiveSpacePartition.from_indices(10, 14, [1, 1])
    full = ActiveSpacePartition.full(4, 4)
    full.validate(4, 4)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_rotation_preserves_spectrum_invariants(seed):
    rng = np.random.default_rng(seed)
    n = 3
    a = rng.normal(size=(n, n))
    h1 = a + a.T
    L = rng.normal(size=(4, n, n))
    L = L + L.transpose(0, 2, 1)
    eri = np.einsum("gpq,grs->pqrs", L, L)
    ham = MOHamiltonian(h1, eri, 0.3)
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    rot = ham.rotated(Q)
    np.testing.assert_allclose(np.linalg.eigvalsh(rot.h1), np.linalg.eigvalsh(h1), atol=1e-10)
    np.testing.assert_allclose(np.linalg.eigvalsh(rot.eri_matrix()), np.linalg.eigvalsh(ham.eri_matrix()),
                               atol=1e-9)
    chol = cholesky_reference(ham, 1e-10)
    assert chol.max_error(ham) < 1e-9
