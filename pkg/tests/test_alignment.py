import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import special_ortho_group

from qmcforce.alignment import AlignmentError, align_orbitals, aligned_moset, degenerate_groups
from qmcforce.chem.geometry import diatomic
from qmcforce.chem.integrals import compute_integrals
from qmcforce.scf import MOSet, run_rhf


def _half(S):
    w, v = np.linalg.eigh(S)
    return (v * np.sqrt(w)) @ v.T


def _objective(ref, C, S):
    return np.trace((_half(ref.S) @ ref.C).T @ (_half(S) @ C))


def test_groups():
    assert degenerate_groups(np.array([0.0, 1e-9, 1.0, 2.0, 2.0]), 1e-6) == [[0, 1], [2], [3, 4]]


def test_identity_alignment(n2):
    res = align_orbitals(n2.mos, n2.mos)
    np.testing.assert_allclose(res.C_aligned, n2.mos.C, atol=1e-10)
    np.testing.assert_allclose(res.diagnostics, 1.0, atol=1e-10)


def test_recovers_pi_rotation_and_signs(n2):
    C = n2.mos.C.copy()
    pi = [i for i, g in enumerate(degenerate_groups(n2.mos.eps, 1e-6)) if len(g) == 2]
    grp = degenerate_groups(n2.mos.eps, 1e-6)[pi[0]]
    th = 1.1
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    C[:, grp] = C[:, grp] @ R
    C[:, [0, 3]] *= -1
    tgt = MOSet(C, n2.mos.eps, n2.mos.n_occ, n2.mos.e_total, n2.mos.S)
    res = align_orbitals(n2.mos, tgt)
    np.testing.assert_allclose(res.C_aligned, n2.mos.C, atol=1e-9)
    assert aligned_moset(tgt, res).C is res.C_aligned


def test_displaced_geometry_alignment_is_smooth(n2):
    ints = compute_integrals(diatomic("N", 1.2001))
    tgt = run_rhf(ints)
    res = align_orbitals(n2.mos, tgt)
    assert res.diagnostics.min() > 0.999
    assert not res.warnings


def test_singular_overlap_rejected(h2):
    C = h2.mos.C.copy()
    C[:, 1] = C[:, 0]
    tgt = MOSet(C, h2.mos.eps, 1, 0.0, h2.mos.S)
    with pytest.raises(AlignmentError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        align_orbitals(h2.mos, tgt)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_alignment_is_optimal_among_group_rotations(seed, n2_module):
    """No proper rotation within the degenerate groups beats the aligned result."""
    n2 = n2_module
    rng = np.random.default_rng(seed)
    grp = [g for g in degenerate_groups(n2.mos.eps, 1e-6) if len(g) == 2][0]
    C = n2.mos.C.copy()
    C[:, grp] = C[:, grp] @ special_ortho_group.rvs(2, random_state=rng)
    tgt = MOSet(C, n2.mos.eps, n2.mos.n_occ, n2.mos.e_total, n2.mos.S)
    out = align_orbitals(n2.mos, tgt).C_aligned
    best = _objective(n2.mos, out, n2.mos.S)
    for _ in range(5):
        Q = special_ortho_group.rvs(2, random_state=rng)
        trial = out.copy()
        trial[:, grp] = trial[:, grp] @ Q
        assert _objective(n2.mos, trial, n2.mos.S) <= best + 1e-10
