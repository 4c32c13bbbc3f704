import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from qmcforce.chem.basis import BasisError, build_basis
from qmcforce.chem.geometry import (ANGSTROM_TO_BOHR, Geometry, GeometryError, co2, diatomic, displace,
                                    linear_chain, parse_xyz)
from qmcforce.chem.integrals import boys_numpy, compute_integrals


def test_parse_xyz_roundtrip():
    g = linear_chain("H", 3, 0.9)
    back = parse_xyz(g.to_xyz("chain"))
    assert back.symbols == g.symbols
    np.testing.assert_allclose(back.coords, g.coords, atol=1e-10)


def test_unit_constant():
    assert ANGSTROM_TO_BOHR == pytest.approx(1.8897259886, abs=1e-10)


def test_coincident_atoms_rejected():
    with pytest.raises(GeometryError):
        Geometry.from_atoms([("H", (0, 0, 0)), ("H", (0, 0, 0))])


def test_unknown_element_rejected():
    with pytest.raises(GeometryError):
        parse_xyz("1\n\nXx 0 0 0")


def test_displace_moves_one_coordinate():
    g = diatomic("N", 1.2)
    d = displace(g, 1, 2, 1e-3)
    delta = d.coords - g.coords
    assert delta[1, 2] == pytest.approx(1e-3 * ANGSTROM_TO_BOHR)
    assert np.count_nonzero(delta) == 1
    with pytest.raises(IndexError):
        displace(g, 2, 0, 0.1)


def test_co2_is_linear_and_symmetric():
    g = co2(1.16)
    assert g.symbols == ("O", "C", "O")
    assert g.distance(0, 1) == pytest.approx(g.distance(1, 2))


def test_basis_sizes():
    assert build_basis(diatomic("N", 1.1)).nbf == 10
    assert build_basis(co2(1.2)).nbf == 15
    with pytest.raises(BasisError):
        build_basis(diatomic("H", 1.0), "cc-pvdz")


def test_boys_small_and_large():
    # F_0(t) = sqrt(pi/t) erf(sqrt t) / 2
    for t in (1e-3, 0.5, 3.0, 30.0):
        ref = 0.5 * math.sqrt(math.pi / t) * math.erf(math.sqrt(t))
        assert boys_numpy(0, t) == pytest.approx(ref, rel=1e-12)


def test_overlap_against_quadrature():
    """H2 s-s overlap from direct numerical integration of the contracted functions."""
    g = diatomic("H", 0.7414)
    basis = build_basis(g)
    ints = compute_integrals(g)
    R = g.distance(0, 1)
    bf = basis.functions[0]

    def radial(r2):
        return sum(c * np.exp(-a * r2) for a, c in zip(bf.exponents, bf.coefs))

    def integrand(z, rho):
        r2a = rho ** 2 + z ** 2
        r2b = rho ** 2 + (z - R) ** 2
        return 2 * math.pi * rho * radial(r2a) * radial(r2b)

    val, _ = integrate.dblquad(integrand, 0, 12, -12, 12 + R, epsabs=1e-11)
    assert ints.S[0, 1] == pytest.approx(val, abs=1e-8)
    assert ints.S[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_numba_and_numpy_agree():
    g = diatomic("N", 1.3)
    a = compute_integrals(g, use_numba=True)
    b = compute_integrals(g, use_numba=False)
    for name in ("S", "T", "V", "eri"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=1e-10)


def test_nuclear_repulsion():
    g = diatomic("N", 1.2)
    assert compute_integrals(g).e_nuc == pytest.approx(49.0 / (1.2 * ANGSTROM_TO_BOHR), rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(r=st.floats(0.5, 3.0), theta=st.floats(0, math.pi), phi=st.floats(0, 2 * math.pi))
def test_integrals_rotation_invariant(r, theta, phi):
    g = Geometry.from_atoms([("H", (0, 0, 0)), ("Li", (0, 0, r))])
    axis = np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    Rm = np.eye(3) + math.sin(0.7) * K + (1 - math.cos(0.7)) * K @ K
    a = compute_integrals(g)
    b = compute_integrals(g.rotated(Rm))
    # s-s block and the trace of every block are rotation invariant
    assert a.S[0, 0] == pytest.approx(b.S[0, 0])
    assert np.trace(a.hcore) == pytest.approx(np.trace(b.hcore), abs=1e-9)
    assert np.einsum("ppqq->", a.eri) == pytest.approx(np.einsum("ppqq->", b.eri), abs=1e-9)
    assert a.e_nuc == pytest.approx(b.e_nuc)


@settings(max_examples=10, deadline=None)
@given(r=st.floats(0.4, 4.0))
def test_overlap_positive_definite_and_eri_symmetric(r):
    ints = compute_integrals(linear_chain("H", 3, r))
    assert np.linalg.eigvalsh(ints.S).min() > 0
    e = ints.eri
    np.testing.assert_allclose(e, e.transpose(1, 0, 2, 3), atol=1e-12)
    np.testing.assert_allclose(e, e.transpose(2, 3, 0, 1), atol=1e-12)
