"""McMurchie-Davidson integrals over contracted Cartesian s/p Gaussians.

Two interchangeable back ends:

* numba kernels that build Hermite tables per primitive pair/quartet, with a
  series/asymptotic Boys function;
* a numpy path vectorised over primitives, using the recursive Hermite
  expansion and ``scipy.special.hyp1f1`` for the Boys function.

``QMCF_DISABLE_NUMBA=1`` (or ``use_numba=False``) selects the second.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import hyp1f1

from .._accel import USE_NUMBA, njit
from .basis import BasisSet, build_basis
from .geometry import Geometry

log = logging.getLogger(__name__)

TWO_PI_52 = 2.0 * math.pi ** 2.5


@dataclass(frozen=True)
class IntegralSet:
    """AO integrals. ``eri`` is the dense chemists'-notation tensor (pq|rs)."""

    S: np.ndarray
    T: np.ndarray
    V: np.ndarray
    eri: np.ndarray
    e_nuc: float
    geometry: Geometry
    basis: BasisSet

    @property
    def hcore(self) -> np.ndarray:
        return self.T + self.V

    @property
    def nbf(self) -> int:
        return self.S.shape[0]


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit
def boys_kernel(nmax, t, out):
    """Fill out[0..nmax] with F_n(t)."""
    if t < 1e-14:
        for n in range(nmax + 1):
            out[n] = 1.0 / (2 * n + 1)
        return
    expt = math.exp(-t)
    if t > 45.0:
        out[0] = 0.5 * math.sqrt(math.pi / t)
        for n in range(nmax):
            out[n + 1] = ((2 * n + 1) * out[n] - expt) / (2.0 * t)
        return
    term = 1.0 / (2 * nmax + 1)
    s = term
    k = 0
    while True:
        k += 1
        term *= 2.0 * t / (2 * nmax + 2 * k + 1)
        s += term
        if term < 1e-17 * s or k > 500:
            break
    out[nmax] = expt * s
    for n in range(nmax - 1, -1, -1):
        out[n] = (2.0 * t * out[n + 1] + expt) / (2 * n + 1)


@njit
def _hermite_e_table(imax, jmax, a, b, xab, out):
    """out[i, j, t] = E^{ij}_t for i<=imax, j<=jmax; last axis must hold imax+jmax+2."""
    p = a + b
    mu = a * b / p
    xpa = -b / p * xab
    xpb = a / p * xab
    out[:] = 0.0
    out[0, 0, 0] = math.exp(-mu * xab * xab)
    for i in range(imax):
        for t in range(i + 2):
            v = xpa * out[i, 0, t] + (t + 1) * out[i, 0, t + 1]
            if t > 0:
                v += out[i, 0, t - 1] / (2.0 * p)
            out[i + 1, 0, t] = v
    for j in range(jmax):
        for i in range(imax + 1):
            for t in range(i + j + 2):
                v = xpb * out[i, j, t] + (t + 1) * out[i, j, t + 1]
                if t > 0:
                    v += out[i, j, t - 1] / (2.0 * p)
                out[i, j + 1, t] = v


@njit
def _hermite_r_table(lmax, p, x, y, z, fbuf, r):
    """r[n, t, u, v] auxiliary Hermite Coulomb integrals for t+u+v+n <= lmax."""
    boys_kernel(lmax, p * (x * x + y * y + z * z), fbuf)
    fac = 1.0
    for n in range(lmax + 1):
        r[n, 0, 0, 0] = fac * fbuf[n]
        fac *= -2.0 * p
    for tot in range(1, lmax + 1):
        for n in range(lmax - tot + 1):
            for t in range(tot + 1):
                for u in range(tot - t + 1):
                    v = tot - t - u
                    if t > 0:
                        val = x * r[n + 1, t - 1, u, v]
                        if t > 1:
                            val += (t - 1) * r[n + 1, t - 2, u, v]
                    elif u > 0:
                        val = y * r[n + 1, t, u - 1, v]
                        if u > 1:
                            val += (u - 1) * r[n + 1, t, u - 2, v]
                    else:
                        val = z * r[n + 1, t, u, v - 1]
                        if v > 1:
                            val += (v - 1) * r[n + 1, t, u, v - 2]
                    r[n, t, u, v] = val


@njit
def _one_electron_numba(centers, lmn, exps, coefs, nprim, charges, nuclei):
    nbf = centers.shape[0]
    natm = charges.shape[0]
    S = np.zeros((nbf, nbf))
    T = np.zeros((nbf, nbf))
    V = np.zeros((nbf, nbf))
    etab = np.zeros((3, 2, 4, 6))
    fbuf = np.zeros(3)
    rtab = np.zeros((3, 3, 3, 3))
    for mu in range(nbf):
        for nu in range(mu + 1):
            s_acc = 0.0
            t_acc = 0.0
            v_acc = 0.0
            for ka in range(nprim[mu]):
                a = exps[mu, ka]
                for kb in range(nprim[nu]):
                    b = exps[nu, kb]
                    p = a + b
                    cc = coefs[mu, ka] * coefs[nu, kb]
                    for d in range(3):
                        _hermite_e_table(lmn[mu, d], lmn[nu, d] + 2, a, b,
                                         centers[mu, d] - centers[nu, d], etab[d])
                    sp = math.sqrt(math.pi / p)
                    s1 = np.zeros(3)
                    k1 = np.zeros(3)
                    for d in range(3):
                        i = lmn[mu, d]
                        j = lmn[nu, d]
                        s1[d] = etab[d, i, j, 0] * sp
                        kin = -2.0 * b * b * etab[d, i, j + 2, 0] * sp + b * (2 * j + 1) * s1[d]
                        if j >= 2:
                            kin -= 0.5 * j * (j - 1) * etab[d, i, j - 2, 0] * sp
                        k1[d] = kin
                    s_acc += cc * s1[0] * s1[1] * s1[2]
                    t_acc += cc * (k1[0] * s1[1] * s1[2] + s1[0] * k1[1] * s1[2]
                                   + s1[0] * s1[1] * k1[2])
                    px = (a * centers[mu, 0] + b * centers[nu, 0]) / p
                    py = (a * centers[mu, 1] + b * centers[nu, 1]) / p
                    pz = (a * centers[mu, 2] + b * centers[nu, 2]) / p
                    lx = lmn[mu, 0] + lmn[nu, 0]
                    ly = lmn[mu, 1] + lmn[nu, 1]
                    lz = lmn[mu, 2] + lmn[nu, 2]
                    ltot = lx + ly + lz
                    for c in range(natm):
                        _hermite_r_table(ltot, p, px - nuclei[c, 0], py - nuclei[c, 1],
                                         pz - nuclei[c, 2], fbuf, rtab)
                        acc = 0.0
                        for t in range(lx + 1):
                            ex = etab[0, lmn[mu, 0], lmn[nu, 0], t]
                            for u in range(ly + 1):
                                ey = etab[1, lmn[mu, 1], lmn[nu, 1], u]
                                for v in range(lz + 1):
                                    acc += ex * ey * etab[2, lmn[mu, 2], lmn[nu, 2], v] * rtab[0, t, u, v]
                        v_acc -= cc * charges[c] * 2.0 * math.pi / p * acc
            S[mu, nu] = S[nu, mu] = s_acc
            T[mu, nu] = T[nu, mu] = t_acc
            V[mu, nu] = V[nu, mu] = v_acc
    return S, T, V


@njit
def _pair_data(centers, lmn, exps, coefs, nprim):
    nbf = centers.shape[0]
    npair = nbf * (nbf + 1) // 2
    kk = exps.shape[1] * exps.shape[1]
    pidx = np.zeros((npair, 2), dtype=np.int64)
    pn = np.zeros(npair, dtype=np.int64)
    pp = np.zeros((npair, kk))
    pc = np.zeros((npair, kk))
    pP = np.zeros((npair, kk, 3))
    pE = np.zeros((npair, kk, 3, 3))
    pl = np.zeros((npair, 3), dtype=np.int64)
    etab = np.zeros((2, 2, 4))
    ij = 0
    for mu in range(nbf):
        for nu in range(mu + 1):
            pidx[ij, 0] = mu
            pidx[ij, 1] = nu
            for d in range(3):
                pl[ij, d] = lmn[mu, d] + lmn[nu, d]
            k = 0
            for ka in range(nprim[mu]):
                a = exps[mu, ka]
                for kb in range(nprim[nu]):
                    b = exps[nu, kb]
                    p = a + b
                    pp[ij, k] = p
                    pc[ij, k] = coefs[mu, ka] * coefs[nu, kb]
                    for d in range(3):
                        pP[ij, k, d] = (a * centers[mu, d] + b * centers[nu, d]) / p
                        _hermite_e_table(lmn[mu, d], lmn[nu, d], a, b,
                                         centers[mu, d] - centers[nu, d], etab)
                        for t in range(3):
                            pE[ij, k, d, t] = etab[lmn[mu, d], lmn[nu, d], t]
                    k += 1
            pn[ij] = k
            ij += 1
    return pidx, pn, pp, pc, pP, pE, pl


@njit
def _eri_numba(centers, lmn, exps, coefs, nprim):
    nbf = centers.shape[0]
    pidx, pn, pp, pc, pP, pE, pl = _pair_data(centers, lmn, exps, coefs, nprim)
    npair = pidx.shape[0]
    eri = np.zeros((nbf, nbf, nbf, nbf))
    fbuf = np.zeros(5)
    rtab = np.zeros((5, 5, 5, 5))
    for ij in range(npair):
        for kl in range(ij + 1):
            lx1, ly1, lz1 = pl[ij, 0], pl[ij, 1], pl[ij, 2]
            lx2, ly2, lz2 = pl[kl, 0], pl[kl, 1], pl[kl, 2]
            ltot = lx1 + ly1 + lz1 + lx2 + ly2 + lz2
            acc = 0.0
            for a in range(pn[ij]):
                p = pp[ij, a]
                for b in range(pn[kl]):
                    q = pp[kl, b]
                    alpha = p * q / (p + q)
                    _hermite_r_table(ltot, alpha, pP[ij, a, 0] - pP[kl, b, 0],
                                     pP[ij, a, 1] - pP[kl, b, 1], pP[ij, a, 2] - pP[kl, b, 2],
                                     fbuf, rtab)
                    s = 0.0
                    for t in range(lx1 + 1):
                        for u in range(ly1 + 1):
                            for v in range(lz1 + 1):
                                e1 = pE[ij, a, 0, t] * pE[ij, a, 1, u] * pE[ij, a, 2, v]
                                if e1 == 0.0:
                                    continue
                                inner = 0.0
                                for tau in range(lx2 + 1):
                                    for nu_ in range(ly2 + 1):
                                        for phi in range(lz2 + 1):
                                            e2 = pE[kl, b, 0, tau] * pE[kl, b, 1, nu_] * pE[kl, b, 2, phi]
                                            sign = 1.0 - 2.0 * ((tau + nu_ + phi) % 2)
                                            inner += sign * e2 * rtab[0, t + tau, u + nu_, v + phi]
                                s += e1 * inner
                    acc += pc[ij, a] * pc[kl, b] * TWO_PI_52 / (p * q * math.sqrt(p + q)) * s
            m, n = pidx[ij, 0], pidx[ij, 1]
            r, q_ = pidx[kl, 0], pidx[kl, 1]
            eri[m, n, r, q_] = acc
            eri[n, m, r, q_] = acc
            eri[m, n, q_, r] = acc
            eri[n, m, q_, r] = acc
            eri[r, q_, m, n] = acc
            eri[q_, r, m, n] = acc
            eri[r, q_, n, m] = acc
            eri[q_, r, n, m] = acc
    return eri


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def boys_numpy(n: int, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return hyp1f1(n + 0.5, n + 1.5, -t) / (2.0 * n + 1.0)


def _hermite_e(i, j, t, qx, a, b):
    """Recursive E^{ij}_t, vectorised over primitive arrays."""
    p = a + b
    q = a * b / p
    if t < 0 or t > i + j:
        return np.zeros(np.broadcast(a, b).shape)
    if i == j == t == 0:
        return np.exp(-q * qx * qx)
    if j == 0:
        return (_hermite_e(i - 1, j, t - 1, qx, a, b) / (2 * p)
                - q * qx / a * _hermite_e(i - 1, j, t, qx, a, b)
                + (t + 1) * _hermite_e(i - 1, j, t + 1, qx, a, b))
    return (_hermite_e(i, j - 1, t - 1, qx, a, b) / (2 * p)
            + q * qx / b * _hermite_e(i, j - 1, t, qx, a, b)
            + (t + 1) * _hermite_e(i, j - 1, t + 1, qx, a, b))


def _hermite_r_numpy(p, pcx, pcy, pcz):
    """Closure computing R^0_{tuv} over primitive arrays with memoisation."""
    tt = p * (pcx * pcx + pcy * pcy + pcz * pcz)

    @lru_cache(maxsize=None)
    def r(t, u, v, n):
        if t == u == v == 0:
            return (-2 * p) ** n * boys_numpy(n, tt)
        if t == u == 0:
            val = pcz * r(t, u, v - 1, n + 1)
            if v > 1:
                val = val + (v - 1) * r(t, u, v - 2, n + 1)
            return val
        if t == 0:
            val = pcy * r(t, u - 1, v, n + 1)
            if u > 1:
                val = val + (u - 1) * r(t, u - 2, v, n + 1)
            return val
        val = pcx * r(t - 1, u, v, n + 1)
        if t > 1:
            val = val + (t - 1) * r(t - 2, u, v, n + 1)
        return val

    return r


def _prims(bf):
    return np.asarray(bf.exponents, float), np.asarray(bf.coefs, float)


def _one_electron_numpy(basis: BasisSet, geom: Geometry):
    fns = basis.functions
    nbf = len(fns)
    S = np.zeros((nbf, nbf))
    T = np.zeros((nbf, nbf))
    V = np.zeros((nbf, nbf))
    for mu in range(nbf):
        fa = fns[mu]
        ea, ca = _prims(fa)
        for nu in range(mu + 1):
            fb = fns[nu]
            eb, cb = _prims(fb)
            a = ea[:, None]
            b = eb[None, :]
            p = a + b
            cc = ca[:, None] * cb[None, :]
            ab = fa.center - fb.center
            sp = np.sqrt(np.pi / p)
            s1 = []
            k1 = []
            for d in range(3):
                i, j = fa.lmn[d], fb.lmn[d]
                sd = _hermite_e(i, j, 0, ab[d], a, b) * sp
                kd = (-2 * b * b * _hermite_e(i, j + 2, 0, ab[d], a, b) * sp
                      + b * (2 * j + 1) * sd)
                if j >= 2:
                    kd = kd - 0.5 * j * (j - 1) * _hermite_e(i, j - 2, 0, ab[d], a, b) * sp
                s1.append(sd)
                k1.append(kd)
            S[mu, nu] = S[nu, mu] = np.sum(cc * s1[0] * s1[1] * s1[2])
            T[mu, nu] = T[nu, mu] = np.sum(cc * (k1[0] * s1[1] * s1[2] + s1[0] * k1[1] * s1[2]
                                                 + s1[0] * s1[1] * k1[2]))
            P = (a[..., None] * fa.center + b[..., None] * fb.center) / p[..., None]
            lx, ly, lz = (fa.lmn[d] + fb.lmn[d] for d in range(3))
            ex = [_hermite_e(fa.lmn[0], fb.lmn[0], t, ab[0], a, b) for t in range(lx + 1)]
            ey = [_hermite_e(fa.lmn[1], fb.lmn[1], u, ab[1], a, b) for u in range(ly + 1)]
            ez = [_hermite_e(fa.lmn[2], fb.lmn[2], v, ab[2], a, b) for v in range(lz + 1)]
            vsum = 0.0
            for z, c in zip(geom.charges, geom.coords):
                pc = P - c
                r = _hermite_r_numpy(p, pc[..., 0], pc[..., 1], pc[..., 2])
                acc = 0.0
                for t in range(lx + 1):
                    for u in range(ly + 1):
                        for v in range(lz + 1):
                            acc = acc + ex[t] * ey[u] * ez[v] * r(t, u, v, 0)
                vsum -= z * np.sum(cc * 2 * np.pi / p * acc)
            V[mu, nu] = V[nu, mu] = vsum
    return S, T, V


def _eri_numpy(basis: BasisSet):
    fns = basis.functions
    nbf = len(fns)
    pairs = []
    for mu in range(nbf):
        for nu in range(mu + 1):
            fa, fb = fns[mu], fns[nu]
            ea, ca = _prims(fa)
            eb, cb = _prims(fb)
            a = np.repeat(ea, len(eb))
            b = np.tile(eb, len(ea))
            c = np.repeat(ca, len(cb)) * np.tile(cb, len(ca))
            p = a + b
            P = (a[:, None] * fa.center + b[:, None] * fb.center) / p[:, None]
            ab = fa.center - fb.center
            lsum = tuple(fa.lmn[d] + fb.lmn[d] for d in range(3))
            E = [[_hermite_e(fa.lmn[d], fb.lmn[d], t, ab[d], a, b) for t in range(lsum[d] + 1)]
                 for d in range(3)]
            pairs.append((mu, nu, p, c, P, E, lsum))
    eri = np.zeros((nbf, nbf, nbf, nbf))
    for ij, (m, n, p, c1, P1, E1, l1) in enumerate(pairs):
        for kl in range(ij + 1):
            r_, s_, q, c2, P2, E2, l2 = pairs[kl]
            pg = p[:, None]
            qg = q[None, :]
            alpha = pg * qg / (pg + qg)
            pq = P1[:, None, :] - P2[None, :, :]
            rfun = _hermite_r_numpy(alpha, pq[..., 0], pq[..., 1], pq[..., 2])
            total = 0.0
            for t in range(l1[0] + 1):
                for u in range(l1[1] + 1):
                    for v in range(l1[2] + 1):
                        e1 = (E1[0][t] * E1[1][u] * E1[2][v])[:, None]
                        for tau in range(l2[0] + 1):
                            for nu_ in range(l2[1] + 1):
                                for phi in range(l2[2] + 1):
                                    e2 = (E2[0][tau] * E2[1][nu_] * E2[2][phi])[None, :]
                                    sign = -1.0 if (tau + nu_ + phi) % 2 else 1.0
                                    total = total + sign * e1 * e2 * rfun(t + tau, u + nu_, v + phi, 0)
            pref = TWO_PI_52 / (pg * qg * np.sqrt(pg + qg))
            val = float(np.sum(c1[:, None] * c2[None, :] * pref * total))
            for (w, x, y, z) in ((m, n, r_, s_), (n, m, r_, s_), (m, n, s_, r_), (n, m, s_, r_),
                                 (r_, s_, m, n), (s_, r_, m, n), (r_, s_, n, m), (s_, r_, n, m)):
                eri[w, x, y, z] = val
    return eri


# ---------------------------------------------------------------------------


def compute_integrals(geom: Geometry, basis: BasisSet | None = None,
                      use_numba: bool | None = None) -> IntegralSet:
    """Overlap, kinetic, nuclear-attraction and two-electron integrals."""
    if basis is None:
        basis = build_basis(geom)
    fast = USE_NUMBA if use_numba is None else use_numba
    if fast:
        centers, lmn, exps, coefs, nprim = basis.packed()
        charges = np.asarray(geom.charges, dtype=float)
        S, T, V = _one_electron_numba(centers, lmn, exps, coefs, nprim, charges,
                                      np.ascontiguousarray(geom.coords))
        eri = _eri_numba(centers, lmn, exps, coefs, nprim)
    else:
        S, T, V = _one_electron_numpy(basis, geom)
        eri = _eri_numpy(basis)
    smin = np.linalg.eigvalsh(S).min()
    if smin < 1e-8:
        log.warning("near linear dependence in AO basis: smallest overlap eigenvalue %.3e", smin)
    return IntegralSet(S, T, V, eri, geom.nuclear_repulsion(), geom, basis)
