"""Exact diagonalisation in the determinant basis, reduced density matrices and orbital entropies."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import USE_NUMBA, njit
from .chem.geometry import Geometry, displace
from .chem.integrals import compute_integrals
from .hamiltonian import ActiveSpacePartition, MOHamiltonian, build_embedding, transform_to_mo
from .scf import SCFOptions, run_rhf

log = logging.getLogger(__name__)

DIMENSION_CAP = 4_000_000
ENTROPY_THRESHOLD = 0.1 * math.log(4.0)


class FCIDimensionError(ValueError):
    pass


class DavidsonError(RuntimeError):
    pass


class EntropyError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Strings and excitation tables
# ---------------------------------------------------------------------------


def make_strings(n_orb: int, n_el: int) -> np.ndarray:
    """Occupation bitstrings (bit p set = orbital p occupied) in increasing order."""
    out = [sum(1 << p for p in occ) for occ in itertools.combinations(range(n_orb), n_el)]
    return np.array(sorted(out), dtype=np.int64)


def string_occupations(strings: np.ndarray, n_orb: int) -> np.ndarray:
    return ((strings[:, None] >> np.arange(n_orb)[None, :]) & 1).astype(np.float64)


def link_table(strings: np.ndarray, n_orb: int) -> np.ndarray:
    """Rows (ai, I, J, sign) with a_a^dag a_i |I> = sign |J>, including a == i.

    ``ai`` is the composite index a * n_orb + i.
    """
    index = {int(s): k for k, s in enumerate(strings)}
    rows = []
    for I, s in enumerate(strings):
        s = int(s)
        occ = [p for p in range(n_orb) if s >> p & 1]
        vir = [p for p in range(n_orb) if not s >> p & 1]
        for i in occ:
            rows.append((i * n_orb + i, I, I, 1))
            for a in vir:
                lo, hi = min(a, i), max(a, i)
                between = bin(s & ((1 << hi) - 1) & ~((1 << (lo + 1)) - 1)).count("1")
                t = s ^ (1 << i) ^ (1 << a)
                rows.append((a * n_orb + i, I, index[t], -1 if between % 2 else 1))
    if not rows:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array(rows, dtype=np.int64)


# ---------------------------------------------------------------------------
# Sigma kernels
# ---------------------------------------------------------------------------


@njit
def _apply_e_numba(C, link_a, link_b, n2):
    na, nb = C.shape
    D = np.zeros((n2, na, nb))
    for k in range(link_a.shape[0]):
        ai, I, J, sg = link_a[k, 0], link_a[k, 1], link_a[k, 2], link_a[k, 3]
        for ib in range(nb):
            D[ai, J, ib] += sg * C[I, ib]
    for k in range(link_b.shape[0]):
        ai, I, J, sg = link_b[k, 0], link_b[k, 1], link_b[k, 2], link_b[k, 3]
        for ia in range(na):
            D[ai, ia, J] += sg * C[ia, I]
    return D


@njit
def _gather_e_numba(G, link_a, link_b, na, nb):
    sigma = np.zeros((na, nb))
    for k in range(link_a.shape[0]):
        ai, I, J, sg = link_a[k, 0], link_a[k, 1], link_a[k, 2], link_a[k, 3]
        for ib in range(nb):
            sigma[J, ib] += sg * G[ai, I, ib]
    for k in range(link_b.shape[0]):
        ai, I, J, sg = link_b[k, 0], link_b[k, 1], link_b[k, 2], link_b[k, 3]
        for ia in range(na):
            sigma[ia, J] += sg * G[ai, ia, I]
    return sigma


def _apply_e_numpy(C, link_a, link_b, n2):
    na, nb = C.shape
    D = np.zeros((n2, na, nb))
    if len(link_a):
        np.add.at(D, (link_a[:, 0], link_a[:, 2]), link_a[:, 3, None] * C[link_a[:, 1]])
    if len(link_b):
        Dt = np.zeros((n2, nb, na))
        np.add.at(Dt, (link_b[:, 0], link_b[:, 2]), link_b[:, 3, None] * C.T[link_b[:, 1]])
        D += Dt.transpose(0, 2, 1)
    return D


def _gather_e_numpy(G, link_a, link_b, na, nb):
    sigma = np.zeros((na, nb))
    if len(link_a):
        np.add.at(sigma, link_a[:, 2], link_a[:, 3, None] * G[link_a[:, 0], link_a[:, 1]])
    if len(link_b):
        Gt = G.transpose(0, 2, 1)
        st = np.zeros((nb, na))
        np.add.at(st, link_b[:, 2], link_b[:, 3, None] * Gt[link_b[:, 0], link_b[:, 1]])
        sigma += st.T
    return sigma


@dataclass
class FCISpace:
    n_orb: int
    n_alpha: int
    n_beta: int
    strings_a: np.ndarray
    strings_b: np.ndarray
    link_a: np.ndarray
    link_b: np.ndarray

    @classmethod
    def build(cls, n_orb: int, n_alpha: int, n_beta: int, cap: int = DIMENSION_CAP) -> "FCISpace":
        dim = math.comb(n_orb, n_alpha) * math.comb(n_orb, n_beta)
        if dim > cap:
            raise FCIDimensionError(f"determinant space {dim} exceeds the cap {cap}")
        sa = make_strings(n_orb, n_alpha)
        sb = make_strings(n_orb, n_beta)
        return cls(n_orb, n_alpha, n_beta, sa, sb, link_table(sa, n_orb), link_table(sb, n_orb))

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.strings_a), len(self.strings_b)

    @property
    def dim(self) -> int:
        return self.shape[0] * self.shape[1]


class FCIHamiltonian:
    """Matrix-free H acting on CI vectors shaped (n_alpha_strings, n_beta_strings)."""

    def __init__(self, ham: MOHamiltonian, space: FCISpace, use_numba: bool | None = None):
        self.ham = ham
        self.space = space
        n = ham.n_orb
        self.use_numba = USE_NUMBA if use_numba is None else use_numba
        self.h_mod = ham.h1 - 0.5 * np.einsum("prrq->pq", ham.eri)
        self.v_mat = 0.5 * ham.eri.reshape(n * n, n * n)
        self._diag = None

    def sigma(self, C: np.ndarray) -> np.ndarray:
        sp = self.space
        n2 = sp.n_orb ** 2
        C = np.ascontiguousarray(C.reshape(sp.shape))
        if self.use_numba:
            D = _apply_e_numba(C, sp.link_a, sp.link_b, n2)
        else:
            D = _apply_e_numpy(C, sp.link_a, sp.link_b, n2)
        G = (self.v_mat @ D.reshape(n2, -1)).reshape(D.shape)
        G += self.h_mod.reshape(n2, 1, 1) * C[None]
        if self.use_numba:
            out = _gather_e_numba(G, sp.link_a, sp.link_b, *sp.shape)
        else:
            out = _gather_e_numpy(G, sp.link_a, sp.link_b, *sp.shape)
        return out + self.ham.e_nuc * C

    def diagonal(self) -> np.ndarray:
        if self._diag is None:
            sp = self.space
            n = sp.n_orb
            oa = string_occupations(sp.strings_a, n)
            ob = string_occupations(sp.strings_b, n)
            h = np.diag(self.ham.h1)
            J = np.einsum("iijj->ij", self.ham.eri)
            K = np.einsum("ijji->ij", self.ham.eri)
            ea = oa @ h + 0.5 * np.einsum("ap,pq,aq->a", oa, J - K, oa)
            eb = ob @ h + 0.5 * np.einsum("bp,pq,bq->b", ob, J - K, ob)
            self._diag = ea[:, None] + eb[None, :] + oa @ J @ ob.T + self.ham.e_nuc
        return self._diag


# ---------------------------------------------------------------------------
# Davidson
# ---------------------------------------------------------------------------


def davidson(matvec, diag: np.ndarray, x0: np.ndarray, tol: float = 1e-8, max_iter: int = 500,
             max_space: int = 24, project=None) -> tuple[float, np.ndarray, int]:
    """Lowest eigenpair of a symmetric operator; restarts when the subspace is full."""
    proj = project or (lambda v: v)
    x = proj(x0.ravel().astype(float))
    x /= np.linalg.norm(x)
    V = [x]
    AV = [matvec(x)]
    theta = 0.0
    for it in range(1, max_iter + 1):
        Vm = np.array(V)
        AVm = np.array(AV)
        Hs = Vm @ AVm.T
        Hs = 0.5 * (Hs + Hs.T)
        w, u = np.linalg.eigh(Hs)
        theta = w[0]
        x = u[:, 0] @ Vm
        ax = u[:, 0] @ AVm
        r = ax - theta * x
        rn = np.linalg.norm(r)
        if rn < tol:
            return float(theta), x / np.linalg.norm(x), it
        denom = theta - diag
        denom[np.abs(denom) < 1e-8] = 1e-8
        t = proj(r / denom)
        if len(V) >= max_space:
            V = [x / np.linalg.norm(x)]
            AV = [ax / np.linalg.norm(x)]
        for _ in range(2):
            for v in V:
                t -= (v @ t) * v
        tn = np.linalg.norm(t)
        if tn < 1e-14:
            t = proj(r.copy())
            for v in V:
                t -= (v @ t) * v
            tn = np.linalg.norm(t)
            if tn < 1e-14:
                return float(theta), x / np.linalg.norm(x), it
        t /= tn
        V.append(t)
        AV.append(matvec(t))
    raise DavidsonError(f"Davidson not converged after {max_iter} iterations (residual {rn:.2e})")


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class FCIResult:
    E0: float
    vector: np.ndarray  # (n_alpha_strings, n_beta_strings)
    space: FCISpace
    iterations: int = 0
    degenerate_flag: bool = False
    gap: float | None = None  # to the next root of the same symmetry, when probed

    def occupations(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.space.n_orb
        return string_occupations(self.space.strings_a, n), string_occupations(self.space.strings_b, n)


def fci_ground_state(ham: MOHamiltonian, n_alpha: int, n_beta: int, tol: float = 1e-8,
                     cap: int = DIMENSION_CAP, use_numba: bool | None = None,
                     x0: np.ndarray | None = None, max_iter: int = 500,
                     spin_symmetric: bool | None = None, check_degeneracy: bool = False,
                     degeneracy_tol: float = 1e-6) -> FCIResult:
    """Lowest eigenpair in the (n_alpha, n_beta) determinant space.

    For n_alpha == n_beta the search is confined to vectors symmetric under
    alpha/beta string exchange (even total spin), which keeps Davidson on the
    singlet manifold when a triplet lies close above.
    """
    space = FCISpace.build(ham.n_orb, n_alpha, n_beta, cap)
    H = FCIHamiltonian(ham, space, use_numba)
    diag = H.diagonal()
    shape = space.shape
    if spin_symmetric is None:
        spin_symmetric = n_alpha == n_beta
    project = None
    if spin_symmetric and n_alpha == n_beta:
        def project(v):
            m = v.reshape(shape)
            return (0.5 * (m + m.T)).ravel()
    if space.dim == 1:
        vec = np.ones(shape)
        e = float(H.sigma(vec)[0, 0])
        return FCIResult(e, vec, space, 0)
    if x0 is None:
        x0 = np.zeros(space.dim)
        x0[int(np.argmin(diag.ravel()))] = 1.0
    e, v, it = davidson(lambda x: H.sigma(x.reshape(shape)).ravel(), diag.ravel(), x0,
                        tol=tol, max_iter=max_iter, project=project)
    vec = v.reshape(shape)
    k = int(np.argmax(np.abs(vec)))
    if vec.flat[k] < 0:
        vec = -vec
    vec = vec / np.linalg.norm(vec)
    res = FCIResult(float(e), vec, space, it)
    if check_degeneracy and space.dim > 1:
        # deflated second root; a near-degenerate partner makes the representative arbitrary
        v0 = vec.ravel()

        def project2(x):
            x = project(x) if project else x
            return x - (v0 @ x) * v0

        diag2 = diag.ravel().copy()
        x1 = project2(np.random.default_rng(0).standard_normal(space.dim))
        e1, _, _ = davidson(lambda x: H.sigma(x.reshape(shape)).ravel(), diag2, x1, tol=1e-6,
                            max_iter=max_iter, project=project2)
        res.gap = float(e1 - e)
        res.degenerate_flag = res.gap < degeneracy_tol
    return res


# ---------------------------------------------------------------------------
# Density matrices and entropies
# ---------------------------------------------------------------------------


@dataclass
class RDMs:
    dm1_a: np.ndarray
    dm1_b: np.ndarray
    d_pair: np.ndarray  # d_{p p pbar pbar}: probability that p is doubly occupied

    @property
    def dm1(self) -> np.ndarray:
        return self.dm1_a + self.dm1_b


def compute_rdms(fci: FCIResult) -> RDMs:
    sp = fci.space
    n = sp.n_orb
    C = fci.vector
    dm_a = np.zeros(n * n)
    dm_b = np.zeros(n * n)
    la, lb = sp.link_a, sp.link_b
    if len(la):
        # <C| a+_a a_i |C> = sum_I sign * C[J] . C[I]
        contrib = la[:, 3] * np.einsum("kb,kb->k", C[la[:, 2]], C[la[:, 1]])
        np.add.at(dm_a, la[:, 0], contrib)
    if len(lb):
        contrib = lb[:, 3] * np.einsum("ka,ka->k", C[:, lb[:, 2]].T, C[:, lb[:, 1]].T)
        np.add.at(dm_b, lb[:, 0], contrib)
    oa, ob = fci.occupations()
    w = C ** 2
    d_pair = np.einsum("ij,ip,jp->p", w, oa, ob)
    return RDMs(dm_a.reshape(n, n), dm_b.reshape(n, n), d_pair)


@dataclass
class OrbitalEntropyReport:
    probabilities: np.ndarray  # (n_orb, 4): w_empty, w_up, w_down, w_double
    entropies: np.ndarray
    threshold: float = ENTROPY_THRESHOLD
    notes: list[str] = field(default_factory=list)

    @property
    def candidates(self) -> list[int]:
        return [int(p) for p in np.flatnonzero(self.entropies > self.threshold)]

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "orbitals": [
                {"index": p, "w_empty": float(w[0]), "w_up": float(w[1]), "w_down": float(w[2]),
                 "w_double": float(w[3]), "entropy": float(s), "active_candidate": bool(s > self.threshold)}
                for p, (w, s) in enumerate(zip(self.probabilities, self.entropies))
            ],
            "candidates": self.candidates,
            "notes": list(self.notes),
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["orbital", "entropy", "threshold"])
            for p, s in enumerate(self.entropies):
                wr.writerow([p, f"{s:.10f}", f"{self.threshold:.10f}"])


def orbital_entropies(rdms: RDMs, threshold: float = ENTROPY_THRESHOLD) -> OrbitalEntropyReport:
    Da = np.diag(rdms.dm1_a)
    Db = np.diag(rdms.dm1_b)
    d = rdms.d_pair
    w = np.stack([1.0 - Da - Db + d, Da - d, Db - d, d], axis=1)
    if w.min() < -1e-6 or w.max() > 1.0 + 1e-6:
        raise EntropyError(f"occupation probability outside [0, 1]: [{w.min():.3e}, {w.max():.3e}]")
    w = np.clip(w, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0.0, -w * np.log(w), 0.0)
    return OrbitalEntropyReport(w, terms.sum(axis=1), threshold)


# ---------------------------------------------------------------------------
# Deterministic energies and finite-difference forces
# ---------------------------------------------------------------------------


@dataclass
class ActiveSpaceSpec:
    """Contiguous active window over canonical RHF orbitals; None fields mean full space."""

    n_active_orb: int | None = None
    n_active_electrons: int | None = None

    def partition(self, n_orb: int, n_electrons: int) -> ActiveSpacePartition:
        if self.n_active_orb is None:
            return ActiveSpacePartition.full(n_orb, n_electrons)
        return ActiveSpacePartition.from_counts(n_orb, n_electrons, self.n_active_orb,
                                                self.n_active_electrons)


def fci_energy(geom: Geometry, active: ActiveSpaceSpec | None = None,
               scf_opts: SCFOptions | None = None, guess=None, x0=None) -> tuple[float, float, FCIResult]:
    """(RHF energy, FCI energy, FCIResult) for a geometry in STO-3G."""
    ints = compute_integrals(geom)
    mos = run_rhf(ints, opts=scf_opts, guess=guess)
    ham = transform_to_mo(ints, mos)
    part = (active or ActiveSpaceSpec()).partition(ham.n_orb, geom.n_electrons)
    act, _ = build_embedding(ham, part)
    ne = part.n_active_electrons
    res = fci_ground_state(act, ne // 2, ne - ne // 2, tol=1e-9, x0=x0)
    return mos.e_total, res.E0, res


def reference_force(geom: Geometry, atom: int, axis: int, delta: float = 1e-4,
                    active: ActiveSpaceSpec | None = None) -> float:
    """Central finite-difference FCI force in Ha/Angstrom."""
    opts = SCFOptions(tol=1e-11)
    ints0 = compute_integrals(geom)
    p0 = run_rhf(ints0, opts=opts).density()
    energies = []
    for sgn in (+1.0, -1.0):
        g = displace(geom, atom, axis, sgn * delta)
        _, e, _ = fci_energy(g, active, opts, guess=p0)
        energies.append(e)
    return -(energies[0] - energies[1]) / (2.0 * delta)
