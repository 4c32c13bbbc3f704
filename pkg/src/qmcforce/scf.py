"""Closed-shell Hartree-Fock with DIIS."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from .chem.basis import build_basis
from .chem.geometry import Geometry
from .chem.integrals import IntegralSet, compute_integrals

log = logging.getLogger(__name__)


class SCFConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


@dataclass
class SCFOptions:
    tol: float = 1e-9
    max_iter: int = 200
    diis_size: int = 8
    level_shift: float | None = None  # None -> 0.2 Ha beyond 1.8 Angstrom, else 0
    level_shift_off: float = 1e-4  # DIIS error below which the shift is dropped
    degeneracy_tol: float = 1e-8


@dataclass
class MOSet:
    C: np.ndarray
    eps: np.ndarray
    n_occ: int
    e_total: float
    S: np.ndarray
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0
    energy_history: list = field(default_factory=list)

    @property
    def nmo(self) -> int:
        return self.C.shape[1]

    def density(self) -> np.ndarray:
        """Total density P = 2 C_occ C_occ^T."""
        co = self.C[:, : self.n_occ]
        return 2.0 * co @ co.T


def _sym_orth(S):
    w, v = np.linalg.eigh(S)
    return (v / np.sqrt(w)) @ v.T


def _fock(h, eri, P):
    J = np.einsum("pqrs,rs->pq", eri, P)
    K = np.einsum("prqs,rs->pq", eri, P)
    return h + J - 0.5 * K


def canonicalize(C, eps, S, tol=1e-8):
    """Fix orbital phases and the rotation freedom inside degenerate blocks.

    Degenerate blocks are rotated to the eigenbasis of a fixed diagonal AO
    weight operator (weights grow with AO index), which separates e.g. pi_x and
    pi_y deterministically. Each orbital is then signed so its largest-magnitude
    coefficient (first index on ties) is positive.
    """
    C = np.array(C, dtype=float)
    eps = np.array(eps, dtype=float)
    n = C.shape[1]
    weights = 1.0 + 0.1 * np.arange(C.shape[0]) / C.shape[0]
    i = 0
    while i < n:
        j = i + 1
        while j < n and eps[j] - eps[j - 1] < tol:
            j += 1
        if j - i > 1:
            blk = C[:, i:j]
            m = blk.T @ (weights[:, None] * blk)
            _, u = np.linalg.eigh(0.5 * (m + m.T))
            C[:, i:j] = blk @ u
            eps[i:j] = np.mean(eps[i:j])
        i = j
    for k in range(n):
        col = C[:, k]
        amax = np.abs(col).max()
        idx = np.flatnonzero(np.abs(col) >= amax - 1e-8)[0]
        if col[idx] < 0:
            C[:, k] = -col
    return C, eps


_ATOM_DENSITY_CACHE: dict[tuple[str, str], np.ndarray] = {}


def atomic_density(symbol: str, basis_name: str = "sto-3g") -> np.ndarray:
    """Spherically averaged atomic density from fractional-occupation SCF."""
    key = (symbol, basis_name)
    if key in _ATOM_DENSITY_CACHE:
        return _ATOM_DENSITY_CACHE[key]
    geom = Geometry.from_atoms([(symbol, (0.0, 0.0, 0.0))])
    ints = compute_integrals(geom, build_basis(geom, basis_name))
    nel = geom.n_electrons
    X = _sym_orth(ints.S)
    h = ints.hcore
    e, cp = np.linalg.eigh(X.T @ h @ X)
    C = X @ cp
    P = None
    for _ in range(200):
        occ = _fractional_occupations(e, nel)
        P_new = (C * occ) @ C.T
        if P is not None and np.abs(P_new - P).max() < 1e-10:
            P = P_new
            break
        P = P_new if P is None else 0.5 * (P + P_new)
        F = _fock(h, ints.eri, P)
        e, cp = np.linalg.eigh(X.T @ F @ X)
        C = X @ cp
    _ATOM_DENSITY_CACHE[key] = P
    return P


def _fractional_occupations(eps, nel, tol=1e-4):
    """Aufbau filling with electrons spread evenly over the frontier degenerate level."""
    occ = np.zeros(len(eps))
    left = float(nel)
    i = 0
    while left > 1e-12 and i < len(eps):
        j = i + 1
        while j < len(eps) and eps[j] - eps[i] < tol:
            j += 1
        cap = 2.0 * (j - i)
        put = min(cap, left)
        occ[i:j] = put / (j - i)
        left -= put
        i = j
    return occ


def sad_guess(ints: IntegralSet) -> np.ndarray:
    """Block-diagonal superposition of atomic densities."""
    basis = ints.basis
    ao_atoms = basis.ao_atoms()
    P = np.zeros((ints.nbf, ints.nbf))
    for atom, sym in enumerate(ints.geometry.symbols):
        idx = np.flatnonzero(ao_atoms == atom)
        P[np.ix_(idx, idx)] = atomic_density(sym, basis.name)
    return P


def run_rhf(ints: IntegralSet, n_electrons: int | None = None, opts: SCFOptions | None = None,
            guess: np.ndarray | None = None) -> MOSet:
    """Converge RHF.

    ``guess`` is a starting total density matrix, ``"core"`` for the
    core-Hamiltonian guess, or None for a superposition of atomic densities.
    """
    opts = opts or SCFOptions()
    if n_electrons is None:
        n_electrons = ints.geometry.n_electrons
    if n_electrons % 2:
        raise ValueError("closed-shell RHF needs an even electron count")
    nbf = ints.nbf
    nocc = n_electrons // 2
    if nocc > nbf:
        raise ValueError("more electron pairs than basis functions")
    h = ints.hcore
    S = ints.S
    X = _sym_orth(S)

    shift = opts.level_shift
    if shift is None:
        shift = 0.2 if ints.geometry.max_nearest_neighbour_angstrom() > 1.8 else 0.0

    def diag(F):
        e, cp = np.linalg.eigh(X.T @ F @ X)
        return e, X @ cp

    if guess is None:
        P = sad_guess(ints)
    elif isinstance(guess, str) and guess == "core":
        _, C = diag(h)
        P = 2.0 * C[:, :nocc] @ C[:, :nocc].T
    else:
        P = np.array(guess, dtype=float)

    fock_hist: list[np.ndarray] = []
    err_hist: list[np.ndarray] = []
    energies = []
    residual = np.inf
    converged = False
    e_old = None
    it = 0
    for it in range(1, opts.max_iter + 1):
        F = _fock(h, ints.eri, P)
        e_elec = 0.5 * np.sum(P * (h + F))
        energies.append(e_elec + ints.e_nuc)
        err = X.T @ (F @ P @ S - S @ P @ F) @ X
        residual = np.abs(err).max()
        de = np.inf if e_old is None else abs(energies[-1] - e_old)
        e_old = energies[-1]
        if residual < opts.tol and de < max(opts.tol, 1e-11):
            converged = True
            break
        fock_hist.append(F)
        err_hist.append(err)
        if len(fock_hist) > opts.diis_size:
            fock_hist.pop(0)
            err_hist.pop(0)
        use_shift = shift > 0 and residual > opts.level_shift_off
        if len(fock_hist) >= 2:
            m = len(fock_hist)
            B = -np.ones((m + 1, m + 1))
            B[m, m] = 0.0
            for a in range(m):
                for b in range(m):
                    B[a, b] = np.sum(err_hist[a] * err_hist[b])
            rhs = np.zeros(m + 1)
            rhs[m] = -1.0
            try:
                coef = np.linalg.solve(B, rhs)[:m]
            except np.linalg.LinAlgError:
                coef = np.zeros(m)
                coef[-1] = 1.0
            F = sum(c * f for c, f in zip(coef, fock_hist))
        if use_shift:
            F = F + shift * (S - 0.5 * S @ P @ S)
        _, C = diag(F)
        P = 2.0 * C[:, :nocc] @ C[:, :nocc].T

    F = _fock(h, ints.eri, P)
    eps, C = diag(F)
    C, eps = canonicalize(C, eps, S, opts.degeneracy_tol)
    P = 2.0 * C[:, :nocc] @ C[:, :nocc].T
    e_total = 0.5 * np.sum(P * (h + _fock(h, ints.eri, P))) + ints.e_nuc
    if not converged:
        raise SCFConvergenceError(
            f"RHF did not converge in {opts.max_iter} iterations (residual {residual:.3e})", residual)
    log.debug("RHF converged in %d iterations: E = %.12f", it, e_total)
    return MOSet(C, eps, nocc, float(e_total), S, True, it, float(residual), energies)
