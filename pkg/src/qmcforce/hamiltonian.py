"""MO-basis Hamiltonians, frozen-core embedding and FCIDUMP interchange."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .chem.integrals import IntegralSet
from .scf import MOSet


@dataclass
class MOHamiltonian:
    h1: np.ndarray
    eri: np.ndarray  # (pq|rs), chemists' notation
    e_nuc: float  # constant energy: nuclear repulsion plus any frozen-core energy

    @property
    def n_orb(self) -> int:
        return self.h1.shape[0]

    @property
    def eri_mo(self) -> np.ndarray:
        return self.eri

    def eri_matrix(self) -> np.ndarray:
        """(pq|rs) viewed as a matrix over composite indices p*N+q, r*N+s."""
        n = self.n_orb
        return self.eri.reshape(n * n, n * n)

    def rotated(self, U: np.ndarray) -> "MOHamiltonian":
        """Integrals over the rotated orbitals phi'_p = sum_q U_qp phi_q."""
        h1 = U.T @ self.h1 @ U
        eri = np.einsum("pqrs,pi,qj,rk,sl->ijkl", self.eri, U, U, U, U, optimize=True)
        return MOHamiltonian(h1, eri, self.e_nuc)

    def energy_of_determinant(self, occ_a, occ_b) -> float:
        """Slater-Condon diagonal element for spatial-orbital occupation lists."""
        oa = list(occ_a)
        ob = list(occ_b)
        h = self.h1
        J = np.einsum("iijj->ij", self.eri)
        K = np.einsum("ijji->ij", self.eri)
        e = self.e_nuc + h[oa, oa].sum() + h[ob, ob].sum()
        e += 0.5 * (J[np.ix_(oa, oa)].sum() - K[np.ix_(oa, oa)].sum())
        e += 0.5 * (J[np.ix_(ob, ob)].sum() - K[np.ix_(ob, ob)].sum())
        e += J[np.ix_(oa, ob)].sum()
        return float(e)


def transform_to_mo(ints: IntegralSet, mos: MOSet | np.ndarray) -> MOHamiltonian:
    """h1 = C^T (T + V) C and quarter-transformed (pq|rs)."""
    C = mos.C if isinstance(mos, MOSet) else np.asarray(mos)
    if C.shape[0] != ints.nbf:
        raise ValueError("MO coefficient rows do not match the AO basis")
    h1 = C.T @ ints.hcore @ C
    eri = np.einsum("pqrs,pi->iqrs", ints.eri, C, optimize=True)
    eri = np.einsum("iqrs,qj->ijrs", eri, C, optimize=True)
    eri = np.einsum("ijrs,rk->ijks", eri, C, optimize=True)
    eri = np.einsum("ijks,sl->ijkl", eri, C, optimize=True)
    return MOHamiltonian(0.5 * (h1 + h1.T), eri, ints.e_nuc)


@dataclass(frozen=True)
class ActiveSpacePartition:
    core: tuple[int, ...]
    active: tuple[int, ...]
    virtual: tuple[int, ...]
    n_active_electrons: int

    @classmethod
    def from_counts(cls, n_orb: int, n_electrons: int, n_active_orb: int,
                    n_active_electrons: int) -> "ActiveSpacePartition":
        """Contiguous (core | active | virtual) split of canonical orbitals."""
        ncore2 = n_electrons - n_active_electrons
        if ncore2 < 0 or ncore2 % 2:
            raise ValueError("core must hold an even, non-negative electron count")
        ncore = ncore2 // 2
        if ncore + n_active_orb > n_orb:
            raise ValueError("active space exceeds the orbital count")
        return cls(tuple(range(ncore)), tuple(range(ncore, ncore + n_active_orb)),
                   tuple(range(ncore + n_active_orb, n_orb)), n_active_electrons)

    @classmethod
    def from_indices(cls, n_orb: int, n_electrons: int, active) -> "ActiveSpacePartition":
        """Arbitrary active orbitals; every lower-lying orbital outside them is core.

        The core is filled from the bottom with the electrons the active space
        does not hold, which assumes aufbau occupation of the canonical orbitals.
        """
        act = sorted(int(i) for i in active)
        if len(set(act)) != len(act) or (act and (act[0] < 0 or act[-1] >= n_orb)):
            raise ValueError("active indices must be distinct and inside the orbital range")
        n_occ = n_electrons // 2
        core = [i for i in range(n_occ) if i not in act]
        n_act_el = n_electrons - 2 * len(core)
        virt = [i for i in range(n_orb) if i not in act and i not in core]
        part = cls(tuple(core), tuple(act), tuple(virt), n_act_el)
        part.validate(n_orb, n_electrons)
        return part

    @classmethod
    def full(cls, n_orb: int, n_electrons: int) -> "ActiveSpacePartition":
        return cls((), tuple(range(n_orb)), (), n_electrons)

    def validate(self, n_orb: int, n_electrons: int) -> None:
        allidx = list(self.core) + list(self.active) + list(self.virtual)
        if sorted(allidx) != list(range(n_orb)):
            raise ValueError("partition indices must be disjoint and cover every orbital")
        if self.n_active_electrons != n_electrons - 2 * len(self.core):
            raise ValueError("active electron count inconsistent with the core size")
        if self.n_active_electrons > 2 * len(self.active) or self.n_active_electrons < 0:
            raise ValueError("active electrons do not fit in the active orbitals")

    @property
    def n_core(self) -> int:
        return len(self.core)

    @property
    def n_active(self) -> int:
        return len(self.active)

    def to_dict(self) -> dict:
        return {"core": list(self.core), "active": list(self.active),
                "virtual": list(self.virtual), "n_active_electrons": self.n_active_electrons}


def build_embedding(ham: MOHamiltonian, part: ActiveSpacePartition) -> tuple[MOHamiltonian, float]:
    """Fold doubly occupied core orbitals into an effective active-space Hamiltonian.

    Returns the active Hamiltonian, whose ``e_nuc`` carries nuclear repulsion
    plus the core energy, and the core energy on its own.
    """
    core = list(part.core)
    act = list(part.active)
    h = ham.h1
    eri = ham.eri
    if core:
        jc = np.einsum("pqii->pq", eri[:, :, core, :][:, :, :, core])
        kc = np.einsum("piiq->pq", eri[:, core, :, :][:, :, core, :])
        h_eff = h + 2.0 * jc - kc
        cc = np.ix_(core, core)
        e_core = 2.0 * np.trace(h[cc]) + np.sum(
            2.0 * np.einsum("iijj->ij", eri[np.ix_(core, core, core, core)])
            - np.einsum("ijji->ij", eri[np.ix_(core, core, core, core)]))
    else:
        h_eff = h
        e_core = 0.0
    ix = np.ix_(act, act)
    h_act = h_eff[ix]
    eri_act = eri[np.ix_(act, act, act, act)]
    return MOHamiltonian(h_act.copy(), eri_act.copy(), ham.e_nuc + float(e_core)), float(e_core)


# ---------------------------------------------------------------------------
# Modified Cholesky with recordable pivots
# ---------------------------------------------------------------------------


class CholeskyBreakdown(ArithmeticError):
    """Residual diagonal went negative beyond round-off."""


class ReplayInvalid(RuntimeError):
    """A stored pivot path cannot be followed on this Hamiltonian."""


@dataclass
class CholeskyFactorization:
    vectors: np.ndarray  # (n_gamma, N, N)
    pivots: list[tuple[int, int]]
    threshold: float
    source: str  # "reference" or "replayed"

    @property
    def n_vectors(self) -> int:
        return self.vectors.shape[0]

    def reconstruct(self) -> np.ndarray:
        n = self.vectors.shape[1]
        flat = self.vectors.reshape(self.n_vectors, n * n)
        return (flat.T @ flat).reshape(n, n, n, n)

    def max_error(self, ham: MOHamiltonian) -> float:
        return float(np.abs(ham.eri - self.reconstruct()).max())

    def pivots_to_dict(self) -> dict:
        return {"n_orb": int(self.vectors.shape[1]), "threshold": self.threshold,
                "pivots": [[int(p), int(q)] for p, q in self.pivots]}


def save_pivots(path, chol: CholeskyFactorization) -> None:
    with open(path, "w") as fh:
        json.dump(chol.pivots_to_dict(), fh, indent=1)


def load_pivots(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    for key in ("n_orb", "threshold", "pivots"):
        if key not in data:
            raise ValueError(f"pivot artifact lacks {key!r}")
    data["pivots"] = [tuple(int(v) for v in pq) for pq in data["pivots"]]
    return data


def _argmax_first(d: np.ndarray, tie: float = 1e-14) -> int:
    """Largest entry; among entries within ``tie`` of it, the smallest index."""
    top = d.max()
    return int(np.flatnonzero(d >= top - tie)[0])


def cholesky_reference(ham: MOHamiltonian, threshold: float = 1e-8,
                       max_vectors: int | None = None) -> CholeskyFactorization:
    """Greedy max-diagonal pivoted Cholesky of the (pq|rs) matrix."""
    n = ham.n_orb
    M = ham.eri_matrix()
    if np.abs(M - M.T).max() > 1e-10:
        raise ValueError("two-electron matrix is not symmetric")
    diag = np.array(np.diag(M), dtype=float)
    if diag.min() < -1e-10:
        raise CholeskyBreakdown(f"negative diagonal {diag.min():.3e}")
    nmax = max_vectors or n * n
    Ls: list[np.ndarray] = []
    pivots: list[tuple[int, int]] = []
    while len(Ls) < nmax:
        piv = _argmax_first(diag)
        dmax = diag[piv]
        if dmax <= threshold:
            break
        col = M[:, piv].copy()
        for L in Ls:
            col -= L * L[piv]
        L_new = col / np.sqrt(dmax)
        Ls.append(L_new)
        pivots.append(divmod(piv, n))
        diag -= L_new * L_new
        diag[piv] = 0.0
        if diag.min() < -1e-10:
            raise CholeskyBreakdown(f"residual diagonal {diag.min():.3e} after {len(Ls)} vectors")
    vecs = np.array(Ls).reshape(len(Ls), n, n) if Ls else np.zeros((0, n, n))
    return CholeskyFactorization(vecs, pivots, threshold, "reference")


def cholesky_replay(ham: MOHamiltonian, pivots, threshold: float = 1e-8,
                    min_residual: float = 1e-12) -> CholeskyFactorization:
    """Rebuild Cholesky vectors following a stored pivot order.

    The vector count equals the stored pivot count. Raises ``ReplayInvalid``
    if a pivot's residual diagonal has collapsed or the reconstruction error
    exceeds ten times ``threshold``.
    """
    n = ham.n_orb
    M = ham.eri_matrix()
    diag = np.array(np.diag(M), dtype=float)
    Ls: list[np.ndarray] = []
    for k, (p, q) in enumerate(pivots):
        if not (0 <= p < n and 0 <= q < n):
            raise ValueError(f"pivot ({p}, {q}) outside a {n}-orbital space")
        piv = p * n + q
        dpiv = diag[piv]
        if dpiv <= min_residual:
            raise ReplayInvalid(f"pivot {k} ({p}, {q}) has residual {dpiv:.3e}")
        col = M[:, piv].copy()
        for L in Ls:
            col -= L * L[piv]
        L_new = col / np.sqrt(dpiv)
        Ls.append(L_new)
        diag -= L_new * L_new
        diag[piv] = 0.0
    vecs = np.array(Ls).reshape(len(Ls), n, n) if Ls else np.zeros((0, n, n))
    chol = CholeskyFactorization(vecs, [tuple(pq) for pq in pivots], threshold, "replayed")
    err = chol.max_error(ham)
    if err > 10.0 * threshold:
        raise ReplayInvalid(f"replayed reconstruction error {err:.3e} exceeds {10 * threshold:.1e}")
    return chol


# ---------------------------------------------------------------------------
# FCIDUMP
# ---------------------------------------------------------------------------


def write_fcidump(path, ham: MOHamiltonian, n_electrons: int, ms2: int = 0, tol: float = 1e-14):
    """Molpro-style FCIDUMP with 8-fold unique two-electron records."""
    n = ham.n_orb
    lines = [f" &FCI NORB={n},NELEC={n_electrons},MS2={ms2},",
             "  ORBSYM=" + "1," * n, "  ISYM=1,", " &END"]
    for i in range(n):
        for j in range(i + 1):
            ij = i * (i + 1) // 2 + j
            for k in range(n):
                for l in range(k + 1):
                    kl = k * (k + 1) // 2 + l
                    if kl > ij:
                        continue
                    v = ham.eri[i, j, k, l]
                    if abs(v) > tol:
                        lines.append(f"{v: .16e} {i + 1:4d} {j + 1:4d} {k + 1:4d} {l + 1:4d}")
    for i in range(n):
        for j in range(i + 1):
            v = ham.h1[i, j]
            if abs(v) > tol:
                lines.append(f"{v: .16e} {i + 1:4d} {j + 1:4d}    0    0")
    lines.append(f"{ham.e_nuc: .16e}    0    0    0    0")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_fcidump(path) -> tuple[MOHamiltonian, dict]:
    """Parse a FCIDUMP file; returns the Hamiltonian and header fields."""
    with open(path) as fh:
        text = fh.read()
    head, _, body = text.partition("&END")
    if not body:
        head, _, body = text.partition("/")
    header = {}
    flat = head.replace("&FCI", "").replace("\n", " ")
    for key in ("NORB", "NELEC", "MS2"):
        idx = flat.upper().find(key + "=")
        if idx < 0:
            continue
        val = flat[idx + len(key) + 1:].split(",")[0].strip()
        header[key.lower()] = int(val)
    if "norb" not in header:
        raise ValueError("FCIDUMP header lacks NORB")
    n = header["norb"]
    h1 = np.zeros((n, n))
    eri = np.zeros((n, n, n, n))
    e_core = 0.0
    for lineno, ln in enumerate(body.splitlines(), start=1):
        parts = ln.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ValueError(f"FCIDUMP body line {lineno}: expected 'value p q r s'")
        v = float(parts[0].replace("D", "E").replace("d", "e"))
        i, j, k, l = (int(x) for x in parts[1:])
        if i == j == k == l == 0:
            e_core = v
        elif k == l == 0:
            h1[i - 1, j - 1] = h1[j - 1, i - 1] = v
        else:
            i, j, k, l = i - 1, j - 1, k - 1, l - 1
            for a, b, c, d in ((i, j, k, l), (j, i, k, l), (i, j, l, k), (j, i, l, k),
                               (k, l, i, j), (l, k, i, j), (k, l, j, i), (l, k, j, i)):
                eri[a, b, c, d] = v
    return MOHamiltonian(h1, eri, e_core), header
