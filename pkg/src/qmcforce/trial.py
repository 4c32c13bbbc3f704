"""Trial states for QC-AFQMC: Jordan-Wigner statevectors, pair-UCC ansatze and VQE.

Qubit ordering is interleaved: qubit ``2p`` holds spatial orbital ``p`` with alpha
spin and qubit ``2p + 1`` the beta partner. A basis state ``|n>`` is the product of
creation operators in ascending qubit order acting on vacuum.

Determinant expansions use the alpha-first convention of the FCI oracle:
``|Ia, Ib> = (prod_{p in Ia} a+_{p,alpha}) (prod_{q in Ib} a+_{q,beta}) |0>``.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse
import scipy.sparse.linalg

from .hamiltonian import MOHamiltonian

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Bitstring conventions
# ---------------------------------------------------------------------------


def popcount(x: int) -> int:
    return bin(x).count("1")


def interleave(a_str: int, b_str: int, n_orb: int) -> int:
    """Qubit index of the determinant with alpha/beta spatial occupations a_str/b_str."""
    out = 0
    for p in range(n_orb):
        if a_str >> p & 1:
            out |= 1 << (2 * p)
        if b_str >> p & 1:
            out |= 1 << (2 * p + 1)
    return out


def deinterleave(idx: int, n_orb: int) -> tuple[int, int]:
    a = b = 0
    for p in range(n_orb):
        if idx >> (2 * p) & 1:
            a |= 1 << p
        if idx >> (2 * p + 1) & 1:
            b |= 1 << p
    return a, b


def reorder_sign(a_str: int, b_str: int) -> int:
    """Sign taking interleaved creation order to alpha-first order."""
    n = 0
    for k in range(a_str.bit_length()):
        if a_str >> k & 1:
            n += popcount(b_str & ((1 << k) - 1))
    return -1 if n % 2 else 1


# ---------------------------------------------------------------------------
# Statevector
# ---------------------------------------------------------------------------


def _ladder(n_qubits: int, mode: int, dagger: bool) -> scipy.sparse.csr_matrix:
    """Jordan-Wigner creation or annihilation operator on ``mode``."""
    dim = 1 << n_qubits
    idx = np.arange(dim, dtype=np.int64)
    occ = (idx >> mode) & 1
    src = idx[occ == (0 if dagger else 1)]
    dst = src ^ (1 << mode)
    below = (1 << mode) - 1
    parity = np.array([popcount(int(s) & below) for s in src], dtype=np.int64) % 2
    vals = np.where(parity == 1, -1.0, 1.0)
    return scipy.sparse.csr_matrix((vals, (dst, src)), shape=(dim, dim))


class Statevector:
    """Dense 2^(2 n_orb) amplitude vector of an active-space register."""

    def __init__(self, amplitudes: np.ndarray, n_orb: int):
        amplitudes = np.asarray(amplitudes, dtype=complex)
        if amplitudes.shape != (1 << (2 * n_orb),):
            raise ValueError("amplitude length must be 2**(2*n_orb)")
        self.amplitudes = amplitudes
        self.n_orb = n_orb

    @property
    def n_qubits(self) -> int:
        return 2 * self.n_orb

    @classmethod
    def hartree_fock(cls, n_orb: int, n_alpha: int, n_beta: int) -> "Statevector":
        amp = np.zeros(1 << (2 * n_orb), dtype=complex)
        amp[interleave((1 << n_alpha) - 1, (1 << n_beta) - 1, n_orb)] = 1.0
        return cls(amp, n_orb)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def sector_weight(self, n_alpha: int, n_beta: int) -> float:
        """Squared norm outside the (n_alpha, n_beta) particle-number sector."""
        out = 0.0
        for idx in np.flatnonzero(np.abs(self.amplitudes) > 0):
            a, b = deinterleave(int(idx), self.n_orb)
            if popcount(a) != n_alpha or popcount(b) != n_beta:
                out += abs(self.amplitudes[idx]) ** 2
        return out

    def to_ci(self, n_alpha: int, n_beta: int, strings_a=None, strings_b=None) -> np.ndarray:
        """CI matrix over (alpha string, beta string) in alpha-first sign convention."""
        from .oracle import make_strings

        sa = make_strings(self.n_orb, n_alpha) if strings_a is None else strings_a
        sb = make_strings(self.n_orb, n_beta) if strings_b is None else strings_b
        out = np.zeros((len(sa), len(sb)), dtype=complex)
        for i, a in enumerate(sa):
            for j, b in enumerate(sb):
                a, b = int(a), int(b)
                out[i, j] = reorder_sign(a, b) * self.amplitudes[interleave(a, b, self.n_orb)]
        return out

    @classmethod
    def from_ci(cls, ci: np.ndarray, n_orb: int, strings_a, strings_b) -> "Statevector":
        amp = np.zeros(1 << (2 * n_orb), dtype=complex)
        for i, a in enumerate(strings_a):
            for j, b in enumerate(strings_b):
                a, b = int(a), int(b)
                amp[interleave(a, b, n_orb)] = reorder_sign(a, b) * ci[i, j]
        return cls(amp, n_orb)

    def inner(self, other: "Statevector") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))


def pair_generator_sparse(n_orb: int, t: np.ndarray, n_pairs: int) -> scipy.sparse.csr_matrix:
    """T - T^dagger with T = sum_ia t_ia a+_{a,alpha} a+_{a,beta} a_{i,beta} a_{i,alpha}."""
    nq = 2 * n_orb
    cre = [_ladder(nq, m, True) for m in range(nq)]
    ann = [_ladder(nq, m, False) for m in range(nq)]
    dim = 1 << nq
    G = scipy.sparse.csr_matrix((dim, dim))
    for i in range(n_pairs):
        for ai, a in enumerate(range(n_pairs, n_orb)):
            val = t[i, ai]
            if val == 0.0:
                continue
            op = cre[2 * a] @ cre[2 * a + 1] @ ann[2 * i + 1] @ ann[2 * i]
            G = G + val * (op - op.T)
    return G.tocsr()


def apply_upccd(t: np.ndarray, n_orb: int, n_pairs: int) -> Statevector:
    """exp(T - T^dagger) |HF> on the full qubit register (exact exponential action)."""
    sv = Statevector.hartree_fock(n_orb, n_pairs, n_pairs)
    t = np.asarray(t, dtype=float).reshape(n_pairs, n_orb - n_pairs)
    if not np.any(t):
        return sv
    G = pair_generator_sparse(n_orb, t, n_pairs)
    amp = scipy.sparse.linalg.expm_multiply(G, sv.amplitudes.real)
    return Statevector(amp, n_orb)


# ---------------------------------------------------------------------------
# Seniority-zero (pair) space: upCCD never leaves it
# ---------------------------------------------------------------------------


class PairSpace:
    """Closed-shell determinants labelled by the set of doubly occupied orbitals.

    A pair state is prod_p (a+_{p,alpha} a+_{p,beta}) |0> in ascending p, which is
    exactly the interleaved qubit ordering, so amplitudes here equal statevector
    amplitudes. Pair operators commute, hence all hopping signs are +1.
    """

    def __init__(self, n_orb: int, n_pairs: int):
        self.n_orb = n_orb
        self.n_pairs = n_pairs
        self.strings = np.array(sorted(sum(1 << p for p in c)
                                       for c in itertools.combinations(range(n_orb), n_pairs)),
                                dtype=np.int64)
        self.index = {int(s): k for k, s in enumerate(self.strings)}
        self.hf = self.index[(1 << n_pairs) - 1]
        self.occupations = ((self.strings[:, None] >> np.arange(n_orb)) & 1).astype(float)
        # hop[(i, a)] -> list of (source, target) for moving pair i -> a
        self._hops: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        for i in range(n_orb):
            for a in range(n_orb):
                if i == a:
                    continue
                src, dst = [], []
                for k, s in enumerate(self.strings):
                    s = int(s)
                    if s >> i & 1 and not s >> a & 1:
                        src.append(k)
                        dst.append(self.index[s ^ (1 << i) ^ (1 << a)])
                self._hops[(i, a)] = (np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64))

    @property
    def dim(self) -> int:
        return len(self.strings)

    @property
    def sign(self) -> int:
        """Interleaved -> alpha-first sign, (-1)^(k(k-1)/2) for k pairs."""
        k = self.n_pairs
        return -1 if (k * (k - 1) // 2) % 2 else 1

    def generator(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float).reshape(self.n_pairs, self.n_orb - self.n_pairs)
        G = np.zeros((self.dim, self.dim))
        for i in range(self.n_pairs):
            for ai, a in enumerate(range(self.n_pairs, self.n_orb)):
                v = t[i, ai]
                if v == 0.0:
                    continue
                src, dst = self._hops[(i, a)]
                G[dst, src] += v
                G[src, dst] -= v
        return G

    def state(self, t: np.ndarray) -> np.ndarray:
        x = np.zeros(self.dim)
        x[self.hf] = 1.0
        if not np.any(t):
            return x
        return scipy.linalg.expm(self.generator(t)) @ x

    def hamiltonian(self, ham: MOHamiltonian) -> np.ndarray:
        """Seniority-zero block of H (exact for expectation values of pair states)."""
        n = self.n_orb
        h = np.diag(ham.h1)
        J = np.einsum("iijj->ij", ham.eri)
        K = np.einsum("ijji->ij", ham.eri)
        occ = self.occupations
        onsite = 2.0 * h + np.diag(J)
        W = 2.0 * J - K
        np.fill_diagonal(W, 0.0)
        # each unordered pair of doubly occupied orbitals contributes 2(2J - K)
        diag = ham.e_nuc + occ @ onsite + np.einsum("kp,pq,kq->k", occ, W, occ)
        H = np.diag(diag)
        Kx = np.einsum("iaia->ia", ham.eri)
        for i in range(n):
            for a in range(n):
                if i == a:
                    continue
                src, dst = self._hops[(i, a)]
                H[dst, src] += Kx[i, a]
        return H

    def determinants(self, x: np.ndarray, eps: float = 0.0):
        """(coef, alpha string, beta string) in alpha-first convention."""
        sg = self.sign
        return [(sg * float(c), int(s), int(s)) for c, s in zip(x, self.strings) if abs(c) >= eps]


# ---------------------------------------------------------------------------
# Trial states
# ---------------------------------------------------------------------------


@dataclass
class Determinant:
    coef: complex
    alpha: int
    beta: int


@dataclass
class TrialState:
    kind: str  # "single-determinant" | "upCCD" | "oo-upCCD" | "ci"
    n_orb: int
    n_alpha: int
    n_beta: int
    t: np.ndarray | None = None  # (n_pairs, n_orb - n_pairs)
    kappa: np.ndarray | None = None  # antisymmetric (n_orb, n_orb)
    eps_det: float = 1e-10
    determinants: list[Determinant] = field(default_factory=list)
    energy: float | None = None
    discarded_weight: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kappa is not None:
            k = np.asarray(self.kappa, dtype=float)
            self.kappa = 0.5 * (k - k.T)
        if not self.determinants:
            self.determinants = self._build_determinants()

    def _build_determinants(self) -> list[Determinant]:
        if self.kind == "single-determinant" or (self.kind in ("upCCD", "oo-upCCD") and self.t is None):
            return [Determinant(1.0, (1 << self.n_alpha) - 1, (1 << self.n_beta) - 1)]
        if self.kind in ("upCCD", "oo-upCCD"):
            if self.n_alpha != self.n_beta:
                raise ValueError("pair ansatze need a closed-shell reference")
            ps = PairSpace(self.n_orb, self.n_alpha)
            x = ps.state(self.t)
            dets, w = _truncate(ps.determinants(x), self.eps_det)
            self.discarded_weight = w
            return dets
        raise ValueError(f"trial kind {self.kind!r} needs an explicit determinant list")

    @property
    def orbital_rotation(self) -> np.ndarray:
        """U = expm(kappa); trial orbitals are the columns of C_active @ U."""
        if self.kappa is None:
            return np.eye(self.n_orb)
        return scipy.linalg.expm(self.kappa)

    def arrays(self):
        """(coefs, alpha occupation index array, beta occupation index array)."""
        coefs = np.array([d.coef for d in self.determinants], dtype=complex)
        occ_a = np.array([_bits(d.alpha, self.n_orb) for d in self.determinants], dtype=np.int64)
        occ_b = np.array([_bits(d.beta, self.n_orb) for d in self.determinants], dtype=np.int64)
        return coefs, occ_a.reshape(len(coefs), self.n_alpha), occ_b.reshape(len(coefs), self.n_beta)

    def ci_matrix(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        from .oracle import make_strings

        sa = make_strings(self.n_orb, self.n_alpha)
        sb = make_strings(self.n_orb, self.n_beta)
        ia = {int(s): k for k, s in enumerate(sa)}
        ib = {int(s): k for k, s in enumerate(sb)}
        ci = np.zeros((len(sa), len(sb)), dtype=complex)
        for d in self.determinants:
            ci[ia[d.alpha], ib[d.beta]] += d.coef
        return ci, sa, sb

    def statevector(self) -> Statevector:
        ci, sa, sb = self.ci_matrix()
        return Statevector.from_ci(ci, self.n_orb, sa, sb)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "n_orb": self.n_orb, "n_alpha": self.n_alpha, "n_beta": self.n_beta,
               "eps_det": self.eps_det}
        if self.t is not None:
            t = np.asarray(self.t)
            out["t"] = [[i, self.n_alpha + a, float(t[i, a])] for i in range(t.shape[0])
                        for a in range(t.shape[1])]
        if self.kappa is not None:
            out["kappa"] = [[p, q, float(self.kappa[p, q])] for p in range(self.n_orb)
                            for q in range(p + 1, self.n_orb)]
        if self.kind == "ci":
            out["determinants"] = [[float(np.real(d.coef)), d.alpha, d.beta] for d in self.determinants]
        if self.energy is not None:
            out["energy"] = self.energy
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrialState":
        n, na, nb = d["n_orb"], d["n_alpha"], d["n_beta"]
        t = kappa = None
        if "t" in d:
            t = np.zeros((na, n - na))
            for i, a, v in d["t"]:
                t[int(i), int(a) - na] = v
        if "kappa" in d:
            kappa = np.zeros((n, n))
            for p, q, v in d["kappa"]:
                kappa[int(p), int(q)] = v
                kappa[int(q), int(p)] = -v
        dets = [Determinant(c, int(a), int(b)) for c, a, b in d.get("determinants", [])]
        return cls(d["kind"], n, na, nb, t, kappa, d.get("eps_det", 1e-10), dets, d.get("energy"))

    @classmethod
    def from_json(cls, text: str) -> "TrialState":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_ci(cls, ci: np.ndarray, n_orb: int, n_alpha: int, n_beta: int, strings_a, strings_b,
                eps_det: float = 1e-10) -> "TrialState":
        raw = [(complex(ci[i, j]), int(a), int(b)) for i, a in enumerate(strings_a)
               for j, b in enumerate(strings_b)]
        dets, w = _truncate(raw, eps_det)
        ts = cls("ci", n_orb, n_alpha, n_beta, eps_det=eps_det, determinants=dets)
        ts.discarded_weight = w
        return ts


def _bits(s: int, n: int) -> list[int]:
    return [p for p in range(n) if s >> p & 1]


def _truncate(raw, eps):
    kept = [Determinant(c, a, b) for c, a, b in raw if abs(c) >= eps]
    dropped = sum(abs(c) ** 2 for c, _, _ in raw if abs(c) < eps)
    return kept, float(dropped)


def expand_determinants(sv: Statevector, n_alpha: int, n_beta: int, eps_det: float = 1e-10):
    """Determinants with |amplitude| >= eps_det and the discarded squared weight."""
    from .oracle import make_strings

    ci = sv.to_ci(n_alpha, n_beta)
    sa = make_strings(sv.n_orb, n_alpha)
    sb = make_strings(sv.n_orb, n_beta)
    raw = [(complex(ci[i, j]), int(a), int(b)) for i, a in enumerate(sa) for j, b in enumerate(sb)]
    return _truncate(raw, eps_det)


# ---------------------------------------------------------------------------
# Orbital rotation and VQE
# ---------------------------------------------------------------------------


def kappa_from_params(params: np.ndarray, n: int) -> np.ndarray:
    k = np.zeros((n, n))
    iu = np.triu_indices(n, 1)
    k[iu] = params
    return k - k.T


def apply_orbital_rotation(kappa: np.ndarray, ham: MOHamiltonian) -> MOHamiltonian:
    """Integrals over orbitals rotated by U = expm(kappa)."""
    kappa = np.asarray(kappa, dtype=float)
    if np.abs(kappa + kappa.T).max() > 1e-12:
        raise ValueError("kappa must be antisymmetric")
    if not np.any(kappa):
        return MOHamiltonian(ham.h1.copy(), ham.eri.copy(), ham.e_nuc)
    return ham.rotated(scipy.linalg.expm(kappa))


@dataclass
class VQEOptions:
    gtol: float = 1e-6
    fd_step: float = 1e-5
    max_sweeps: int = 50
    sweep_tol: float = 1e-9
    derivative_free_iters: int = 400
    # extra oo-upCCD starts from random kappa; canonical orbitals often sit on a
    # symmetry saddle where localising rotations have zero gradient
    kappa_restarts: int = 3
    kappa_scale: float = 0.3
    restart_seed: int = 0


def _fd_grad(f, x, h):
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _minimize(f, x0, opts: VQEOptions):
    """Derivative-free start, then quasi-Newton with central-difference gradients."""
    x = np.array(x0, dtype=float)
    if len(x) == 0:
        return x, f(x), 0.0
    if opts.derivative_free_iters:
        r = scipy.optimize.minimize(f, x, method="COBYLA",
                                    options={"maxiter": opts.derivative_free_iters, "rhobeg": 0.1})
        if r.fun <= f(x):
            x = r.x
    r = scipy.optimize.minimize(f, x, method="BFGS", jac=lambda y: _fd_grad(f, y, opts.fd_step),
                                options={"gtol": opts.gtol * 0.1, "maxiter": 2000})
    x = r.x
    gn = float(np.linalg.norm(_fd_grad(f, x, opts.fd_step)))
    return x, float(f(x)), gn


class VQEStagnation(RuntimeWarning):
    pass


def upccd_energy(t, ham: MOHamiltonian, ps: PairSpace, Hp: np.ndarray | None = None) -> float:
    x = ps.state(t)
    H = ps.hamiltonian(ham) if Hp is None else Hp
    return float(x @ H @ x)


def vqe_optimize(kind: str, ham: MOHamiltonian, n_alpha: int, n_beta: int | None = None,
                 opts: VQEOptions | None = None, eps_det: float = 1e-10) -> TrialState:
    """Optimise a pair-UCC trial on an active-space Hamiltonian."""
    opts = opts or VQEOptions()
    n_beta = n_alpha if n_beta is None else n_beta
    n = ham.n_orb
    if kind == "single-determinant":
        ts = TrialState(kind, n, n_alpha, n_beta, eps_det=eps_det)
        ts.energy = ham.energy_of_determinant(range(n_alpha), range(n_beta))
        return ts
    if kind not in ("upCCD", "oo-upCCD"):
        raise ValueError(f"unknown trial kind {kind!r}")
    if n_alpha != n_beta:
        raise ValueError("pair ansatze need n_alpha == n_beta")
    if 2 * n > 16:
        warnings.warn(f"{2 * n} spin-orbitals exceeds the 16-qubit statevector budget; "
                      "using the pair-space representation", RuntimeWarning, stacklevel=2)
    ps = PairSpace(n, n_alpha)
    nt = n_alpha * (n - n_alpha)

    def t_step(h, t0):
        Hp = ps.hamiltonian(h)
        return _minimize(lambda t: upccd_energy(t, h, ps, Hp), t0, opts)

    t, e, gn = t_step(ham, np.zeros(nt))
    kappa = None
    sweeps = 0
    if kind == "oo-upCCD":
        nk = n * (n - 1) // 2
        kp = np.zeros(nk)
        e_old = e
        for sweeps in range(1, opts.max_sweeps + 1):
            tt = t.copy()

            def ek(p):
                h = ham.rotated(scipy.linalg.expm(kappa_from_params(p, n)))
                return upccd_energy(tt, h, ps)

            kopts = VQEOptions(opts.gtol, opts.fd_step, derivative_free_iters=0)
            kp, e_k, _ = _minimize(ek, kp, kopts)
            hrot = ham.rotated(scipy.linalg.expm(kappa_from_params(kp, n)))
            t, e, gn_t = t_step(hrot, t)
            log.debug("oo-upCCD sweep %d: E = %.10f", sweeps, e)
            if abs(e_old - e) < opts.sweep_tol:
                break
            e_old = e

        def joint(z):
            h = ham.rotated(scipy.linalg.expm(kappa_from_params(z[nt:], n)))
            return upccd_energy(z[:nt], h, ps)

        # joint quasi-Newton polish removes the slow zig-zag of the alternation
        jopts = VQEOptions(opts.gtol, opts.fd_step, derivative_free_iters=0)
        z, e, gn = _minimize(joint, np.concatenate([t, kp]), jopts)
        rng = np.random.default_rng(opts.restart_seed)
        restart_energies = []
        for _ in range(opts.kappa_restarts):
            z0 = np.concatenate([np.zeros(nt), opts.kappa_scale * rng.normal(size=nk)])
            zr, er, gr = _minimize(joint, z0, jopts)
            restart_energies.append(er)
            if er < e - 1e-10:
                z, e, gn = zr, er, gr
        t, kp = z[:nt], z[nt:]
        kappa = kappa_from_params(kp, n)
    ts = TrialState(kind, n, n_alpha, n_beta, t.reshape(n_alpha, n - n_alpha), kappa, eps_det)
    ts.energy = e
    ts.meta = {"gradient_norm": gn, "sweeps": sweeps}
    if kind == "oo-upCCD":
        ts.meta["restart_energies"] = restart_energies
    if gn >= opts.gtol:
        warnings.warn(f"VQE stagnated: gradient norm {gn:.2e} (best energy {e:.10f})",
                      VQEStagnation, stacklevel=2)
        ts.meta["stagnated"] = True
    return ts


def trial_energy(trial: TrialState, ham: MOHamiltonian) -> float:
    """<Psi|H|Psi> / <Psi|Psi> through the FCI sigma (kappa applied to the integrals)."""
    from .oracle import FCIHamiltonian, FCISpace

    h = apply_orbital_rotation(trial.kappa, ham) if trial.kappa is not None else ham
    space = FCISpace.build(trial.n_orb, trial.n_alpha, trial.n_beta)
    ci, _, _ = trial.ci_matrix()
    H = FCIHamiltonian(h, space)
    c = ci.real
    return float(np.sum(c * H.sigma(c)) / np.sum(c * c))


# ---------------------------------------------------------------------------
# Overlap estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OverlapEstimator:
    mode: str = "exact"  # "exact" | "stochastic"
    shadow_seed: int = 0
    n_samples: int = 21080
    sigma: float = 1.0

    def __post_init__(self):
        if self.mode not in ("exact", "stochastic"):
            raise ValueError(f"unknown overlap mode {self.mode!r}")

    @property
    def scale(self) -> float:
        return self.sigma / math.sqrt(self.n_samples)

    def noise(self, walker_ids: np.ndarray, step: int) -> np.ndarray:
        """Relative complex noise keyed by (shadow_seed, walker index, step); zero in exact mode."""
        walker_ids = np.asarray(walker_ids, dtype=np.int64)
        if self.mode == "exact":
            return np.zeros(walker_ids.shape, dtype=complex)
        z = counter_normals(self.shadow_seed, step, 2, walker_ids, stream=1)
        return self.scale * (z[:, 0] + 1j * z[:, 1]) / math.sqrt(2.0)


def counter_normals(seed: int, step: int, n_fields: int, walker_ids: np.ndarray,
                    stream: int = 0) -> np.ndarray:
    """Standard normals indexed (walker, field); a pure function of (seed, stream, step, walker, field).

    Uniforms come from Philox keyed by (seed, stream) at counter block ``step``;
    Box-Muller consumes a fixed number of raw words per walker so any walker's draw
    is independent of which other walkers are requested.
    """
    walker_ids = np.asarray(walker_ids, dtype=np.int64)
    npair = (n_fields + 1) // 2
    words_per_walker = 2 * npair
    hi = int(walker_ids.max()) + 1 if walker_ids.size else 0
    bg = np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, stream], dtype=np.uint64),
                          counter=np.array([0, 0, 0, step & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    raw = bg.random_raw(hi * words_per_walker).reshape(hi, words_per_walker)[walker_ids]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    u1 = u[:, 0::2]
    u2 = u[:, 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty((len(walker_ids), 2 * npair))
    z[:, 0::2] = r * np.cos(2.0 * np.pi * u2)
    z[:, 1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:, :n_fields]


def determinant_overlap(trial: TrialState, phi_a: np.ndarray, phi_b: np.ndarray) -> complex:
    """Sum_i c_i^* det(chi_i^alpha^T phi_a) det(chi_i^beta^T phi_b) for unit-vector chi_i."""
    coefs, oa, ob = trial.arrays()
    da = np.linalg.det(phi_a[oa]) if trial.n_alpha else np.ones(len(coefs))
    db = np.linalg.det(phi_b[ob]) if trial.n_beta else np.ones(len(coefs))
    return complex(np.sum(np.conj(coefs) * da * db))


def estimate_overlap(est: OverlapEstimator, trial: TrialState, phi_a: np.ndarray, phi_b: np.ndarray,
                     walker_id: int = 0, step: int = 0) -> complex:
    """Active-space overlap <Psi_T|phi>; stochastic mode adds reproducible relative noise."""
    ov = determinant_overlap(trial, phi_a, phi_b)
    if est.mode == "exact":
        return ov
    return ov * (1.0 + est.noise(np.array([walker_id]), step)[0])
