"""Phaseless AFQMC with multi-determinant (active-space) trials.

Walkers are spin-restricted: for closed-shell systems the propagator acts
identically on both spins, so one orbital matrix per walker carries both.
Trial determinants are unit-vector determinants in the MO basis ordered
(core | active | virtual); the core is always doubly occupied.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._accel import USE_NUMBA, njit
from .hamiltonian import ActiveSpacePartition, CholeskyFactorization, MOHamiltonian, cholesky_reference
from .trial import OverlapEstimator, TrialState, counter_normals

log = logging.getLogger(__name__)


class OverlapCollapse(RuntimeError):
    pass


class WeightCollapse(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Full-space trial
# ---------------------------------------------------------------------------


@dataclass
class FullSpaceTrial:
    """Trial determinants lifted to the full MO space.

    ``strings`` holds the unique occupied-orbital lists (sorted, length n_elec)
    and each determinant i points at its alpha and beta string via ``ia``/``ib``.
    """

    coefs: np.ndarray
    strings: np.ndarray  # (n_strings, n_elec) full-space indices
    ia: np.ndarray
    ib: np.ndarray
    n_orb: int
    n_core: int
    rdm1: np.ndarray  # spin-summed <Psi|a+_p a_q|Psi>, full space

    @property
    def n_elec(self) -> int:
        return self.strings.shape[1]

    @property
    def n_dets(self) -> int:
        return len(self.coefs)

    @classmethod
    def from_trial(cls, trial: TrialState, n_orb: int, n_core: int) -> "FullSpaceTrial":
        if trial.n_alpha != trial.n_beta:
            raise ValueError("spin-restricted walkers need n_alpha == n_beta")
        coefs, oa, ob = trial.arrays()
        core = np.arange(n_core)
        full_a = np.array([np.concatenate([core, n_core + o]) for o in oa], dtype=np.int64)
        full_b = np.array([np.concatenate([core, n_core + o]) for o in ob], dtype=np.int64)
        allstr = np.concatenate([full_a, full_b]) if len(full_a) else full_a
        uniq, inv = np.unique(allstr, axis=0, return_inverse=True)
        inv = inv.ravel()
        nd = len(coefs)
        norm = np.sqrt(np.sum(np.abs(coefs) ** 2))
        rdm = _trial_rdm1(trial, n_orb, n_core)
        return cls(coefs / norm, uniq, inv[:nd], inv[nd:], n_orb, n_core, rdm)

    @classmethod
    def single_determinant(cls, n_orb: int, n_elec: int) -> "FullSpaceTrial":
        rdm = np.zeros((n_orb, n_orb))
        rdm[np.arange(n_elec), np.arange(n_elec)] = 2.0
        return cls(np.ones(1, dtype=complex), np.arange(n_elec)[None, :], np.zeros(1, np.int64),
                   np.zeros(1, np.int64), n_orb, n_elec, rdm)


def _trial_rdm1(trial: TrialState, n_orb: int, n_core: int) -> np.ndarray:
    from .oracle import FCIResult, FCISpace, compute_rdms

    ci, _, _ = trial.ci_matrix()
    space = FCISpace.build(trial.n_orb, trial.n_alpha, trial.n_beta)
    c = ci.real / np.linalg.norm(ci.real)
    rd = compute_rdms(FCIResult(0.0, c, space))
    out = np.zeros((n_orb, n_orb))
    out[np.arange(n_core), np.arange(n_core)] = 2.0
    na = trial.n_orb
    out[n_core:n_core + na, n_core:n_core + na] = rd.dm1
    return out


# ---------------------------------------------------------------------------
# Propagation context
# ---------------------------------------------------------------------------


@dataclass
class AFQMCProtocol:
    n_walkers: int = 256
    n_blocks: int = 80
    steps_per_block: int = 10
    dt: float = 0.02
    seed: int = 0
    weight_cap: float = 100.0
    equilibration_fraction: float = 0.2
    ortho_interval: int = 5
    taylor_order: int = 6
    force_bias_cap: float = 1.0
    energy_clip: bool = True
    shift_feedback: float = 0.1
    population_control: str = "comb"  # "comb" | "none"

    def __post_init__(self):
        if self.population_control not in ("comb", "none"):
            raise ValueError(f"unknown population control {self.population_control!r}")

    def metadata(self) -> dict:
        return {
            "n_walkers": self.n_walkers, "n_blocks": self.n_blocks,
            "steps_per_block": self.steps_per_block, "dt": self.dt, "seed": self.seed,
            "weight_cap": self.weight_cap, "equilibration_fraction": self.equilibration_fraction,
            "ortho_interval": self.ortho_interval, "taylor_order": self.taylor_order,
            "force_bias": "walker-dependent mixed estimate, xbar = -i sqrt(dt) (<L>_phi - <L>_T), "
                          f"|xbar| capped at {self.force_bias_cap}",
            "mean_field_subtraction": "<L_gamma> of the trial 1-RDM",
            "weight_update": "hybrid, phaseless cos projection",
            "population_control": ("comb reconfiguration at every block end, slot noise streams kept"
                                   if self.population_control == "comb"
                                   else "none (scalar energy-shift feedback only)"),
            "local_energy_clip": "E_shift +/- sqrt(2/dt)" if self.energy_clip else "none",
        }


@dataclass
class PropagatorContext:
    dt: float
    chol: np.ndarray  # (n_fields, n, n), propagation vectors
    mf_shift: np.ndarray  # vbar_gamma
    exp_h_half: np.ndarray
    e0: float  # constant part: E_nuc - 0.5 sum vbar^2
    seed: int
    L_rows: np.ndarray  # (S, N*n, G): chol[g, O_s[k], q] at [s, k*n + q, g]

    @property
    def n_fields(self) -> int:
        return self.chol.shape[0]


def _half_rotated(L: np.ndarray, strings: np.ndarray) -> np.ndarray:
    G, n, _ = L.shape
    rows = L[:, strings, :]  # (G, S, N, n)
    return np.ascontiguousarray(rows.transpose(1, 2, 3, 0).reshape(len(strings), -1, G))


def build_context(ham: MOHamiltonian, chol: np.ndarray, trial: FullSpaceTrial, dt: float,
                  seed: int) -> PropagatorContext:
    L = np.asarray(chol)
    h_tilde = ham.h1 - 0.5 * np.einsum("gpr,grq->pq", L, L)
    vbar = np.einsum("gpq,pq->g", L, trial.rdm1)
    h_mf = h_tilde + np.einsum("g,gpq->pq", vbar, L)
    exp_half = scipy.linalg.expm(-0.5 * dt * h_mf)
    e0 = ham.e_nuc - 0.5 * float(vbar @ vbar)
    return PropagatorContext(dt, L, vbar, exp_half, e0, seed, _half_rotated(L, trial.strings))


# ---------------------------------------------------------------------------
# Trial evaluation kernels (batched over walkers)
# ---------------------------------------------------------------------------


@dataclass
class TrialEvaluation:
    dets: np.ndarray  # (W, S) det(phi[O_s])
    theta: np.ndarray  # (W, S, n, N) phi @ inv(phi[O_s])
    det_ov: np.ndarray  # (W, D) c_i^* det_a det_b
    overlap: np.ndarray  # (W,)
    valid: np.ndarray  # (W, S) string usable (non-singular)


@njit
def _lu_inverse_numba(phi, strings, tol):
    """det and inverse of every phi[w][O_s] by partial-pivot LU; singular blocks flagged."""
    W, n, N = phi.shape
    S = strings.shape[0]
    dets = np.zeros((W, S), dtype=np.complex128)
    inv = np.zeros((W, S, N, N), dtype=np.complex128)
    valid = np.zeros((W, S), dtype=np.bool_)
    M = np.empty((N, N), dtype=np.complex128)
    e = np.empty(N, dtype=np.complex128)
    piv = np.empty(N, dtype=np.int64)
    diag_inv = np.empty(N, dtype=np.complex128)
    for w in range(W):
        scale2 = 0.0
        for p in range(n):
            for j in range(N):
                v = phi[w, p, j]
                scale2 = max(scale2, v.real * v.real + v.imag * v.imag)
        thr2 = tol * tol * max(scale2, 1e-300)
        for s in range(S):
            for r in range(N):
                piv[r] = r
                for j in range(N):
                    M[r, j] = phi[w, strings[s, r], j]
            d = 1.0 + 0.0j
            sing = False
            for k in range(N):
                # pivot on squared modulus: avoids a sqrt per comparison
                m = k
                best = M[k, k].real * M[k, k].real + M[k, k].imag * M[k, k].imag
                for r in range(k + 1, N):
                    a2 = M[r, k].real * M[r, k].real + M[r, k].imag * M[r, k].imag
                    if a2 > best:
                        best = a2
                        m = r
                if best <= thr2:
                    sing = True
                    break
                if m != k:
                    for j in range(N):
                        tmp = M[k, j]
                        M[k, j] = M[m, j]
                        M[m, j] = tmp
                    t = piv[k]
                    piv[k] = piv[m]
                    piv[m] = t
                    d = -d
                d *= M[k, k]
                rk = 1.0 / M[k, k]
                for r in range(k + 1, N):
                    f = M[r, k] * rk
                    M[r, k] = f
                    for j in range(k + 1, N):
                        M[r, j] -= f * M[k, j]
            if sing:
                continue
            dets[w, s] = d
            valid[w, s] = True
            for r in range(N):
                diag_inv[r] = 1.0 / M[r, r]
            # P A = L U, so column c of inv(A) solves L U x = P e_c
            for c in range(N):
                for r in range(N):
                    e[r] = 1.0 if piv[r] == c else 0.0
                for r in range(N):
                    acc = e[r]
                    for j in range(r):
                        acc -= M[r, j] * e[j]
                    e[r] = acc
                for r in range(N - 1, -1, -1):
                    acc = e[r]
                    for j in range(r + 1, N):
                        acc -= M[r, j] * e[j]
                    e[r] = acc * diag_inv[r]
                for r in range(N):
                    inv[w, s, r, c] = e[r]
    return dets, inv, valid


def _lu_inverse_numpy(phi, strings, tol):
    N = phi.shape[2]
    A = phi[:, strings, :]  # (W, S, N, N)
    scale = np.abs(phi).max(axis=(1, 2))
    # smallest singular value guards against exact singularity (e.g. walkers at a determinant)
    smin = np.linalg.svd(A, compute_uv=False)[..., -1]
    valid = smin > tol * np.maximum(scale, 1e-300)[:, None]
    A_safe = np.where(valid[..., None, None], A, np.eye(N)[None, None])
    dets = np.where(valid, np.linalg.det(A_safe), 0.0)
    inv = np.where(valid[..., None, None], np.linalg.inv(A_safe), 0.0)
    return dets, inv, valid


def evaluate_trial(trial: FullSpaceTrial, phi: np.ndarray, use_numba: bool | None = None,
                   tol: float = 1e-12) -> TrialEvaluation:
    use = USE_NUMBA if use_numba is None else use_numba
    phi = np.ascontiguousarray(phi, dtype=np.complex128)
    kernel = _lu_inverse_numba if use else _lu_inverse_numpy
    dets, inv, valid = kernel(phi, trial.strings, tol)
    theta = np.matmul(phi[:, None], inv)
    det_ov = np.conj(trial.coefs)[None, :] * dets[:, trial.ia] * dets[:, trial.ib]
    return TrialEvaluation(dets, theta, det_ov, det_ov.sum(axis=1), valid)


def _string_weights(trial: FullSpaceTrial, ev: TrialEvaluation) -> np.ndarray:
    """Per-string weight: sum of normalised determinant overlaps using the string (either spin)."""
    W = ev.det_ov.shape[0]
    S = trial.strings.shape[0]
    ov = np.where(np.abs(ev.overlap) > 0, ev.overlap, 1.0)
    frac = ev.det_ov / ov[:, None]
    sw = np.zeros((W, S), dtype=complex)
    for i in range(trial.n_dets):
        sw[:, trial.ia[i]] += frac[:, i]
        sw[:, trial.ib[i]] += frac[:, i]
    return sw


def mixed_green(trial: FullSpaceTrial, ev: TrialEvaluation) -> np.ndarray:
    """Spin-summed mixed Green's function Gt with <a+_p a_q> = Gt[q, p]."""
    W = ev.theta.shape[0]
    n = trial.n_orb
    sw = _string_weights(trial, ev)
    G = np.zeros((W, n, n), dtype=complex)
    for s, occ in enumerate(trial.strings):
        G[:, :, occ] += sw[:, s, None, None] * ev.theta[:, s]
    return G


def _string_coulomb(L_rows: np.ndarray, ev: TrialEvaluation) -> np.ndarray:
    """J[w, s, g] = sum_k (L_g theta_s)[O_s[k], k] from half-rotated rows."""
    W, S = ev.dets.shape
    thT = np.swapaxes(ev.theta, 2, 3).reshape(W, S, -1)  # [w, s, k*n + q]
    J = np.empty((W, S, L_rows.shape[2]), dtype=complex)
    for s in range(S):
        J[:, s] = thT[:, s] @ L_rows[s]
    return J


def force_bias(ctx: PropagatorContext, trial: FullSpaceTrial, ev: TrialEvaluation) -> np.ndarray:
    """<L_gamma>_phi: mixed expectation of each Cholesky one-body operator."""
    J = _string_coulomb(ctx.L_rows, ev)
    return np.einsum("ws,wsg->wg", _string_weights(trial, ev), J)


# ---------------------------------------------------------------------------
# Local energy
# ---------------------------------------------------------------------------


@dataclass
class EnergyIntermediates:
    """Per-string half-rotated integrals for the generalised Slater-Condon rules.

    Two-electron terms use a tight Cholesky factorisation (default 1e-12), so
    they match the dense integrals to that threshold.
    """

    h_rows: np.ndarray  # (S, N, n)
    L_rows: np.ndarray  # (S, G*N, n): chol[g, O_s[k], q] at [s, g*N + k, q]
    e_nuc: float
    n_fields: int

    @classmethod
    def build(cls, ham: MOHamiltonian, trial: FullSpaceTrial, threshold: float = 1e-12):
        L = cholesky_reference(ham, threshold).vectors
        O = trial.strings
        G = L.shape[0]
        rows = L[:, O, :].transpose(1, 0, 2, 3).reshape(len(O), G * O.shape[1], ham.n_orb)
        return cls(ham.h1[O], np.ascontiguousarray(rows), ham.e_nuc, G)


def local_energy_batch(trial: FullSpaceTrial, ev: TrialEvaluation, ei: EnergyIntermediates) -> np.ndarray:
    """E_L = sum_i c_i^* <D_i|H|phi> / sum_i c_i^* <D_i|phi> for every walker."""
    W, S, n, N = ev.theta.shape
    G = ei.n_fields
    one = np.einsum("skq,wsqk->ws", ei.h_rows, ev.theta)
    J = np.empty((W, S, G), dtype=complex)
    X = np.empty((W, S), dtype=complex)
    for s in range(S):
        M = np.matmul(ei.L_rows[s], ev.theta[:, s]).reshape(W, G, N, N)  # (L_g theta)[O_k, l]
        J[:, s] = np.einsum("wgkk->wg", M)
        X[:, s] = np.einsum("wgkl,wglk->w", M, M)
    ia, ib = trial.ia, trial.ib
    Jd = J[:, ia] + J[:, ib]
    e_det = (ei.e_nuc + one[:, ia] + one[:, ib]
             + 0.5 * np.einsum("wdg,wdg->wd", Jd, Jd) - 0.5 * (X[:, ia] + X[:, ib]))
    ok = ev.valid[:, ia] & ev.valid[:, ib]
    num = np.sum(np.where(ok, ev.det_ov * e_det, 0.0), axis=1)
    ov = np.where(np.abs(ev.overlap) > 0, ev.overlap, 1.0)
    return num / ov


def _replaced_dets(phi: np.ndarray, occ: np.ndarray):
    """Row-replacement determinants of A = phi[occ].

    G1[k, q] = det(A with row k <- phi[q]) and
    G2[k, l, q, s] = det(A with rows k, l <- phi[q], phi[s]).
    Both stay finite when A is singular, unlike det(A) * inv(A).
    """
    n, N = phi.shape
    A = phi[occ]
    G1 = np.empty((N, n), dtype=complex)
    for k in range(N):
        M = np.repeat(A[None], n, axis=0)
        M[:, k, :] = phi
        G1[k] = np.linalg.det(M)
    G2 = np.zeros((N, N, n, n), dtype=complex)
    for k in range(N):
        for l in range(k + 1, N):
            M = np.repeat(A[None], n * n, axis=0).reshape(n, n, N, N)
            M[:, :, k, :] = phi[:, None, :]
            M[:, :, l, :] = phi[None, :, :]
            G2[k, l] = np.linalg.det(M)
            G2[l, k] = G2[k, l].T
    return np.linalg.det(A), G1, G2


def _direct_string_terms(phi, occ, h1, eri):
    d, G1, G2 = _replaced_dets(phi, occ)
    e1 = np.einsum("kq,kq->", h1[occ], G1)
    V = eri[np.ix_(occ, np.arange(len(h1)), occ, np.arange(len(h1)))]  # (k q | l s)
    e2 = 0.5 * np.einsum("kqls,klqs->", V, G2)
    return d, G1, e1, e2


def local_energy_direct(trial: FullSpaceTrial, phi: np.ndarray, ham: MOHamiltonian) -> complex:
    """Single-walker local energy from row-replacement determinants.

    Exact even when the walker is orthogonal to some trial determinants (for
    example the Hartree-Fock walker against an excited determinant), at a cost
    of O(N^2 n^2) determinants per string.
    """
    phi = np.asarray(phi, dtype=complex)
    terms = [_direct_string_terms(phi, occ, ham.h1, ham.eri) for occ in trial.strings]
    num = 0.0j
    den = 0.0j
    for i in range(trial.n_dets):
        da, Ga, e1a, e2a = terms[trial.ia[i]]
        db, Gb, e1b, e2b = terms[trial.ib[i]]
        oa, ob = trial.strings[trial.ia[i]], trial.strings[trial.ib[i]]
        V = ham.eri[np.ix_(oa, np.arange(ham.n_orb), ob, np.arange(ham.n_orb))]
        cross = np.einsum("kqls,kq,ls->", V, Ga, Gb)
        c = np.conj(trial.coefs[i])
        num += c * (ham.e_nuc * da * db + (e1a + e2a) * db + da * (e1b + e2b) + cross)
        den += c * da * db
    if abs(den) < 1e-14:
        raise OverlapCollapse("trial-walker overlap below 1e-14")
    return complex(num / den)


def local_energy(trial: FullSpaceTrial, phi: np.ndarray, ham: MOHamiltonian,
                 ei: EnergyIntermediates | None = None) -> complex:
    """Local energy of a single walker (n, N) orbital matrix."""
    ev = evaluate_trial(trial, np.asarray(phi)[None])
    if abs(ev.overlap[0]) < 1e-14:
        raise OverlapCollapse("trial-walker overlap below 1e-14")
    if not ev.valid.all():
        return local_energy_direct(trial, phi, ham)
    ei = ei or EnergyIntermediates.build(ham, trial)
    return complex(local_energy_batch(trial, ev, ei)[0])


# ---------------------------------------------------------------------------
# Virtual-correlation-energy overlap
# ---------------------------------------------------------------------------


@dataclass
class VCEOverlap:
    value: complex
    prefactor: complex
    active_overlap: complex
    singular: bool = False


def _vce_spin(phi: np.ndarray, core, active, tol: float):
    """Prefactor and normalised active block for one spin."""
    N = phi.shape[1]
    phi_c = phi[list(core)]
    phi_a = phi[list(active)]
    if len(core):
        U, sv, Vh = np.linalg.svd(phi_c, full_matrices=True)
        if sv.min() < tol:
            return None, None
        Vfull = Vh.conj().T  # [V V'] unitary
        Vp = Vfull[:, len(core):]
        pref = np.linalg.det(U) * np.prod(sv) / np.linalg.det(Vfull)
    else:
        Vp = np.eye(N, dtype=phi.dtype)
        pref = 1.0
    Q, R = np.linalg.qr(phi_a @ Vp)
    return pref * np.linalg.det(R), Q


def vce_overlap(trial: TrialState, phi_a_spin: np.ndarray, phi_b_spin: np.ndarray,
                partition: ActiveSpacePartition, estimator: OverlapEstimator | None = None,
                walker_id: int = 0, step: int = 0, tol: float = 1e-12) -> VCEOverlap:
    """Full-space overlap <core x Psi_T|phi> from a core-block SVD and an active QR.

    Rows of the walker matrices are MO indices; the partition says which rows
    are core and which active. Virtual rows never enter because the trial
    leaves them empty. The core rows precede the active rows in every trial
    determinant.
    """
    from .trial import estimate_overlap

    est = estimator or OverlapEstimator()
    core, act = partition.core, partition.active
    pa, Qa = _vce_spin(np.asarray(phi_a_spin, dtype=complex), core, act, tol)
    pb, Qb = _vce_spin(np.asarray(phi_b_spin, dtype=complex), core, act, tol)
    if pa is None or pb is None:
        return VCEOverlap(0.0, 0.0, 0.0, True)
    ov_act = estimate_overlap(est, trial, Qa, Qb, walker_id, step)
    return VCEOverlap(complex(pa * pb * ov_act), complex(pa * pb), complex(ov_act))


# ---------------------------------------------------------------------------
# Walkers and propagation
# ---------------------------------------------------------------------------


@dataclass
class Walker:
    phi: np.ndarray
    weight: float
    overlap: complex
    cos_phase: float
    index: int


@dataclass
class WalkerEnsemble:
    phi: np.ndarray  # (W, n, N) complex
    weights: np.ndarray  # (W,)
    overlaps: np.ndarray  # (W,) complex, including estimator noise
    cos_phase: np.ndarray  # (W,)
    ids: np.ndarray  # (W,)
    flags: np.ndarray  # (W,) bool, True after overlap collapse
    ev: TrialEvaluation | None = None

    @property
    def n_walkers(self) -> int:
        return len(self.weights)

    def walker(self, i: int) -> Walker:
        return Walker(self.phi[i], float(self.weights[i]), complex(self.overlaps[i]),
                      float(self.cos_phase[i]), int(self.ids[i]))


def init_walkers(n_walkers: int, trial: FullSpaceTrial, phi0: np.ndarray | None = None,
                 estimator: OverlapEstimator | None = None) -> WalkerEnsemble:
    n, N = trial.n_orb, trial.n_elec
    if phi0 is None:
        phi0 = np.eye(n)[:, :N]
    phi = np.repeat(np.asarray(phi0, dtype=complex)[None], n_walkers, axis=0)
    ev = evaluate_trial(trial, phi)
    if np.any(np.abs(ev.overlap) < 1e-14):
        raise OverlapCollapse("initial determinant has zero overlap with the trial")
    ids = np.arange(n_walkers)
    est = estimator or OverlapEstimator()
    ov = ev.overlap * (1.0 + est.noise(ids, 0))
    return WalkerEnsemble(phi, np.ones(n_walkers), ov, np.ones(n_walkers), ids,
                          np.zeros(n_walkers, dtype=bool), ev)


def _apply_propagator(ctx: PropagatorContext, phi: np.ndarray, y: np.ndarray, order: int) -> np.ndarray:
    W = phi.shape[0]
    n = phi.shape[1]
    A = (1j * math.sqrt(ctx.dt)) * (y @ ctx.chol.reshape(ctx.n_fields, n * n)).reshape(W, n, n)
    out = np.einsum("pq,wqj->wpj", ctx.exp_h_half, phi)
    term = out
    acc = out.copy()
    for k in range(1, order + 1):
        term = np.matmul(A, term) / k
        acc += term
    return np.einsum("pq,wqj->wpj", ctx.exp_h_half, acc)


def propagate_step(ens: WalkerEnsemble, ctx: PropagatorContext, trial: FullSpaceTrial, step: int,
                   e_shift: float, proto: AFQMCProtocol,
                   estimator: OverlapEstimator | None = None) -> WalkerEnsemble:
    """One Trotter step with force bias, hybrid weights and phaseless projection."""
    est = estimator or OverlapEstimator()
    sdt = math.sqrt(ctx.dt)
    ev = ens.ev if ens.ev is not None else evaluate_trial(trial, ens.phi)
    vbias = force_bias(ctx, trial, ev)
    xbar = -1j * sdt * (vbias - ctx.mf_shift[None, :])
    if proto.force_bias_cap:
        mag = np.abs(xbar)
        xbar = np.where(mag > proto.force_bias_cap, xbar * proto.force_bias_cap / np.maximum(mag, 1e-300), xbar)
    x = counter_normals(ctx.seed, step, ctx.n_fields, ens.ids)
    y = x - xbar
    phi_new = _apply_propagator(ctx, ens.phi, y, proto.taylor_order)
    ev_new = evaluate_trial(trial, phi_new)
    ov_new = ev_new.overlap * (1.0 + est.noise(ens.ids, step + 1))

    mf_phase = np.exp(-1j * sdt * (y @ ctx.mf_shift))
    fb = np.exp(np.sum(x * xbar - 0.5 * xbar * xbar, axis=1))
    alive = (ens.weights > 0) & (np.abs(ens.overlaps) > 0)
    ratio = np.where(alive, ov_new / np.where(alive, ens.overlaps, 1.0), 0.0)
    imp = ratio * fb * mf_phase * math.exp(ctx.dt * (e_shift - ctx.e0))
    dtheta = np.angle(mf_phase * ratio)
    cosd = np.cos(dtheta)
    w = ens.weights * np.abs(imp) * np.maximum(0.0, cosd)
    collapsed = np.abs(ev_new.overlap) < 1e-14
    w = np.where(collapsed | ~np.isfinite(w), 0.0, w)
    w = np.minimum(w, proto.weight_cap)
    flags = ens.flags | collapsed

    out = WalkerEnsemble(phi_new, w, ov_new, cosd, ens.ids, flags, ev_new)
    if proto.ortho_interval and (step + 1) % proto.ortho_interval == 0:
        _orthonormalize(out)
    return out


def _orthonormalize(ens: WalkerEnsemble) -> None:
    """QR each walker; overlaps and determinants rescale by 1/det(R), Green's functions do not."""
    Q, R = np.linalg.qr(ens.phi)
    dR = np.prod(np.diagonal(R, axis1=1, axis2=2), axis=1)
    dR = np.where(np.abs(dR) > 0, dR, 1.0)
    ens.phi = Q
    ens.overlaps = ens.overlaps / dR ** 2
    if ens.ev is not None:
        ev = ens.ev
        ev.dets = ev.dets / dR[:, None]
        ev.det_ov = ev.det_ov / dR[:, None] ** 2
        ev.overlap = ev.overlap / dR ** 2


def comb_reconfigure(ens: WalkerEnsemble, seed: int, block: int, replay=None):
    """Systematic resampling in place; returns ``(parents, q)`` for replay.

    ``q`` is each chosen parent's weight relative to the mean, and a copy gets
    weight ``w_parent / q``, i.e. the mean weight. Given ``replay`` from another
    run (the other leg of a correlated pair), the same parents are taken and
    the ratio ``w_parent / q`` keeps the resampling unbiased for this run's
    own weights while the two runs share one ancestry. Slot ``ids`` are not
    copied: each slot keeps its own field stream.
    """
    w = ens.weights
    n = len(w)
    if replay is None:
        total = w.sum()
        if total <= 0:
            return np.arange(n), np.ones(n)
        u = np.random.default_rng([seed, 2, block]).random()
        cum = np.cumsum(w) * (n / total)
        idx = np.minimum(np.searchsorted(cum, u + np.arange(n), side="right"), n - 1)
        q = w[idx] * (n / total)
    else:
        idx, q = replay
    ens.phi = ens.phi[idx]
    ens.overlaps = ens.overlaps[idx]
    ens.cos_phase = ens.cos_phase[idx]
    ens.flags = ens.flags[idx]
    ens.weights = np.where(q > 0, w[idx] / np.where(q > 0, q, 1.0), 0.0)
    if ens.ev is not None:
        ev = ens.ev
        ens.ev = TrialEvaluation(ev.dets[idx], ev.theta[idx], ev.det_ov[idx], ev.overlap[idx], ev.valid[idx])
    return idx, q


# ---------------------------------------------------------------------------
# Energy series and blocking
# ---------------------------------------------------------------------------


def blocking_error(x: np.ndarray) -> float:
    """Standard error of the mean with the reblocking plateau criterion of Lee et al. (2011)."""
    x = np.asarray(x, dtype=float)
    n0 = len(x)
    if n0 < 2:
        return float("nan")
    var0 = np.var(x, ddof=1)
    if var0 == 0.0:
        return 0.0
    levels = []
    y = x.copy()
    block = 1
    while len(y) >= 2:
        levels.append((block, np.sqrt(np.var(y, ddof=1) / len(y)), np.var(y, ddof=1)))
        if len(y) < 4:
            break
        m = len(y) // 2
        y = 0.5 * (y[0:2 * m:2] + y[1:2 * m:2])
        block *= 2
    chosen = levels[-1][1]
    for block, err, var in levels:
        # optimal block: B^3 > 2 n (var_B / var_0)^2, with var_B the variance of block means times B
        ratio = (err / levels[0][1]) ** 2
        if block ** 3 > 2 * n0 * ratio ** 2:
            chosen = err
            break
    return float(max(chosen, levels[0][1]))


@dataclass
class EnergySeries:
    block_energies: np.ndarray
    block_size: int
    n_equilibration: int
    weights: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def production(self) -> np.ndarray:
        return self.block_energies[self.n_equilibration:]

    @property
    def mean(self) -> float:
        return float(np.mean(self.production))

    @property
    def stderr(self) -> float:
        return blocking_error(self.production)

    def write_csv(self, path) -> None:
        e = self.block_energies
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["block", "energy", "cumulative_mean", "stderr", "equilibration"])
            for b in range(len(e)):
                if b < self.n_equilibration:
                    cm, se = e[: b + 1].mean(), float("nan")
                else:
                    seg = e[self.n_equilibration: b + 1]
                    cm = seg.mean()
                    se = blocking_error(seg) if len(seg) >= 2 else float("nan")
                wr.writerow([b, f"{e[b]:.12f}", f"{cm:.12f}", f"{se:.3e}", int(b < self.n_equilibration)])


@dataclass
class ProjectionRun:
    series: EnergySeries
    ensemble: WalkerEnsemble
    n_collapsed: int
    comb_history: list = field(default_factory=list)


def run_projection(ham: MOHamiltonian, chol: np.ndarray | CholeskyFactorization, trial: FullSpaceTrial,
                   proto: AFQMCProtocol, estimator: OverlapEstimator | None = None,
                   energy_ints: EnergyIntermediates | None = None, phi0: np.ndarray | None = None,
                   progress=None, comb_replay: list | None = None) -> ProjectionRun:
    """Phaseless projection; block energy is the weighted mixed estimator at each block end.

    ``comb_replay`` is another run's ``comb_history``; its resampling choices
    are reused so the two runs stay on common walker ancestry.
    """
    est = estimator or OverlapEstimator()
    L = chol.vectors if isinstance(chol, CholeskyFactorization) else np.asarray(chol)
    ctx = build_context(ham, L, trial, proto.dt, proto.seed)
    ei = energy_ints or EnergyIntermediates.build(ham, trial)
    ens = init_walkers(proto.n_walkers, trial, phi0, est)
    # all walkers start identical, so one (singularity-safe) evaluation suffices
    e_est = float(local_energy(trial, ens.phi[0], ham, ei).real)
    e_shift = e_est
    clip = math.sqrt(2.0 / proto.dt)
    blocks = np.zeros(proto.n_blocks)
    history: list = []
    step = 0
    for b in range(proto.n_blocks):
        for _ in range(proto.steps_per_block):
            ens = propagate_step(ens, ctx, trial, step, e_shift, proto, est)
            step += 1
            wsum = ens.weights.sum()
            if wsum < 1e-6 * proto.n_walkers:
                raise WeightCollapse(f"total weight {wsum:.3e} at step {step}; "
                                     f"{int(ens.flags.sum())} walkers collapsed")
            e_shift = e_est - proto.shift_feedback * math.log(wsum / proto.n_walkers) / proto.dt
        el = local_energy_batch(trial, ens.ev, ei).real
        if proto.energy_clip:
            el = np.clip(el, e_est - clip, e_est + clip)
        w = ens.weights
        good = w > 0
        blocks[b] = float(np.sum(w[good] * el[good]) / np.sum(w[good]))
        e_est = float(np.mean(blocks[max(0, b - 9): b + 1])) if b >= 1 else blocks[b]
        if proto.population_control == "comb":
            history.append(comb_reconfigure(ens, proto.seed, b,
                                            comb_replay[b] if comb_replay is not None else None))
        if progress:
            progress(b, blocks[b])
    neq = int(math.floor(proto.equilibration_fraction * proto.n_blocks))
    meta = proto.metadata()
    meta.update({"n_fields": int(L.shape[0]), "estimator": est.mode, "shadow_seed": est.shadow_seed,
                 "collapsed_walkers": int(ens.flags.sum())})
    series = EnergySeries(blocks, proto.steps_per_block, neq, None, meta)
    return ProjectionRun(series, ens, int(ens.flags.sum()), history)
