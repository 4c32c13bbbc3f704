"""Maximal-overlap alignment of molecular orbitals across nearby geometries."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .scf import MOSet

log = logging.getLogger(__name__)


class AlignmentError(RuntimeError):
    pass


@dataclass
class AlignmentBlock:
    indices: tuple[int, ...]
    rotation: np.ndarray
    singular_values: np.ndarray


@dataclass
class AlignmentResult:
    C_aligned: np.ndarray
    blocks: list[AlignmentBlock]
    diagnostics: np.ndarray  # <ref_i|aligned_i> in the orthonormal representation
    warnings: list[str] = field(default_factory=list)


def _inv_sqrt(S, eps):
    w, v = np.linalg.eigh(S)
    return (v / np.sqrt(w + eps)) @ v.T


def _sqrt(S):
    w, v = np.linalg.eigh(S)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def degenerate_groups(eps: np.ndarray, delta_thresh: float) -> list[list[int]]:
    """Chain consecutive orbitals whose energy gap is below ``delta_thresh``."""
    groups = [[0]] if len(eps) else []
    for i in range(1, len(eps)):
        if eps[i] - eps[i - 1] < delta_thresh:
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def align_orbitals(ref: MOSet, target: MOSet, delta_thresh: float = 1e-6,
                   eps_reg: float = 1e-10, S_ref: np.ndarray | None = None,
                   S_target: np.ndarray | None = None) -> AlignmentResult:
    """Rotate target orbitals within degenerate groups to best match the reference.

    Both orbital sets are taken to the Lowdin-orthogonalised AO representation
    (``S^{1/2} C``), where the overlap between sets is a plain inner product.
    Each group of near-degenerate target orbitals gets the orthogonal rotation
    maximising ``trace(R^T O)``, constrained to ``det R = +1``; afterwards every
    orbital is signed so its overlap with the reference is non-negative.
    """
    S_ref = ref.S if S_ref is None else S_ref
    S_tgt = target.S if S_target is None else S_target
    if ref.C.shape != target.C.shape:
        raise ValueError("reference and target orbital sets differ in shape")
    A_ref = _sqrt(S_ref) @ ref.C
    A_tgt = _sqrt(S_tgt) @ target.C
    # re-orthonormalise (guards against loosely converged inputs)
    A_ref = A_ref @ _inv_sqrt(A_ref.T @ A_ref, eps_reg)
    A_tgt = A_tgt @ _inv_sqrt(A_tgt.T @ A_tgt, eps_reg)
    O = A_ref.T @ A_tgt
    sv_all = np.linalg.svd(O, compute_uv=False)
    if sv_all.min() < 1e-8:
        raise AlignmentError("reference/target overlap matrix is numerically singular")

    C_out = np.array(target.C, dtype=float)
    msgs: list[str] = []
    blocks: list[AlignmentBlock] = []
    n_occ = target.n_occ
    for grp in degenerate_groups(target.eps, delta_thresh):
        g = np.array(grp)
        Ok = O[np.ix_(g, g)]
        if len(g) == 1:
            R = np.ones((1, 1))
            sv = np.abs(Ok[0])
        else:
            U, sv, Vt = np.linalg.svd(Ok)
            # target columns are mixed by M = V U^T so that C_tgt M matches C_ref
            M = Vt.T @ U.T
            if np.linalg.det(M) < 0:
                U[:, -1] *= -1.0
                M = Vt.T @ U.T
            R = M.T
            C_out[:, g] = C_out[:, g] @ M
            if g.min() < n_occ <= g.max():
                msgs.append(f"degenerate group {grp} straddles the occupied/virtual boundary")
        if sv.min() < 0.1:
            msgs.append(f"orbital character changed in group {grp} (min singular value {sv.min():.3f})")
        blocks.append(AlignmentBlock(tuple(int(i) for i in g), R, np.asarray(sv)))

    A_out = _sqrt(S_tgt) @ C_out
    diag = np.einsum("pi,pi->i", A_ref, A_out)
    flip = diag < 0
    C_out[:, flip] *= -1.0
    diag = np.abs(diag)
    for i in np.flatnonzero(diag < 0.9):
        msgs.append(f"orbital {i} overlap {diag[i]:.3f} < 0.9; possible reordering")
    for m in msgs:
        warnings.warn(m, RuntimeWarning, stacklevel=2)
    return AlignmentResult(C_out, blocks, diag, msgs)


def aligned_moset(target: MOSet, result: AlignmentResult) -> MOSet:
    """Copy of ``target`` carrying the aligned coefficients."""
    return MOSet(result.C_aligned, target.eps.copy(), target.n_occ, target.e_total, target.S,
                 target.converged, target.iterations, target.residual, list(target.energy_history))
