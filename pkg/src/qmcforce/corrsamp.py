"""Correlated-sampling finite-difference forces.

Both displaced legs share the reference Cholesky pivot order, reference-aligned
orbitals, the frozen trial parameters, the global seed and the shadow seed, so
their block energies are paired walker-for-walker and step-for-step.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .afqmc import AFQMCProtocol, EnergyIntermediates, FullSpaceTrial, blocking_error, run_projection
from .alignment import align_orbitals
from .chem.geometry import Geometry, displace
from .chem.integrals import compute_integrals
from .hamiltonian import (ActiveSpacePartition, CholeskyFactorization, MOHamiltonian, ReplayInvalid,
                          build_embedding, cholesky_reference, cholesky_replay, transform_to_mo)
from .oracle import fci_ground_state, make_strings
from .scf import MOSet, SCFOptions, run_rhf
from .trial import OverlapEstimator, TrialState, vqe_optimize

log = logging.getLogger(__name__)

TRIAL_KINDS = ("single-determinant", "upCCD", "oo-upCCD", "fci")


class LegFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Systems: one geometry in the working orbital basis
# ---------------------------------------------------------------------------


def working_orbitals(C: np.ndarray, part: ActiveSpacePartition, U: np.ndarray | None = None) -> np.ndarray:
    """Columns ordered (core | active @ U | virtual)."""
    act = C[:, list(part.active)]
    if U is not None:
        act = act @ U
    return np.hstack([C[:, list(part.core)], act, C[:, list(part.virtual)]])


def working_partition(part: ActiveSpacePartition) -> ActiveSpacePartition:
    nc, na = part.n_core, part.n_active
    n = nc + na + len(part.virtual)
    return ActiveSpacePartition(tuple(range(nc)), tuple(range(nc, nc + na)),
                                tuple(range(nc + na, n)), part.n_active_electrons)


def fci_trial(ham: MOHamiltonian, part: ActiveSpacePartition, eps_det: float = 1e-10) -> TrialState:
    """Exact ground state of the active embedding as a determinant expansion."""
    wp = working_partition(part)
    act, _ = build_embedding(ham, wp)
    k = part.n_active_electrons // 2
    res = fci_ground_state(act, k, k, tol=1e-10)
    sa = make_strings(part.n_active, k)
    ci = res.vector.reshape(len(sa), len(sa))
    ts = TrialState.from_ci(ci, part.n_active, k, k, sa, sa, eps_det)
    ts.energy = res.E0
    return ts


@dataclass
class ReferenceState:
    """Everything pinned at the reference geometry."""

    geometry: Geometry
    mos: MOSet
    partition: ActiveSpacePartition
    trial: TrialState
    pivots: list[tuple[int, int]]
    chol_threshold: float
    density: np.ndarray

    @property
    def rotation(self) -> np.ndarray | None:
        return self.trial.orbital_rotation if self.trial.kappa is not None else None

    def pivot_hash(self) -> str:
        blob = json.dumps({"threshold": self.chol_threshold, "pivots": [list(p) for p in self.pivots]})
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def prepare_reference(geom: Geometry, trial_kind: str, partition: ActiveSpacePartition | None = None,
                      chol_threshold: float = 1e-8, scf_opts: SCFOptions | None = None) -> ReferenceState:
    """SCF, trial optimisation and reference Cholesky pivots at the reference geometry."""
    if trial_kind not in TRIAL_KINDS:
        raise ValueError(f"unknown trial kind {trial_kind!r}; expected one of {TRIAL_KINDS}")
    ints = compute_integrals(geom)
    mos = run_rhf(ints, opts=scf_opts or SCFOptions(tol=1e-11))
    n = mos.nmo
    part = partition or ActiveSpacePartition.full(n, geom.n_electrons)
    part.validate(n, geom.n_electrons)
    ham0 = transform_to_mo(ints, working_orbitals(mos.C, part))
    wp = working_partition(part)
    act, _ = build_embedding(ham0, wp)
    k = part.n_active_electrons // 2
    if trial_kind == "fci":
        trial = fci_trial(ham0, part)
    else:
        trial = vqe_optimize(trial_kind, act, k)
    ham = ham0 if trial.kappa is None else transform_to_mo(
        ints, working_orbitals(mos.C, part, trial.orbital_rotation))
    chol = cholesky_reference(ham, chol_threshold)
    return ReferenceState(geom, mos, part, trial, chol.pivots, chol_threshold, mos.density())


@dataclass
class LegSystem:
    geometry: Geometry
    ham: MOHamiltonian
    chol: CholeskyFactorization
    trial: FullSpaceTrial
    trial_state: TrialState
    mos: MOSet
    alignment_warnings: list[str] = field(default_factory=list)


def prepare_leg(ref: ReferenceState, geom: Geometry, recompute_fci: bool = True,
                pivots: list[tuple[int, int]] | None = None) -> LegSystem:
    """Working Hamiltonian at ``geom`` with reference-aligned orbitals and replayed pivots."""
    ints = compute_integrals(geom)
    mos = run_rhf(ints, opts=SCFOptions(tol=1e-11), guess=ref.density)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = align_orbitals(ref.mos, mos)
    ham = transform_to_mo(ints, working_orbitals(res.C_aligned, ref.partition, ref.rotation))
    chol = cholesky_replay(ham, pivots if pivots is not None else ref.pivots, ref.chol_threshold)
    ts = ref.trial
    if ts.kind == "ci" and recompute_fci:
        ts = fci_trial(ham, ref.partition)
    ft = FullSpaceTrial.from_trial(ts, ham.n_orb, ref.partition.n_core)
    return LegSystem(geom, ham, chol, ft, ts, mos, [str(w.message) for w in caught])


def run_leg(leg: LegSystem, proto: AFQMCProtocol, estimator: OverlapEstimator | None = None,
            comb_replay: list | None = None):
    ei = EnergyIntermediates.build(leg.ham, leg.trial)
    return run_projection(leg.ham, leg.chol, leg.trial, proto, estimator, ei, comb_replay=comb_replay)


# ---------------------------------------------------------------------------
# Plans and estimates
# ---------------------------------------------------------------------------


@dataclass
class CorrelatedRunPlan:
    reference: ReferenceState
    atom: int
    axis: int
    delta: float  # Angstrom
    protocol: AFQMCProtocol
    estimator: OverlapEstimator
    seed_minus: int | None = None  # control experiments only; None shares the seed

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("displacement delta must be positive")

    @property
    def seed(self) -> int:
        return self.protocol.seed

    def describe(self) -> dict:
        return {"atom": self.atom, "axis": self.axis, "delta_A": self.delta, "seed": self.seed,
                "shadow_seed": self.estimator.shadow_seed, "estimator": self.estimator.mode,
                "pivot_hash": self.reference.pivot_hash(), "trial_hash": self.reference.trial.hash(),
                "trial_kind": self.reference.trial.kind, "partition": self.reference.partition.to_dict(),
                "seed_minus": self.seed_minus}


def plan_correlated_run(ref: ReferenceState, atom: int, axis: int, delta: float,
                        protocol: AFQMCProtocol, estimator: OverlapEstimator | None = None) -> CorrelatedRunPlan:
    if ref.trial is None:
        raise ValueError("reference state carries no trial")
    return CorrelatedRunPlan(ref, atom, axis, delta, protocol, estimator or OverlapEstimator())


@dataclass
class Diagnostics:
    rho: float
    sigma_F: float
    sigma_F_uncorrelated: float
    reduction: float
    sigma_F_formula: float


def correlation_diagnostics(e_plus: np.ndarray, e_minus: np.ndarray, delta: float) -> Diagnostics:
    """Paired-block statistics for a central difference with step ``delta``."""
    a = np.asarray(e_plus, dtype=float)
    b = np.asarray(e_minus, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired series differ in length")
    if len(a) < 4:
        raise ValueError("need at least 4 paired blocks")
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        rho = 1.0 if np.array_equal(a - a.mean(), b - b.mean()) else 0.0
    else:
        rho = float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0))
    ep, em = blocking_error(a), blocking_error(b)
    s_f = blocking_error(a - b) / (2.0 * delta)
    s_u = math.sqrt(ep ** 2 + em ** 2) / (2.0 * delta)
    s_formula = math.sqrt(max(ep ** 2 + em ** 2 - 2.0 * rho * ep * em, 0.0)) / (2.0 * delta)
    red = s_u / s_f if s_f > 0 else math.inf
    return Diagnostics(rho, s_f, s_u, red, s_formula)


@dataclass
class ForceEstimate:
    value: float  # Ha/Angstrom
    sigma: float
    rho: float
    sigma_uncorrelated: float
    energies: tuple[float, float]
    energy_errors: tuple[float, float]
    energy: float  # mean of the two legs
    energy_error: float
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"force_HaA": self.value, "force_err": self.sigma, "rho": self.rho,
                "force_err_uncorrelated": self.sigma_uncorrelated,
                "energy_plus": self.energies[0], "energy_minus": self.energies[1],
                "energy_plus_err": self.energy_errors[0], "energy_minus_err": self.energy_errors[1],
                "energy_Ha": self.energy, "energy_err": self.energy_error, "metadata": self.metadata}


def execute_force(plan: CorrelatedRunPlan, progress=None) -> ForceEstimate:
    """Run the +delta and -delta legs and difference them block by block."""
    ref = plan.reference
    meta: dict = {"plan": plan.describe(), "re_anchored": False}
    geoms = [displace(ref.geometry, plan.atom, plan.axis, s * plan.delta) for s in (+1.0, -1.0)]
    try:
        legs = [prepare_leg(ref, g) for g in geoms]
    except ReplayInvalid as exc:
        # reset the reference pivots on the + leg and replay both legs from there
        log.warning("pivot replay failed (%s); re-anchoring", exc)
        ints = compute_integrals(geoms[0])
        mos = run_rhf(ints, opts=SCFOptions(tol=1e-11), guess=ref.density)
        res = align_orbitals(ref.mos, mos)
        ham = transform_to_mo(ints, working_orbitals(res.C_aligned, ref.partition, ref.rotation))
        new = cholesky_reference(ham, ref.chol_threshold).pivots
        legs = [prepare_leg(ref, g, pivots=new) for g in geoms]
        meta.update(re_anchored=True, re_anchor_reason=str(exc))
    runs = []
    for i, leg in enumerate(legs):
        proto = plan.protocol
        replay = None
        if i == 1:
            if plan.seed_minus is not None:
                proto = replace(proto, seed=plan.seed_minus)
            else:
                # the - leg follows the + leg's resampling ancestry
                replay = runs[0].comb_history
        try:
            runs.append(run_leg(leg, proto, plan.estimator, replay))
        except Exception as exc:  # noqa: BLE001 - surfaced with leg context
            raise LegFailure(f"{'+' if i == 0 else '-'} leg failed: {exc}") from exc
        if progress:
            progress(i)
    sp, sm = runs[0].series, runs[1].series
    ep, em = sp.production, sm.production
    diag = correlation_diagnostics(ep, em, plan.delta)
    F = -(sp.mean - sm.mean) / (2.0 * plan.delta)
    e_avg = 0.5 * (ep + em)
    meta.update({
        "alignment_warnings": legs[0].alignment_warnings + legs[1].alignment_warnings,
        "n_cholesky": legs[0].chol.n_vectors, "sigma_F_formula": diag.sigma_F_formula,
        "reduction_factor": diag.reduction, "afqmc": sp.metadata,
        "collapsed_walkers": [runs[0].n_collapsed, runs[1].n_collapsed],
    })
    if diag.sigma_F > 0 and diag.sigma_F_formula > 0:
        r = diag.sigma_F / diag.sigma_F_formula
        meta["sigma_discrepancy_flag"] = bool(r > 3.0 or r < 1.0 / 3.0)
    return ForceEstimate(F, diag.sigma_F, diag.rho, diag.sigma_F_uncorrelated,
                         (sp.mean, sm.mean), (sp.stderr, sm.stderr),
                         float(e_avg.mean()), blocking_error(e_avg), meta)


# ---------------------------------------------------------------------------
# Scans
# ---------------------------------------------------------------------------

SCAN_COLUMNS = ["geometry_id", "bond_length_A", "method", "energy_Ha", "energy_err", "force_HaA",
                "force_err", "rho", "n_walkers", "n_blocks", "dt", "delta_A", "seed"]


@dataclass
class ScanRow:
    geometry_id: str
    bond_length_A: float
    method: str
    estimate: ForceEstimate | None
    protocol: AFQMCProtocol
    delta: float
    error: str | None = None
    provenance: dict = field(default_factory=dict)

    def csv_row(self) -> list:
        e = self.estimate
        nan = float("nan")
        return [self.geometry_id, self.bond_length_A, self.method,
                e.energy if e else nan, e.energy_error if e else nan,
                e.value if e else nan, e.sigma if e else nan, e.rho if e else nan,
                self.protocol.n_walkers, self.protocol.n_blocks, self.protocol.dt, self.delta,
                self.protocol.seed]


def scan_forces(points, make_plan, method: str = "qc-afqmc", progress=None) -> list[ScanRow]:
    """Force estimates over ``points`` = [(geometry_id, bond_length_A, Geometry), ...].

    ``make_plan(geometry)`` builds the plan for one point. Failures are recorded
    per row and the scan continues.
    """
    rows = []
    for gid, bond, geom in points:
        plan = None
        try:
            plan = make_plan(geom)
            est = execute_force(plan)
            row = ScanRow(gid, bond, method, est, plan.protocol, plan.delta, None,
                          {"pivot_hash": plan.reference.pivot_hash(),
                           "trial_hash": plan.reference.trial.hash()})
        except Exception as exc:  # noqa: BLE001 - recorded per row
            log.error("scan point %s failed: %s", gid, exc)
            proto = plan.protocol if plan else AFQMCProtocol()
            row = ScanRow(gid, bond, method, None, proto, plan.delta if plan else float("nan"),
                          f"{type(exc).__name__}: {exc}")
        rows.append(row)
        if progress:
            progress(row)
    return rows


def write_scan(rows: list[ScanRow], csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SCAN_COLUMNS)
        for r in rows:
            wr.writerow(r.csv_row())
    if json_path is not None:
        out = []
        for r in rows:
            d = dict(zip(SCAN_COLUMNS, r.csv_row()))
            d.update(error=r.error, provenance=r.provenance,
                     estimate=r.estimate.to_dict() if r.estimate else None)
            out.append(d)
        with open(json_path, "w") as fh:
            json.dump(out, fh, indent=1, default=float)
