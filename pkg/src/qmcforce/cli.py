"""``qmcforce`` command line: energies, correlated-sampling forces, entropy reports.

Every run reads one JSON config, applies ``--override`` edits, validates the
result against :data:`CONFIG_SCHEMA` and writes the resolved config next to
its artifacts.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import traceback
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from .afqmc import AFQMCProtocol
from .chem.geometry import Geometry, co2, diatomic, displace, linear_chain, parse_xyz
from .chem.integrals import compute_integrals
from .hamiltonian import ActiveSpacePartition, build_embedding, transform_to_mo
from .oracle import (DIMENSION_CAP, ENTROPY_THRESHOLD, compute_rdms, fci_ground_state,
                     orbital_entropies)
from .scf import SCFOptions, run_rhf
from .trial import OverlapEstimator

log = logging.getLogger("qmcforce")

DEFAULTS = {
    "system": {"xyz": None, "xyz_file": None, "template": None, "bond_length": None, "unit": "angstrom"},
    "basis": "sto-3g",
    "method": "qc-afqmc",
    "trial": {"kind": "upCCD", "eps_det": 1e-10},
    "active_space": "full",
    "protocol": {"n_walkers": 256, "n_blocks": 80, "steps_per_block": 10, "dt": 0.02,
                 "equilibration_fraction": 0.2, "weight_cap": 100.0, "population_control": "comb"},
    "force": None,
    "scan": None,
    "seeds": {"global": 0, "shadow": 0},
    "overlap": {"mode": "exact", "n_samples": 21080},
    "output": "qmcforce_out",
}

_num = {"type": "number"}
_int = {"type": "integer"}
_str_or_null = {"type": ["string", "null"]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["system", "method"],
    "properties": {
        "system": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "xyz": _str_or_null, "xyz_file": _str_or_null,
                "template": {"enum": [None, "h_chain", "diatomic", "co2"]},
                "symbol": {"type": "string"}, "n_atoms": _int,
                "bond_length": {"type": ["number", "null"]},
                "unit": {"enum": ["angstrom", "bohr"]},
            },
        },
        "basis": {"enum": ["sto-3g"]},
        "method": {"enum": ["rhf", "fci", "afqmc", "qc-afqmc"]},
        "trial": {
            "type": "object", "additionalProperties": False,
            "properties": {"kind": {"enum": ["single-determinant", "upCCD", "oo-upCCD", "fci"]},
                           "eps_det": _num},
        },
        "active_space": {
            "oneOf": [
                {"type": "string", "pattern": r"^(full|entropy:[0-9.eE+-]+)$"},
                {"type": "array", "items": _int, "minItems": 1},
                {"type": "object", "additionalProperties": False,
                 "required": ["n_orbitals", "n_electrons"],
                 "properties": {"n_orbitals": _int, "n_electrons": _int}},
                {"type": "object", "additionalProperties": False, "required": ["entropy"],
                 "properties": {"entropy": _num, "max_orbitals": _int, "frozen_core": _int,
                                "fci_cap": _num}},
            ]
        },
        "protocol": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_walkers": {"type": "integer", "minimum": 1},
                           "n_blocks": {"type": "integer", "minimum": 2},
                           "steps_per_block": {"type": "integer", "minimum": 1},
                           "dt": {"type": "number", "exclusiveMinimum": 0},
                           "equilibration_fraction": {"type": "number", "minimum": 0, "maximum": 0.9},
                           "weight_cap": {"type": "number", "exclusiveMinimum": 0},
                           "population_control": {"enum": ["comb", "none"]}},
        },
        "force": {
            "oneOf": [
                {"type": "null"},
                {"type": "object", "additionalProperties": False,
                 "required": ["atom", "axis", "delta"],
                 "properties": {"atom": {"type": "integer", "minimum": 0},
                                "axis": {"type": "integer", "minimum": 0, "maximum": 2},
                                "delta": {"type": "number", "exclusiveMinimum": 0}}},
            ]
        },
        "scan": {
            "oneOf": [
                {"type": "null"},
                {"type": "object", "additionalProperties": False, "required": ["bond_lengths"],
                 "properties": {"bond_lengths": {"type": "array", "items": _num}}},
            ]
        },
        "seeds": {
            "type": "object", "additionalProperties": False,
            "properties": {"global": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
                           "shadow": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}},
        },
        "overlap": {
            "type": "object", "additionalProperties": False,
            "properties": {"mode": {"enum": ["exact", "stochastic"]},
                           "n_samples": {"type": "integer", "minimum": 1}},
        },
        "output": {"type": "string"},
    },
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg: dict, item: str) -> None:
    """Apply ``dotted.path=value``; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
        if not isinstance(node, dict):
            raise ConfigError(f"override path {key!r} crosses a non-object value")
    node[parts[-1]] = value


def resolve_config(raw: dict, overrides=(), seed: int | None = None, out: str | None = None) -> dict:
    """Validate a user config and materialise every default."""
    cfg = copy.deepcopy(raw)
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg.setdefault("seeds", {})["global"] = seed
    if out is not None:
        cfg["output"] = out
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    cfg = _merge(DEFAULTS, cfg)
    sysc = cfg["system"]
    if sum(x is not None for x in (sysc.get("xyz"), sysc.get("xyz_file"), sysc.get("template"))) != 1:
        raise ConfigError("system needs exactly one of xyz, xyz_file or template")
    if sysc.get("template") and sysc.get("bond_length") is None and not cfg.get("scan"):
        raise ConfigError("template systems need bond_length (or a scan)")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_geometry(sysc: dict, bond_length: float | None = None) -> Geometry:
    if sysc.get("xyz") is not None:
        return parse_xyz(sysc["xyz"], sysc.get("unit", "angstrom"))
    if sysc.get("xyz_file") is not None:
        return parse_xyz(Path(sysc["xyz_file"]).read_text(), sysc.get("unit", "angstrom"))
    r = bond_length if bond_length is not None else sysc["bond_length"]
    tpl = sysc["template"]
    if tpl == "h_chain":
        return linear_chain(sysc.get("symbol", "H"), sysc.get("n_atoms", 4), r)
    if tpl == "diatomic":
        return diatomic(sysc.get("symbol", "N"), r)
    return co2(r)


def build_protocol(cfg: dict) -> AFQMCProtocol:
    p = cfg["protocol"]
    return AFQMCProtocol(n_walkers=p["n_walkers"], n_blocks=p["n_blocks"],
                         steps_per_block=p["steps_per_block"], dt=p["dt"], seed=cfg["seeds"]["global"],
                         weight_cap=p["weight_cap"], equilibration_fraction=p["equilibration_fraction"],
                         population_control=p["population_control"])


def build_estimator(cfg: dict) -> OverlapEstimator:
    o = cfg["overlap"]
    return OverlapEstimator(o["mode"], cfg["seeds"]["shadow"], o["n_samples"])


def entropy_report(geom: Geometry, frozen_core: int = 0, cap: float = DIMENSION_CAP,
                   threshold: float = ENTROPY_THRESHOLD):
    """Single-orbital entropies from FCI (or frozen-core CASCI) over RHF orbitals.

    Returns the report with entropies indexed by full-space orbital; frozen
    core orbitals are reported with zero entropy.
    """
    ints = compute_integrals(geom)
    mos = run_rhf(ints)
    ham = transform_to_mo(ints, mos)
    n = ham.n_orb
    ne = geom.n_electrons
    part = (ActiveSpacePartition.from_counts(n, ne, n - frozen_core, ne - 2 * frozen_core)
            if frozen_core else ActiveSpacePartition.full(n, ne))
    act, _ = build_embedding(ham, part)
    k = part.n_active_electrons // 2
    res = fci_ground_state(act, k, k, tol=1e-7, cap=cap)
    rep = orbital_entropies(compute_rdms(res), threshold)
    if frozen_core:
        w = np.zeros((n, 4))
        w[:frozen_core, 3] = 1.0
        w[frozen_core:] = rep.probabilities
        ent = np.concatenate([np.zeros(frozen_core), rep.entropies])
        rep = type(rep)(w, ent, threshold, [f"orbitals 0..{frozen_core - 1} frozen (doubly occupied)"])
    return rep, mos


def select_active(entropies: np.ndarray, threshold: float, max_orbitals: int | None = None) -> list[int]:
    """Orbitals above threshold, highest entropy first, capped, returned sorted."""
    order = np.argsort(-entropies, kind="stable")
    chosen = [int(i) for i in order if entropies[i] > threshold]
    if max_orbitals:
        chosen = chosen[:max_orbitals]
    return sorted(chosen)


def resolve_partition(cfg: dict, geom: Geometry, n_orb: int) -> tuple[ActiveSpacePartition, dict]:
    spec = cfg["active_space"]
    ne = geom.n_electrons
    info: dict = {"spec": spec}
    if spec == "full":
        return ActiveSpacePartition.full(n_orb, ne), info
    if isinstance(spec, list):
        return ActiveSpacePartition.from_indices(n_orb, ne, spec), info
    if isinstance(spec, str):
        spec = {"entropy": float(spec.split(":", 1)[1])}
    if "n_orbitals" in spec:
        return ActiveSpacePartition.from_counts(n_orb, ne, spec["n_orbitals"], spec["n_electrons"]), info
    rep, _ = entropy_report(geom, spec.get("frozen_core", 0), spec.get("fci_cap", DIMENSION_CAP),
                            spec["entropy"])
    chosen = select_active(rep.entropies, spec["entropy"], spec.get("max_orbitals"))
    if not chosen:
        raise ConfigError(f"no orbitals exceed entropy threshold {spec['entropy']} "
                          f"(max {rep.entropies.max():.4f})")
    info.update(entropies=[float(s) for s in rep.entropies], selected=chosen)
    return ActiveSpacePartition.from_indices(n_orb, ne, chosen), info


def code_version() -> str:
    try:
        return metadata.version("qmcforce")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


def _write_json(path: Path, obj) -> None:
    def default(o):
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        return str(o)

    path.write_text(json.dumps(obj, indent=1, default=default))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _prepare(cfg: dict, geom: Geometry):
    from .corrsamp import prepare_reference

    kind = "single-determinant" if cfg["method"] == "afqmc" else cfg["trial"]["kind"]
    n_orb = compute_integrals(geom).nbf
    part, info = resolve_partition(cfg, geom, n_orb)
    ref = prepare_reference(geom, kind, part)
    return ref, info


def cmd_energy(cfg: dict, out: Path) -> dict:
    geom = build_geometry(cfg["system"])
    method = cfg["method"]
    summary: dict = {"method": method, "config": cfg, "code_version": code_version(),
                     "seed": cfg["seeds"]["global"]}
    converged = True
    if method in ("rhf", "fci"):
        ints = compute_integrals(geom)
        mos = run_rhf(ints)
        summary.update(rhf_energy=mos.e_total, energy_Ha=mos.e_total, energy_err=0.0)
        converged &= mos.converged
        if method == "fci":
            from .corrsamp import working_orbitals, working_partition

            part, info = resolve_partition(cfg, geom, mos.nmo)
            ham = transform_to_mo(ints, working_orbitals(mos.C, part))
            act, _ = build_embedding(ham, working_partition(part))
            k = part.n_active_electrons // 2
            res = fci_ground_state(act, k, k, tol=1e-9)
            summary.update(energy_Ha=res.E0, fci_iterations=res.iterations, active_space=info)
    else:
        from .corrsamp import prepare_leg, run_leg

        ref, info = _prepare(cfg, geom)
        leg = prepare_leg(ref, geom)
        run = run_leg(leg, build_protocol(cfg), build_estimator(cfg))
        s = run.series
        s.write_csv(out / "energy_series.csv")
        summary.update(energy_Ha=s.mean, energy_err=s.stderr, trial_energy=ref.trial.energy,
                       trial_kind=ref.trial.kind, trial_hash=ref.trial.hash(),
                       pivot_hash=ref.pivot_hash(), n_cholesky=len(ref.pivots),
                       partition=ref.partition.to_dict(), active_space=info, afqmc=s.metadata,
                       collapsed_walkers=run.n_collapsed)
        converged &= not ref.trial.meta.get("stagnated", False)
    summary["converged"] = bool(converged)
    _write_json(out / "summary.json", summary)
    return summary


def _deterministic_force(cfg: dict, geom: Geometry) -> dict:
    from .oracle import ActiveSpaceSpec, fci_energy

    f = cfg["force"]
    opts = SCFOptions(tol=1e-11)
    p0 = run_rhf(compute_integrals(geom), opts=opts).density()
    energies = []
    for sgn in (+1.0, -1.0):
        g = displace(geom, f["atom"], f["axis"], sgn * f["delta"])
        if cfg["method"] == "rhf":
            energies.append(run_rhf(compute_integrals(g), opts=opts, guess=p0).e_total)
        else:
            energies.append(fci_energy(g, ActiveSpaceSpec(), opts, guess=p0)[1])
    e0 = (run_rhf(compute_integrals(geom)).e_total if cfg["method"] == "rhf"
          else fci_energy(geom)[1])
    return {"force_HaA": -(energies[0] - energies[1]) / (2.0 * f["delta"]), "force_err": 0.0,
            "energy_Ha": e0, "energy_err": 0.0, "rho": float("nan")}


def cmd_force(cfg: dict, out: Path) -> dict:
    from .corrsamp import (ScanRow, execute_force, plan_correlated_run, prepare_reference,
                           scan_forces, write_scan)

    if cfg.get("force") is None:
        raise ConfigError("force command needs a force spec {atom, axis, delta}")
    f = cfg["force"]
    method = cfg["method"]
    proto = build_protocol(cfg)
    est = build_estimator(cfg)
    bonds = cfg["scan"]["bond_lengths"] if cfg.get("scan") else [cfg["system"]["bond_length"]]
    points = [(f"g{i}", b, build_geometry(cfg["system"], b)) for i, b in enumerate(bonds)]
    result: dict = {"method": method, "config": cfg, "code_version": code_version()}
    if method in ("rhf", "fci"):
        rows = []
        for gid, b, g in points:
            d = _deterministic_force(cfg, g)
            rows.append({"geometry_id": gid, "bond_length_A": b, "method": method, **d})
        result["rows"] = rows
        _write_rows_csv(out / "force_table.csv", rows, proto, f["delta"], cfg["seeds"]["global"])
    else:
        def make_plan(geom):
            ref, _ = _prepare(cfg, geom)
            return plan_correlated_run(ref, f["atom"], f["axis"], f["delta"], proto, est)

        rows = scan_forces(points, make_plan, method)
        write_scan(rows, out / "force_table.csv", out / "force_table.json")
        result["rows"] = [dict(geometry_id=r.geometry_id, bond_length_A=r.bond_length_A,
                               error=r.error, provenance=r.provenance,
                               **(r.estimate.to_dict() if r.estimate else {})) for r in rows]
        if any(r.error for r in rows):
            result["converged"] = False
    result.setdefault("converged", True)
    _write_json(out / "force.json", result)
    return result


def _write_rows_csv(path, rows, proto, delta, seed):
    import csv

    from .corrsamp import SCAN_COLUMNS

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SCAN_COLUMNS)
        for r in rows:
            wr.writerow([r["geometry_id"], r["bond_length_A"], r["method"], r["energy_Ha"], r["energy_err"],
                         r["force_HaA"], r["force_err"], r["rho"], proto.n_walkers, proto.n_blocks,
                         proto.dt, delta, seed])


def cmd_active_space(cfg: dict, out: Path) -> dict:
    geom = build_geometry(cfg["system"])
    spec = cfg["active_space"]
    if isinstance(spec, list):
        result = {"mode": "manual", "selected": sorted(int(i) for i in spec), "config": cfg}
        _write_json(out / "active_space.json", result)
        return result
    if isinstance(spec, str):
        spec = {"entropy": ENTROPY_THRESHOLD if spec == "full" else float(spec.split(":", 1)[1])}
    if "entropy" not in spec:
        raise ConfigError("active-space needs an entropy spec or explicit indices")
    rep, _ = entropy_report(geom, spec.get("frozen_core", 0), spec.get("fci_cap", DIMENSION_CAP),
                            spec["entropy"])
    chosen = select_active(rep.entropies, spec["entropy"], spec.get("max_orbitals"))
    if not chosen:
        rep.notes.append(f"no orbitals exceed threshold {spec['entropy']:.4f} "
                         f"(max entropy {rep.entropies.max():.4f})")
    rep.write_json(out / "entropies.json")
    rep.write_csv(out / "entropies.csv")
    result = {"mode": "entropy", "threshold": spec["entropy"], "selected": chosen,
              "entropies": [float(s) for s in rep.entropies], "notes": rep.notes, "config": cfg}
    _write_json(out / "active_space.json", result)
    return result


COMMANDS = {"energy": cmd_energy, "force": cmd_force, "active-space": cmd_active_space}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qmcforce", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run config")
    ap.add_argument("--seed", type=int, help="global RNG seed (overrides seeds.global)")
    ap.add_argument("--out", help="output directory (overrides output)")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted-path config edit, value parsed as JSON; repeatable")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or ".")
    try:
        cfg = resolve_config(load_config(args.config), args.override, args.seed, args.out)
        out = Path(cfg["output"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved_config.json", cfg)
        result = COMMANDS[args.command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured error
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command,
               "config_error": isinstance(exc, ConfigError)}
        if not isinstance(exc, ConfigError):
            err["traceback"] = traceback.format_exc()
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "error.json", err)
        except OSError:
            pass
        print(json.dumps({k: v for k, v in err.items() if k != "traceback"}), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    print(json.dumps({k: v for k, v in result.items() if k not in ("config", "rows", "entropies")},
                     default=lambda o: float(o) if isinstance(o, np.floating) else str(o)))
    return 0 if result.get("converged", True) else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
