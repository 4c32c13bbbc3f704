"""Molecular geometry: XYZ parsing, unit handling and single-coordinate displacement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ANGSTROM_TO_BOHR = 1.8897259886
BOHR_TO_ANGSTROM = 1.0 / ANGSTROM_TO_BOHR

ATOMIC_NUMBERS = {
    "H": 1, "He": 2, "Li": 3, "Be": 4, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9, "Ne": 10,
}


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    """Nuclei with positions stored in Bohr.

    ``coords`` is an ``(n_atoms, 3)`` array that is made read-only on
    construction so geometries can be shared between runs safely.
    """

    symbols: tuple[str, ...]
    charges: tuple[int, ...]
    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float).reshape(-1, 3)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if len(self.symbols) != coords.shape[0] or len(self.charges) != coords.shape[0]:
            raise GeometryError("symbols, charges and coords disagree in length")
        for sym in self.symbols:
            if sym not in ATOMIC_NUMBERS:
                raise GeometryError(f"unknown element {sym!r}")
        n = coords.shape[0]
        for a in range(n):
            for b in range(a):
                if np.linalg.norm(coords[a] - coords[b]) <= 1e-6:
                    raise GeometryError(f"atoms {b} and {a} coincide")

    @classmethod
    def from_atoms(cls, atoms, unit: str = "angstrom") -> "Geometry":
        """Build from ``[(symbol, (x, y, z)), ...]``."""
        scale = _unit_scale(unit)
        symbols = tuple(_canonical_symbol(s) for s, _ in atoms)
        for s in symbols:
            if s not in ATOMIC_NUMBERS:
                raise GeometryError(f"unknown element {s!r}")
        coords = np.array([xyz for _, xyz in atoms], dtype=float) * scale
        return cls(symbols, tuple(ATOMIC_NUMBERS[s] for s in symbols), coords)

    @property
    def natoms(self) -> int:
        return len(self.symbols)

    @property
    def n_electrons(self) -> int:
        return int(sum(self.charges))

    @property
    def coords_angstrom(self) -> np.ndarray:
        return self.coords * BOHR_TO_ANGSTROM

    def distance(self, a: int, b: int) -> float:
        """Distance in Bohr."""
        return float(np.linalg.norm(self.coords[a] - self.coords[b]))

    def nuclear_repulsion(self) -> float:
        z = np.asarray(self.charges, dtype=float)
        e = 0.0
        for a in range(self.natoms):
            for b in range(a):
                e += z[a] * z[b] / self.distance(a, b)
        return e

    def translated(self, shift) -> "Geometry":
        return Geometry(self.symbols, self.charges, self.coords + np.asarray(shift, float))

    def rotated(self, rot) -> "Geometry":
        return Geometry(self.symbols, self.charges, self.coords @ np.asarray(rot, float).T)

    def max_nearest_neighbour_angstrom(self) -> float:
        """Largest nearest-neighbour distance, used to decide on SCF level shifting."""
        if self.natoms < 2:
            return 0.0
        d = np.linalg.norm(self.coords[:, None, :] - self.coords[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        return float(d.min(axis=1).max() * BOHR_TO_ANGSTROM)

    def to_xyz(self, comment: str = "") -> str:
        lines = [str(self.natoms), comment]
        for sym, xyz in zip(self.symbols, self.coords_angstrom):
            lines.append(f"{sym} {xyz[0]:.12f} {xyz[1]:.12f} {xyz[2]:.12f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "symbols": list(self.symbols),
            "coords_angstrom": self.coords_angstrom.tolist(),
        }


def _unit_scale(unit: str) -> float:
    u = unit.lower()
    if u in ("angstrom", "a", "ang"):
        return ANGSTROM_TO_BOHR
    if u in ("bohr", "au", "b"):
        return 1.0
    raise GeometryError(f"unknown unit {unit!r}")


def _canonical_symbol(s: str) -> str:
    s = s.strip()
    return s[:1].upper() + s[1:].lower()


def parse_xyz(text: str, unit: str = "angstrom") -> Geometry:
    """Parse an XYZ block: atom count, comment line, then ``symbol x y z`` rows."""
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise GeometryError("line 1: missing atom count")
    try:
        count = int(lines[0].split()[0])
    except ValueError:
        raise GeometryError(f"line 1: atom count is not an integer: {lines[0]!r}") from None
    body = [(i + 3, ln) for i, ln in enumerate(lines[2:]) if ln.strip()]
    if len(body) != count:
        raise GeometryError(f"line 1: atom count {count} does not match {len(body)} coordinate lines")
    atoms = []
    for lineno, ln in body:
        parts = ln.split()
        if len(parts) < 4:
            raise GeometryError(f"line {lineno}: expected 'symbol x y z', got {ln!r}")
        sym = _canonical_symbol(parts[0])
        if sym not in ATOMIC_NUMBERS:
            raise GeometryError(f"line {lineno}: unknown element {parts[0]!r}")
        try:
            xyz = tuple(float(v) for v in parts[1:4])
        except ValueError:
            raise GeometryError(f"line {lineno}: malformed coordinates in {ln!r}") from None
        atoms.append((sym, xyz))
    return Geometry.from_atoms(atoms, unit=unit)


def displace(geom: Geometry, atom: int, axis: int, delta: float) -> Geometry:
    """Copy of ``geom`` with one Cartesian coordinate shifted by ``delta`` Angstrom."""
    if not 0 <= atom < geom.natoms:
        raise IndexError(f"atom index {atom} out of range")
    if not 0 <= axis < 3:
        raise IndexError(f"axis index {axis} out of range")
    coords = np.array(geom.coords)
    coords[atom, axis] += delta * ANGSTROM_TO_BOHR
    return Geometry(geom.symbols, geom.charges, coords)


def linear_chain(symbol: str, n: int, spacing: float, axis: int = 2) -> Geometry:
    """Evenly spaced linear chain, spacing in Angstrom, first atom at the origin."""
    atoms = []
    for i in range(n):
        xyz = [0.0, 0.0, 0.0]
        xyz[axis] = i * spacing
        atoms.append((symbol, tuple(xyz)))
    return Geometry.from_atoms(atoms)


def diatomic(symbol: str, bond: float, other: str | None = None) -> Geometry:
    """Diatomic along z, bond length in Angstrom."""
    return Geometry.from_atoms([(symbol, (0.0, 0.0, 0.0)), (other or symbol, (0.0, 0.0, bond))])


def co2(bond: float) -> Geometry:
    """Linear symmetric CO2 with both C-O distances equal to ``bond`` Angstrom."""
    return Geometry.from_atoms([
        ("O", (0.0, 0.0, -bond)), ("C", (0.0, 0.0, 0.0)), ("O", (0.0, 0.0, bond)),
    ])
