"""Embedded STO-3G basis and contracted-shell normalisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Geometry

# (angular momentum, [(exponent, coefficient), ...]) per shell
_CORE_1S = (0.15432897, 0.53532814, 0.44463454)
_SP_S = (-0.09996723, 0.39951283, 0.70011547)
_SP_P = (0.15591627, 0.60768372, 0.39195739)


def _sto3g_first_row(core_exps, valence_exps):
    return [
        (0, list(zip(core_exps, _CORE_1S))),
        (0, list(zip(valence_exps, _SP_S))),
        (1, list(zip(valence_exps, _SP_P))),
    ]


STO3G = {
    "H": [(0, list(zip((3.42525091, 0.62391373, 0.1688554), _CORE_1S)))],
    "He": [(0, list(zip((6.36242139, 1.158923, 0.31364979), _CORE_1S)))],
    "Li": _sto3g_first_row((16.119575, 2.9362007, 0.7946505), (0.6362897, 0.1478601, 0.0480887)),
    "Be": _sto3g_first_row((30.167871, 5.4951153, 1.4871927), (1.3148331, 0.3055389, 0.0993707)),
    "B": _sto3g_first_row((48.791113, 8.8873622, 2.405267), (2.2369561, 0.5198205, 0.1690618)),
    "C": _sto3g_first_row((71.616837, 13.045096, 3.5305122), (2.9412494, 0.6834831, 0.2222899)),
    "N": _sto3g_first_row((99.106169, 18.052312, 4.8856602), (3.7804559, 0.8784966, 0.2857144)),
    "O": _sto3g_first_row((130.70932, 23.808861, 6.4436083), (5.0331513, 1.1695961, 0.380389)),
    "F": _sto3g_first_row((166.67913, 30.360812, 8.2168207), (6.4648032, 1.5022812, 0.4885885)),
    "Ne": _sto3g_first_row((207.01561, 37.708151, 10.205297), (8.2463151, 1.9162662, 0.6232293)),
}

BASIS_SETS = {"sto-3g": STO3G}

# Cartesian exponents of each component, in AO order
CART_COMPONENTS = {0: [(0, 0, 0)], 1: [(1, 0, 0), (0, 1, 0), (0, 0, 1)]}


class BasisError(ValueError):
    pass


def _double_factorial(n: int) -> int:
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


def primitive_norm(alpha, lmn) -> np.ndarray:
    """Normalisation of x^l y^m z^n exp(-alpha r^2)."""
    l, m, n = lmn
    big_l = l + m + n
    df = _double_factorial(2 * l - 1) * _double_factorial(2 * m - 1) * _double_factorial(2 * n - 1)
    alpha = np.asarray(alpha, dtype=float)
    return (2 * alpha / np.pi) ** 0.75 * (4 * alpha) ** (big_l / 2) / np.sqrt(df)


@dataclass(frozen=True)
class Shell:
    atom: int
    l: int
    center: np.ndarray
    exponents: np.ndarray
    coefficients: np.ndarray  # contraction coefficients, unnormalised primitives


@dataclass(frozen=True)
class BasisFunction:
    """One Cartesian AO: normalised contraction over primitives at ``center``."""

    atom: int
    shell: int
    lmn: tuple[int, int, int]
    center: np.ndarray
    exponents: np.ndarray
    coefs: np.ndarray  # include primitive and contraction normalisation


@dataclass(frozen=True)
class BasisSet:
    name: str
    shells: tuple[Shell, ...]
    functions: tuple[BasisFunction, ...]

    @property
    def nbf(self) -> int:
        return len(self.functions)

    def ao_atoms(self) -> np.ndarray:
        return np.array([f.atom for f in self.functions])

    def packed(self):
        """Flat arrays consumed by the integral kernels.

        Returns centers (nbf, 3), lmn (nbf, 3), exps (nbf, kmax), coefs (nbf, kmax),
        nprim (nbf,). Unused primitive slots carry zero coefficients.
        """
        nbf = self.nbf
        kmax = max(len(f.exponents) for f in self.functions)
        centers = np.zeros((nbf, 3))
        lmn = np.zeros((nbf, 3), dtype=np.int64)
        exps = np.ones((nbf, kmax))
        coefs = np.zeros((nbf, kmax))
        nprim = np.zeros(nbf, dtype=np.int64)
        for i, f in enumerate(self.functions):
            k = len(f.exponents)
            centers[i] = f.center
            lmn[i] = f.lmn
            exps[i, :k] = f.exponents
            coefs[i, :k] = f.coefs
            nprim[i] = k
        return centers, lmn, exps, coefs, nprim


def _contracted_self_overlap(exps, coefs, lmn) -> float:
    """<chi|chi> for a contraction of normalised primitives (same centre)."""
    l, m, n = lmn
    big_l = l + m + n
    df = _double_factorial(2 * l - 1) * _double_factorial(2 * m - 1) * _double_factorial(2 * n - 1)
    a = exps[:, None] + exps[None, :]
    s = df * np.pi ** 1.5 / (2 * a) ** big_l / a ** 1.5
    norms = primitive_norm(exps, lmn)
    c = coefs * norms
    return float(c @ s @ c)


def build_basis(geom: Geometry, name: str = "sto-3g") -> BasisSet:
    """Attach basis shells to every atom; AO order is atom, shell, then px/py/pz."""
    try:
        table = BASIS_SETS[name.lower()]
    except KeyError:
        raise BasisError(f"basis {name!r} is not embedded (available: {sorted(BASIS_SETS)})") from None
    shells = []
    functions = []
    for atom, (sym, center) in enumerate(zip(geom.symbols, geom.coords)):
        if sym not in table:
            raise BasisError(f"no {name} entry for element {sym}")
        for l, prims in table[sym]:
            if l > 1:
                raise BasisError("only s and p shells are supported")
            exps = np.array([p[0] for p in prims], dtype=float)
            cc = np.array([p[1] for p in prims], dtype=float)
            if np.any(exps <= 0):
                raise BasisError("primitive exponents must be positive")
            ishell = len(shells)
            shells.append(Shell(atom, l, np.array(center), exps, cc))
            for lmn in CART_COMPONENTS[l]:
                norms = primitive_norm(exps, lmn)
                scale = 1.0 / np.sqrt(_contracted_self_overlap(exps, cc, lmn))
                functions.append(
                    BasisFunction(atom, ishell, lmn, np.array(center), exps, cc * norms * scale)
                )
    return BasisSet(name.lower(), tuple(shells), tuple(functions))
