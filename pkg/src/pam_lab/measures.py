"""Finite initial measures: Dirac atoms plus an optional density part."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .manifolds import MeshField, QuadratureMesh
from .spectral import SpectralBasis


@dataclass
class InitialMeasure:
    """Finite measure given as weighted atoms and/or a mesh density."""

    atoms: list = field(default_factory=list)   # [(point ndarray, mass > 0), ...]
    density: MeshField | None = None

    def __post_init__(self):
        for _, mass in self.atoms:
            if mass <= 0:
                raise InvalidInputError("atom masses must be positive")
        if self.density is not None and np.any(self.density.values < 0):
            raise InvalidInputError("density part must be nonnegative")
        if not self.atoms and self.density is None:
            raise InvalidInputError("measure needs at least one atom or a density")

    @property
    def total_mass(self) -> float:
        mass = sum(m for _, m in self.atoms)
        if self.density is not None:
            mass += self.density.integral()
        return float(mass)

    def scaled(self, c: float) -> "InitialMeasure":
        atoms = [(p, c * m) for p, m in self.atoms]
        dens = None if self.density is None else MeshField(
            self.density.mesh, c * self.density.values)
        return InitialMeasure(atoms, dens)

    def leq(self, other: "InitialMeasure") -> bool:
        """Componentwise comparison on atoms and density (coupled layouts)."""
        mine = {tuple(np.round(np.ravel(p), 12)): m for p, m in self.atoms}
        theirs = {tuple(np.round(np.ravel(p), 12)): m for p, m in other.atoms}
        for key, m in mine.items():
            if m > theirs.get(key, 0.0) + 1e-12:
                return False
        if self.density is not None:
            ov = 0.0 if other.density is None else other.density.values
            if np.any(self.density.values > ov + 1e-12):
                return False
        return True


def dirac(point, mass: float = 1.0) -> InitialMeasure:
    return InitialMeasure(atoms=[(np.asarray(point, dtype=float), mass)])


def volume_measure(mesh: QuadratureMesh) -> InitialMeasure:
    return InitialMeasure(density=MeshField(mesh, np.ones(mesh.size)))


def j_mu(basis: SpectralBasis, t: float, x, mu: InitialMeasure) -> np.ndarray:
    """Homogeneous heat solution ``integral of P_t(x, y) mu(dy)``.

    Atoms are paired exactly with kernel columns; the density part goes
    through mesh quadrature.  Evaluated with the basis-truncated kernel so
    that solver and series comparisons share one discretization.
    """
    if t <= 0:
        raise InvalidInputError("j_mu needs t > 0")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.zeros(x.shape[0])
    for p, mass in mu.atoms:
        out += mass * basis.kernel_matrix(t, x, np.atleast_2d(p))[:, 0]
    if mu.density is not None:
        mesh = mu.density.mesh
        ker = basis.kernel_matrix(t, x, mesh.points)
        out += ker @ (mesh.weights * mu.density.values)
    return out


def j_mu_field(basis: SpectralBasis, t: float, mesh: QuadratureMesh,
               mu: InitialMeasure) -> MeshField:
    return MeshField(mesh, j_mu(basis, t, mesh.points, mu))
