"""Closed-form geometric models: unit circle, unit flat 2-torus, unit 2-sphere.

Every model exposes exact distances, geodesic interpolation, uniform sampling
and quadrature meshes, so that all downstream error is quadrature or Monte
Carlo error, never geometry error.

Chart conventions
-----------------
circle   : angle ``theta`` in ``[0, 2*pi)``, radius 1 (circumference ``2*pi``).
torus2   : ``(u, v)`` in ``[0, 1)^2``, opposite sides identified.
sphere2  : ``(colatitude, longitude)`` with colatitude in ``[0, pi]``.

Points are numpy arrays of shape ``(..., chart_dim)``; all operations are
vectorized over leading axes.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CutLocusError, InvalidInputError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class QuadratureMesh:
    """Points and volume-measure weights for integration over a model."""

    model: "ManifoldModel"
    points: np.ndarray
    weights: np.ndarray
    resolution: int

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise InvalidInputError("mesh weights must be positive")

    @property
    def size(self):
        return self.points.shape[0]

    def integrate(self, values):
        """Quadrature of pointwise values against the volume measure."""
        return np.einsum("i,...i->...", self.weights, np.asarray(values))


@dataclass
class MeshField:
    """Scalar field sampled on a quadrature mesh."""

    mesh: QuadratureMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-1] != self.mesh.size:
            raise InvalidInputError("field values do not match mesh size")

    def integral(self):
        return float(self.mesh.integrate(self.values))

    def __add__(self, other):
        vals = other.values if isinstance(other, MeshField) else other
        return MeshField(self.mesh, self.values + vals)

    def __mul__(self, c):
        return MeshField(self.mesh, self.values * c)

    __rmul__ = __mul__


class ManifoldModel:
    """Common interface of the three closed-form models."""

    kind = ""
    dim = 0
    chart_dim = 0
    volume = 0.0
    diameter = 0.0
    injectivity_radius = 0.0
    curvature_upper_bound = 0.0

    def _check_points(self, *pts):
        for p in pts:
            p = np.asarray(p, dtype=float)
            if p.shape[-1:] != (self.chart_dim,):
                raise InvalidInputError(
                    f"{self.kind} expects points with last axis {self.chart_dim}, "
                    f"got shape {p.shape}"
                )

    def normalize(self, p):
        raise NotImplementedError

    def distance(self, x, y):
        raise NotImplementedError

    def geodesic_point(self, x, y, a):
        raise NotImplementedError

    def random_points(self, rng, n):
        raise NotImplementedError

    def make_mesh(self, resolution: int) -> QuadratureMesh:
        if resolution < 4:
            raise InvalidInputError("mesh resolution must be >= 4")
        return self._make_mesh(resolution)

    def _make_mesh(self, resolution):
        raise NotImplementedError

    def unique_geodesic_scale(self) -> float:
        """Largest separation below which the local concentration bound is used.

        ``min(i_M / 2, pi / (4 sqrt(K)))`` with the flat-model convention
        ``K = 1``.
        """
        k = self.curvature_upper_bound if self.curvature_upper_bound > 0 else 1.0
        return min(self.injectivity_radius / 2.0, np.pi / (4.0 * np.sqrt(k)))

    def __repr__(self):
        return f"<{type(self).__name__} kind={self.kind!r}>"


class Circle(ManifoldModel):
    kind = "circle"
    dim = 1
    chart_dim = 1
    volume = TWO_PI
    diameter = np.pi
    injectivity_radius = np.pi
    curvature_upper_bound = 0.0

    def normalize(self, p):
        p = np.asarray(p, dtype=float)
        return np.mod(p, TWO_PI)

    def angle(self, x, y):
        """Absolute angular separation in ``[0, pi]``."""
        self._check_points(x, y)
        d = np.abs(np.asarray(x, dtype=float)[..., 0] - np.asarray(y, dtype=float)[..., 0])
        d = np.mod(d, TWO_PI)
        return np.minimum(d, TWO_PI - d)

    def distance(self, x, y):
        return self.angle(x, y)

    def geodesic_point(self, x, y, a):
        self._check_points(x, y)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        diff = np.mod(y[..., 0] - x[..., 0] + np.pi, TWO_PI) - np.pi
        if np.any(np.isclose(np.abs(diff), np.pi)):
            raise CutLocusError("antipodal points on the circle have two minimizing arcs")
        theta = np.mod(x[..., 0] + np.asarray(a) * diff, TWO_PI)
        return theta[..., None]

    def random_points(self, rng, n):
        return rng.uniform(0.0, TWO_PI, size=(n, 1))

    def _make_mesh(self, resolution):
        theta = TWO_PI * np.arange(resolution) / resolution
        w = np.full(resolution, TWO_PI / resolution)
        return QuadratureMesh(self, theta[:, None], w, resolution)


class FlatTorus2D(ManifoldModel):
    kind = "torus2"
    dim = 2
    chart_dim = 2
    volume = 1.0
    diameter = np.sqrt(2.0) / 2.0
    injectivity_radius = 0.5
    curvature_upper_bound = 0.0

    def normalize(self, p):
        return np.mod(np.asarray(p, dtype=float), 1.0)

    def _wrapped_diff(self, x, y):
        # componentwise signed difference in (-1/2, 1/2]
        d = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        return np.mod(d + 0.5, 1.0) - 0.5

    def distance(self, x, y):
        self._check_points(x, y)
        d = self._wrapped_diff(x, y)
        return np.sqrt(np.sum(d * d, axis=-1))

    def geodesic_point(self, x, y, a):
        self._check_points(x, y)
        d = self._wrapped_diff(x, y)
        if np.any(np.isclose(np.abs(d), 0.5)):
            raise CutLocusError("torus points on each other's cut locus")
        a = np.asarray(a)[..., None]
        return self.normalize(np.asarray(x, dtype=float) + a * d)

    def random_points(self, rng, n):
        return rng.uniform(0.0, 1.0, size=(n, 2))

    def _make_mesh(self, resolution):
        g = np.arange(resolution) / resolution
        u, v = np.meshgrid(g, g, indexing="ij")
        pts = np.column_stack([u.ravel(), v.ravel()])
        w = np.full(pts.shape[0], 1.0 / resolution**2)
        return QuadratureMesh(self, pts, w, resolution)


class Sphere2D(ManifoldModel):
    kind = "sphere2"
    dim = 2
    chart_dim = 2
    volume = 4.0 * np.pi
    diameter = np.pi
    injectivity_radius = np.pi
    curvature_upper_bound = 1.0

    def normalize(self, p):
        p = np.asarray(p, dtype=float).copy()
        # fold colatitude into [0, pi], shifting longitude when crossing a pole
        theta = np.mod(p[..., 0], TWO_PI)
        flip = theta > np.pi
        theta = np.where(flip, TWO_PI - theta, theta)
        phi = np.mod(p[..., 1] + np.where(flip, np.pi, 0.0), TWO_PI)
        out = np.empty_like(p)
        out[..., 0] = theta
        out[..., 1] = phi
        return out

    def embed(self, p):
        """Chart coordinates to unit vectors in R^3."""
        p = np.asarray(p, dtype=float)
        st, ct = np.sin(p[..., 0]), np.cos(p[..., 0])
        return np.stack([st * np.cos(p[..., 1]), st * np.sin(p[..., 1]), ct], axis=-1)

    def unembed(self, v):
        v = np.asarray(v, dtype=float)
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
        theta = np.arccos(np.clip(v[..., 2], -1.0, 1.0))
        phi = np.mod(np.arctan2(v[..., 1], v[..., 0]), TWO_PI)
        return np.stack([theta, phi], axis=-1)

    def cos_angle(self, x, y):
        self._check_points(x, y)
        return np.clip(np.sum(self.embed(x) * self.embed(y), axis=-1), -1.0, 1.0)

    def distance(self, x, y):
        vx, vy = self.embed(x), self.embed(y)
        dot = np.sum(vx * vy, axis=-1)
        cross = np.linalg.norm(np.cross(vx, vy), axis=-1)
        return np.arctan2(cross, np.clip(dot, -1.0, 1.0))

    def geodesic_point(self, x, y, a):
        self._check_points(x, y)
        vx, vy = self.embed(x), self.embed(y)
        omega = self.distance(x, y)
        if np.any(omega >= np.pi - 1e-12):
            raise CutLocusError("antipodal points on the sphere")
        a = np.asarray(a)
        s = np.sin(omega)
        small = s < 1e-14
        s_safe = np.where(small, 1.0, s)
        c1 = np.where(small, 1.0 - a, np.sin((1.0 - a) * omega) / s_safe)
        c2 = np.where(small, a, np.sin(a * omega) / s_safe)
        v = c1[..., None] * vx + c2[..., None] * vy
        return self.unembed(v)

    def random_points(self, rng, n):
        ct = rng.uniform(-1.0, 1.0, size=n)
        phi = rng.uniform(0.0, TWO_PI, size=n)
        return np.column_stack([np.arccos(ct), phi])

    def _make_mesh(self, resolution):
        # Gauss-Legendre in cos(colatitude) x uniform longitude; exact for
        # spherical-harmonic products up to degree 2*resolution - 1.
        nodes, glw = np.polynomial.legendre.leggauss(resolution)
        nphi = 2 * resolution
        phi = TWO_PI * np.arange(nphi) / nphi
        theta = np.arccos(nodes)
        th, ph = np.meshgrid(theta, phi, indexing="ij")
        pts = np.column_stack([th.ravel(), ph.ravel()])
        w = np.repeat(glw * (TWO_PI / nphi), nphi)
        return QuadratureMesh(self, pts, w, resolution)


CIRCLE = Circle()
TORUS2 = FlatTorus2D()
SPHERE2 = Sphere2D()

_MODELS = {m.kind: m for m in (CIRCLE, TORUS2, SPHERE2)}
# accepted aliases for config files
_ALIASES = {"circle": "circle", "torus": "torus2", "torus2": "torus2",
            "flat_torus_2d": "torus2", "sphere": "sphere2", "sphere2": "sphere2"}


def get_model(name: str) -> ManifoldModel:
    key = _ALIASES.get(str(name).lower())
    if key is None:
        raise InvalidInputError(f"unknown model {name!r}; pick one of circle, torus2, sphere2")
    return _MODELS[key]


def all_models():
    return [CIRCLE, TORUS2, SPHERE2]
