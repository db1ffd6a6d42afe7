"""The three-distance bridge energy and its concentration inequalities.

For ``a`` in (0, 1) and points ``x, y, z`` the energy is

    E_{a;x,y}(z) = (1-a) d(x,z)^2 + a d(z,y)^2 - a (1-a) d(x,y)^2 ,

the rescaled exponent governing how a pinned diffusion from ``x`` to ``y``
concentrates around the geodesic interpolation point.  The module verifies,
by exhaustive sampling, the global lower bound by the squared radial defect,
the exact defect decomposition, and the local quadratic lower bound with a
measured concentration constant.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .manifolds import ManifoldModel


def bridge_energy(model: ManifoldModel, a, x, y, z):
    """Energy ``(1-a) d(x,z)^2 + a d(z,y)^2 - a(1-a) d(x,y)^2``; vectorized."""
    a = np.asarray(a, dtype=float)
    dxz = model.distance(x, z)
    dzy = model.distance(z, y)
    dxy = model.distance(x, y)
    return (1.0 - a) * dxz**2 + a * dzy**2 - a * (1.0 - a) * dxy**2


def bridge_energy_time(model: ManifoldModel, s, t, x, y, z):
    """Time-parametrized form: ``bridge_energy`` with ``a = s/t`` rescaled by
    ``t / (s (t - s))``."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s <= 0) or np.any(s >= t):
        raise InvalidInputError("need 0 < s < t")
    a = s / t
    return bridge_energy(model, a, x, y, z) * t / (s * (t - s))


def defects(model: ManifoldModel, a, x, y, z):
    """Signed defects ``r = d(x,z) - a d(x,y)`` and ``l = (1-a) d(x,y) - d(y,z)``.

    The triangle inequality forces ``r - l >= 0``, with equality exactly when
    ``z`` sits on a minimizing geodesic from ``x`` to ``y``.
    """
    a = np.asarray(a, dtype=float)
    dxy = model.distance(x, y)
    r = model.distance(x, z) - a * dxy
    el = (1.0 - a) * dxy - model.distance(y, z)
    return r, el


def decomposition_residual(model: ManifoldModel, a, x, y, z):
    """Energy minus ``2a(1-a) d (r - l) + (1-a) r^2 + a l^2``; identically zero
    on any metric space up to roundoff."""
    a = np.asarray(a, dtype=float)
    d = model.distance(x, y)
    r, el = defects(model, a, x, y, z)
    recon = 2.0 * a * (1.0 - a) * d * (r - el) + (1.0 - a) * r**2 + a * el**2
    return bridge_energy(model, a, x, y, z) - recon


@dataclass
class SweepReport:
    """Extremes collected over a random sweep of (a, x, y, z) tuples."""

    model: str
    samples: int
    max_bound_violation: float
    max_negative_energy: float
    max_defect_violation: float
    max_decomposition_residual: float

    def as_row(self):
        return {
            "model": self.model,
            "samples": self.samples,
            "max_bound_violation": float(self.max_bound_violation),
            "max_negative_energy": float(self.max_negative_energy),
            "max_defect_violation": float(self.max_defect_violation),
            "max_decomposition_residual": float(self.max_decomposition_residual),
        }


def check_global_bound(model: ManifoldModel, samples: int, seed=0,
                       batch: int = 200_000) -> SweepReport:
    """Random sweep of the global bound ``energy >= r^2`` plus side invariants.

    Reports the worst violation of each inequality; the contracts are
    ``max_bound_violation <= 1e-12`` and likewise for the others.
    """
    if samples < 1:
        raise InvalidInputError("need at least one sample")
    rng = np.random.default_rng(seed)
    worst_bound = -np.inf
    worst_neg = -np.inf
    worst_defect = -np.inf
    worst_resid = 0.0
    done = 0
    while done < samples:
        n = min(batch, samples - done)
        a = rng.uniform(0.01, 0.99, size=n)
        x = model.random_points(rng, n)
        y = model.random_points(rng, n)
        z = model.random_points(rng, n)
        e = bridge_energy(model, a, x, y, z)
        r, el = defects(model, a, x, y, z)
        worst_bound = max(worst_bound, float(np.max(r**2 - e)))
        worst_neg = max(worst_neg, float(np.max(-e)))
        worst_defect = max(worst_defect, float(np.max(el - r)))
        worst_resid = max(worst_resid, float(np.max(np.abs(
            decomposition_residual(model, a, x, y, z)))))
        done += n
    return SweepReport(model.kind, samples, worst_bound, worst_neg,
                       worst_defect, worst_resid)


@dataclass
class ZetaEstimate:
    """Measured concentration constants for the local quadratic lower bound."""

    model: str
    scale: float
    samples: int
    zeta_local: float       # z restricted to the geodesic tube of radius `scale`
    zeta_global: float      # z anywhere on the model
    histogram_edges: np.ndarray
    histogram_counts: np.ndarray

    def as_row(self):
        return {
            "model": self.model,
            "scale": float(self.scale),
            "samples": self.samples,
            "zeta_local": float(self.zeta_local),
            "zeta_global": float(self.zeta_global),
        }


def _sample_close_pairs(model, rng, n, scale):
    """Pairs with d(x, y) < scale, by sampling y in a chart ball around x."""
    x = model.random_points(rng, n)
    if model.kind == "sphere2":
        # rotate a cap sample around the north pole onto x
        r = scale * np.sqrt(rng.uniform(0.0, 1.0, size=n))
        psi = rng.uniform(0.0, 2 * np.pi, size=n)
        north = np.column_stack([r, psi])
        vx = model.embed(x)
        vn = model.embed(north)
        # rotation taking e_z to vx, applied to vn (Rodrigues with axis e_z x vx)
        ez = np.array([0.0, 0.0, 1.0])
        axis = np.cross(np.broadcast_to(ez, vx.shape), vx)
        norm = np.linalg.norm(axis, axis=-1, keepdims=True)
        small = norm[:, 0] < 1e-12
        axis = np.where(norm > 1e-12, axis / np.maximum(norm, 1e-300), 0.0)
        cosw = np.clip(vx[:, 2], -1, 1)[:, None]
        sinw = np.sqrt(np.maximum(0.0, 1 - cosw**2))
        y = (vn * cosw + np.cross(axis, vn) * sinw
             + axis * np.sum(axis * vn, axis=-1, keepdims=True) * (1 - cosw))
        y[small] = vn[small]
        return x, model.unembed(y)
    if model.kind == "circle":
        off = rng.uniform(-scale, scale, size=(n, 1))
        return x, model.normalize(x + off)
    # torus: rejection from the square bounding box
    off = rng.uniform(-scale, scale, size=(n, 2))
    keep = np.sum(off**2, axis=1) < scale**2
    while not np.all(keep):
        m = int(np.sum(~keep))
        off[~keep] = rng.uniform(-scale, scale, size=(m, 2))
        keep = np.sum(off**2, axis=1) < scale**2
    return x, model.normalize(x + off)


def _ball_around(model, rng, centers, radius):
    n = centers.shape[0]
    if model.kind == "circle":
        off = rng.uniform(-radius, radius, size=(n, 1))
        return model.normalize(centers + off)
    if model.kind == "torus2":
        off = rng.uniform(-radius, radius, size=(n, 2))
        keep = np.sum(off**2, axis=1) < radius**2
        while not np.all(keep):
            m = int(np.sum(~keep))
            off[~keep] = rng.uniform(-radius, radius, size=(m, 2))
            keep = np.sum(off**2, axis=1) < radius**2
        return model.normalize(centers + off)
    # sphere cap around each center
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    psi = rng.uniform(0.0, 2 * np.pi, size=n)
    cap = np.column_stack([r, psi])
    vc = model.embed(centers)
    vn = model.embed(cap)
    ez = np.array([0.0, 0.0, 1.0])
    axis = np.cross(np.broadcast_to(ez, vc.shape), vc)
    norm = np.linalg.norm(axis, axis=-1, keepdims=True)
    axis = np.where(norm > 1e-12, axis / np.maximum(norm, 1e-300), 0.0)
    cosw = np.clip(vc[:, 2], -1, 1)[:, None]
    sinw = np.sqrt(np.maximum(0.0, 1 - cosw**2))
    z = (vn * cosw + np.cross(axis, vn) * sinw
         + axis * np.sum(axis * vn, axis=-1, keepdims=True) * (1 - cosw))
    z[norm[:, 0] < 1e-12] = vn[norm[:, 0] < 1e-12]
    return model.unembed(z)


def estimate_zeta(model: ManifoldModel, scale: float, samples: int, seed=0,
                  exclude_radius: float = 1e-8, bins: int = 60) -> ZetaEstimate:
    """Measure the smallest ratio ``energy / d(gamma_xy(a), z)^2``.

    Pairs satisfy ``d(x, y) < scale`` which must not exceed the model's
    unique-geodesic scale.  Two minima are reported: ``zeta_local`` restricts
    ``z`` to the tube of radius ``scale`` around the interpolation point (the
    regime in which the flat models realize the Euclidean identity with
    constant one), while ``zeta_global`` lets ``z`` roam the whole model and
    verifies that the constant stays positive.  Ratios with
    ``d(gamma_xy(a), z) < exclude_radius`` are dropped to avoid 0/0.
    """
    if not 0 < scale <= model.unique_geodesic_scale() + 1e-15:
        raise InvalidInputError(
            f"scale must lie in (0, {model.unique_geodesic_scale()!r}]")
    rng = np.random.default_rng(seed)
    ratios_local = []
    ratios_global = []
    batch = 100_000
    done = 0
    while done < samples:
        n = min(batch, samples - done)
        a = rng.uniform(0.01, 0.99, size=n)
        x, y = _sample_close_pairs(model, rng, n, scale)
        gam = model.geodesic_point(x, y, a)
        for which, z in (("local", _ball_around(model, rng, gam, scale)),
                         ("global", model.random_points(rng, n))):
            dgz = model.distance(gam, z)
            keep = dgz > exclude_radius
            ratio = bridge_energy(model, a[keep], x[keep], y[keep], z[keep]) \
                / dgz[keep] ** 2
            (ratios_local if which == "local" else ratios_global).append(ratio)
        done += n
    ratios_local = np.concatenate(ratios_local)
    ratios_global = np.concatenate(ratios_global)
    all_ratios = np.concatenate([ratios_local, ratios_global])
    counts, edges = np.histogram(np.minimum(all_ratios, 2.0), bins=bins,
                                 range=(0.0, 2.0))
    return ZetaEstimate(model.kind, scale, samples,
                        float(np.min(ratios_local)),
                        float(np.min(ratios_global)),
                        edges, counts)
