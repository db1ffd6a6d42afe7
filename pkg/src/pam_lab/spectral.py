"""Laplace-Beltrami eigenbases, heat kernels and Gaussian comparison bounds.

Two kernel evaluation paths coexist on purpose:

* ``SpectralBasis.kernel_matrix`` is the *truncated* spectral sum over the
  basis shells.  The noise sampler, the moment engine and the Monte Carlo
  solver all live in this truncated Galerkin algebra, so using the truncated
  kernel keeps them mutually consistent and makes all mesh quadratures of
  band-limited products exact.

* ``heat_kernel`` is the accuracy-controlled density: it checks the spectral
  tail bound against a tolerance, falls back to image sums on the flat models
  at small times, and refuses evaluations it cannot certify.  This path is the
  reference for all verification sweeps.

The semigroup convention is ``exp(-lambda_n * t / 2)``: the kernel is the
transition density of Brownian motion generated by half the Laplacian.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import sph_harm_y

from .errors import DegenerateKernelError, InvalidInputError, TruncationError
from .manifolds import CIRCLE, SPHERE2, TORUS2, ManifoldModel, TWO_PI

_TAIL_TOL = 1e-10


# ---------------------------------------------------------------------------
# basis construction


class SpectralBasis:
    """Ordered eigenpairs of minus the Laplacian on one model.

    ``shells`` is the per-model truncation parameter: the largest circular
    frequency on the circle, the largest per-axis frequency on the torus, and
    the largest spherical-harmonic degree on the sphere.  All shells are
    complete, so truncated kernels admit the addition-theorem closed forms.
    """

    def __init__(self, model: ManifoldModel, shells: int):
        if shells < 1:
            raise InvalidInputError("need at least one nonzero shell")
        self.model = model
        self.shells = int(shells)
        self.eigenvalues = self._eigenvalues()
        self.n_modes = self.eigenvalues.size

    # -- eigenvalue layout ---------------------------------------------------

    def _eigenvalues(self):
        m = self.model
        if m.kind == "circle":
            k = np.arange(1, self.shells + 1)
            lam = np.concatenate([[0.0], np.repeat(k.astype(float) ** 2, 2)])
        elif m.kind == "torus2":
            j = np.arange(-self.shells, self.shells + 1)
            jj, kk = np.meshgrid(j, j, indexing="ij")
            lam = (4.0 * np.pi**2) * (jj**2 + kk**2).ravel().astype(float)
            self._torus_freqs = np.column_stack([jj.ravel(), kk.ravel()])
            order = np.argsort(lam, kind="stable")
            self._torus_freqs = self._torus_freqs[order]
            lam = lam[order]
        elif m.kind == "sphere2":
            ell = np.arange(self.shells + 1)
            lam = np.repeat((ell * (ell + 1)).astype(float), 2 * ell + 1)
            self._sphere_lm = [(l, mm) for l in ell for mm in range(-l, l + 1)]
        else:  # pragma: no cover
            raise InvalidInputError(f"no basis for model kind {m.kind!r}")
        return lam

    # -- eigenfunction evaluation ---------------------------------------------

    def evaluate(self, points) -> np.ndarray:
        """Matrix of eigenfunction values, shape ``(npoints, n_modes)``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = self.model
        if m.kind == "circle":
            theta = pts[:, 0]
            cols = [np.full(theta.shape, 1.0 / np.sqrt(TWO_PI))]
            for k in range(1, self.shells + 1):
                cols.append(np.cos(k * theta) / np.sqrt(np.pi))
                cols.append(np.sin(k * theta) / np.sqrt(np.pi))
            return np.column_stack(cols)
        if m.kind == "torus2":
            return self._torus_eval(pts)
        return self._sphere_eval(pts)

    def _torus_eval(self, pts):
        # real 1D factors: j > 0 -> sqrt(2) cos(2 pi j u); j < 0 -> sqrt(2) sin(2 pi |j| u)
        def factor(freqs, coord):
            out = np.empty((coord.size, freqs.size))
            for i, j in enumerate(freqs):
                if j == 0:
                    out[:, i] = 1.0
                elif j > 0:
                    out[:, i] = np.sqrt(2.0) * np.cos(TWO_PI * j * coord)
                else:
                    out[:, i] = np.sqrt(2.0) * np.sin(TWO_PI * (-j) * coord)
            return out

        ju = self._torus_freqs[:, 0]
        kv = self._torus_freqs[:, 1]
        fu = factor(np.arange(-self.shells, self.shells + 1), pts[:, 0])
        fv = factor(np.arange(-self.shells, self.shells + 1), pts[:, 1])
        iu = ju + self.shells
        iv = kv + self.shells
        return fu[:, iu] * fv[:, iv]

    def _sphere_eval(self, pts):
        theta, phi = pts[:, 0], pts[:, 1]
        cols = np.empty((pts.shape[0], self.n_modes))
        for i, (l, mm) in enumerate(self._sphere_lm):
            if mm == 0:
                cols[:, i] = np.real(sph_harm_y(l, 0, theta, phi))
            elif mm > 0:
                y = sph_harm_y(l, mm, theta, phi)
                cols[:, i] = np.sqrt(2.0) * (-1.0) ** mm * np.real(y)
            else:
                y = sph_harm_y(l, -mm, theta, phi)
                cols[:, i] = np.sqrt(2.0) * (-1.0) ** mm * np.imag(y)
        return cols

    # -- truncated heat kernel -------------------------------------------------

    def heat_weights(self, t: float) -> np.ndarray:
        return np.exp(-self.eigenvalues * t / 2.0)

    def kernel_matrix(self, t, x, y=None, clamp=False):
        """Truncated heat kernel ``sum_n exp(-lambda_n t/2) phi_n(x) phi_n(y)``.

        ``x`` and ``y`` are point arrays; the result has shape
        ``(len(x), len(y))``.  Multiplicity shells are collapsed through the
        addition theorems, so no eigenfunction matrices are materialized.
        """
        if t < 0:
            raise InvalidInputError("kernel time must be nonnegative")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = x if y is None else np.atleast_2d(np.asarray(y, dtype=float))
        m = self.model
        if m.kind == "circle":
            dtheta = x[:, None, 0] - y[None, :, 0]
            out = _circle_cos_series(dtheta, t, self.shells)
        elif m.kind == "torus2":
            du = x[:, None, 0] - y[None, :, 0]
            dv = x[:, None, 1] - y[None, :, 1]
            out = _torus_axis_series(du, t, self.shells) * _torus_axis_series(dv, t, self.shells)
        else:
            cosg = np.clip(
                np.einsum("ik,jk->ij", m.embed(x), m.embed(y)), -1.0, 1.0
            )
            out = _sphere_legendre_series(cosg, t, self.shells)
        if clamp:
            out = np.maximum(out, 0.0)
        return out

    def kernel_mesh_matrix(self, t: float, mesh) -> np.ndarray:
        """Truncated kernel on mesh x mesh, exploiting the difference
        structure of the uniform flat meshes (circulant rows) and the cached
        cosine Gram matrix on the sphere."""
        m = self.model
        if m.kind == "circle" and mesh.resolution == mesh.size:
            n = mesh.size
            row = _circle_cos_series(TWO_PI * np.arange(n) / n, t, self.shells)
            idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
            return row[idx]
        if m.kind == "torus2":
            n = mesh.resolution
            rowa = _torus_axis_series(np.arange(n) / n, t, self.shells)
            idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
            a = rowa[idx]
            full = np.einsum("ac,bd->abcd", a, a)
            return full.reshape(n * n, n * n)
        if m.kind == "sphere2":
            cosg = getattr(mesh, "_cos_gram", None)
            if cosg is None:
                emb = m.embed(mesh.points)
                cosg = np.clip(emb @ emb.T, -1.0, 1.0)
                object.__setattr__(mesh, "_cos_gram", cosg)
            return _sphere_legendre_series(cosg, t, self.shells)
        return self.kernel_matrix(t, mesh.points)

    def kernel_tail_bound(self, t: float) -> float:
        """Upper bound for the sup of the omitted spectral tail at time ``t``."""
        return _tail_bound(self.model, self.shells, t)

    def min_time(self, tol: float = _TAIL_TOL) -> float:
        """Smallest time at which the truncated kernel is certified to ``tol``."""
        lo, hi = 1e-12, 10.0
        if _tail_bound(self.model, self.shells, hi) > tol:
            raise TruncationError("basis too small even at t = 10")
        for _ in range(200):
            mid = np.sqrt(lo * hi)
            if _tail_bound(self.model, self.shells, mid) > tol:
                lo = mid
            else:
                hi = mid
        return hi

    def __repr__(self):
        return (f"<SpectralBasis {self.model.kind} shells={self.shells} "
                f"modes={self.n_modes}>")


def build_basis(model: ManifoldModel, shells: int) -> SpectralBasis:
    return SpectralBasis(model, shells)


# ---------------------------------------------------------------------------
# closed-form kernel series (shared by truncated and reference paths)


def _circle_cos_series(dtheta, t, kmax):
    k = np.arange(1, kmax + 1, dtype=float)
    w = np.exp(-(k**2) * t / 2.0) / np.pi
    out = np.tensordot(np.cos(np.multiply.outer(dtheta, k)), w, axes=([-1], [0]))
    return out + 1.0 / TWO_PI


def _torus_axis_series(dw, t, jmax):
    j = np.arange(1, jmax + 1, dtype=float)
    w = 2.0 * np.exp(-(TWO_PI * j) ** 2 * t / 2.0)
    return 1.0 + np.tensordot(np.cos(TWO_PI * np.multiply.outer(dw, j)), w, axes=([-1], [0]))


def _sphere_legendre_series(cosg, t, lmax):
    ell = np.arange(lmax + 1, dtype=float)
    coeffs = np.exp(-ell * (ell + 1) * t / 2.0) * (2 * ell + 1) / (4.0 * np.pi)
    return np.polynomial.legendre.legval(cosg, coeffs)


def _tail_bound(model, shells, t):
    # sup over x,y of the omitted tail, via sup |phi|^2 envelopes
    if model.kind == "circle":
        k = np.arange(shells + 1, shells + 2000, dtype=float)
        s = np.sum(2.0 * np.exp(-(k**2) * t / 2.0)) / np.pi
        # geometric remainder of the probe window
        s += 2.0 / np.pi * np.exp(-((shells + 2000.0) ** 2) * t / 2.0) / max(
            1e-300, 1.0 - np.exp(-(shells + 2000.0) * t)
        )
        return s
    if model.kind == "torus2":
        j = np.arange(1, shells + 4000, dtype=float)
        axis_full = 1.0 + np.sum(2.0 * np.exp(-(TWO_PI * j) ** 2 * t / 2.0))
        axis_tail = np.sum(2.0 * np.exp(-(TWO_PI * j[shells:]) ** 2 * t / 2.0))
        # modes with |j| or |k| beyond the box
        return 2.0 * axis_full * axis_tail
    ell = np.arange(shells + 1, shells + 4000, dtype=float)
    return float(np.sum(np.exp(-ell * (ell + 1) * t / 2.0) * (2 * ell + 1) / (4.0 * np.pi)))


# ---------------------------------------------------------------------------
# reference kernels (independent oracles)


def wrapped_gaussian_circle(t, dtheta, images: int = 12):
    """Image-sum heat kernel on the circle; exact to machine precision for
    moderate ``images`` because terms decay like ``exp(-(2 pi j)^2 / (2 t))``."""
    dtheta = np.asarray(dtheta, dtype=float)
    j = np.arange(-images, images + 1, dtype=float)
    arg = dtheta[..., None] + TWO_PI * j
    return np.sum(np.exp(-(arg**2) / (2.0 * t)), axis=-1) / np.sqrt(TWO_PI * t)


def _torus_axis_image(t, dw, images: int = 12):
    dw = np.asarray(dw, dtype=float)
    j = np.arange(-images, images + 1, dtype=float)
    arg = dw[..., None] + j
    return np.sum(np.exp(-(arg**2) / (2.0 * t)), axis=-1) / np.sqrt(TWO_PI * t)


def torus_kernel_image(t, du, dv, images: int = 12):
    return _torus_axis_image(t, du, images) * _torus_axis_image(t, dv, images)


def heat_kernel(model: ManifoldModel, t, x, y, *, tol: float = _TAIL_TOL,
                clamp: bool = False):
    """Accuracy-controlled heat kernel density ``P_t(x, y)``.

    Uses the spectral sum with a truncation certified against ``tol``;
    below the certified-time floor the flat models switch to image sums and
    the sphere raises :class:`TruncationError`.
    """
    if t <= 0:
        raise InvalidInputError("heat kernel needs t > 0")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if model.kind == "circle":
        dtheta = model.angle(x[:, None, :], y[None, :, :])
        if t < 0.01:
            out = wrapped_gaussian_circle(t, dtheta)
        else:
            kmax = _shells_for(model, t, tol)
            out = _circle_cos_series(dtheta, t, kmax)
    elif model.kind == "torus2":
        du = x[:, None, 0] - y[None, :, 0]
        dv = x[:, None, 1] - y[None, :, 1]
        if t < 0.05:
            out = torus_kernel_image(t, du, dv)
        else:
            jmax = _shells_for(model, t, tol)
            out = _torus_axis_series(du, t, jmax) * _torus_axis_series(dv, t, jmax)
    elif model.kind == "sphere2":
        lmax = _shells_for(model, t, tol)
        cosg = np.clip(np.einsum("ik,jk->ij", model.embed(x), model.embed(y)), -1, 1)
        out = _sphere_legendre_series(cosg, t, lmax)
    else:  # pragma: no cover
        raise InvalidInputError(f"unknown model {model.kind!r}")
    if clamp:
        out = np.maximum(out, 0.0)
    return out


def _shells_for(model, t, tol):
    shells = max(8, int(np.ceil(4.0 / np.sqrt(t))))
    for _ in range(40):
        if _tail_bound(model, shells, t) <= tol:
            return shells
        shells = int(shells * 1.5) + 4
        if shells > 4000:
            raise TruncationError(
                f"cannot certify kernel at t={t} on {model.kind}",
                required_shells=shells,
            )
    raise TruncationError(f"cannot certify kernel at t={t} on {model.kind}")


def bridge_density(model_or_basis, t, x, y, s, z, *, tol: float = _TAIL_TOL):
    """Pinned-diffusion density ``P_s(x,z) P_{t-s}(z,y) / P_t(x,y)``."""
    if not 0 < s < t:
        raise InvalidInputError("bridge density needs 0 < s < t")
    if isinstance(model_or_basis, SpectralBasis):
        basis = model_or_basis
        num1 = basis.kernel_matrix(s, x, z)
        num2 = basis.kernel_matrix(t - s, z, y)
        den = basis.kernel_matrix(t, x, y)
    else:
        model = model_or_basis
        num1 = heat_kernel(model, s, x, z, tol=tol)
        num2 = heat_kernel(model, t - s, z, y, tol=tol)
        den = heat_kernel(model, t, x, y, tol=tol)
    den = np.asarray(den)
    if np.any(den <= 1e-300):
        raise DegenerateKernelError(
            "P_t(x,y) not positive at requested arguments; raise the truncation"
        )
    return num1.T * num2 / den  # shape (len(z) x ...) after broadcasting


# ---------------------------------------------------------------------------
# Gaussian comparison family


@dataclass(frozen=True)
class GaussianComparison:
    """Gaussian-type comparison profiles with rate constant ``2 + epsilon``."""

    epsilon: float
    dim: int

    def __post_init__(self):
        if self.epsilon < 0:
            raise InvalidInputError("epsilon must be nonnegative")

    @property
    def c_eps(self) -> float:
        return 2.0 + self.epsilon

    def g(self, t, r):
        """``t^{-d/2} exp(-r^2 / ((2 + eps) t))``."""
        t = np.asarray(t, dtype=float)
        r = np.asarray(r, dtype=float)
        return t ** (-self.dim / 2.0) * np.exp(-(r**2) / (self.c_eps * t))

    def g_tilde(self, t, r):
        """``(t^{-(d-1)/2} or 1, whichever is larger) * g(t, r)``."""
        t = np.asarray(t, dtype=float)
        pre = np.maximum(t ** (-(self.dim - 1) / 2.0), 1.0)
        return pre * self.g(t, r)

    def log_g(self, t, r):
        """Logarithm of ``g``; safe where the profile itself underflows."""
        t = np.asarray(t, dtype=float)
        r = np.asarray(r, dtype=float)
        return -(self.dim / 2.0) * np.log(t) - r**2 / (self.c_eps * t)

    def log_g_tilde(self, t, r):
        t = np.asarray(t, dtype=float)
        boost = np.maximum(-(self.dim - 1) / 2.0 * np.log(t), 0.0)
        return boost + self.log_g(t, r)


def gaussian_g(cmp: GaussianComparison, t, r, *, tilde: bool = False):
    if np.any(np.asarray(t) <= 0):
        raise InvalidInputError("comparison profile needs t > 0")
    return cmp.g_tilde(t, r) if tilde else cmp.g(t, r)


# ---------------------------------------------------------------------------
# heat-kernel upper-bound verifiers


def _pair_grid(model, rng, n_pairs):
    x = model.random_points(rng, n_pairs)
    y = model.random_points(rng, n_pairs)
    # make sure the near-diagonal and far regimes are both represented
    y[: n_pairs // 4] = model.normalize(
        x[: n_pairs // 4] + 1e-3 * rng.standard_normal((n_pairs // 4, model.chart_dim))
    )
    return x, y


def verify_li_yau(model, epsilon, t_grid=None, n_pairs=64, seed=0, form="li_yau"):
    """Fitted-constant check of the Gaussian heat-kernel upper bounds.

    ``form='li_yau'`` tests ``P_t <= C (G^eps_t(d) + min(t, 1))`` for all t;
    ``form='global'`` tests ``P_t <= C Gtilde^0_t(d)`` restricted to t <= 1.
    The (t, pair) grid is split into interleaved fit/validation halves; the
    report carries the fitted constant and the worst held-out ratio.
    """
    from .fitting import envelope_fit_report

    rng = np.random.default_rng(seed)
    if t_grid is None:
        t_grid = (np.geomspace(0.01, 4.0, 41) if model.kind == "circle"
                  else np.geomspace(0.05, 4.0, 41))
    if form == "global":
        t_grid = np.asarray([t for t in t_grid if t <= 1.0])
        cmp = GaussianComparison(0.0, model.dim)
    else:
        cmp = GaussianComparison(float(epsilon), model.dim)
    x, y = _pair_grid(model, rng, n_pairs)
    d = model.distance(x, y)
    lhs, env = [], []
    for t in t_grid:
        p = heat_kernel(model, t, x, y).diagonal()
        if form == "global":
            e = cmp.g_tilde(t, d)
        else:
            e = cmp.g(t, d) + min(t, 1.0)
        lhs.append(p)
        env.append(e)
    # rows indexed by t (the smooth axis), columns by the fixed pair set
    return envelope_fit_report(np.asarray(lhs), np.asarray(env),
                               label=f"{form}:{model.kind}:eps={epsilon}")
