"""Spatially colored, temporally white Gaussian noise on the models.

The covariance of the spatial noise against test functions with coefficients
``a_n``, ``b_n`` in the eigenbasis is

    rho * a_0 * b_0 + sum_{n != 0} a_n * b_n / lambda_n**alpha .

This spectral form is the authoritative definition.  The associated kernel is
``rho / m_0`` plus the zero-mean part ``G_alpha``, the manifold analogue of a
Riesz kernel; ``G_alpha`` blows up on the diagonal once ``alpha <= d/2``, and
on-diagonal evaluation is refused there instead of returning a large number.

Two kernel representations are kept deliberately distinct:

* :class:`CovarianceKernel` builds the basis-truncated mesh Gram matrix, the
  object the sampler, the moment engine and the solver share.
* :func:`covariance_value` evaluates the exact (untruncated) kernel through
  closed forms and accelerated series, and serves as the oracle against which
  the truncated objects are checked.
"""

import math
from dataclasses import dataclass

import mpmath
import numpy as np
from scipy.special import zeta as hurwitz_zeta

from .errors import InvalidInputError
from .manifolds import ManifoldModel, MeshField, QuadratureMesh, TWO_PI
from .spectral import SpectralBasis


@dataclass(frozen=True)
class NoiseSpec:
    """Parameters of the colored noise: spectral decay ``alpha`` and the
    weight ``rho`` of the constant mode."""

    alpha: float
    rho: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidInputError("alpha must be nonnegative")
        if self.rho < 0:
            raise InvalidInputError("rho must be nonnegative")

    def dalang_margin(self, model: ManifoldModel) -> float:
        return self.alpha - (model.dim - 2) / 2.0

    def mode_variances(self, basis: SpectralBasis) -> np.ndarray:
        """Per-mode spectral weights ``g_n``: ``rho`` on the constant mode,
        ``lambda_n**-alpha`` elsewhere."""
        lam = basis.eigenvalues
        g = np.empty_like(lam)
        zero = lam == 0.0
        g[zero] = self.rho
        g[~zero] = lam[~zero] ** (-self.alpha)
        return g


def check_dalang(model: ManifoldModel, spec: NoiseSpec):
    """True when ``alpha > (d - 2)/2``, with the margin."""
    margin = spec.dalang_margin(model)
    return margin > 0, margin


# ---------------------------------------------------------------------------
# exact kernel evaluation (oracle path)


def _circle_profile(alpha, theta, tol=1e-10):
    """Zero-mean kernel on the circle as a function of the angle separation."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    out = np.empty_like(theta)
    s = 2.0 * alpha
    on_diag = theta < 1e-14
    if np.any(on_diag):
        if alpha <= 0.5:
            raise InvalidInputError(
                "on-diagonal value diverges for alpha <= d/2 on the circle")
        kmax = 64
        k = np.arange(1, kmax + 1, dtype=float)
        out[on_diag] = (np.sum(k ** (-s)) + hurwitz_zeta(s, kmax + 1)) / np.pi
    off = ~on_diag
    th = theta[off]
    if abs(alpha - 1.0) < 1e-14:
        vals = (np.pi**2 / 6.0 - np.pi * th / 2.0 + th**2 / 4.0) / np.pi
    elif abs(alpha - 0.5) < 1e-14:
        vals = -np.log(2.0 * np.sin(th / 2.0)) / np.pi
    elif abs(alpha - 2.0) < 1e-14:
        # quartic Bernoulli profile
        vals = (np.pi**4 / 90.0 - np.pi**2 * th**2 / 12.0
                + np.pi * th**3 / 12.0 - th**4 / 48.0) / np.pi
    else:
        vals = np.array([
            float(mpmath.re(mpmath.polylog(s, mpmath.exp(1j * float(t)))))
            for t in th
        ]) / np.pi
    out[off] = vals
    return out


def _log_gl_panels(t_lo, t_hi, per_decade=12, nodes=10):
    """Composite Gauss-Legendre nodes and weights for an integral over
    ``[t_lo, t_hi]`` in the log coordinate."""
    x_lo, x_hi = math.log(t_lo), math.log(t_hi)
    n_panels = max(8, int(math.ceil((x_hi - x_lo) * per_decade / math.log(10))))
    edges = np.linspace(x_lo, x_hi, n_panels + 1)
    gn, gw = np.polynomial.legendre.leggauss(nodes)
    xs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        mid, hw = 0.5 * (a + b), 0.5 * (b - a)
        xs.append(mid + hw * gn)
        ws.append(hw * gw)
    x = np.concatenate(xs)
    w = np.concatenate(ws)
    t = np.exp(x)
    return t, w * t  # weights include the dt = t dx jacobian


def _spectral_weight_split(alpha, lam, t_hi):
    """Exact large-time remainder of ``lam**-alpha`` after the incomplete-
    gamma split at ``t_hi``: ``lam**-alpha * Q(alpha, lam * t_hi)``."""
    from scipy.special import gammaincc

    return lam ** (-alpha) * gammaincc(alpha, lam * t_hi)


def _sphere_unit_kernel(cosg, t, tiny=1e-13):
    """Unit-generator (full Laplacian) heat kernel on the sphere."""
    lmax = int(math.ceil(math.sqrt(math.log(1.0 / tiny) / t))) + 2
    ell = np.arange(lmax + 1, dtype=float)
    coeff = np.exp(-ell * (ell + 1) * t) * (2 * ell + 1) / (4.0 * np.pi)
    return np.polynomial.legendre.legval(cosg, coeff)


def _sphere_profile(alpha, gamma, tol=1e-9, sep_floor=5e-3):
    """Zero-mean kernel on the sphere as a function of the separation angle.

    Off-diagonal values use the incomplete-gamma split of the spectral
    weights: a log-substituted quadrature of the unit-generator kernel over
    small times plus an exact incomplete-gamma remainder; the lower time
    cutoff is certified by the Gaussian decay of the kernel at fixed
    separation.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    out = np.empty_like(gamma)
    on_diag = gamma < 1e-12
    if np.any(on_diag):
        if alpha <= 1.0:
            raise InvalidInputError(
                "on-diagonal value diverges for alpha <= d/2 on the sphere")
        lmax = 400
        ell = np.arange(1, lmax + 1, dtype=float)
        lam = ell * (ell + 1)
        series = np.sum((2 * ell + 1) / lam**alpha) / (4 * np.pi)
        lam_mid = (lmax + 0.5) * (lmax + 1.5)
        tail = (lam_mid ** (1 - alpha)) / (alpha - 1) / (4 * np.pi)
        out[on_diag] = series + tail
    off = ~on_diag
    if np.any(off):
        g = gamma[off]
        sep_min = float(np.min(g))
        if sep_min < sep_floor:
            raise InvalidInputError(
                f"separations below {sep_floor} not supported off-diagonal")
        t_hi = 0.5
        t_lo = sep_min**2 / (4.0 * (math.log(1.0 / tol) + 12.0))
        t_nodes, t_weights = _log_gl_panels(t_lo, t_hi)
        cosg = np.cos(g)
        acc = np.zeros_like(g)
        for t, w in zip(t_nodes, t_weights):
            acc += w * t ** (alpha - 1.0) * (
                _sphere_unit_kernel(cosg, t) - 1.0 / (4 * np.pi))
        # constant part of the integrand over the dropped [0, t_lo] window
        # (the kernel part is exponentially small there, the mean is not)
        acc -= t_lo**alpha / alpha / (4 * np.pi)
        acc /= math.gamma(alpha)
        lmax = 16
        ell = np.arange(1, lmax + 1, dtype=float)
        lam = ell * (ell + 1)
        rem = _spectral_weight_split(alpha, lam, t_hi) * (2 * ell + 1) / (4 * np.pi)
        coeff = np.zeros(lmax + 1)
        coeff[1:] = rem
        out[off] = acc + np.polynomial.legendre.legval(cosg, coeff)
    return out


def _torus_axis_unit_kernel(w, t, images=8):
    """Unit-generator heat kernel of the 1D unit torus (image sum for small
    times, spectral for large)."""
    w = np.asarray(w, dtype=float)
    if t < 0.05:
        j = np.arange(-images, images + 1, dtype=float)
        arg = w[..., None] + j
        return np.sum(np.exp(-(arg**2) / (4.0 * t)), axis=-1) / math.sqrt(4 * np.pi * t)
    j = np.arange(1, 10, dtype=float)
    damp = 2.0 * np.exp(-(TWO_PI * j) ** 2 * t)
    return 1.0 + np.tensordot(np.cos(TWO_PI * np.multiply.outer(w, j)), damp,
                              axes=([-1], [0]))


def _torus_profile(alpha, du, dv, tol=1e-9, sep_floor=5e-3):
    """Zero-mean kernel on the torus as a function of the wrapped offsets,
    by the same incomplete-gamma split as the sphere evaluator."""
    du = np.atleast_1d(np.asarray(du, dtype=float))
    dv = np.atleast_1d(np.asarray(dv, dtype=float))
    r = np.sqrt(du**2 + dv**2)
    out = np.empty_like(r)
    on_diag = r < 1e-12
    if np.any(on_diag):
        if alpha <= 1.0:
            raise InvalidInputError(
                "on-diagonal value diverges for alpha <= d/2 on the torus")
        rmax = 400
        j = np.arange(-rmax, rmax + 1)
        jj, kk = np.meshgrid(j, j, indexing="ij")
        q = (jj**2 + kk**2).astype(float)
        q[rmax, rmax] = np.inf
        series = np.sum(q ** (-alpha)) / (4 * np.pi**2) ** alpha
        tail = 2 * np.pi * rmax ** (2 - 2 * alpha) / (2 * alpha - 2) \
            / (4 * np.pi**2) ** alpha
        out[on_diag] = series + tail
    off = ~on_diag
    if np.any(off):
        u, v = du[off], dv[off]
        sep_min = float(np.min(r[off]))
        if sep_min < sep_floor:
            raise InvalidInputError(
                f"separations below {sep_floor} not supported off-diagonal")
        t_hi = 0.5
        t_lo = sep_min**2 / (4.0 * (math.log(1.0 / tol) + 12.0))
        t_nodes, t_weights = _log_gl_panels(t_lo, t_hi)
        acc = np.zeros_like(u)
        for t, w in zip(t_nodes, t_weights):
            acc += w * t ** (alpha - 1.0) * (
                _torus_axis_unit_kernel(u, t) * _torus_axis_unit_kernel(v, t)
                - 1.0)
        # constant part of the integrand over the dropped [0, t_lo] window
        acc -= t_lo**alpha / alpha
        acc /= math.gamma(alpha)
        fmax = 3
        j = np.arange(-fmax, fmax + 1)
        jj, kk = np.meshgrid(j, j, indexing="ij")
        lam = (4 * np.pi**2) * (jj**2 + kk**2).astype(float)
        mask = lam > 0
        rem = np.zeros_like(lam)
        rem[mask] = _spectral_weight_split(alpha, lam[mask], t_hi)
        phase = (np.cos(TWO_PI * (np.multiply.outer(u, jj)
                                  + np.multiply.outer(v, kk))))
        out[off] = acc + np.einsum("pjk,jk->p", phase, rem)
    return out


def covariance_value(model: ManifoldModel, spec: NoiseSpec, x, y, *,
                     include_rho: bool = True, tol: float = 1e-9):
    """Exact-kernel evaluation ``rho / m_0 + G_alpha(x, y)``.

    Refuses on-diagonal requests when ``alpha <= d/2`` (the kernel blows up
    there); see :class:`CovarianceKernel` for the truncated Gram used by the
    sampler and the moment engine.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if model.kind == "circle":
        g = _circle_profile(spec.alpha, model.distance(x, y), tol)
    elif model.kind == "sphere2":
        g = _sphere_profile(spec.alpha, model.distance(x, y), tol)
    else:
        d = np.mod(y - x + 0.5, 1.0) - 0.5
        g = _torus_profile(spec.alpha, d[..., 0], d[..., 1], tol)
    if include_rho:
        g = g + spec.rho / model.volume
    return g


def rho_nonneg_threshold(model: ManifoldModel, spec: NoiseSpec,
                         mesh: QuadratureMesh) -> float:
    """Smallest ``rho`` making the kernel nonnegative on the mesh:
    ``m_0 * max(0, -min G_alpha)`` over mesh separations."""
    pts = mesh.points
    if model.kind == "circle":
        seps = model.distance(pts, pts[:1])
        g = _circle_profile(spec.alpha, np.unique(np.round(seps, 14)))
    elif model.kind == "sphere2":
        # separations from one reference row are not exhaustive on the sphere
        # mesh; use all pairwise separations against a coarse probe subset
        probe = pts[:: max(1, pts.shape[0] // 64)]
        seps = model.distance(pts[:, None, :], probe[None, :, :]).ravel()
        seps = seps[seps > 1e-12]
        g = _sphere_profile(spec.alpha, np.unique(np.round(seps, 12)))
    else:
        d = np.mod(pts[None, :, :] - pts[:1, None, :] + 0.5, 1.0) - 0.5
        g = _torus_profile(spec.alpha, d[0, :, 0], d[0, :, 1])
    return model.volume * max(0.0, -float(np.min(g)))


# ---------------------------------------------------------------------------
# truncated Gram kernel (sampler / engine path)


class CovarianceKernel:
    """Basis-truncated covariance kernel held as a mesh Gram matrix.

    The Gram matrix is ``Phi diag(g) Phi^T`` with the per-mode variances of
    the spec, hence symmetric positive semidefinite by construction and
    consistent with :func:`sample_increment` and the moment engine.
    """

    def __init__(self, basis: SpectralBasis, spec: NoiseSpec,
                 mesh: QuadratureMesh):
        self.basis = basis
        self.spec = spec
        self.mesh = mesh
        self.phi = basis.evaluate(mesh.points)
        self.mode_std = np.sqrt(spec.mode_variances(basis))
        g = spec.mode_variances(basis)
        self.gram = (self.phi * g) @ self.phi.T
        self.gram = 0.5 * (self.gram + self.gram.T)

    def zero_mean_gram(self) -> np.ndarray:
        g = self.spec.mode_variances(self.basis).copy()
        g[self.basis.eigenvalues == 0.0] = 0.0
        zm = (self.phi * g) @ self.phi.T
        return 0.5 * (zm + zm.T)

    def row_integrals(self) -> np.ndarray:
        """Quadrature of the zero-mean part against the volume measure;
        contract: ~0 for every row."""
        return self.zero_mean_gram() @ self.mesh.weights

    def min_eigenvalue(self) -> float:
        w = np.sqrt(self.mesh.weights)
        sym = self.gram * np.outer(w, w)
        return float(np.linalg.eigvalsh(sym)[0])

    def min_value(self) -> float:
        return float(np.min(self.gram))

    def inner_product(self, f, g) -> float:
        """Covariance pairing of two mesh fields through the Gram matrix."""
        w = self.mesh.weights
        return float((w * np.asarray(f)) @ self.gram @ (w * np.asarray(g)))

    def spectral_inner_product(self, f, g) -> float:
        """Same pairing through mode coefficients (no mesh double integral)."""
        w = self.mesh.weights
        a = self.phi.T @ (w * np.asarray(f))
        b = self.phi.T @ (w * np.asarray(g))
        return float(np.sum(self.spec.mode_variances(self.basis) * a * b))


def sample_increment(kernel: CovarianceKernel, dt: float,
                     rng: np.random.Generator, *, return_coeffs: bool = False):
    """One spatial noise increment over a time step ``dt``.

    The increment is ``sum_n xi_n sqrt(dt g_n) phi_n`` with iid standard
    normal ``xi``; its mesh covariance is ``dt`` times the kernel Gram matrix.
    """
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    xi = rng.standard_normal(kernel.basis.n_modes)
    coeffs = xi * kernel.mode_std * np.sqrt(dt)
    field = MeshField(kernel.mesh, kernel.phi @ coeffs)
    if return_coeffs:
        return field, coeffs
    return field


# ---------------------------------------------------------------------------
# regularity envelope verification


def log_minus(z):
    """``max(z, -log z)``: the near-zero logarithmic envelope weight."""
    z = np.asarray(z, dtype=float)
    return np.maximum(z, -np.log(z))


def riesz_envelope(model: ManifoldModel, spec: NoiseSpec, r):
    r = np.asarray(r, dtype=float)
    half_d = model.dim / 2.0
    if spec.alpha < half_d:
        return r ** (2 * spec.alpha - model.dim)
    if spec.alpha == half_d:
        return 1.0 + log_minus(r)
    return np.ones_like(r)


def verify_riesz_bound(model: ManifoldModel, spec: NoiseSpec, *,
                       n_r: int = 80, r_min: float = 0.02, seed=0):
    """Fitted-constant check of the diagonal-regularity envelope of the
    zero-mean kernel, by the case of ``alpha`` against ``d/2``."""
    from .fitting import envelope_fit_report

    r_grid = np.geomspace(r_min, model.diameter * 0.999, n_r)
    if model.kind == "circle":
        g = _circle_profile(spec.alpha, r_grid)
    elif model.kind == "sphere2":
        g = _sphere_profile(spec.alpha, r_grid)
    else:
        rng = np.random.default_rng(seed)
        ang = rng.uniform(0, 2 * np.pi, size=n_r)
        r_grid = np.geomspace(r_min, model.diameter * 0.999, n_r)
        g = _torus_profile(spec.alpha, r_grid * np.cos(ang), r_grid * np.sin(ang))
    env = riesz_envelope(model, spec, r_grid)
    case = ("subcritical" if spec.alpha < model.dim / 2
            else "critical" if spec.alpha == model.dim / 2 else "bounded")
    return envelope_fit_report(np.abs(g), env,
                               label=f"riesz:{model.kind}:alpha={spec.alpha}:{case}")
