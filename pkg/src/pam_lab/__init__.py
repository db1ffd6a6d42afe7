"""Numerical laboratory for the stochastic heat equation with multiplicative
colored noise on compact model manifolds (circle, flat 2-torus, 2-sphere).

Subpackage map:

- ``manifolds``     closed-form geometry: distances, geodesics, meshes
- ``spectral``      eigenbases, heat kernels, Gaussian comparison bounds
- ``concentration`` the three-distance bridge energy and its inequalities
- ``noise``         colored-noise covariance, sampler, regularity checks
- ``moments``       second-moment series engine and integral-estimate checks
- ``solver``        Monte Carlo mild-equation solver and experiment drivers
- ``cli``           batch experiment runner (``pam-lab``)
"""

from .errors import (CutLocusError, DegenerateKernelError, InvalidInputError,
                     NonConvergenceError, PamLabError, TruncationError)
from .manifolds import (CIRCLE, SPHERE2, TORUS2, ManifoldModel, MeshField,
                        QuadratureMesh, all_models, get_model)
from .measures import InitialMeasure, dirac, j_mu, j_mu_field, volume_measure
from .noise import (CovarianceKernel, NoiseSpec, check_dalang,
                    covariance_value, rho_nonneg_threshold, sample_increment,
                    verify_riesz_bound)
from .spectral import (GaussianComparison, SpectralBasis, bridge_density,
                       build_basis, gaussian_g, heat_kernel, verify_li_yau,
                       wrapped_gaussian_circle)

__all__ = [
    "CIRCLE", "TORUS2", "SPHERE2", "ManifoldModel", "MeshField",
    "QuadratureMesh", "all_models", "get_model",
    "InitialMeasure", "dirac", "j_mu", "j_mu_field", "volume_measure",
    "CovarianceKernel", "NoiseSpec", "check_dalang", "covariance_value",
    "rho_nonneg_threshold", "sample_increment", "verify_riesz_bound",
    "GaussianComparison", "SpectralBasis", "bridge_density", "build_basis",
    "gaussian_g", "heat_kernel", "verify_li_yau", "wrapped_gaussian_circle",
    "PamLabError", "InvalidInputError", "CutLocusError", "TruncationError",
    "DegenerateKernelError", "NonConvergenceError",
]

__version__ = "0.1.0"
