"""nlmefit: mixed-effects estimation for ODE/SDE dynamical models.

Fits fixed effects, random-effect covariance and observation-error
parameters by FOCEI/Laplace with exact gradients from symbolically
generated sensitivity equations; provides simulation, VPC and
goodness-of-fit diagnostics.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
