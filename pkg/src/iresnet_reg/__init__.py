"""Learned regularization of linear inverse problems with invertible residual networks."""

__version__ = "0.1.0"

from .exceptions import *  # noqa: F401,F403
from .iresnet_core import (  # noqa: F401
    DenseResidualNet,
    DiagonalResidualNet,
    LipschitzLayer,
    MLPDiagonalNet,
    OneParameterNet,
    Subnetwork,
    empirical_lipschitz,
    extract_filter,
    forward,
    invert,
    reconstruct,
)
from .operator_core import (  # noqa: F401
    NoiseModel,
    SingularSystem,
    build_singular_system,
    jacobi_eigh,
    normalize_operator,
    radon_matrix,
    sample_noise,
)
