"""Dense nonrigid refinement engines."""

from .demons import DemonsParams, demons_register, mind_demons_register
from .local_affine import LocalAffineParams, LocalAffineResult, local_affine_register, local_affine_solve
from .mind import descriptor_ssd, mind_descriptor
from .tps import TpsModel, tps_fit, tps_from_matches, tps_to_field

__all__ = [
    "DemonsParams",
    "demons_register",
    "mind_demons_register",
    "LocalAffineParams",
    "LocalAffineResult",
    "local_affine_register",
    "local_affine_solve",
    "mind_descriptor",
    "descriptor_ssd",
    "TpsModel",
    "tps_fit",
    "tps_from_matches",
    "tps_to_field",
]
