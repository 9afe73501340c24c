"""Two-stage forecaster for parameterized PDE fields.

Stage 1 learns a vector-quantized latent space with a Fourier evolution block
and a physics residual penalty; Stage 2 trains a parameter-conditioned latent
diffusion model on top of the Stage-1 encoder and decoder.
"""

from stpad.errors import StpadError
from stpad.field import FieldSequence, GridSpec, PDEKind, PhysicalParams, physics_residual

__all__ = ["FieldSequence", "GridSpec", "PDEKind", "PhysicalParams", "StpadError",
           "physics_residual"]
__version__ = "0.1.0"
