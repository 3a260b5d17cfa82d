"""volrecon: volumetric registration and predictive reconstruction on
synthetic tibia phantoms.

Pipeline: (1) joint prototype + transform learning (direct or LocNet-
predicted), (2) latent modeling of the aligned volumes (PCA / VAE / VQ-VAE),
(3) mask-robust retraining so fracture-masked queries decode to a healthy
reconstruction in standard coordinates.
"""

import os as _os

# honor the worker cap before the BLAS thread pool spins up
_n = _os.environ.get("VOLRECON_THREADS")
if _n:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _n)

from . import autodiff, autoencoders, kernels, metrics, pipeline, registration, transform, volume
from .errors import VolreconError

__all__ = [
    "autodiff",
    "autoencoders",
    "kernels",
    "metrics",
    "pipeline",
    "registration",
    "transform",
    "volume",
    "VolreconError",
]

__version__ = "0.1.0"
