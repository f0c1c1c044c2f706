"""Modular imitation-learning policies on a small numpy autodiff engine."""
import os as _os

# Cap BLAS threads before numpy loads; XIL_THREADS overrides the default of 1.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _os.environ.get("XIL_THREADS", "1"))

from .architectures import ModelConfig, PolicyModel, build_model, make_policy  # noqa: E402
from .encoders import ObservationBatch  # noqa: E402
from .heads import make_head  # noqa: E402
from .tensor import Tape, Tensor, grad_check, precision  # noqa: E402

__all__ = ["ModelConfig", "ObservationBatch", "PolicyModel", "Tape", "Tensor", "build_model",
           "grad_check", "make_head", "make_policy", "precision"]
__version__ = "0.1.0"
