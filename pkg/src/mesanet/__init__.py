"""Mesa layer: a recurrent mixer whose output is an online ridge-regression prediction.

The chunkwise-parallel forward and its reverse pass live in :mod:`mesanet.mesa`,
the conjugate gradient solver in :mod:`mesanet.cg`.
"""

from .cg import CGReport, NotPositiveDefiniteError, SpdOperator, cg_solve, cg_solve_chunk, estimate_condition
from .mesa import (
    MesaState,
    closed_form_phi,
    mesa_backward_chunked,
    mesa_forward_chunked,
    mesa_objective,
    mesa_step,
    newton_identity_check,
    sherman_morrison_step,
)
from .mixers import mesa_mixer_forward
from .model import ModelConfig, init_params, load_checkpoint, model_forward, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CGReport", "NotPositiveDefiniteError", "SpdOperator", "cg_solve", "cg_solve_chunk",
    "estimate_condition", "MesaState", "closed_form_phi", "mesa_backward_chunked",
    "mesa_forward_chunked", "mesa_objective", "mesa_step", "newton_identity_check",
    "sherman_morrison_step", "mesa_mixer_forward", "ModelConfig", "init_params",
    "load_checkpoint", "model_forward", "save_checkpoint",
]
