from . import ops
from .gradcheck import GradcheckResult, run_gate
from .optim import Adam, ParamGroup, Schedule, adam_step, lr_at
from .tape import OPS, Function, ShapeError, Tape, Tensor, active_tape, register

__all__ = [
    "OPS",
    "Adam",
    "Function",
    "GradcheckResult",
    "ParamGroup",
    "Schedule",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "lr_at",
    "ops",
    "register",
    "run_gate",
]
