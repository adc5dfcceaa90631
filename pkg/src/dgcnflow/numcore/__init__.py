from .gradcheck import DeterminismError, GradcheckReport, gradcheck, relative_error
from .optim import AdamState, adam_step
from .tensor import (
    PRIMITIVES,
    ComputationRecord,
    ContractError,
    EmptyRecordError,
    NumericDomainError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    concat,
    forward,
    global_norm_clip,
    take,
    zeros,
)

__all__ = [
    "PRIMITIVES",
    "AdamState",
    "ComputationRecord",
    "ContractError",
    "DeterminismError",
    "EmptyRecordError",
    "GradcheckReport",
    "NumericDomainError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "concat",
    "forward",
    "global_norm_clip",
    "gradcheck",
    "relative_error",
    "take",
    "zeros",
]
