from moma.core.tensor import FlopMeter, GradTape, Tensor, active_tape, backward
from moma.core import ops

__all__ = ["FlopMeter", "GradTape", "Tensor", "active_tape", "backward", "ops"]
