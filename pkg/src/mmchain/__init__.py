"""Desk-scale multimodal machine-chain training lab on a synthetic world."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward, zero_grad  # noqa: F401
from .optim import AdamState, adam_step, grad_check  # noqa: F401
