"""Multipath VGG19 training and evaluation engine on a numpy tape autodiff."""
from .autodiff import Tape, Variable, backward, grad_check, zero_grads
from .models import FULL, MINI, ArchScale, build_mvgg19, build_vgg19, forward, shape_audit

__version__ = "0.1.0"

__all__ = [
    "Tape", "Variable", "backward", "grad_check", "zero_grads",
    "FULL", "MINI", "ArchScale", "build_mvgg19", "build_vgg19", "forward", "shape_audit",
]
