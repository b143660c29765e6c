"""Autodiff engine, network definitions and parameter machinery."""

from softaug.nets.autodiff import NumericalError, Tensor, no_grad
from softaug.nets.layers import NetworkShapes
from softaug.nets.params import Adam, TargetPair, ema_update, grad, l2_normalize, value_and_grad

__all__ = ["Adam", "NetworkShapes", "NumericalError", "TargetPair", "Tensor", "ema_update", "grad", "l2_normalize", "no_grad", "value_and_grad"]
