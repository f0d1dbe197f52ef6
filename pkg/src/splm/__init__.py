"""Character-level LM training stack with learnable causal filterbanks."""

from splm.tensor import Tensor, backward, grad_check, no_grad, set_default_dtype

__all__ = ["Tensor", "backward", "grad_check", "no_grad", "set_default_dtype"]
__version__ = "0.1.0"
