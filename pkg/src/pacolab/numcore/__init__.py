"""Numeric substrate: autodiff tensors, Adam, counter-based RNG, checkpoints."""
import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import AdamState, NonFiniteGradientError, adam_step
from .rng import RngStream, choice, gaussian, permutation, uniform
from .tensor import DimensionError, Tensor, backward, forward_mlp


def init_mlp(sizes, stream: RngStream, prefix: str = "", bias: bool = True) -> dict[str, np.ndarray]:
    """Glorot-scaled weights for an MLP with layer widths ``sizes``."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        params[f"{prefix}W{i}"] = scale * gaussian(stream, (fan_in, fan_out))
        if bias:
            params[f"{prefix}b{i}"] = np.zeros(fan_out)
    return params


def mlp_layers(tensors: dict[str, Tensor], prefix: str = "") -> list[tuple[Tensor, Tensor | None]]:
    """Collect ``(W_i, b_i)`` pairs named by :func:`init_mlp` in layer order."""
    layers = []
    i = 0
    while f"{prefix}W{i}" in tensors:
        layers.append((tensors[f"{prefix}W{i}"], tensors.get(f"{prefix}b{i}")))
        i += 1
    return layers


def track(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap parameter arrays as fresh leaf tensors that record gradients."""
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def grads_of(tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}


__all__ = [
    "T", "Tensor", "DimensionError", "backward", "forward_mlp",
    "AdamState", "NonFiniteGradientError", "adam_step",
    "RngStream", "gaussian", "uniform", "permutation", "choice",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
    "init_mlp", "mlp_layers", "track", "grads_of",
]
