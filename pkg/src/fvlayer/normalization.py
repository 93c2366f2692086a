"""Signed power compression followed by L2 normalization.

forward: v -> sign(v) |v|^alpha, then division by the L2 norm.
backward: exact Jacobian-transpose product for alpha = 0.5. Other exponents
are forward-only; asking for their gradient raises.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["NormConfig", "norm_forward", "norm_backward"]


@dataclass
class NormConfig:
    """alpha: compression exponent. eps: coordinates of the raw input with
    magnitude below eps are treated as flat zeros in the backward pass (the
    square root is not differentiable there)."""

    alpha: float = 0.5
    eps: float = 1e-12


_DEFAULT = NormConfig()


def norm_forward(vector: np.ndarray, config: NormConfig = _DEFAULT) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {vector.shape}")
    compressed = np.sign(vector) * np.abs(vector) ** config.alpha
    norm = float(np.linalg.norm(compressed))
    if norm == 0.0:
        return np.zeros_like(compressed)
    return compressed / norm


def norm_backward(
    vector: np.ndarray, upstream: np.ndarray, config: NormConfig = _DEFAULT
) -> np.ndarray:
    """Gradient of the normalized output with respect to the raw input.

    With xhat = sign(v) sqrt(|v|) and phi = xhat / ||xhat||, the Jacobian is
    (I - phi phi^T) / ||xhat|| composed with diag(1 / (2 |xhat_i|)); this
    returns its transpose applied to `upstream`. Coordinates with
    |v_i| < eps get zero gradient. Only alpha = 0.5 is supported.
    """
    if config.alpha != 0.5:
        raise ValueError(
            f"backward pass only supports alpha = 0.5, got {config.alpha}"
        )
    vector = np.asarray(vector, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if vector.shape != upstream.shape or vector.ndim != 1:
        raise ValueError(
            f"vector {vector.shape} and upstream {upstream.shape} must be equal 1-D"
        )
    xhat = np.sign(vector) * np.sqrt(np.abs(vector))
    norm = float(np.linalg.norm(xhat))
    if norm == 0.0:
        return np.zeros_like(vector)
    phi = xhat / norm
    projected = upstream - phi * float(phi @ upstream)
    live = np.abs(vector) >= config.eps
    out = np.zeros_like(vector)
    out[live] = projected[live] / (2.0 * np.abs(xhat[live]) * norm)
    return out
