"""
Uniform quantization of embedding parameters with learnable step size and offset.

A full-precision value `theta` is mapped to the integer code
`clamp(round((theta - beta) / alpha), N_b, P_b)` and dequantized as
`alpha * code + beta`. Gradients follow the straight-through estimator: the
rounding operator is treated as the identity inside the clamp range.
"""
from __future__ import annotations

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from mpe.errors import DimensionMismatchError, QuantDomainError

MAX_BITS = 15
STEP_SIZE_FLOOR = 1e-8


def bounds(b: int) -> tuple[int, int]:
    """Return the signed integer range (N_b, P_b) of a b-bit code."""
    if not 1 <= b <= MAX_BITS:
        raise QuantDomainError(f"bit width must lie in [1, {MAX_BITS}], got {b}")
    return -(1 << (b - 1)), (1 << (b - 1)) - 1


class QuantGrad(BaseModel):
    d_theta: float
    d_alpha: float
    d_beta: float


class QuantizerParams(BaseModel):
    """Step sizes shared per bit width and offsets shared per embedding dimension."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    bits: tuple[int, ...]
    step_sizes: np.ndarray
    offsets: np.ndarray

    @model_validator(mode="after")
    def _check(self) -> QuantizerParams:
        if any(b < 1 or b > MAX_BITS for b in self.bits):
            raise QuantDomainError(f"step sizes exist only for bit widths 1..{MAX_BITS}: {self.bits}")
        if len(set(self.bits)) != len(self.bits):
            raise QuantDomainError(f"duplicate bit widths: {self.bits}")
        if self.step_sizes.shape != (len(self.bits),):
            raise DimensionMismatchError(
                f"expected {len(self.bits)} step sizes, got shape {self.step_sizes.shape}"
            )
        if self.offsets.ndim != 1:
            raise DimensionMismatchError("offsets must be a vector")
        if not np.all(np.isfinite(self.step_sizes)) or np.any(self.step_sizes <= 0):
            raise QuantDomainError("step sizes must be finite and positive")
        if not np.all(np.isfinite(self.offsets)):
            raise QuantDomainError("offsets must be finite")
        return self

    @staticmethod
    def initial(bits: list[int] | tuple[int, ...], d: int, init_std: float = 3e-3) -> QuantizerParams:
        """Spread each bit width's grid over +/-3 standard deviations of the initial weights."""
        nonzero = tuple(sorted(b for b in set(bits) if b > 0))
        step_sizes = np.array(
            [6.0 * init_std / (bounds(b)[1] - bounds(b)[0]) for b in nonzero],
            dtype=np.float64,
        )
        return QuantizerParams(bits=nonzero, step_sizes=step_sizes, offsets=np.zeros(d, dtype=np.float64))

    @property
    def d(self) -> int:
        return self.offsets.shape[0]

    def index_of(self, b: int) -> int:
        try:
            return self.bits.index(b)
        except ValueError:
            raise QuantDomainError(f"no step size for bit width {b}") from None

    def step_size(self, b: int) -> float:
        return float(self.step_sizes[self.index_of(b)])

    def step_size_map(self) -> dict[int, float]:
        return {b: float(alpha) for b, alpha in zip(self.bits, self.step_sizes)}


def clamp_step_sizes(params: QuantizerParams) -> None:
    """Keep every step size strictly positive after an optimizer update."""
    np.maximum(params.step_sizes, STEP_SIZE_FLOOR, out=params.step_sizes)


def quantize_array(
    x: np.ndarray, alpha: float, beta: np.ndarray | float, b: int
) -> tuple[np.ndarray, np.ndarray]:
    """Quantize an array element-wise, broadcasting `beta` over the last axis.

    Returns the dequantized values and the integer codes.
    """
    lo, hi = bounds(b)
    u = (x - beta) / alpha
    codes = np.clip(np.rint(u), lo, hi)
    return alpha * codes + beta, codes.astype(np.int64)


def quantize_array_grad(
    x: np.ndarray, alpha: float, beta: np.ndarray | float, b: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Local derivatives of `quantize_array` with respect to (x, alpha, beta).

    The results are element-wise and not yet multiplied by an upstream
    gradient.
    """
    lo, hi = bounds(b)
    u = (x - beta) / alpha
    below = u <= lo
    above = u >= hi
    inside = ~(below | above)
    d_x = inside.astype(np.float64)
    d_alpha = np.where(inside, np.rint(u) - u, np.where(below, float(lo), float(hi)))
    d_beta = 1.0 - d_x
    return d_x, d_alpha, d_beta


def _check_scalar_args(theta: float, alpha: float, beta: float) -> None:
    if not (math.isfinite(theta) and math.isfinite(alpha) and math.isfinite(beta)):
        raise QuantDomainError(f"non-finite input: theta={theta}, alpha={alpha}, beta={beta}")
    if alpha <= 0:
        raise QuantDomainError(f"step size must be positive, got {alpha}")


def quantize_scalar(theta: float, alpha: float, beta: float, b: int) -> tuple[float, int]:
    _check_scalar_args(theta, alpha, beta)
    theta_hat, code = quantize_array(np.float64(theta), alpha, beta, b)
    return float(theta_hat), int(code)


def quantize_vector(e: np.ndarray, params: QuantizerParams, b: int) -> tuple[np.ndarray, np.ndarray]:
    """Quantize one embedding vector at bit width `b`; b = 0 drops it to zeros."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (params.d,):
        raise DimensionMismatchError(f"expected a vector of length {params.d}, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise QuantDomainError("embedding contains non-finite values")
    if b == 0:
        return np.zeros(params.d), np.zeros(params.d, dtype=np.int64)
    return quantize_array(e, params.step_size(b), params.offsets, b)


def quantize_grad(theta: float, alpha: float, beta: float, b: int, upstream: float) -> QuantGrad:
    _check_scalar_args(theta, alpha, beta)
    d_x, d_alpha, d_beta = quantize_array_grad(np.float64(theta), alpha, beta, b)
    return QuantGrad(
        d_theta=float(upstream * d_x),
        d_alpha=float(upstream * d_alpha),
        d_beta=float(upstream * d_beta),
    )
