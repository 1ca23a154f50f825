"""
Learnable bit-width distributions for feature groups.

Each group keeps a row of logits `gamma` over the candidate bit widths. Its
embeddings are replaced during search by the probability-weighted mixture
of their quantizations at every candidate, and a frequency-weighted penalty
on the expected bit width trades accuracy for memory. After search each
group gets the highest candidate whose probability exceeds 1/(2m).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator

from mpe.catalog import GroupAssignment
from mpe.errors import DimensionMismatchError, FormatError
from mpe.quant import MAX_BITS, QuantizerParams, quantize_array, quantize_array_grad


class CandidateSet(BaseModel):
    bits: tuple[int, ...]

    @field_validator("bits")
    @classmethod
    def _strictly_increasing(cls, bits: tuple[int, ...]) -> tuple[int, ...]:
        if not bits:
            raise ValueError("candidate set is empty")
        if any(b < 0 or b > MAX_BITS for b in bits):
            raise ValueError(f"candidate bit widths must lie in [0, {MAX_BITS}]: {bits}")
        if any(a >= b for a, b in zip(bits, bits[1:])):
            raise ValueError(f"candidate bit widths must be strictly increasing: {bits}")
        return bits

    @property
    def m(self) -> int:
        return len(self.bits)

    @property
    def nonzero(self) -> tuple[int, ...]:
        return tuple(b for b in self.bits if b > 0)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float64)


class GroupPrecisionState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    gamma: np.ndarray
    tau: float

    @staticmethod
    def initial(g: int, m: int, tau: float) -> GroupPrecisionState:
        """All candidates start equally likely."""
        return GroupPrecisionState(gamma=np.zeros((g, m), dtype=np.float64), tau=tau)

    @property
    def g(self) -> int:
        return self.gamma.shape[0]

    def probability_matrix(self) -> np.ndarray:
        return softmax(self.gamma / self.tau)


class SampledPrecision(BaseModel):
    bit_of_group: list[int]
    avg_bits: float

    def bit_of_feature(self, groups: GroupAssignment) -> np.ndarray:
        return np.asarray(self.bit_of_group, dtype=np.int64)[groups.group_of]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def probabilities(state: GroupPrecisionState, k: int) -> np.ndarray:
    if not 0 <= k < state.g:
        raise IndexError(f"group {k} out of range [0, {state.g})")
    return softmax(state.gamma[k] / state.tau)


def mix_forward(
    raw: np.ndarray, weights: np.ndarray, bits: tuple[int, ...], params: QuantizerParams
) -> tuple[np.ndarray, list[np.ndarray | None]]:
    """Weighted sum of the quantizations of `raw` at each bit width.

    `raw` has shape (..., d) and `weights` has shape (..., k) for k = len(bits),
    or (k,) to share one weighting. Returns the mixture and the per-bit
    quantized terms (None for the zero-bit term).
    """
    mixed = np.zeros_like(raw)
    terms: list[np.ndarray | None] = []
    for i, b in enumerate(bits):
        if b == 0:
            terms.append(None)
            continue
        term, _ = quantize_array(raw, params.step_size(b), params.offsets, b)
        mixed += weights[..., i, None] * term
        terms.append(term)
    return mixed, terms


def mix_backward(
    raw: np.ndarray,
    weights: np.ndarray,
    bits: tuple[int, ...],
    params: QuantizerParams,
    terms: list[np.ndarray | None],
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Backpropagate through `mix_forward`.

    Returns gradients for the raw embeddings, the step sizes (aligned with
    `params.bits`), the offsets and the weights.
    """
    d_raw = np.zeros_like(raw)
    d_step_sizes = np.zeros_like(params.step_sizes)
    d_offsets = np.zeros_like(params.offsets)
    d_weights = np.zeros(upstream.shape[:-1] + (len(bits),))
    for i, b in enumerate(bits):
        term = terms[i]
        if term is None:
            continue
        d_x, d_alpha, d_beta = quantize_array_grad(raw, params.step_size(b), params.offsets, b)
        weighted = weights[..., i, None] * upstream
        d_raw += weighted * d_x
        d_step_sizes[params.index_of(b)] += np.sum(weighted * d_alpha)
        d_offsets += (weighted * d_beta).reshape(-1, params.d).sum(axis=0)
        d_weights[..., i] = np.sum(upstream * term, axis=-1)
    return d_raw, d_step_sizes, d_offsets, d_weights


def _check_mixture_args(e: np.ndarray, params: QuantizerParams, cands: CandidateSet, p: np.ndarray) -> None:
    if e.shape != (params.d,):
        raise DimensionMismatchError(f"expected a vector of length {params.d}, got shape {e.shape}")
    if p.shape != (cands.m,):
        raise DimensionMismatchError(f"expected {cands.m} probabilities, got shape {p.shape}")


def mixture_forward(e: np.ndarray, params: QuantizerParams, cands: CandidateSet, p: np.ndarray) -> np.ndarray:
    e, p = np.asarray(e, dtype=np.float64), np.asarray(p, dtype=np.float64)
    _check_mixture_args(e, params, cands, p)
    mixed, _ = mix_forward(e, p, cands.bits, params)
    return mixed


def mixture_backward(
    e: np.ndarray, params: QuantizerParams, cands: CandidateSet, p: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, dict[int, float], np.ndarray, np.ndarray]:
    e, p = np.asarray(e, dtype=np.float64), np.asarray(p, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_mixture_args(e, params, cands, p)
    if upstream.shape != e.shape:
        raise DimensionMismatchError(f"upstream gradient has shape {upstream.shape}, expected {e.shape}")
    _, terms = mix_forward(e, p, cands.bits, params)
    d_e, d_step_sizes, d_beta, d_p = mix_backward(e, p, cands.bits, params, terms, upstream)
    d_alpha = {b: float(value) for b, value in zip(params.bits, d_step_sizes)}
    return d_e, d_alpha, d_beta, d_p


def gamma_grad(p: np.ndarray, d_p: np.ndarray, tau: float) -> np.ndarray:
    """Chain a gradient on softmax(gamma / tau) back to gamma (row-wise)."""
    centered = d_p - np.sum(p * d_p, axis=-1, keepdims=True)
    return p * centered / tau


def bit_regularizer(
    state: GroupPrecisionState, cands: CandidateSet, freq_sums: np.ndarray, reg_lambda: float
) -> tuple[float, np.ndarray]:
    """Expected bit width per group, weighted by the inverse group frequency."""
    freq_sums = np.asarray(freq_sums, dtype=np.float64)
    if np.any(freq_sums < 1):
        raise ValueError("group frequency sums must be at least 1")
    probs = state.probability_matrix()
    bits = cands.as_array()
    loss = reg_lambda * float(np.sum((probs @ bits) / freq_sums))
    d_p = reg_lambda * bits[None, :] / freq_sums[:, None]
    return loss, gamma_grad(probs, d_p, state.tau)


def expected_bits(state: GroupPrecisionState, cands: CandidateSet) -> np.ndarray:
    return state.probability_matrix() @ cands.as_array()


def average_bits(bit_of_group: np.ndarray, group_sizes: np.ndarray | None) -> float:
    """Mean bit width over features (over groups when sizes are unknown)."""
    bit_of_group = np.asarray(bit_of_group, dtype=np.float64)
    if group_sizes is None:
        return float(bit_of_group.mean())
    return float(np.sum(bit_of_group * group_sizes) / np.sum(group_sizes))


def sample_precision(
    state: GroupPrecisionState, cands: CandidateSet, group_sizes: np.ndarray | None = None
) -> SampledPrecision:
    """Pick the highest candidate whose probability exceeds 1/(2m), per group."""
    probs = state.probability_matrix()
    qualifies = probs > 1.0 / (2 * cands.m)
    assert qualifies.any(axis=1).all(), "some group has no candidate above the sampling threshold"
    bits = cands.as_array()
    chosen = np.where(qualifies, bits[None, :], -1.0).max(axis=1).astype(np.int64)
    return SampledPrecision(bit_of_group=chosen.tolist(), avg_bits=average_bits(chosen, group_sizes))


def precision_frequency_correlation(sampled: SampledPrecision, groups: GroupAssignment) -> float:
    """Spearman correlation between group frequency and sampled bit width."""
    frequency = pd.Series(groups.freq_sums, dtype=np.float64).rank()
    bits = pd.Series(sampled.bit_of_group, dtype=np.float64).rank()
    return float(frequency.corr(bits))


def precision_summary(sampled: SampledPrecision, groups: GroupAssignment) -> dict:
    sizes = groups.group_sizes
    histogram: dict[str, int] = {}
    for bit, size in zip(sampled.bit_of_group, sizes.tolist()):
        histogram[str(bit)] = histogram.get(str(bit), 0) + size
    spearman = precision_frequency_correlation(sampled, groups)
    return {
        "avg_bits": sampled.avg_bits,
        "ratio": sampled.avg_bits / 32.0,
        # Undefined (null) when every group has the same bit width.
        "spearman": spearman if np.isfinite(spearman) else None,
        "per_bit_histogram": dict(sorted(histogram.items(), key=lambda item: int(item[0]))),
        "groups": [
            {"group": k, "bit_width": bit, "size": size, "freq_sum": freq}
            for k, (bit, size, freq) in enumerate(zip(sampled.bit_of_group, sizes.tolist(), groups.freq_sums.tolist()))
        ],
    }


def write_precision(path: str | Path, sampled: SampledPrecision, groups: GroupAssignment) -> None:
    """Write `group_index \\t bit_width` lines plus a JSON summary beside them."""
    path = Path(path)
    path.write_text("".join(f"{k}\t{bit}\n" for k, bit in enumerate(sampled.bit_of_group)))
    path.with_suffix(".json").write_text(json.dumps(precision_summary(sampled, groups), indent=2))


def read_precision(path: str | Path, groups: GroupAssignment | None = None) -> SampledPrecision:
    bits: list[int] = []
    for line_number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            index, bit = (int(part) for part in line.split("\t"))
        except ValueError:
            raise FormatError(f"{path}: line {line_number}: expected 'group_index<TAB>bit_width'") from None
        if index != len(bits):
            raise FormatError(f"{path}: line {line_number}: group {index} out of order")
        bits.append(bit)
    if groups is not None and len(bits) != groups.g:
        raise FormatError(f"{path}: {len(bits)} groups, catalog grouping has {groups.g}")
    sizes = groups.group_sizes if groups is not None else None
    return SampledPrecision(bit_of_group=bits, avg_bits=average_bits(np.array(bits), sizes))
