"""
The feature interaction network: a ReLU MLP over concatenated field embeddings
with a single logit output, plus the binary cross-entropy head.
"""
from __future__ import annotations

import numpy as np


def sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def init_mlp(
    rng: np.random.Generator, input_size: int, hidden_sizes: list[int]
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """He-normal weights and zero biases for [input -> hidden... -> 1]."""
    sizes = [input_size, *hidden_sizes, 1]
    weights = [rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)) for fan_in, fan_out in zip(sizes, sizes[1:])]
    biases = [np.zeros(fan_out) for fan_out in sizes[1:]]
    return weights, biases


def mlp_forward(
    x: np.ndarray, weights: list[np.ndarray], biases: list[np.ndarray]
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return the logits and the input of every layer (kept for the backward pass)."""
    activations = [x]
    hidden = x
    for weight, bias in zip(weights[:-1], biases[:-1]):
        hidden = np.maximum(hidden @ weight + bias, 0.0)
        activations.append(hidden)
    logits = (hidden @ weights[-1] + biases[-1])[:, 0]
    return logits, activations


def mlp_backward(
    activations: list[np.ndarray], d_logits: np.ndarray, weights: list[np.ndarray]
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    upstream = d_logits[:, None]
    d_weights: list[np.ndarray] = [np.empty(0)] * len(weights)
    d_biases: list[np.ndarray] = [np.empty(0)] * len(weights)
    for layer in reversed(range(len(weights))):
        d_weights[layer] = activations[layer].T @ upstream
        d_biases[layer] = upstream.sum(axis=0)
        upstream = upstream @ weights[layer].T
        if layer > 0:
            # ReLU: the layer input is positive exactly where the pre-activation was.
            upstream = upstream * (activations[layer] > 0)
    return upstream, d_weights, d_biases


def binary_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy computed from logits, and its gradient."""
    loss = float(np.mean(np.logaddexp(0.0, logits) - labels * logits))
    d_logits = (sigmoid(logits) - labels) / logits.shape[0]
    return loss, d_logits
