"""Glorot/Xavier uniform initialization."""

from __future__ import annotations

import math

import numpy as np


def fans(shape: tuple[int, ...]) -> tuple[int, int]:
    """(fan_in, fan_out) for a dense [D, K] or conv [F, C, kH, kW] shape."""
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        field = shape[2] * shape[3]
        return shape[1] * field, shape[0] * field
    raise ValueError(f"cannot derive fans from shape {shape}")


def xavier_bound(shape: tuple[int, ...]) -> float:
    fan_in, fan_out = fans(shape)
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform draws from the open interval (-bound, bound), bound = sqrt(6 / (fan_in + fan_out))."""
    bound = xavier_bound(shape)
    # Generator.uniform can return the low endpoint; redraw the (measure-zero) hits.
    vals = rng.uniform(-bound, bound, size=shape)
    edge = vals <= -bound
    while edge.any():
        vals[edge] = rng.uniform(-bound, bound, size=int(edge.sum()))
        edge = vals <= -bound
    return vals.astype(dtype)
