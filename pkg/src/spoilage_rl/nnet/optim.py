"""Optimizers over flat parameter vectors.

Two rules: plain SGD and Adam-style adaptive moments. Both update the
vector in place; state (step count, moment accumulators) lives in an
OptimizerState the caller threads through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..domain import DataError
from .layers import ShapeMismatchError
from .network import QNetworkParams


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-3

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DataError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DataError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise DataError("beta1 and beta2 must be in [0, 1)")
        if not self.epsilon > 0:
            raise DataError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class OptimizerState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    scratch: np.ndarray | None = None  # reused temp, not semantic state


def optimizer_step(params, grads: np.ndarray, state: OptimizerState, config):
    """Apply one update; returns the (mutated) params.

    `params` is a QNetworkParams or a bare flat vector. SGD ignores the
    state; Adam keeps first/second moments in it with bias correction, so a
    constant gradient drives the step size toward learning_rate * sign(g).
    """
    theta = params.theta if isinstance(params, QNetworkParams) else params
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != theta.shape:
        raise ShapeMismatchError(
            f"gradient shape {grads.shape} does not match parameters {theta.shape}"
        )
    if isinstance(config, SgdConfig):
        theta -= config.learning_rate * grads
        return params
    if not isinstance(config, AdamConfig):
        raise DataError(f"unknown optimizer config {type(config).__name__}")

    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    if state.scratch is None or state.scratch.shape != theta.shape:
        state.scratch = np.empty_like(theta)
    state.step += 1
    m, v, s = state.m, state.v, state.scratch
    # in-place m ← β₁m + (1−β₁)g and v ← β₂v + (1−β₂)g², then the
    # bias-corrected step, all through one scratch vector
    m *= config.beta1
    np.multiply(grads, 1.0 - config.beta1, out=s)
    m += s
    v *= config.beta2
    np.multiply(grads, grads, out=s)
    s *= 1.0 - config.beta2
    v += s
    np.sqrt(v, out=s)
    s /= np.sqrt(1.0 - config.beta2**state.step)
    s += config.epsilon
    np.divide(m, s, out=s)
    s *= config.learning_rate / (1.0 - config.beta1**state.step)
    theta -= s
    return params
