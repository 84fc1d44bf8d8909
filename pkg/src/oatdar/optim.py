"""Adaptive-moment gradient updates with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)   # first-moment accumulators
    v: dict = field(default_factory=dict)   # second-moment accumulators

    def ensure(self, params: dict):
        for k, p in params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(p, dtype=np.float64)
                self.v[k] = np.zeros_like(p, dtype=np.float64)

    def state_arrays(self) -> dict:
        out = {}
        for k in self.m:
            out["m." + k] = self.m[k]
            out["v." + k] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict, step: int):
        self.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v.")}
        self.step = step


def adam_update(params: dict, grads: dict, state: OptimizerState):
    """One optimizer step over name-keyed arrays; updates in place and
    returns (params, state). Moments are kept in float64 regardless of the
    parameter dtype."""
    state.ensure(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= step.astype(p.dtype)
    return params, state
