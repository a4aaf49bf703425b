"""Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterSet


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out


def adam_step(state: AdamState, params: ParameterSet, grads: dict[str, np.ndarray],
              lr: float | None = None) -> None:
    """One bias-corrected Adam update of every trainable parameter, in place."""
    trainable = params.trainable()
    missing = [k for k in trainable if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameters: {missing}")
    lr = state.lr if lr is None else lr
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in trainable.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
