"""Parameter containers and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from relnet.tensor import Tensor


class ParamSet(dict):
    """Ordered ``name -> Tensor`` mapping of learnable parameters.

    Iteration order is insertion order, which is also the order used by
    checkpoints.
    """

    def add(self, name: str, data, dtype=None) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, dtype=dtype, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.values())


@dataclass
class AdamState:
    """Moments, step counter and hyperparameters of an Adam optimizer.

    ``decay_names`` selects which parameters receive weight decay; with
    ``decoupled=True`` the decay is added to the update (AdamW style),
    otherwise it is folded into the gradient before the moment updates.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_names: frozenset = frozenset()
    decoupled: bool = True
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def init_moments(self, params: ParamSet) -> None:
        for name, p in params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))


def adam_step(params: ParamSet, state: AdamState, lr: float | None = None) -> None:
    """Apply one bias-corrected Adam update in place and clear gradients."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step called without gradients for: {', '.join(missing)}")
    lr = state.lr if lr is None else lr
    state.init_moments(params)
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = p.grad
        decay = state.weight_decay if name in state.decay_names else 0.0
        if decay and not state.decoupled:
            g = g + decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if decay and state.decoupled:
            update = update + decay * p.data
        p.data -= lr * update
        p.grad = None
