"""
Parameter containers built on the numerics tape: affine layers, MLPs and GRU cells.
"""

import hashlib
from typing import Dict, List

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

ACTIVATIONS = {
    'tanh': nx.tanh,
    'silu': nx.silu,
    'sigmoid': nx.sigmoid,
}


class Module:
    """Collects Tensor parameters from attributes, child modules and lists of modules."""

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[name] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{name}."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{name}.{i}."))
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for '{name}': {value.shape} vs {p.shape}")
            p.data = value.copy()


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: Rng, zero_init: bool = False):
        scale = 0.0 if zero_init else 1.0 / np.sqrt(in_dim)
        self.weight = Tensor(rng.normal((in_dim, out_dim), scale), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> Tensor:
        return nx.as_tensor(x) @ self.weight + self.bias


class MLP(Module):
    """Affine layers with `activation` between them; the last layer is linear."""

    def __init__(self, sizes: List[int], rng: Rng, activation: str = 'tanh', zero_last: bool = False):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.activation = activation
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng.child(i), zero_init=zero_last and i == len(sizes) - 2)
            for i in range(len(sizes) - 1)
        ]

    def __call__(self, x) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = nx.as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = act(h)
        return h


class GRUCell(Module):
    """Weights for `numerics.gru_cell`, gates ordered [reset | update | candidate]."""

    def __init__(self, in_dim: int, hidden: int, rng: Rng):
        self.wx = Tensor(rng.child(0).normal((in_dim, 3 * hidden), 1.0 / np.sqrt(in_dim)), requires_grad=True)
        self.wh_gates = Tensor(rng.child(1).normal((hidden, 2 * hidden), 1.0 / np.sqrt(hidden)), requires_grad=True)
        self.wh_cand = Tensor(rng.child(2).normal((hidden, hidden), 1.0 / np.sqrt(hidden)), requires_grad=True)
        self.bias = Tensor(np.zeros(3 * hidden), requires_grad=True)

    @property
    def hidden(self) -> int:
        return self.wh_cand.shape[0]

    def __call__(self, x, h) -> Tensor:
        return nx.gru_cell(x, h, self)


def polyak_update(target: Module, source: Module, tau: float):
    """target <- tau * target + (1 - tau) * source."""
    src = source.named_parameters()
    for name, p in target.named_parameters().items():
        p.data = tau * p.data + (1.0 - tau) * src[name].data


def copy_module_params(target: Module, source: Module):
    target.load_state_dict(source.state_dict())


def param_fingerprint(module: Module) -> str:
    """SHA-256 over parameter bytes in name order."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters().items()):
        h.update(name.encode('utf-8'))
        h.update(np.ascontiguousarray(p.data).astype('<f8').tobytes())
    return h.hexdigest()
