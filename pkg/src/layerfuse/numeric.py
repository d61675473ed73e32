"""Parameter storage, initialization, Adam, and finite-difference gradient checks."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autograd import ShapeError, Tensor, backward, sigmoid_array
from .rng import Rng


class DeterminismError(RuntimeError):
    pass


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array, stabilized by subtracting the row max."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"softmax_rows needs a non-empty [r, c] array, got {x.shape}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x):
    return sigmoid_array(x)


@dataclass
class ParamStore:
    """Named float64 tensors, kept in lexicographic name order."""

    entries: dict[str, np.ndarray]
    rng_seed: int = 0

    def __post_init__(self):
        self.entries = {k: np.asarray(self.entries[k], dtype=np.float64) for k in sorted(self.entries)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def count(self, prefix: str = "") -> int:
        return int(sum(v.size for k, v in self.entries.items() if k.startswith(prefix)))

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.entries.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.entries.items()}, self.rng_seed)

    def equals(self, other: "ParamStore") -> bool:
        """Bitwise equality of names, shapes and values."""
        if list(self.entries) != list(other.entries):
            return False
        return all(self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
                   for k in self.entries)


def glorot_bound(shape: Sequence[int]) -> float:
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_in, fan_out = shape[-2], shape[-1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _name_seed(seed: int, name: str) -> int:
    h = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return seed ^ h


def init_params(spec: Iterable[tuple[str, Sequence[int], str]], seed: int) -> ParamStore:
    """Build a ParamStore from ``(name, shape, scheme)`` triples.

    Schemes: ``glorot-uniform``, ``zeros``, ``ones``.  Each glorot tensor draws
    from its own stream keyed by (seed, name), so adding or removing a
    parameter never changes the values of the others.
    """
    entries = {}
    for name, shape, scheme in spec:
        if name in entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"{name}: non-positive dimension in {shape}")
        if scheme == "zeros":
            entries[name] = np.zeros(shape)
        elif scheme == "ones":
            entries[name] = np.ones(shape)
        elif scheme == "glorot-uniform":
            bound = glorot_bound(shape)
            entries[name] = Rng(_name_seed(seed, name)).uniform(-bound, bound, shape)
        else:
            raise ValueError(f"{name}: unknown init scheme {scheme!r}")
    return ParamStore(entries, seed)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps_hat: float = 1e-8) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    if state.step < 0:
        raise ValueError("negative Adam step counter")
    step = state.step + 1
    new_entries = dict(params.entries)
    m_new, v_new = dict(state.m), dict(state.v)
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        elif m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{name}: optimizer state shape mismatch")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_entries[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps_hat)
        m_new[name], v_new[name] = m, v
    return ParamStore(new_entries, params.rng_seed), AdamState(step, m_new, v_new)


# ------------------------------------------------------------ gradient check

LossFn = Callable[[dict[str, Tensor]], Tensor]


def sample_coordinates(params: ParamStore, per_tensor: int, seed: int = 0) -> list[tuple[str, int]]:
    """Up to ``per_tensor`` flat coordinates from every parameter, chosen deterministically."""
    rng = Rng(seed)
    coords = []
    for name, arr in params.items():
        idx = list(range(arr.size))
        if arr.size > per_tensor:
            rng.shuffle(idx)
            idx = sorted(idx[:per_tensor])
        coords.extend((name, i) for i in idx)
    return coords


def _loss_value(loss_fn: LossFn, entries: dict[str, np.ndarray]) -> float:
    leaves = {k: Tensor(v, name=k) for k, v in entries.items()}
    return float(loss_fn(leaves).data)


def grad_check(loss_fn: LossFn, params: ParamStore, parameter_subset=None,
               epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``parameter_subset`` is None (every coordinate), a list of parameter names,
    or a list of ``(name, flat_index)`` pairs.  The relative error of one
    coordinate is |a - n| / max(1, |a|, |n|).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    entries = {k: v.copy() for k, v in params.items()}
    leaves = {k: Tensor(v, name=k) for k, v in entries.items()}
    loss = loss_fn(leaves)
    again = _loss_value(loss_fn, entries)
    if float(loss.data) != again:
        raise DeterminismError("forward pass is not deterministic")
    analytic = backward(loss)

    if parameter_subset is None:
        coords = [(k, i) for k, v in entries.items() for i in range(v.size)]
    else:
        coords = []
        for item in parameter_subset:
            if isinstance(item, str):
                coords.extend((item, i) for i in range(entries[item].size))
            else:
                coords.append((item[0], int(item[1])))

    worst = 0.0
    for name, i in coords:
        flat = entries[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + epsilon
        up = _loss_value(loss_fn, entries)
        flat[i] = orig - epsilon
        down = _loss_value(loss_fn, entries)
        flat[i] = orig
        numeric = (up - down) / (2 * epsilon)
        a = float(analytic[name].reshape(-1)[i]) if name in analytic else 0.0
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
