"""Named parameter stores, Adam, and Polyak averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class ParamStore:
    """Insertion-ordered map of parameter name -> Tensor, plus Adam moments."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._adam: dict[str, AdamState] = {}
        self.frozen = False

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        self._adam[name] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def adam_state(self, name: str) -> AdamState:
        return self._adam[name]

    def num_values(self) -> int:
        return int(np.sum([t.size for t in self._params.values()]))

    def sub(self, prefix: str) -> "ParamStore":
        """View of the parameters under ``prefix.`` (shares tensors and Adam state)."""
        view = ParamStore()
        p = prefix + "."
        for name, t in self._params.items():
            if name.startswith(p):
                view._params[name[len(p):]] = t
                view._adam[name[len(p):]] = self._adam[name]
        view.frozen = self.frozen
        return view

    def merge(self, prefix: str, other: "ParamStore") -> None:
        for name, t in other._params.items():
            full = f"{prefix}.{name}"
            if full in self._params:
                raise KeyError(f"duplicate parameter name {full!r}")
            self._params[full] = t
            self._adam[full] = other._adam[name]

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out._params[name] = Tensor._wrap(t.data.copy(), True)
            st = self._adam[name]
            out._adam[name] = AdamState(st.m.copy(), st.v.copy(), st.t)
        out.frozen = self.frozen
        return out

    def values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_values(self, values: Mapping[str, np.ndarray]) -> None:
        for name, arr in values.items():
            t = self._params[name]
            if t.data.shape != np.shape(arr):
                raise ValueError(f"{name}: shape {np.shape(arr)} != {t.data.shape}")
            t.data[...] = arr

    def gradients(self, tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
        names = self.names()
        return dict(zip(names, tape.gradient(loss, [self._params[n] for n in names])))


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place, for every name in ``grads``."""
    unknown = [n for n in grads if n not in store]
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {unknown}")
    for name, g in grads.items():
        p = store[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        st = store.adam_state(name)
        st.t += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1 ** st.t)
        v_hat = st.v / (1.0 - beta2 ** st.t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def polyak_update(target: ParamStore, source: ParamStore, tau: float) -> None:
    """target <- (1 - tau) * target + tau * source, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if set(target.names()) != set(source.names()):
        diff = set(source.names()) ^ set(target.names())
        raise KeyError(f"parameter name sets differ: {sorted(diff)}")
    for name in target:
        t, s = target[name].data, source[name].data
        if t.shape != s.shape:
            raise ValueError(f"{name}: shape {t.shape} != {s.shape}")
        if tau == 1.0:
            t[...] = s
        else:
            t[...] = (1.0 - tau) * t + tau * s
