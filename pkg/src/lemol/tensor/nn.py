"""Dense layers, LSTM cells and the bidirectional sequence encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _emit, _sigmoid
from .params import ParamStore

ACTIVATIONS = ("relu", "tanh", "linear")


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def dense_forward(x: Tensor, W: Tensor, b: Tensor, activation: str = "linear") -> Tensor:
    """activation(x @ W + b) as a single fused tape primitive."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1 \
            or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(f"dense shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    z = x.data @ W.data + b.data
    if activation == "relu":
        y = np.maximum(z, 0.0)
    elif activation == "tanh":
        y = np.tanh(z)
    else:
        y = z

    def back(g):
        gz = g[0]
        if activation == "relu":
            gz = gz * (z > 0)
        elif activation == "tanh":
            gz = gz * (1.0 - y * y)
        return gz @ W.data.T, x.data.T @ gz, gz.sum(axis=0)

    return _emit(y, (x, W, b), back)


def init_dense(store: ParamStore, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
    store.add(f"{prefix}.W", glorot(rng, fan_in, fan_out))
    store.add(f"{prefix}.b", np.zeros(fan_out))


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], prefix: str = "",
             store: ParamStore | None = None) -> ParamStore:
    """Layers named ``l0, l1, ...`` with the last one called ``out``."""
    store = ParamStore() if store is None else store
    p = f"{prefix}." if prefix else ""
    n = len(sizes) - 1
    for i in range(n):
        name = "out" if i == n - 1 else f"l{i}"
        init_dense(store, p + name, sizes[i], sizes[i + 1], rng)
    return store


def mlp_layer_names(store: ParamStore, prefix: str = "") -> list[str]:
    p = f"{prefix}." if prefix else ""
    names = []
    i = 0
    while f"{p}l{i}.W" in store:
        names.append(f"{p}l{i}")
        i += 1
    names.append(f"{p}out")
    return names


def mlp_forward(store: ParamStore, x: Tensor, prefix: str = "", hidden: str = "relu") -> Tensor:
    layers = mlp_layer_names(store, prefix)
    for i, name in enumerate(layers):
        act = "linear" if i == len(layers) - 1 else hidden
        x = dense_forward(x, store[f"{name}.W"], store[f"{name}.b"], act)
    return x


# -- LSTM ---------------------------------------------------------------------

@dataclass(frozen=True)
class LstmState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ValueError(f"LSTM h {self.h.shape} and c {self.c.shape} differ")

    @property
    def hidden_size(self) -> int:
        return self.h.shape[-1]

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LstmState":
        return cls(Tensor._wrap(np.zeros((batch, hidden))), Tensor._wrap(np.zeros((batch, hidden))))

    def detach(self) -> "LstmState":
        return LstmState(self.h.detach(), self.c.detach())


def init_lstm(store: ParamStore, prefix: str, input_size: int, hidden: int, rng: np.random.Generator) -> None:
    """Gate order (input, forget, candidate, output); forget bias starts at 1."""
    Wx = np.concatenate([glorot(rng, input_size, hidden) for _ in range(4)], axis=1)
    Wh = np.concatenate([glorot(rng, hidden, hidden) for _ in range(4)], axis=1)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    store.add(f"{prefix}.Wx", Wx)
    store.add(f"{prefix}.Wh", Wh)
    store.add(f"{prefix}.b", b)


def _lstm_cell(x: Tensor, h: Tensor, c: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor):
    H = h.shape[1]
    if x.data.ndim != 2 or x.shape[1] != Wx.shape[0] or Wh.shape != (H, 4 * H) \
            or Wx.shape[1] != 4 * H or b.shape != (4 * H,) or x.shape[0] != h.shape[0]:
        raise ValueError(
            f"LSTM dimension mismatch: x{x.shape} h{h.shape} Wx{Wx.shape} Wh{Wh.shape} b{b.shape}")
    z = x.data @ Wx.data + h.data @ Wh.data + b.data
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c_new = f * c.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def back(grads):
        dh, dc = grads
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c.data * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        return (dz @ Wx.data.T, dz @ Wh.data.T, dc * f,
                x.data.T @ dz, h.data.T @ dz, dz.sum(axis=0))

    return _emit((h_new, c_new), (x, h, c, Wx, Wh, b), back)


def lstm_step(x: Tensor, state: LstmState, params: ParamStore, prefix: str = "") -> LstmState:
    """One LSTM transition; the input state is left untouched."""
    p = f"{prefix}." if prefix else ""
    h, c = _lstm_cell(x, state.h, state.c, params[p + "Wx"], params[p + "Wh"], params[p + "b"])
    return LstmState(h, c)


def init_bilstm(store: ParamStore, prefix: str, input_size: int, hidden: int,
                out_dim: int | None, rng: np.random.Generator) -> None:
    init_lstm(store, f"{prefix}.fwd", input_size, hidden, rng)
    init_lstm(store, f"{prefix}.bwd", input_size, hidden, rng)
    if out_dim is not None:
        init_dense(store, f"{prefix}.proj", 2 * hidden, out_dim, rng)


def bilstm_encode(sequence: Sequence[Tensor], params: ParamStore, prefix: str = "") -> Tensor:
    """concat(final forward h, final backward h), then the projection if present.

    Each sequence element is ``[B, I]`` (or ``[I]``, treated as batch 1); the
    result is ``[B, E]``.
    """
    if len(sequence) == 0:
        raise ValueError("bilstm_encode needs a non-empty sequence")
    p = f"{prefix}." if prefix else ""
    seq = [s if s.data.ndim == 2 else ad.reshape(s, (1, -1)) for s in sequence]
    B = seq[0].shape[0]
    H = params[p + "fwd.Wh"].shape[0]
    fwd = LstmState.zeros(B, H)
    for x in seq:
        fwd = lstm_step(x, fwd, params, p + "fwd")
    bwd = LstmState.zeros(B, H)
    for x in reversed(seq):
        bwd = lstm_step(x, bwd, params, p + "bwd")
    out = ad.concat([fwd.h, bwd.h], axis=1)
    if p + "proj.W" in params:
        out = dense_forward(out, params[p + "proj.W"], params[p + "proj.b"], "linear")
    return out


def softmax(logits: Tensor) -> Tensor:
    return ad.softmax(logits)
