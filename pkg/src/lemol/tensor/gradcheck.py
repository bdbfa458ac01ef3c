from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor
from .params import ParamStore


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore, step: float = 1e-5,
               max_entries: int = 10_000, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be deterministic. Above ``max_entries`` scalar parameters a
    seeded random subsample is checked. Relative error per entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    with Tape() as tape:
        loss = f(store)
    analytic = store.gradients(tape, loss)

    entries = [(name, idx) for name in store for idx in np.ndindex(store[name].shape)]
    if len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    worst = 0.0
    for name, idx in entries:
        data = store[name].data
        orig = data[idx]
        data[idx] = orig + step
        up = float(f(store).data)
        data[idx] = orig - step
        down = float(f(store).data)
        data[idx] = orig
        numeric = (up - down) / (2.0 * step)
        a = float(analytic[name][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
