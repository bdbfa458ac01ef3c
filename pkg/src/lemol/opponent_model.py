"""Opponent model that tracks the opponent's learning across episodes.

Four pieces share one parameter store under disjoint prefixes:

* ``sum.*``  bidirectional LSTM summarising a whole episode into ``e_k``
* ``core.*`` LSTM folding summaries into the representation ``h_k``
* ``inep.*`` LSTM over the agent's own observations inside an episode (``u``)
* ``head.*`` MLP mapping ``concat(u, h_{k-1})`` to a distribution over actions

Within episode ``k`` every prediction conditions on ``h_{k-1}``, so ``h`` only
moves at episode boundaries.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .experience import EpisodeStructureError, Event, TrajectoryRecord, check_equal_episode_length
from .keepaway import N_ACTIONS, OBS_DIM
from .tensor import LstmState, ParamStore, Tape, Tensor, adam_step, init_bilstm, init_lstm, init_mlp
from .tensor import autodiff as ad
from .tensor.nn import bilstm_encode, lstm_step, mlp_forward

LOG_FLOOR = 1e-12


class OmVariant(str, enum.Enum):
    FULL = "full"
    ABLATED = "ablated"
    NAIVE = "naive"
    ORACLE = "oracle"

    @property
    def uses_h(self) -> bool:
        return self in (OmVariant.FULL, OmVariant.NAIVE)

    @property
    def trainable(self) -> bool:
        return self in (OmVariant.FULL, OmVariant.ABLATED)


@dataclass(frozen=True)
class OmHyper:
    core_hidden: int = 64
    embed_dim: int = 128
    inep_hidden: int = 32
    summary_hidden: int = 64
    head_hidden: int = 64
    chunk_length: int = 500
    batch_size: int = 8
    epochs: int = 50
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    holdout_fraction: float = 0.2
    seed: int = 0

    def chunk_episodes(self, episode_length: int) -> int:
        return max(1, self.chunk_length // episode_length)


def event_dim(obs_dim: int = OBS_DIM, n_actions: int = N_ACTIONS) -> int:
    return obs_dim + 2 * n_actions + 2


def init_om_params(rng: np.random.Generator, hyper: OmHyper = OmHyper(), obs_dim: int = OBS_DIM,
                   n_actions: int = N_ACTIONS) -> ParamStore:
    """Glorot everywhere except the head's output layer, which starts at zero.

    A zero output layer makes the untrained model predict exactly uniform.
    """
    store = ParamStore()
    init_bilstm(store, "sum", event_dim(obs_dim, n_actions), hyper.summary_hidden, hyper.embed_dim, rng)
    init_lstm(store, "core", hyper.embed_dim, hyper.core_hidden, rng)
    init_lstm(store, "inep", obs_dim, hyper.inep_hidden, rng)
    init_mlp(rng, [hyper.inep_hidden + hyper.core_hidden, hyper.head_hidden, n_actions], "head", store)
    store["head.out.W"].data[...] = 0.0
    return store


def _const(x) -> Tensor:
    return Tensor._wrap(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def _hidden(x) -> Tensor:
    if isinstance(x, LstmState):
        return x.h
    return x if isinstance(x, Tensor) else _const(x)


def event_vectors(events: Sequence[Event]) -> np.ndarray:
    """Rows ``concat(obs, action, reward, opp_action, done)``; opponent observations are dropped."""
    return np.stack([np.concatenate([e.obs, e.action, [e.reward], e.opp_action, [float(e.done)]])
                     for e in events]).astype(np.float64)


# -- the four operations --------------------------------------------------------

def summarise_batch(x: np.ndarray | Tensor, params: ParamStore) -> Tensor:
    """Summaries of ``N`` episodes given as ``[N, T, D]`` event vectors."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return bilstm_encode([Tensor._wrap(x[:, t, :]) for t in range(x.shape[1])], params, "sum")


def summarise_episode(events: Sequence[Event] | np.ndarray, params: ParamStore,
                      episode_length: int | None = None) -> Tensor:
    x = events if isinstance(events, np.ndarray) else event_vectors(events)
    if episode_length is not None and x.shape[0] != episode_length:
        raise EpisodeStructureError(f"episode has {x.shape[0]} events, expected {episode_length}")
    return summarise_batch(x[None], params)


def update_representation(h: LstmState, e: Tensor, params: ParamStore) -> LstmState:
    return lstm_step(e, h, params, "core")


def in_episode_step(u: LstmState, obs, params: ParamStore) -> LstmState:
    return lstm_step(obs if isinstance(obs, Tensor) else _const(obs), u, params, "inep")


def predict(u, h, params: ParamStore, variant: OmVariant | str = OmVariant.FULL, oracle_action=None) -> Tensor:
    """Distribution over opponent actions, ``[B, 5]``.

    ``u`` and ``h`` may be LSTM states or their hidden vectors.
    """
    variant = OmVariant(variant)
    if variant is OmVariant.ORACLE:
        if oracle_action is None:
            raise ValueError("the oracle variant needs the true opponent action")
        a = np.atleast_2d(np.asarray(oracle_action, dtype=np.float64))
        return Tensor._wrap(ad.one_hot(a.argmax(axis=1), a.shape[1]))
    uh = _hidden(u)
    hh = _hidden(h)
    if not variant.uses_h:
        hh = Tensor._wrap(np.zeros(hh.shape))
    return ad.softmax(mlp_forward(params, ad.concat([uh, hh], axis=1), "head"))


def point_prediction(dist) -> np.ndarray:
    """Argmax of each row as a one-hot."""
    d = dist.data if isinstance(dist, Tensor) else np.atleast_2d(dist)
    return ad.one_hot(d.argmax(axis=1), d.shape[1])


def cat_loss(predicted: Tensor, actual, weights: np.ndarray | None = None) -> Tensor:
    """-mean log p[actual index], log clamped below at log(1e-12).

    With ``weights`` the mean becomes a weighted mean; zero-weight rows are ignored.
    """
    actual = np.atleast_2d(np.asarray(actual.data if isinstance(actual, Tensor) else actual))
    mask = ad.one_hot(actual.argmax(axis=1), actual.shape[1])
    picked = ad.sum(ad.mul(predicted, Tensor._wrap(mask)), axis=1)
    nll = ad.neg(ad.log(picked, LOG_FLOOR))
    if weights is None:
        return ad.mean(nll)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    return ad.mul(ad.sum(ad.mul(nll, Tensor._wrap(w))), 1.0 / w.sum())


# -- batched chunk forward used for training and evaluation ---------------------

@dataclass
class _Data:
    events: np.ndarray    # [N, K, T, D]
    obs: np.ndarray       # [N, K, T, O]
    target: np.ndarray    # [N, K, T] action indices
    valid: np.ndarray     # [N, K] episode exists


def _stack(records: Sequence[TrajectoryRecord]) -> _Data:
    K = max(r.num_episodes for r in records)
    T = records[0].meta.episode_length
    m = records[0].meta
    D = event_dim(m.obs_dim, m.n_actions)
    N = len(records)
    ev = np.zeros((N, K, T, D))
    valid = np.zeros((N, K))
    for i, r in enumerate(records):
        if r.num_episodes:
            ev[i, :r.num_episodes] = r.arrays()["events"]
        valid[i, :r.num_episodes] = 1.0
    opp = ev[..., m.obs_dim + m.n_actions + 1:m.obs_dim + 2 * m.n_actions + 1]
    return _Data(ev, ev[..., :m.obs_dim], opp.argmax(axis=-1), valid)


def chunk_forward(params: ParamStore, events: np.ndarray, obs: np.ndarray, h0: LstmState,
                  variant: OmVariant) -> tuple[Tensor, LstmState]:
    """Predictions for a chunk of ``E`` consecutive episodes of ``B`` trajectories.

    ``events`` is ``[B, E, T, D]`` and ``obs`` ``[B, E, T, O]``. Returns the
    ``[T*E*B, A]`` distributions (row ``t*E*B + j*B + b``) and the core state
    after the chunk's last episode.
    """
    B, E, T, _ = events.shape
    H = h0.h.shape[1]
    ev = events.transpose(1, 0, 2, 3).reshape(E * B, T, -1)
    ob = obs.transpose(1, 0, 2, 3).reshape(E * B, T, -1)
    state = h0
    if variant.uses_h:
        summaries = summarise_batch(ev, params)
        h_prev = []
        for j in range(E):
            h_prev.append(state.h)
            state = update_representation(state, ad.getitem(summaries, slice(j * B, (j + 1) * B)), params)
        h_rep = ad.concat(h_prev, axis=0) if E > 1 else h_prev[0]
    else:
        h_rep = Tensor._wrap(np.zeros((E * B, H)))
    U = params["inep.Wh"].shape[0]
    u = LstmState.zeros(E * B, U)
    us = []
    for t in range(T):
        u = in_episode_step(u, Tensor._wrap(ob[:, t, :]), params)
        us.append(u.h)
    z = ad.concat([ad.concat(us, axis=0), ad.concat([h_rep] * T, axis=0)], axis=1)
    return ad.softmax(mlp_forward(params, z, "head")), state


def _chunk_targets(data: _Data, rows: np.ndarray, k0: int, k1: int):
    ev = data.events[rows, k0:k1]
    ob = data.obs[rows, k0:k1]
    tgt = data.target[rows, k0:k1].transpose(2, 1, 0).reshape(-1)
    T = ev.shape[2]
    w = np.broadcast_to(data.valid[rows, k0:k1].T[None], (T, k1 - k0, len(rows))).reshape(-1)
    return ev, ob, tgt, w


def _run_rows(params: ParamStore, data: _Data, rows: np.ndarray, hyper: OmHyper, variant: OmVariant,
              train: bool) -> tuple[float, float, np.ndarray]:
    """One pass over trajectories ``rows``; returns (nll sum, weight sum, per-episode mean CE)."""
    K, T = data.events.shape[1], data.events.shape[2]
    E = hyper.chunk_episodes(T)
    state = LstmState.zeros(len(rows), hyper.core_hidden)
    total = weight = 0.0
    per_episode = np.zeros(K)
    for k0 in range(0, K, E):
        k1 = min(K, k0 + E)
        ev, ob, tgt, w = _chunk_targets(data, rows, k0, k1)
        if w.sum() == 0:
            break
        actual = ad.one_hot(tgt, N_ACTIONS)
        if train:
            with Tape() as tape:
                probs, state = chunk_forward(params, ev, ob, state, variant)
                loss = cat_loss(probs, actual, w)
            adam_step(params, params.gradients(tape, loss), hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
        else:
            probs, state = chunk_forward(params, ev, ob, state, variant)
        state = state.detach()
        nll = -np.log(np.maximum(probs.data[np.arange(tgt.size), tgt], LOG_FLOOR))
        total += float(np.sum(nll * w))
        weight += float(w.sum())
        per_row = (nll * w).reshape(T, k1 - k0, len(rows)).sum(axis=(0, 2))
        cnt = w.reshape(T, k1 - k0, len(rows)).sum(axis=(0, 2))
        per_episode[k0:k1] = np.divide(per_row, cnt, out=np.zeros_like(per_row), where=cnt > 0)
    return total, weight, per_episode


@dataclass
class TrainingReport:
    train_loss: list[float] = field(default_factory=list)
    holdout_loss: list[float] = field(default_factory=list)
    n_train: int = 0
    n_holdout: int = 0

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "holdout_loss"])
            for i, (a, b) in enumerate(zip(self.train_loss, self.holdout_loss)):
                w.writerow([i + 1, repr(a), repr(b)])


def holdout_split(n: int, fraction: float) -> tuple[list[int], list[int]]:
    """Last ``fraction`` of the trajectories (at least one when n >= 2) are held out."""
    n_hold = 0 if n < 2 else max(1, int(round(fraction * n)))
    n_hold = min(n_hold, n - 1) if n >= 2 else 0
    return list(range(n - n_hold)), list(range(n - n_hold, n))


def evaluate_om(records: Sequence[TrajectoryRecord], params: ParamStore, hyper: OmHyper = OmHyper(),
                variant: OmVariant | str = OmVariant.FULL) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all events and its per-episode profile."""
    variant = OmVariant(variant)
    if not records:
        raise ValueError("no trajectories to evaluate")
    check_equal_episode_length(list(records))
    data = _stack(records)
    if variant is OmVariant.ORACLE:
        return 0.0, np.zeros(data.events.shape[1])
    total, weight, per_ep = _run_rows(params, data, np.arange(len(records)), hyper, variant, train=False)
    return total / max(weight, 1.0), per_ep


def train_om(store, params: ParamStore, hyper: OmHyper = OmHyper(),
             variant: OmVariant | str = OmVariant.FULL) -> TrainingReport:
    """Minibatches of whole trajectories, chunked in time with truncated BPTT.

    ``store`` is a TrajectoryStore or a sequence of TrajectoryRecords. The
    naive and oracle variants never change ``params``.
    """
    variant = OmVariant(variant)
    records = list(store.read_all() if hasattr(store, "read_all") else store)
    if not records:
        raise ValueError("opponent-model training needs at least one trajectory")
    check_equal_episode_length(records)
    data = _stack(records)
    train_idx, hold_idx = holdout_split(len(records), hyper.holdout_fraction)
    rng = np.random.default_rng(hyper.seed)
    report = TrainingReport(n_train=len(train_idx), n_holdout=len(hold_idx))
    hold = np.array(hold_idx)
    for _ in range(hyper.epochs):
        order = rng.permutation(train_idx)
        total = weight = 0.0
        for s in range(0, len(order), hyper.batch_size):
            rows = order[s:s + hyper.batch_size]
            t, w, _ = _run_rows(params, data, rows, hyper, variant, train=variant.trainable)
            total += t
            weight += w
        report.train_loss.append(total / max(weight, 1.0))
        if len(hold):
            t, w, _ = _run_rows(params, data, hold, hyper, variant, train=False)
            report.holdout_loss.append(t / max(w, 1.0))
        else:
            report.holdout_loss.append(math.nan)
    return report


# -- online tracking during play ------------------------------------------------

@dataclass(frozen=True)
class TraceRow:
    episode: int
    step: int
    predicted_index: int
    actual_index: int
    cross_entropy: float


class OmPlayState:
    """Online opponent model: ``observe`` emits a prediction, ``record`` scores it.

    Calls must alternate observe / record. After the last event of an episode
    the episode is summarised and ``h`` advances once; ``u`` resets.
    """

    def __init__(self, params: ParamStore, variant: OmVariant | str = OmVariant.FULL,
                 episode_length: int = 25, hyper: OmHyper = OmHyper()):
        self.params = params
        self.variant = OmVariant(variant)
        self.episode_length = episode_length
        self.h = LstmState.zeros(1, hyper.core_hidden)
        self.u = LstmState.zeros(1, hyper.inep_hidden)
        self._u_fresh = self.u
        self.episode = 0
        self.step = 0
        self.trace: list[TraceRow] = []
        self._events: list[Event] = []
        self._pending: np.ndarray | None = None
        self.h_updates = 0

    def observe(self, obs, oracle_action=None) -> np.ndarray:
        """Advance ``u`` with ``obs`` and return the predicted distribution."""
        if self._pending is not None:
            raise RuntimeError("observe called twice without recording the realised event")
        if self.variant is OmVariant.ORACLE:
            dist = predict(None, None, self.params, self.variant, oracle_action).data[0]
        else:
            self.u = in_episode_step(self.u, obs, self.params)
            dist = predict(self.u, self.h, self.params, self.variant).data[0]
        self._pending = dist
        return dist

    def record(self, event: Event) -> float:
        """Score the pending prediction against ``event.opp_action``; returns the cross-entropy."""
        if self._pending is None:
            raise RuntimeError("record called before observe")
        if bool(event.done) != (self.step == self.episode_length - 1):
            raise EpisodeStructureError(f"done={event.done} at step {self.step} of {self.episode_length}")
        actual = int(np.argmax(event.opp_action))
        ce = float(-np.log(max(self._pending[actual], LOG_FLOOR)))
        self.trace.append(TraceRow(self.episode, self.step, int(np.argmax(self._pending)), actual, ce))
        self._pending = None
        self._events.append(event)
        self.step += 1
        if event.done:
            self._end_episode()
        return ce

    def _end_episode(self) -> None:
        if self.variant.uses_h:
            e = summarise_episode(self._events, self.params, self.episode_length)
            self.h = update_representation(self.h, e, self.params)
            self.h_updates += 1
        self.u = self._u_fresh
        self._events = []
        self.step = 0
        self.episode += 1

    def episode_cross_entropy(self, k: int) -> float:
        vals = [r.cross_entropy for r in self.trace if r.episode == k]
        return float(np.mean(vals)) if vals else math.nan


def om_play_state(params: ParamStore, variant: OmVariant | str = OmVariant.FULL, episode_length: int = 25,
                  hyper: OmHyper = OmHyper()) -> OmPlayState:
    return OmPlayState(params, variant, episode_length, hyper)


def replay_trace(record: TrajectoryRecord, params: ParamStore, variant: OmVariant | str = OmVariant.FULL,
                 hyper: OmHyper = OmHyper()) -> list[TraceRow]:
    """Feed a stored trajectory through a fresh play state, offline."""
    play = OmPlayState(params, variant, record.meta.episode_length, hyper)
    for episode in record.episodes():
        for ev in episode:
            play.observe(ev.obs, oracle_action=ev.opp_action)
            play.record(ev)
    return play.trace


def write_trace_csv(path, trace: Sequence[TraceRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", "predicted_index", "actual_index", "cross_entropy"])
        for r in trace:
            w.writerow([r.episode, r.step, r.predicted_index, r.actual_index, repr(r.cross_entropy)])
