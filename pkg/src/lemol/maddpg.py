"""MADDPG actor-critic machinery for discrete (simplex) actions.

Policies emit logits over the 5 actions; exploration during training and the
differentiable action inside the policy loss both use a Gumbel-softmax
relaxation. Critics see ``(obs, opp_obs, action, opp_action)`` when
centralised and ``(obs, action, opp_action)`` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .keepaway import N_ACTIONS
from .tensor import ParamStore, Tape, Tensor, adam_step, init_mlp, mlp_forward, polyak_update
from .tensor import autodiff as ad

MODES = ("explore", "train_noise", "eval")


@dataclass(frozen=True)
class TrainHyper:
    gamma: float = 0.95
    lr: float = 0.01
    tau: float = 0.01
    batch_size: int = 1024
    update_every: int = 25
    explore_episodes: int = 1024
    hidden: int = 64
    buffer_capacity: int = 1_000_000
    temperature: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.5
    train_noise: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")


@dataclass
class TargetPair:
    policy: ParamStore
    critic: ParamStore


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax(logits: Tensor, noise: np.ndarray, temperature: float) -> Tensor:
    return ad.softmax(ad.mul(ad.add(logits, Tensor._wrap(noise)), 1.0 / temperature))


def policy_input(obs, pred=None) -> Tensor:
    obs = obs if isinstance(obs, Tensor) else Tensor._wrap(np.atleast_2d(np.asarray(obs, dtype=np.float64)))
    if pred is None:
        return obs
    pred = pred if isinstance(pred, Tensor) else Tensor._wrap(np.atleast_2d(np.asarray(pred, dtype=np.float64)))
    return ad.concat([obs, pred], axis=1)


def policy_logits(policy: ParamStore, x: Tensor) -> Tensor:
    expected = policy["l0.W"].shape[0]
    if x.shape[-1] != expected:
        raise ValueError(f"policy expects input dim {expected}, got {x.shape[-1]}")
    return mlp_forward(policy, x)


def act(policy: ParamStore, obs, mode: str, rng: np.random.Generator | None = None,
        temperature: float = 1.0, pred=None) -> np.ndarray:
    """One action on the simplex for a single observation."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    x = policy_input(obs, pred)
    if policy["l0.W"].shape[0] != x.shape[1]:
        raise ValueError(f"policy expects input dim {policy['l0.W'].shape[0]}, got {x.shape[1]}")
    if mode == "explore":
        a = np.zeros(N_ACTIONS)
        a[rng.integers(N_ACTIONS)] = 1.0
        return a
    logits = policy_logits(policy, x)
    if mode == "eval":
        return ad.softmax(logits).data[0]
    return gumbel_softmax(logits, gumbel_noise(rng, logits.shape), temperature).data[0]


def critic_input(obs: Tensor, action: Tensor, opp_action: Tensor, opp_obs: Tensor | None = None) -> Tensor:
    parts = [obs] if opp_obs is None else [obs, opp_obs]
    return ad.concat([*parts, action, opp_action], axis=1)


def q_value(critic: ParamStore, x: Tensor) -> Tensor:
    return mlp_forward(critic, x)


def td_target(reward: np.ndarray, done: np.ndarray, gamma: float, q_next: np.ndarray) -> np.ndarray:
    return reward + (1.0 - done) * gamma * q_next


def target_action(target_policy: ParamStore, next_obs, next_pred=None) -> np.ndarray:
    """Deterministic target-policy action (softmax of logits)."""
    return ad.softmax(policy_logits(target_policy, policy_input(next_obs, next_pred))).data


def q_target(batch: Mapping[str, Tensor], targets: TargetPair, gamma: float, opp_next_action: np.ndarray,
             centralised: bool = True, next_pred: np.ndarray | None = None) -> np.ndarray:
    """y = r + (1 - done) * gamma * Qbar(next inputs, target actions); returned detached, shape [B]."""
    if centralised and "next_opp_obs" not in batch:
        raise KeyError("centralised target requires next_opp_obs in the batch")
    next_obs = batch["next_obs"]
    own = Tensor._wrap(target_action(targets.policy, next_obs, next_pred))
    x = critic_input(next_obs, own, Tensor._wrap(np.asarray(opp_next_action, dtype=np.float64)),
                     batch["next_opp_obs"] if centralised else None)
    q_next = q_value(targets.critic, x).data[:, 0]
    return td_target(batch["reward"].data.reshape(-1), batch["done"].data.reshape(-1), gamma, q_next)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if not max_norm:
        return grads
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def optimise(store: ParamStore, grads: dict[str, np.ndarray], hyper: TrainHyper) -> None:
    adam_step(store, clip_by_global_norm(grads, hyper.grad_clip), hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)


def critic_loss(critic: ParamStore, x: Tensor, y: np.ndarray) -> Tensor:
    q = q_value(critic, x)
    return ad.mean(ad.square(ad.sub(q, Tensor._wrap(y.reshape(-1, 1)))))


def critic_update(critic: ParamStore, x: Tensor, y: np.ndarray, hyper: TrainHyper) -> float:
    """One Adam step on mean((Q - y)^2); returns the pre-step loss."""
    with Tape() as tape:
        loss = critic_loss(critic, x, y)
    optimise(critic, critic.gradients(tape, loss), hyper)
    return float(loss.data)


def policy_loss(policy: ParamStore, critic: ParamStore, obs: Tensor, opp_action: Tensor, noise: np.ndarray,
                temperature: float, opp_obs: Tensor | None = None, pred: Tensor | None = None) -> Tensor:
    """-mean Q(o, [o'], relaxed pi(o, [pred]), opp_action)."""
    logits = policy_logits(policy, policy_input(obs, pred))
    own = gumbel_softmax(logits, noise, temperature)
    q = q_value(critic, critic_input(obs, own, opp_action, opp_obs))
    return ad.neg(ad.mean(q))


def policy_update(policy: ParamStore, critic: ParamStore, obs: Tensor, opp_action: Tensor,
                  hyper: TrainHyper, rng: np.random.Generator, opp_obs: Tensor | None = None,
                  pred: Tensor | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Descend the policy loss w.r.t. policy parameters only."""
    noise = gumbel_noise(rng, (obs.shape[0], N_ACTIONS))
    with Tape() as tape:
        loss = policy_loss(policy, critic, obs, opp_action, noise, hyper.temperature, opp_obs, pred)
    grads = policy.gradients(tape, loss)
    optimise(policy, grads, hyper)
    return float(loss.data), grads


def sync_targets(main: TargetPair, targets: TargetPair, tau: float) -> None:
    polyak_update(targets.policy, main.policy, tau)
    polyak_update(targets.critic, main.critic, tau)


class MaddpgAgent:
    """Policy, critic and their independently initialised targets."""

    def __init__(self, obs_dim: int, hyper: TrainHyper, rng: np.random.Generator,
                 centralised: bool = True, opp_obs_dim: int | None = None,
                 pred_dim: int = 0, n_actions: int = N_ACTIONS):
        self.hyper = hyper
        self.centralised = centralised
        self.obs_dim = obs_dim
        self.pred_dim = pred_dim
        h = hyper.hidden
        pin = obs_dim + pred_dim
        cin = obs_dim + (opp_obs_dim if centralised else 0) + 2 * n_actions
        self.policy = init_mlp(rng, [pin, h, h, n_actions])
        self.critic = init_mlp(rng, [cin, h, h, 1])
        self.targets = TargetPair(init_mlp(rng, [pin, h, h, n_actions]), init_mlp(rng, [cin, h, h, 1]))

    @property
    def main(self) -> TargetPair:
        return TargetPair(self.policy, self.critic)

    def act(self, obs, mode: str, rng: np.random.Generator, pred=None) -> np.ndarray:
        if (pred is not None) != (self.pred_dim > 0):
            raise ValueError("prediction input does not match the policy's configuration")
        return act(self.policy, obs, mode, rng, self.hyper.temperature, pred)

    def target_action(self, next_obs, next_pred=None) -> np.ndarray:
        return target_action(self.targets.policy, next_obs, next_pred if self.pred_dim else None)

    def sync_targets(self) -> None:
        sync_targets(self.main, self.targets, self.hyper.tau)

    def update(self, batch: Mapping[str, Tensor], opp_next_action: np.ndarray, rng: np.random.Generator,
               pred_key: str | None = None) -> tuple[float, float]:
        """Critic step, policy step, target sync (centralised MADDPG)."""
        hp = self.hyper
        next_pred = batch[f"next_{pred_key}"].data if pred_key else None
        pred = batch[pred_key] if pred_key else None
        y = q_target(batch, self.targets, hp.gamma, opp_next_action, self.centralised, next_pred)
        opp_obs = batch["opp_obs"] if self.centralised else None
        x = critic_input(batch["obs"], batch["action"], batch["opp_action"], opp_obs)
        c_loss = critic_update(self.critic, x, y, hp)
        p_loss, _ = policy_update(self.policy, self.critic, batch["obs"], batch["opp_action"], hp, rng,
                                  opp_obs, pred)
        self.sync_targets()
        return c_loss, p_loss

    def stores(self) -> dict[str, ParamStore]:
        return {"policy": self.policy, "critic": self.critic,
                "target_policy": self.targets.policy, "target_critic": self.targets.critic}
