"""Scripted attackers with known action statistics, for opponent-model checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .experience import Event, TrajectoryMeta, TrajectoryRecord
from .keepaway import N_ACTIONS, EnvConfig, KeepAway


@dataclass(frozen=True)
class ScriptedOpponent:
    """Plays a per-episode mode action with probability ``fidelity`` and a uniform action otherwise.

    ``schedule="constant"`` always uses ``action`` as the mode. ``"drift"``
    walks the mode through the four moving actions, one step per episode, so
    the policy in episode ``k`` is predictable from the one in ``k - 1``.
    """

    schedule: str = "drift"
    action: int = 2
    fidelity: float = 0.8

    def __post_init__(self):
        if self.schedule not in ("constant", "drift"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def mode(self, episode: int) -> int:
        if self.schedule == "constant":
            return self.action
        return 1 + (episode % (N_ACTIONS - 1))

    def act(self, episode: int, rng: np.random.Generator) -> np.ndarray:
        idx = self.mode(episode)
        if rng.uniform() >= self.fidelity:
            idx = int(rng.integers(N_ACTIONS))
        a = np.zeros(N_ACTIONS)
        a[idx] = 1.0
        return a


def scripted_trajectory(opponent: ScriptedOpponent, n_episodes: int, seed: int,
                        env_config: EnvConfig = EnvConfig()) -> TrajectoryRecord:
    """Defender acts uniformly at random; events are recorded from its side."""
    env = KeepAway(env_config)
    env_rng, opp_rng, def_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    rec = TrajectoryRecord(TrajectoryMeta(run_id=f"scripted-{opponent.schedule}-{seed}", variant="scripted",
                                          seed=seed, episode_length=env_config.episode_length))
    for k in range(n_episodes):
        state, obs, _ = env.reset(env_rng)
        done = False
        while not done:
            a_def = np.zeros(N_ACTIONS)
            a_def[def_rng.integers(N_ACTIONS)] = 1.0
            a_att = opponent.act(k, opp_rng)
            res = env.step(state, a_def, a_att)
            rec.record_event(Event(obs, a_def, res.reward_defender, a_att, res.done))
            state, obs, done = res.state, res.obs_defender, res.done
        rec.close_episode()
    return rec
