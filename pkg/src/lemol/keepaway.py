"""Two-player Keep-Away particle game.

The attacker tries to reach one of two landmarks (its goal); the defender
sees both landmarks but not which one is the goal. States are immutable
values and every transition is a pure function of (state, actions).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

N_ACTIONS = 5
OBS_DIM = 8
BOUND = 1.5


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.1
    damping: float = 0.25
    max_speed: float = 1.0
    force_scale: float = 5.0
    episode_length: int = 25
    interception_coef: float = 0.5
    landmark_min_sep: float = 0.5
    landmark_retries: int = 100


@dataclass(frozen=True)
class WorldState:
    defender_pos: np.ndarray
    attacker_pos: np.ndarray
    defender_vel: np.ndarray
    attacker_vel: np.ndarray
    landmark_pos: np.ndarray  # [2, 2]
    goal_index: int
    t: int = 0

    @property
    def goal(self) -> np.ndarray:
        return self.landmark_pos[self.goal_index]

    def with_goal(self, goal_index: int) -> "WorldState":
        return replace(self, goal_index=goal_index)

    def positions_row(self) -> list[float]:
        return [self.t, *self.defender_pos, *self.attacker_pos,
                *self.landmark_pos[0], *self.landmark_pos[1], self.goal_index]


@dataclass(frozen=True)
class StepResult:
    state: WorldState
    obs_defender: np.ndarray
    obs_attacker: np.ndarray
    reward_defender: float
    reward_attacker: float
    done: bool


class EpisodeFinished(RuntimeError):
    pass


def check_action(a, name: str = "action") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (N_ACTIONS,) or np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name} must be a {N_ACTIONS}-vector on the probability simplex, got {a}")
    return a


def _dist(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.sum((a - b) ** 2)))


def reward_attacker(state: WorldState) -> float:
    return -_dist(state.attacker_pos, state.goal)


def reward_defender(state: WorldState, interception_coef: float = 0.5) -> float:
    return _dist(state.attacker_pos, state.goal) - interception_coef * _dist(state.defender_pos, state.attacker_pos)


def observe_defender(state: WorldState) -> np.ndarray:
    p = state.defender_pos
    return np.concatenate([state.defender_vel, state.landmark_pos[0] - p,
                           state.landmark_pos[1] - p, state.attacker_pos - p])


def observe_attacker(state: WorldState) -> np.ndarray:
    p = state.attacker_pos
    other = state.landmark_pos[1 - state.goal_index]
    return np.concatenate([state.attacker_vel, state.goal - p, other - p, state.defender_pos - p])


@dataclass
class KeepAway:
    config: EnvConfig = field(default_factory=EnvConfig)

    def reset(self, rng: np.random.Generator) -> tuple[WorldState, np.ndarray, np.ndarray]:
        cfg = self.config
        defender = rng.uniform(-1.0, 1.0, size=2)
        attacker = rng.uniform(-1.0, 1.0, size=2)
        for _ in range(cfg.landmark_retries):
            landmarks = rng.uniform(-0.9, 0.9, size=(2, 2))
            if _dist(landmarks[0], landmarks[1]) >= cfg.landmark_min_sep:
                break
        goal = int(rng.integers(2))
        state = WorldState(defender, attacker, np.zeros(2), np.zeros(2), landmarks, goal, 0)
        return state, observe_defender(state), observe_attacker(state)

    def _move(self, pos, vel, action):
        cfg = self.config
        force = cfg.force_scale * np.array([action[1] - action[2], action[3] - action[4]])
        vel = (1.0 - cfg.damping) * vel + force * cfg.dt
        speed = np.sqrt(vel @ vel)
        if speed > cfg.max_speed:
            vel = vel * (cfg.max_speed / speed)
        pos = np.clip(pos + vel * cfg.dt, -BOUND, BOUND)
        return pos, vel

    def step(self, state: WorldState, a_def, a_att) -> StepResult:
        cfg = self.config
        if state.t >= cfg.episode_length:
            raise EpisodeFinished(f"episode already finished at t={state.t}")
        a_def = check_action(a_def, "defender action")
        a_att = check_action(a_att, "attacker action")
        dpos, dvel = self._move(state.defender_pos, state.defender_vel, a_def)
        apos, avel = self._move(state.attacker_pos, state.attacker_vel, a_att)
        new = WorldState(dpos, apos, dvel, avel, state.landmark_pos, state.goal_index, state.t + 1)
        return StepResult(
            new, observe_defender(new), observe_attacker(new),
            reward_defender(new, cfg.interception_coef), reward_attacker(new),
            new.t == cfg.episode_length,
        )


RENDER_HEADER = ["t", "def_x", "def_y", "att_x", "att_y", "lm0_x", "lm0_y", "lm1_x", "lm1_y", "goal_index"]


def export_render_csv(path, states: Sequence[WorldState]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RENDER_HEADER)
        for s in states:
            row = s.positions_row()
            w.writerow([int(row[0]), *(repr(float(v)) for v in row[1:-1]), int(row[-1])])
