"""LeMOL-EP defenders: MADDPG conditioned on opponent-model predictions.

A defender owns a MADDPG policy/critic pair plus (optionally) an opponent
model. Centralised variants train with the attacker's observation in the
critic and use the prediction stored at experience time. Decentralised
variants only ever see the attacker's executed actions; their targets and
policy losses use predictions recomputed from the stored ``(u, h)`` states.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .experience import Event, ReplayBuffer, TrajectoryMeta, TrajectoryRecord
from .keepaway import N_ACTIONS, OBS_DIM, EnvConfig, KeepAway
from .maddpg import (
    MaddpgAgent,
    TrainHyper,
    critic_input,
    critic_update,
    policy_update,
    q_target,
)
from .opponent_model import OmHyper, OmPlayState, OmVariant, init_om_params, point_prediction, predict
from .tensor import ParamStore, Tensor


@dataclass(frozen=True)
class VariantSpec:
    name: str
    centralised: bool
    om: OmVariant | None
    feed_prediction_to_policy: bool
    in_episode_lstm: bool
    model_learning_process: bool


class AgentVariant(enum.Enum):
    MADDPG = VariantSpec("maddpg", True, None, False, False, False)
    MADDPG_OM = VariantSpec("maddpg-om", False, OmVariant.ABLATED, False, True, False)
    LEMOL_EP = VariantSpec("lemol-ep", True, OmVariant.FULL, True, True, True)
    ABLATED = VariantSpec("ablated", True, OmVariant.ABLATED, True, True, False)
    ORACLE = VariantSpec("oracle", True, OmVariant.ORACLE, True, False, False)
    NAIVE = VariantSpec("naive", True, OmVariant.NAIVE, True, True, True)
    LEMOL_EP_DEC = VariantSpec("lemol-ep-dec", False, OmVariant.FULL, True, True, True)
    ABLATED_DEC = VariantSpec("ablated-dec", False, OmVariant.ABLATED, True, True, False)
    NAIVE_DEC = VariantSpec("naive-dec", False, OmVariant.NAIVE, True, True, True)
    ORACLE_DEC = VariantSpec("oracle-dec", False, OmVariant.ORACLE, True, False, False)

    @property
    def spec(self) -> VariantSpec:
        return self.value

    @property
    def label(self) -> str:
        return self.value.name

    @property
    def has_om(self) -> bool:
        return self.value.om is not None

    @property
    def needs_trained_om(self) -> bool:
        return self.value.om in (OmVariant.FULL, OmVariant.ABLATED)

    @classmethod
    def parse(cls, name: str) -> "AgentVariant":
        for v in cls:
            if v.label == name:
                return v
        raise ValueError(f"unknown variant {name!r}; choose from {[v.label for v in cls]}")


class InformationFirewallError(ValueError):
    """A decentralised code path was handed opponent observations."""


@dataclass(frozen=True)
class DecentralisedBatch:
    """Transitions as seen by a decentralised defender: no opponent observations."""

    obs: Tensor
    action: Tensor
    opp_action: Tensor
    reward: Tensor
    next_obs: Tensor
    done: Tensor
    u: Tensor
    h: Tensor
    next_u: Tensor
    next_h: Tensor
    next_opp_action: Tensor

    @classmethod
    def from_mapping(cls, batch: Mapping[str, Tensor]) -> "DecentralisedBatch":
        leaked = [k for k in batch if "opp_obs" in k]
        if leaked:
            raise InformationFirewallError(f"decentralised batch carries opponent observations: {leaked}")
        return cls(**{f.name: batch[f.name] for f in fields(cls)})

    def as_mapping(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def check_simplex(a, tol: float = 1e-9) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != N_ACTIONS or np.any(a < -tol) or np.any(np.abs(a.sum(axis=-1) - 1.0) > tol):
        raise ValueError(f"prediction is not on the {N_ACTIONS}-simplex: {a}")
    return a


class LemolAgent:
    """Defender for any AgentVariant."""

    def __init__(self, variant: AgentVariant, hyper: TrainHyper, rng: np.random.Generator,
                 om_params: ParamStore | None = None, om_hyper: OmHyper = OmHyper(),
                 obs_dim: int = OBS_DIM, opp_obs_dim: int = OBS_DIM):
        spec = variant.spec
        self.variant = variant
        self.hyper = hyper
        self.om_hyper = om_hyper
        self.feed = spec.feed_prediction_to_policy
        self.maddpg = MaddpgAgent(obs_dim, hyper, rng, centralised=spec.centralised, opp_obs_dim=opp_obs_dim,
                                  pred_dim=N_ACTIONS if self.feed else 0)
        self.om_params = om_params

    @property
    def om_variant(self) -> OmVariant | None:
        return self.variant.spec.om

    @property
    def centralised(self) -> bool:
        return self.variant.spec.centralised

    def new_play_state(self, episode_length: int) -> OmPlayState | None:
        if self.om_variant is None:
            return None
        return OmPlayState(self.om_params, self.om_variant, episode_length, self.om_hyper)

    def act(self, obs, mode: str, rng: np.random.Generator, pred=None) -> np.ndarray:
        if self.feed:
            return act_conditioned(self.maddpg, obs, pred, mode, rng)
        return self.maddpg.act(obs, mode, rng)

    def predict_batch(self, u: Tensor, h: Tensor, oracle_action: Tensor | None = None) -> np.ndarray:
        """Argmax one-hot predictions from the current OM parameters."""
        if self.om_variant is OmVariant.ORACLE:
            return point_prediction(oracle_action.data)
        return point_prediction(predict(u, h, self.om_params, self.om_variant))

    def stores(self) -> dict[str, ParamStore]:
        out = dict(self.maddpg.stores())
        if self.om_params is not None:
            out["om"] = self.om_params
        return out


def act_conditioned(agent: MaddpgAgent, obs, pred, mode: str, rng: np.random.Generator) -> np.ndarray:
    if agent.pred_dim != N_ACTIONS:
        raise ValueError("policy does not take an opponent-action input")
    return agent.act(obs, mode, rng, pred=check_simplex(pred))


def centralised_lemol_update(agent: LemolAgent, batch: Mapping[str, Tensor], opp_next_action: np.ndarray,
                             rng: np.random.Generator) -> tuple[float, float]:
    """MADDPG step whose policy and target policy consume the stored predictions."""
    if not agent.centralised:
        raise ValueError(f"{agent.variant.label} is decentralised")
    if agent.feed and ("pred" not in batch or "next_pred" not in batch):
        raise KeyError("centralised LeMOL update needs stored pred and next_pred")
    return agent.maddpg.update(batch, opp_next_action, rng, pred_key="pred" if agent.feed else None)


def decentralised_next_opp_action(agent: LemolAgent, batch: DecentralisedBatch) -> np.ndarray:
    return agent.predict_batch(batch.next_u, batch.next_h, batch.next_opp_action)


def decentralised_target(agent: LemolAgent, batch: DecentralisedBatch) -> np.ndarray:
    """y = r + (1 - done) gamma Qbar(o+, pibar(o+, a_hat+), a_hat+)."""
    a_next = decentralised_next_opp_action(agent, batch)
    m = agent.maddpg
    return q_target(batch.as_mapping(), m.targets, agent.hyper.gamma, a_next, centralised=False,
                    next_pred=a_next if agent.feed else None)


def decentralised_q_update(agent: LemolAgent, batch: DecentralisedBatch | Mapping[str, Tensor]) -> float:
    if agent.om_variant is None:
        raise ValueError("decentralised updates need an opponent model")
    if not isinstance(batch, DecentralisedBatch):
        batch = DecentralisedBatch.from_mapping(batch)
    y = decentralised_target(agent, batch)
    x = critic_input(batch.obs, batch.action, batch.opp_action)
    return critic_update(agent.maddpg.critic, x, y, agent.hyper)


def decentralised_policy_update(agent: LemolAgent, batch: DecentralisedBatch | Mapping[str, Tensor],
                                rng: np.random.Generator) -> tuple[float, dict[str, np.ndarray]]:
    """Policy step against predictions recomputed with the current OM."""
    if not isinstance(batch, DecentralisedBatch):
        batch = DecentralisedBatch.from_mapping(batch)
    a_hat = Tensor._wrap(agent.predict_batch(batch.u, batch.h, batch.opp_action))
    return policy_update(agent.maddpg.policy, agent.maddpg.critic, batch.obs, a_hat, agent.hyper, rng,
                         pred=a_hat if agent.feed else None)


# -- trajectories -----------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    episodes: int = 61024
    env: EnvConfig = EnvConfig()
    hyper: TrainHyper = TrainHyper()
    om: OmHyper = OmHyper()


@dataclass
class EpisodeMetrics:
    episode: int
    mean_reward_defender: float
    mean_reward_attacker: float
    mean_om_cross_entropy: float
    critic_loss: float
    policy_loss: float
    total_steps: int


METRIC_COLUMNS = [f.name for f in fields(EpisodeMetrics)]


def write_metrics_csv(path, metrics: list[EpisodeMetrics], comment: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow([getattr(m, c) if isinstance(getattr(m, c), int) else repr(float(getattr(m, c)))
                        for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    return {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}


@dataclass
class RunResult:
    record: TrajectoryRecord
    metrics: list[EpisodeMetrics]
    defender: LemolAgent
    attacker: MaddpgAgent
    om_trace: list = field(default_factory=list)
    defender_buffer: ReplayBuffer | None = None
    attacker_buffer: ReplayBuffer | None = None


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent streams so variants sharing a seed also share env resets and attacker init."""
    names = ["env", "attacker_init", "defender_init", "attacker", "defender", "om_init"]
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def _defender_fields(variant: AgentVariant, om: OmHyper) -> dict[str, int]:
    f = {"obs": OBS_DIM, "action": N_ACTIONS, "opp_action": N_ACTIONS, "reward": 1,
         "next_obs": OBS_DIM, "done": 1}
    if variant.spec.centralised:
        f.update(opp_obs=OBS_DIM, next_opp_obs=OBS_DIM)
        if variant.spec.feed_prediction_to_policy:
            f.update(pred=N_ACTIONS, next_pred=N_ACTIONS)
    else:
        f.update(u=om.inep_hidden, h=om.core_hidden, next_u=om.inep_hidden, next_h=om.core_hidden,
                 next_opp_action=N_ACTIONS)
    return f


def _attacker_fields(defender_feeds: bool) -> dict[str, int]:
    f = {"obs": OBS_DIM, "opp_obs": OBS_DIM, "action": N_ACTIONS, "opp_action": N_ACTIONS, "reward": 1,
         "next_obs": OBS_DIM, "next_opp_obs": OBS_DIM, "done": 1}
    if defender_feeds:
        f["opp_next_pred"] = N_ACTIONS
    return f


def validate_run(variant: AgentVariant, om_params: ParamStore | None, buffer_fields: Mapping[str, int] | None = None):
    if variant.needs_trained_om and om_params is None:
        raise ValueError(f"{variant.label} needs opponent-model parameters")
    if buffer_fields is not None and not variant.spec.centralised and any("opp_obs" in k for k in buffer_fields):
        raise InformationFirewallError(f"{variant.label} is decentralised but its buffer stores opponent observations")


def run_trajectory(variant: AgentVariant, config: RunConfig, seed: int, om_params: ParamStore | None = None,
                   attacker: MaddpgAgent | None = None, run_id: str = "") -> RunResult:
    """One learning trajectory: both agents start from scratch and learn for ``config.episodes`` episodes.

    A naive OM without supplied parameters is initialised from the seed; the
    OM itself is never updated here.
    """
    rngs = seed_streams(seed)
    if variant.has_om and om_params is None and not variant.needs_trained_om:
        om_params = init_om_params(rngs["om_init"], config.om)
    def_fields = _defender_fields(variant, config.om)
    validate_run(variant, om_params, def_fields)

    hp, T = config.hyper, config.env.episode_length
    env = KeepAway(config.env)
    defender = LemolAgent(variant, hp, rngs["defender_init"], om_params, config.om)
    attacker = attacker or MaddpgAgent(OBS_DIM, hp, rngs["attacker_init"], centralised=True, opp_obs_dim=OBS_DIM)
    feed = defender.feed
    def_buf = ReplayBuffer(hp.buffer_capacity, def_fields)
    att_buf = ReplayBuffer(hp.buffer_capacity, _attacker_fields(feed))
    record = TrajectoryRecord(TrajectoryMeta(run_id=run_id, variant=variant.label, seed=seed, episode_length=T))
    play = defender.new_play_state(T)
    r_env, r_att, r_def = rngs["env"], rngs["attacker"], rngs["defender"]
    no_pred = np.zeros(N_ACTIONS)

    metrics: list[EpisodeMetrics] = []
    steps = 0
    for k in range(config.episodes):
        exploring = k < hp.explore_episodes
        mode = "explore" if exploring else ("train_noise" if hp.train_noise else "eval")
        state, o_def, o_att = env.reset(r_env)
        pending = None
        rewards_d, rewards_a, ces = [], [], []
        c_loss = p_loss = math.nan
        done = False
        while not done:
            a_att = attacker.act(o_att, mode, r_att)
            if play is not None:
                dist = play.observe(o_def, oracle_action=a_att)
                pred = point_prediction(dist)[0]
                u, h = play.u.h.data[0].copy(), play.h.h.data[0].copy()
            else:
                pred, u, h = no_pred, None, None
            a_def = defender.act(o_def, mode, r_def, pred if feed else None)
            res = env.step(state, a_def, a_att)
            if play is not None:
                ces.append(play.record(Event(o_def, a_def, res.reward_defender, a_att, res.done)))
            record.record_event(Event(o_def, a_def, res.reward_defender, a_att, res.done))

            now = {"pred": pred, "u": u, "h": h, "opp_action": a_att}
            if pending is not None:
                _commit(pending, now, def_buf, att_buf, variant, feed)
            pending = {"o_def": o_def, "o_att": o_att, "a_def": a_def, "a_att": a_att,
                       "r_def": res.reward_defender, "r_att": res.reward_attacker,
                       "n_def": res.obs_defender, "n_att": res.obs_attacker, "done": res.done,
                       "pred": pred, "u": u, "h": h}
            if res.done:
                _commit(pending, now, def_buf, att_buf, variant, feed)
                pending = None
            rewards_d.append(res.reward_defender)
            rewards_a.append(res.reward_attacker)
            state, o_def, o_att, done = res.state, res.obs_defender, res.obs_attacker, res.done
            steps += 1
            if not exploring and steps % hp.update_every == 0 and len(def_buf) >= hp.batch_size \
                    and len(att_buf) >= hp.batch_size:
                c_loss, p_loss = _update_pair(defender, attacker, def_buf, att_buf, r_def, r_att)
        record.close_episode()
        metrics.append(EpisodeMetrics(k, float(np.mean(rewards_d)), float(np.mean(rewards_a)),
                                      float(np.mean(ces)) if ces else math.nan, c_loss, p_loss, steps))
    return RunResult(record, metrics, defender, attacker, play.trace if play is not None else [], def_buf, att_buf)


def _commit(p: dict, now: dict, def_buf: ReplayBuffer, att_buf: ReplayBuffer, variant: AgentVariant,
            feed: bool) -> None:
    """Store the transition ``p`` once the next step's prediction and opponent action are known."""
    d = {"obs": p["o_def"], "action": p["a_def"], "opp_action": p["a_att"], "reward": p["r_def"],
         "next_obs": p["n_def"], "done": float(p["done"])}
    if variant.spec.centralised:
        d.update(opp_obs=p["o_att"], next_opp_obs=p["n_att"])
        if feed:
            d.update(pred=p["pred"], next_pred=now["pred"])
    else:
        d.update(u=p["u"], h=p["h"], next_u=now["u"], next_h=now["h"], next_opp_action=now["opp_action"])
    def_buf.add(d)
    a = {"obs": p["o_att"], "opp_obs": p["o_def"], "action": p["a_att"], "opp_action": p["a_def"],
         "reward": p["r_att"], "next_obs": p["n_att"], "next_opp_obs": p["n_def"], "done": float(p["done"])}
    if feed:
        a["opp_next_pred"] = now["pred"]
    att_buf.add(a)


def _update_pair(defender: LemolAgent, attacker: MaddpgAgent, def_buf: ReplayBuffer, att_buf: ReplayBuffer,
                 r_def: np.random.Generator, r_att: np.random.Generator) -> tuple[float, float]:
    hp = defender.hyper
    ab = att_buf.sample(hp.batch_size, r_att)
    def_next = defender.maddpg.target_action(ab["next_opp_obs"], ab["opp_next_pred"].data if defender.feed else None)
    attacker.update(ab, def_next, r_att)

    db = def_buf.sample(hp.batch_size, r_def)
    if defender.centralised:
        att_next = attacker.target_action(db["next_opp_obs"])
        return centralised_lemol_update(defender, db, att_next, r_def)
    batch = DecentralisedBatch.from_mapping(db)
    c_loss = decentralised_q_update(defender, batch)
    p_loss, _ = decentralised_policy_update(defender, batch, r_def)
    defender.maddpg.sync_targets()
    return c_loss, p_loss
