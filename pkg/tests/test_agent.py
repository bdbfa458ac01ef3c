import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lemol.agent import (
    AgentVariant,
    DecentralisedBatch,
    InformationFirewallError,
    LemolAgent,
    RunConfig,
    act_conditioned,
    centralised_lemol_update,
    decentralised_policy_update,
    decentralised_q_update,
    decentralised_target,
    read_metrics_csv,
    run_trajectory,
    validate_run,
    write_metrics_csv,
)
from lemol.keepaway import EnvConfig
from lemol.maddpg import TrainHyper, policy_loss, q_target
from lemol.opponent_model import OmHyper, OmVariant, init_om_params, predict
from lemol.tensor import Tape, Tensor, grad_check, one_hot
from lemol.tensor import autodiff as ad

TINY = TrainHyper(hidden=4, batch_size=16, explore_episodes=2, buffer_capacity=500, gamma=0.9, update_every=5)
OM_TINY = OmHyper(core_hidden=6, embed_dim=5, inep_hidden=4, summary_hidden=3, head_hidden=7)
SHORT = RunConfig(episodes=5, env=EnvConfig(episode_length=5), hyper=TINY, om=OM_TINY)


def _om(seed=0):
    p = init_om_params(np.random.default_rng(seed), OM_TINY)
    p["head.out.W"].data[...] = np.random.default_rng(seed + 1).normal(size=p["head.out.W"].shape)
    return p


def _agent(variant, seed=0, hyper=TINY):
    om = _om(seed) if variant.has_om else None
    return LemolAgent(variant, hyper, np.random.default_rng(seed), om, OM_TINY)


def _onehots(rng, n):
    return one_hot(rng.integers(5, size=n), 5)


def _dec_batch(rng, n=8, done=None):
    d = {
        "obs": rng.normal(size=(n, 8)), "action": rng.dirichlet(np.ones(5), size=n),
        "opp_action": _onehots(rng, n), "reward": rng.normal(size=(n, 1)),
        "next_obs": rng.normal(size=(n, 8)),
        "done": (rng.uniform(size=(n, 1)) < 0.3).astype(float) if done is None else np.full((n, 1), float(done)),
        "u": rng.normal(size=(n, 4)), "h": rng.normal(size=(n, 6)),
        "next_u": rng.normal(size=(n, 4)), "next_h": rng.normal(size=(n, 6)),
        "next_opp_action": _onehots(rng, n),
    }
    return {k: Tensor(v) for k, v in d.items()}


def _cen_batch(rng, n=8, done=None):
    d = _dec_batch(rng, n, done)
    for k in ("u", "h", "next_u", "next_h", "next_opp_action"):
        del d[k]
    d["opp_obs"] = Tensor(rng.normal(size=(n, 8)))
    d["next_opp_obs"] = Tensor(rng.normal(size=(n, 8)))
    d["pred"] = Tensor(_onehots(rng, n))
    d["next_pred"] = Tensor(_onehots(rng, n))
    return d


class TestVariants:
    @pytest.mark.parametrize("name,flags", [
        ("maddpg", (True, None, False, False, False)),
        ("maddpg-om", (False, OmVariant.ABLATED, False, True, False)),
        ("lemol-ep", (True, OmVariant.FULL, True, True, True)),
        ("ablated", (True, OmVariant.ABLATED, True, True, False)),
        ("oracle", (True, OmVariant.ORACLE, True, False, False)),
        ("lemol-ep-dec", (False, OmVariant.FULL, True, True, True)),
        ("ablated-dec", (False, OmVariant.ABLATED, True, True, False)),
    ])
    def test_table_rows(self, name, flags):
        s = AgentVariant.parse(name).spec
        assert (s.centralised, s.om, s.feed_prediction_to_policy, s.in_episode_lstm,
                s.model_learning_process) == flags

    def test_naive_rows_mirror_full(self):
        for naive, full in ((AgentVariant.NAIVE, AgentVariant.LEMOL_EP),
                            (AgentVariant.NAIVE_DEC, AgentVariant.LEMOL_EP_DEC)):
            assert replace(naive.spec, name="x", om=None) == replace(full.spec, name="x", om=None)
            assert naive.spec.om is OmVariant.NAIVE

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            AgentVariant.parse("lola")

    def test_ablated_variants_zero_h(self):
        for v in AgentVariant:
            if v.spec.om is OmVariant.ABLATED:
                assert not v.spec.om.uses_h


class TestActConditioned:
    def test_prediction_changes_action(self):
        agent = _agent(AgentVariant.LEMOL_EP)
        obs = np.random.default_rng(1).normal(size=8)
        a0 = agent.act(obs, "eval", None, np.eye(5)[0])
        a1 = agent.act(obs, "eval", None, np.eye(5)[1])
        assert not np.allclose(a0, a1)

    def test_eval_deterministic(self):
        agent = _agent(AgentVariant.LEMOL_EP)
        obs = np.random.default_rng(2).normal(size=8)
        np.testing.assert_array_equal(agent.act(obs, "eval", None, np.eye(5)[2]),
                                      agent.act(obs, "eval", None, np.eye(5)[2]))

    def test_off_simplex_prediction(self):
        agent = _agent(AgentVariant.LEMOL_EP)
        with pytest.raises(ValueError):
            act_conditioned(agent.maddpg, np.zeros(8), [0.5, 0.6, 0, 0, 0], "eval", None)

    def test_maddpg_om_policy_excludes_prediction(self):
        agent = _agent(AgentVariant.MADDPG_OM)
        assert agent.maddpg.policy["l0.W"].shape[0] == 8
        with pytest.raises(ValueError):
            act_conditioned(agent.maddpg, np.zeros(8), np.eye(5)[0], "eval", None)


class TestCentralisedUpdate:
    def test_oracle_prediction_is_true_action(self):
        res = run_trajectory(AgentVariant.ORACLE, SHORT, 0)
        batch = res.defender_buffer.sample(16, np.random.default_rng(0))
        np.testing.assert_array_equal(batch["pred"].data, one_hot(batch["opp_action"].data.argmax(axis=1), 5))
        assert all(r.cross_entropy == 0.0 for r in res.om_trace)

    def test_gamma_zero_is_reward_regression(self):
        rng = np.random.default_rng(3)
        batch = _cen_batch(rng)
        agent = _agent(AgentVariant.LEMOL_EP, hyper=replace(TINY, gamma=0.0))
        y = q_target(batch, agent.maddpg.targets, 0.0, _onehots(rng, 8), True, batch["next_pred"].data)
        np.testing.assert_array_equal(y, batch["reward"].data[:, 0])

    def test_missing_predictions(self):
        batch = _cen_batch(np.random.default_rng(4))
        del batch["next_pred"]
        with pytest.raises(KeyError):
            centralised_lemol_update(_agent(AgentVariant.LEMOL_EP), batch, np.eye(5)[[0] * 8],
                                     np.random.default_rng(0))

    def test_rl_update_leaves_om_untouched(self):
        agent = _agent(AgentVariant.LEMOL_EP)
        before = agent.om_params.values()
        policy_before = agent.maddpg.policy.values()
        rng = np.random.default_rng(5)
        centralised_lemol_update(agent, _cen_batch(rng), _onehots(rng, 8), rng)
        assert all(np.array_equal(before[k], v) for k, v in agent.om_params.values().items())
        assert any(not np.array_equal(policy_before[k], v) for k, v in agent.maddpg.policy.values().items())


class TestDecentralised:
    def test_firewall(self):
        batch = _dec_batch(np.random.default_rng(0))
        batch["opp_obs"] = Tensor(np.zeros((8, 8)))
        with pytest.raises(InformationFirewallError):
            decentralised_q_update(_agent(AgentVariant.LEMOL_EP_DEC), batch)

    def test_batch_type_has_no_opponent_observation(self):
        names = set(DecentralisedBatch.__dataclass_fields__)
        assert not any("opp_obs" in n for n in names)

    def test_decentralised_buffer_rejected_with_opp_obs(self):
        with pytest.raises(InformationFirewallError):
            validate_run(AgentVariant.LEMOL_EP_DEC, _om(), {"obs": 8, "opp_obs": 8})

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_oracle_reduction_exact(self, seed):
        rng = np.random.default_rng(seed)
        agent = _agent(AgentVariant.ORACLE_DEC, seed=seed % 7)
        batch = DecentralisedBatch.from_mapping(_dec_batch(rng))
        true_next = batch.next_opp_action.data
        ref = q_target(batch.as_mapping(), agent.maddpg.targets, agent.hyper.gamma, true_next,
                       centralised=False, next_pred=true_next)
        assert np.array_equal(decentralised_target(agent, batch), ref)

    def test_done_gives_reward(self):
        agent = _agent(AgentVariant.LEMOL_EP_DEC)
        batch = DecentralisedBatch.from_mapping(_dec_batch(np.random.default_rng(1), done=True))
        np.testing.assert_array_equal(decentralised_target(agent, batch), batch.reward.data[:, 0])

    def test_gamma_zero_matches_centralised(self):
        hp = replace(TINY, gamma=0.0)
        rng = np.random.default_rng(2)
        dec = decentralised_target(_agent(AgentVariant.LEMOL_EP_DEC, hyper=hp),
                                   DecentralisedBatch.from_mapping(_dec_batch(rng)))
        rng = np.random.default_rng(2)
        cb = _dec_batch(rng)
        cen_agent = _agent(AgentVariant.LEMOL_EP, hyper=hp)
        cb["next_opp_obs"] = Tensor(np.zeros((8, 8)))
        cen = q_target(cb, cen_agent.maddpg.targets, 0.0, cb["next_opp_action"].data, True,
                       cb["next_opp_action"].data)
        np.testing.assert_array_equal(dec, cen)

    def test_target_uses_predicted_next_action(self):
        agent = _agent(AgentVariant.LEMOL_EP_DEC)
        batch = DecentralisedBatch.from_mapping(_dec_batch(np.random.default_rng(3)))
        a_hat = one_hot(predict(batch.next_u, batch.next_h, agent.om_params, "full").data.argmax(axis=1), 5)
        ref = q_target(batch.as_mapping(), agent.maddpg.targets, agent.hyper.gamma, a_hat, False, a_hat)
        np.testing.assert_array_equal(decentralised_target(agent, batch), ref)

    def test_constant_critic_zero_policy_gradient(self):
        agent = _agent(AgentVariant.LEMOL_EP_DEC)
        agent.maddpg.critic["out.W"].data[...] = 0.0
        agent.maddpg.critic["out.b"].data[...] = 3.0
        before = agent.maddpg.policy.values()
        _, grads = decentralised_policy_update(agent, _dec_batch(np.random.default_rng(4)), np.random.default_rng(0))
        assert all(not g.any() for g in grads.values())
        assert all(np.array_equal(before[k], v) for k, v in agent.maddpg.policy.values().items())

    def test_policy_loss_deterministic_for_same_batch(self):
        batch = _dec_batch(np.random.default_rng(5))
        losses = [decentralised_policy_update(_agent(AgentVariant.LEMOL_EP_DEC), batch,
                                              np.random.default_rng(9))[0] for _ in range(2)]
        assert losses[0] == losses[1]

    def test_policy_gradient_finite_differences(self):
        agent = _agent(AgentVariant.LEMOL_EP_DEC)
        batch = DecentralisedBatch.from_mapping(_dec_batch(np.random.default_rng(6), n=4))
        a_hat = Tensor(agent.predict_batch(batch.u, batch.h))
        noise = np.random.default_rng(7).gumbel(size=(4, 5))
        m = agent.maddpg
        f = lambda _: policy_loss(m.policy, m.critic, batch.obs, a_hat, noise, 1.0, pred=a_hat)  # noqa: E731
        assert grad_check(f, m.policy) <= 1e-4

    def test_om_receives_no_rl_gradient(self):
        agent = _agent(AgentVariant.LEMOL_EP_DEC)
        batch = DecentralisedBatch.from_mapping(_dec_batch(np.random.default_rng(8)))
        m = agent.maddpg
        with Tape() as tape:
            dist = predict(batch.u, batch.h, agent.om_params, "full")
            a_hat = Tensor._wrap(one_hot(dist.data.argmax(axis=1), 5))
            loss = policy_loss(m.policy, m.critic, batch.obs, a_hat, np.zeros((8, 5)), 1.0, pred=a_hat)
            loss = ad.add(loss, ad.mul(ad.sum(dist), 0.0))
        grads = agent.om_params.gradients(tape, loss)
        assert all(not g.any() for g in grads.values())

    def test_updates_only_touch_policy_and_critic(self):
        agent = _agent(AgentVariant.LEMOL_EP_DEC)
        om_before = agent.om_params.values()
        batch = _dec_batch(np.random.default_rng(9))
        decentralised_q_update(agent, batch)
        _, grads = decentralised_policy_update(agent, batch, np.random.default_rng(0))
        assert set(grads) == set(agent.maddpg.policy.names())
        assert all(np.array_equal(om_before[k], v) for k, v in agent.om_params.values().items())


class TestRunTrajectory:
    def test_event_count(self):
        res = run_trajectory(AgentVariant.LEMOL_EP, SHORT, 0, om_params=_om())
        assert res.record.num_episodes == 5 and res.record.arrays()["obs"].shape[:2] == (5, 5)
        assert len(res.metrics) == 5 and res.metrics[-1].total_steps == 25

    def test_bit_reproducible(self, tmp_path):
        a = run_trajectory(AgentVariant.MADDPG, SHORT, 3)
        b = run_trajectory(AgentVariant.MADDPG, SHORT, 3)
        assert a.record == b.record
        write_metrics_csv(tmp_path / "a.csv", a.metrics)
        write_metrics_csv(tmp_path / "b.csv", b.metrics)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_updates_happen_after_exploration(self):
        res = run_trajectory(AgentVariant.LEMOL_EP_DEC, SHORT, 1, om_params=_om())
        losses = [m.critic_loss for m in res.metrics]
        assert all(math.isnan(x) for x in losses[:2])
        assert all(np.isfinite(losses[3:]))

    def test_naive_trace_flat(self):
        res = run_trajectory(AgentVariant.NAIVE, SHORT, 2)
        np.testing.assert_allclose([m.mean_om_cross_entropy for m in res.metrics], math.log(5), atol=1e-12)

    def test_needs_trained_om(self):
        with pytest.raises(ValueError):
            run_trajectory(AgentVariant.LEMOL_EP, SHORT, 0)

    def test_all_variants_run(self):
        for v in AgentVariant:
            res = run_trajectory(v, replace(SHORT, episodes=4), 0, om_params=_om() if v.needs_trained_om else None)
            assert np.isfinite(res.metrics[-1].mean_reward_defender)

    def test_metrics_csv_roundtrip(self, tmp_path):
        res = run_trajectory(AgentVariant.ABLATED, SHORT, 4, om_params=_om())
        write_metrics_csv(tmp_path / "m.csv", res.metrics, comment="seed=4")
        back = read_metrics_csv(tmp_path / "m.csv")
        np.testing.assert_array_equal(back["mean_reward_defender"], [m.mean_reward_defender for m in res.metrics])
        assert (tmp_path / "m.csv").read_text().startswith("# seed=4\nepisode,")
