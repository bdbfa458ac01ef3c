import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lemol.experience import EpisodeStructureError, Event, TrajectoryMeta, TrajectoryRecord
from lemol.opponent_model import (
    OmHyper,
    OmPlayState,
    OmVariant,
    cat_loss,
    chunk_forward,
    evaluate_om,
    holdout_split,
    in_episode_step,
    init_om_params,
    point_prediction,
    predict,
    replay_trace,
    summarise_episode,
    train_om,
    update_representation,
    write_trace_csv,
)
from lemol.scripted import ScriptedOpponent, scripted_trajectory
from lemol.tensor import LstmState, ParamStore, Tensor, grad_check, one_hot
from lemol.tensor import autodiff as ad

SMALL = OmHyper(core_hidden=6, embed_dim=5, inep_hidden=4, summary_hidden=3, head_hidden=7)


def _params(hyper=SMALL, seed=0, live_head=True):
    p = init_om_params(np.random.default_rng(seed), hyper)
    if live_head:
        p["head.out.W"].data[...] = np.random.default_rng(seed + 100).normal(size=p["head.out.W"].shape)
    return p


def _events(rng, T=25):
    return [Event(rng.normal(size=8), one_hot([rng.integers(5)], 5)[0], float(rng.normal()),
                  one_hot([rng.integers(5)], 5)[0], t == T - 1) for t in range(T)]


def _record(n_episodes, seed=0, T=25):
    rng = np.random.default_rng(seed)
    rec = TrajectoryRecord(TrajectoryMeta(episode_length=T))
    for _ in range(n_episodes):
        for ev in _events(rng, T):
            rec.record_event(ev)
        rec.close_episode()
    return rec


class TestSummarise:
    def test_identical_episodes_identical_summaries(self):
        p = _params()
        evs = _events(np.random.default_rng(0))
        np.testing.assert_array_equal(summarise_episode(evs, p).data, summarise_episode(list(evs), p).data)

    def test_default_dimension(self):
        p = init_om_params(np.random.default_rng(0))
        assert summarise_episode(_events(np.random.default_rng(1)), p).shape == (1, 128)

    def test_sensitive_to_one_opponent_action(self):
        p = _params()
        evs = _events(np.random.default_rng(0))
        changed = list(evs)
        e = evs[10]
        changed[10] = Event(e.obs, e.action, e.reward, np.roll(e.opp_action, 1), e.done)
        assert not np.allclose(summarise_episode(evs, p).data, summarise_episode(changed, p).data)

    def test_wrong_length(self):
        with pytest.raises(EpisodeStructureError):
            summarise_episode(_events(np.random.default_rng(0), T=24), _params(), episode_length=25)

    def test_norm_gradient(self):
        evs = _events(np.random.default_rng(2), T=5)
        p = _params()
        # sub() shares tensors, so perturbing the view perturbs the full store
        assert grad_check(lambda _: ad.sum(ad.square(summarise_episode(evs, p))), p.sub("sum")) <= 1e-4


class TestRepresentation:
    def test_zero_params_zero_state(self):
        s = ParamStore()
        s.add("core.Wx", np.zeros((3, 8)))
        s.add("core.Wh", np.zeros((2, 8)))
        s.add("core.b", np.zeros(8))
        h = update_representation(LstmState.zeros(1, 2), Tensor([[1.0, -2.0, 3.0]]), s)
        np.testing.assert_array_equal(h.h.data, 0.0)

    def test_fold_left(self):
        p = _params()
        rng = np.random.default_rng(3)
        es = [Tensor(rng.normal(size=(1, SMALL.embed_dim))) for _ in range(4)]
        h0 = LstmState.zeros(1, SMALL.core_hidden)
        manual = update_representation(update_representation(h0, es[0], p), es[1], p)
        h = h0
        for e in es[:2]:
            h = update_representation(h, e, p)
        np.testing.assert_array_equal(manual.h.data, h.h.data)
        assert not h0.h.data.any()

    def test_five_episode_chain_gradient(self):
        p = _params()
        rng = np.random.default_rng(4)
        es = [Tensor(rng.normal(size=(1, SMALL.embed_dim))) for _ in range(5)]
        w = Tensor(rng.normal(size=(1, SMALL.core_hidden)))

        def f(_):
            h = LstmState.zeros(1, SMALL.core_hidden)
            for e in es:
                h = update_representation(h, e, p)
            return ad.sum(ad.mul(h.h, w))

        assert grad_check(f, p.sub("core")) <= 1e-4


class TestInEpisode:
    def test_fresh_state_is_zero(self):
        play = OmPlayState(_params(), hyper=SMALL)
        assert not play.u.h.data.any() and not play.u.c.data.any()

    def test_same_inputs_same_trace(self):
        p = _params()
        obs = np.random.default_rng(5).normal(size=(25, 8))

        def trace():
            u = LstmState.zeros(1, SMALL.inep_hidden)
            out = []
            for o in obs:
                u = in_episode_step(u, o, p)
                out.append(u.h.data.copy())
            return np.concatenate(out)

        np.testing.assert_array_equal(trace(), trace())

    def test_25_step_gradient(self):
        p = _params()
        obs = np.random.default_rng(6).normal(size=(25, 8))

        def f(_):
            u = LstmState.zeros(1, SMALL.inep_hidden)
            for o in obs:
                u = in_episode_step(u, o, p)
            return ad.sum(ad.square(u.h))

        assert grad_check(f, p.sub("inep")) <= 1e-4


class TestPredict:
    def test_oracle_one_hot(self):
        out = predict(None, None, _params(), "oracle", oracle_action=[0, 0, 0, 1, 0])
        np.testing.assert_array_equal(out.data, [[0, 0, 0, 1, 0]])

    def test_oracle_needs_action(self):
        with pytest.raises(ValueError):
            predict(None, None, _params(), OmVariant.ORACLE)

    def test_zero_head_uniform(self):
        p = init_om_params(np.random.default_rng(0), SMALL)
        rng = np.random.default_rng(1)
        out = predict(rng.normal(size=(3, 4)), rng.normal(size=(3, 6)), p, "full")
        np.testing.assert_allclose(out.data, 0.2, atol=1e-15)

    def test_full_and_ablated_differ(self):
        p = _params()
        rng = np.random.default_rng(2)
        u, h = rng.normal(size=(4, 4)), rng.normal(size=(4, 6))
        assert not np.allclose(predict(u, h, p, "full").data, predict(u, h, p, "ablated").data)
        np.testing.assert_array_equal(predict(u, h, p, "ablated").data, predict(u, 0 * h, p, "full").data)

    def test_point_prediction_is_argmax(self):
        np.testing.assert_array_equal(point_prediction(np.array([[0.1, 0.5, 0.4, 0, 0]])), [[0, 1, 0, 0, 0]])

    def test_naive_equals_full_for_same_params(self):
        p = _params()
        rng = np.random.default_rng(3)
        u, h = rng.normal(size=(2, 4)), rng.normal(size=(2, 6))
        np.testing.assert_array_equal(predict(u, h, p, "naive").data, predict(u, h, p, "full").data)


class TestCatLoss:
    def test_uniform_is_ln5(self):
        y = one_hot([0, 3, 4], 5)
        assert cat_loss(Tensor(np.full((3, 5), 0.2)), y).item() == pytest.approx(math.log(5), abs=1e-12)

    def test_perfect_prediction(self):
        y = one_hot([1, 2], 5)
        p = 0.99999999 * y + 0.00000001 / 4 * (1 - y)
        assert cat_loss(Tensor(p), y).item() == pytest.approx(0.0, abs=1e-7)

    def test_manual_three_rows(self):
        p = np.array([[0.1, 0.2, 0.3, 0.4, 0.0], [0.5, 0.125, 0.125, 0.125, 0.125], [0.2] * 5])
        y = one_hot([3, 0, 2], 5)
        expected = -(math.log(0.4) + math.log(0.5) + math.log(0.2)) / 3
        assert abs(cat_loss(Tensor(p), y).item() - expected) <= 1e-12

    def test_clamp(self):
        p = np.array([[1.0, 0, 0, 0, 0]])
        assert cat_loss(Tensor(p), one_hot([2], 5)).item() == pytest.approx(-math.log(1e-12))

    def test_weights_ignore_masked_rows(self):
        p = np.array([[0.5, 0.5, 0, 0, 0], [0.2] * 5])
        y = one_hot([0, 1], 5)
        assert cat_loss(Tensor(p), y, np.array([1.0, 0.0])).item() == pytest.approx(math.log(2))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 10_000))
    def test_nonnegative_and_matches_bruteforce(self, n, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(5), size=n)
        idx = rng.integers(5, size=n)
        loss = cat_loss(Tensor(p), one_hot(idx, 5)).item()
        brute = -sum(math.log(max(p[i, idx[i]], 1e-12)) for i in range(n)) / n
        assert loss >= 0.0
        assert abs(loss - brute) <= 1e-12


class TestChunking:
    def test_chunks_with_carried_state_match_one_pass(self):
        p = _params()
        rec = _record(6, seed=1, T=4)
        x = rec.arrays()
        ev, ob = x["events"][None], x["obs"][None]
        whole, _ = chunk_forward(p, ev, ob, LstmState.zeros(1, SMALL.core_hidden), OmVariant.FULL)
        parts, state = [], LstmState.zeros(1, SMALL.core_hidden)
        for k0 in (0, 2, 4):
            out, state = chunk_forward(p, ev[:, k0:k0 + 2], ob[:, k0:k0 + 2], state.detach(), OmVariant.FULL)
            parts.append(out.data.reshape(4, 2, 5))
        np.testing.assert_allclose(np.concatenate(parts, axis=1), whole.data.reshape(4, 6, 5), atol=1e-14)

    def test_batched_training_forward_matches_play(self):
        p = _params()
        rec = _record(3, seed=2, T=5)
        x = rec.arrays()
        out, _ = chunk_forward(p, x["events"][None], x["obs"][None], LstmState.zeros(1, SMALL.core_hidden),
                               OmVariant.FULL)
        batched = out.data.reshape(5, 3, 5).transpose(1, 0, 2)
        play = OmPlayState(p, "full", 5, SMALL)
        online = []
        for episode in rec.episodes():
            for ev in episode:
                online.append(play.observe(ev.obs))
                play.record(ev)
        np.testing.assert_allclose(np.array(online).reshape(3, 5, 5), batched, atol=1e-13)

    def test_first_episode_sees_zero_h(self):
        p = _params()
        x = _record(2, seed=3, T=3).arrays()
        h0 = LstmState.zeros(1, SMALL.core_hidden)
        full, _ = chunk_forward(p, x["events"][None], x["obs"][None], h0, OmVariant.FULL)
        abl, _ = chunk_forward(p, x["events"][None], x["obs"][None], h0, OmVariant.ABLATED)
        f, a = full.data.reshape(3, 2, 5), abl.data.reshape(3, 2, 5)
        np.testing.assert_array_equal(f[:, 0], a[:, 0])
        assert not np.allclose(f[:, 1], a[:, 1])

    def test_end_to_end_gradient_two_episodes(self):
        p = _params()
        x = _record(2, seed=4, T=4).arrays()
        y = one_hot(x["opp_action"].transpose(1, 0, 2).reshape(-1, 5).argmax(axis=1), 5)

        def f(s):
            probs, _ = chunk_forward(s, x["events"][None], x["obs"][None],
                                     LstmState.zeros(1, SMALL.core_hidden), OmVariant.FULL)
            return cat_loss(probs, y)

        assert grad_check(f, p) <= 1e-4


class TestTraining:
    def test_holdout_split(self):
        assert holdout_split(1, 0.2) == ([0], [])
        assert holdout_split(2, 0.2) == ([0], [1])
        assert holdout_split(10, 0.2) == (list(range(8)), [8, 9])

    def test_constant_opponent_learned(self):
        recs = [scripted_trajectory(ScriptedOpponent("constant", action=2, fidelity=1.0), 40, s) for s in range(5)]
        p = init_om_params(np.random.default_rng(0))
        report = train_om(recs, p, OmHyper(epochs=50))
        assert len(report.train_loss) == 50 and report.n_holdout == 1
        assert report.holdout_loss[-1] < 0.05

    def test_naive_frozen(self):
        recs = [scripted_trajectory(ScriptedOpponent("constant", fidelity=1.0), 4, s) for s in range(3)]
        p = init_om_params(np.random.default_rng(0))
        before = p.values()
        report = train_om(recs, p, OmHyper(epochs=3), "naive")
        assert report.holdout_loss == [report.holdout_loss[0]] * 3
        assert report.holdout_loss[0] == pytest.approx(math.log(5))
        assert all(np.array_equal(before[k], v) for k, v in p.values().items())

    def test_drift_full_beats_ablated(self):
        opp = ScriptedOpponent("drift")
        recs = [scripted_trajectory(opp, 40, s) for s in range(5)]
        losses = {}
        for v in ("full", "ablated"):
            p = init_om_params(np.random.default_rng(1))
            losses[v] = train_om(recs, p, OmHyper(epochs=25), v).holdout_loss[-1]
        assert losses["full"] < losses["ablated"] < math.log(5)

    def test_mixed_episode_lengths(self):
        with pytest.raises(EpisodeStructureError):
            train_om([_record(1, T=4), _record(1, T=5)], _params())

    def test_empty_store(self):
        with pytest.raises(ValueError):
            train_om([], _params())

    def test_uneven_trajectory_lengths_masked(self):
        p = _params()
        short, long_ = _record(2, seed=5, T=3), _record(4, seed=6, T=3)
        ce_short, _ = evaluate_om([short], p, SMALL)
        ce_both, per_ep = evaluate_om([short, long_], p, SMALL)
        ce_long, _ = evaluate_om([long_], p, SMALL)
        assert ce_both == pytest.approx((2 * ce_short + 4 * ce_long) / 6, abs=1e-12)
        assert per_ep.shape == (4,)

    def test_report_csv(self, tmp_path):
        recs = [_record(2, seed=s, T=3) for s in range(2)]
        report = train_om(recs, _params(), OmHyper(**{**SMALL.__dict__, "epochs": 2}))
        report.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,holdout_loss" and len(lines) == 3


class TestPlayState:
    def _play(self, rec, p=None, variant="full"):
        play = OmPlayState(p if p is not None else _params(), variant, rec.meta.episode_length, SMALL)
        preds, hs = [], []
        for episode in rec.episodes():
            for ev in episode:
                preds.append(play.observe(ev.obs, oracle_action=ev.opp_action))
                hs.append(play.h.h.data.copy())
                play.record(ev)
        return play, np.array(preds), np.array(hs)

    def test_causality_future_perturbation(self):
        p = _params()
        rec = _record(3, seed=7, T=5)
        _, base, _ = self._play(rec, p)
        rows = np.concatenate([rec.episode_array(k) for k in range(3)])
        cut = 7
        # rows: obs 0:8, action 8:13, reward 13, opp_action 14:19, done 19.
        # Everything from step `cut` on changes except the obs at `cut` itself.
        pert = rows.copy()
        rng = np.random.default_rng(0)
        pert[cut:, 8:14] = rng.normal(size=(len(rows) - cut, 6))
        pert[cut:, 14:19] = one_hot((rows[cut:, 14:19].argmax(axis=1) + 1) % 5, 5)
        pert[cut + 1:, :8] = rng.normal(size=(len(rows) - cut - 1, 8))
        rec2 = TrajectoryRecord(rec.meta)
        for k in range(3):
            rec2.add_episode_array(pert[5 * k:5 * (k + 1)])
        _, other, _ = self._play(rec2, p)
        np.testing.assert_array_equal(base[:cut + 1], other[:cut + 1])
        assert not np.allclose(base[cut + 1:], other[cut + 1:])

    def test_h_changes_once_per_episode(self):
        play, _, hs = self._play(_record(4, seed=8))
        for k in range(4):
            block = hs[25 * k:25 * (k + 1)]
            assert np.all(block == block[0])
        assert play.h_updates == 4
        assert all(not np.array_equal(hs[25 * k], hs[25 * (k + 1)]) for k in range(3))

    def test_replay_reproduces_online_trace(self):
        p = _params()
        rec = _record(3, seed=9)
        play, _, _ = self._play(rec, p)
        assert replay_trace(rec, p, "full", SMALL) == play.trace

    def test_memory_limited_to_h_and_current_episode(self):
        p = _params()
        a, b = OmPlayState(p, "full", 5, SMALL), OmPlayState(p, "full", 5, SMALL)
        for play, seed in ((a, 1), (b, 2)):
            for ev in _events(np.random.default_rng(seed), T=5):
                play.observe(ev.obs)
                play.record(ev)
        b.h = a.h
        obs = np.random.default_rng(3).normal(size=(5, 8))
        for o in obs:
            np.testing.assert_array_equal(a.observe(o), b.observe(o))
            ev = Event(o, np.eye(5)[0], 0.0, np.eye(5)[1], False)
            a.record(ev) if a.step < 4 else None
            b.record(ev) if b.step < 4 else None

    def test_out_of_order(self):
        play = OmPlayState(_params(), hyper=SMALL)
        with pytest.raises(RuntimeError):
            play.record(_events(np.random.default_rng(0))[0])
        play.observe(np.zeros(8))
        with pytest.raises(RuntimeError):
            play.observe(np.zeros(8))

    def test_premature_done_rejected(self):
        play = OmPlayState(_params(), hyper=SMALL)
        play.observe(np.zeros(8))
        with pytest.raises(EpisodeStructureError):
            play.record(Event(np.zeros(8), np.eye(5)[0], 0.0, np.eye(5)[0], True))

    def test_naive_trace_flat_at_ln5(self):
        p = init_om_params(np.random.default_rng(0), SMALL)
        play, _, _ = self._play(_record(2, seed=10), p, "naive")
        np.testing.assert_allclose([r.cross_entropy for r in play.trace], math.log(5), atol=1e-12)

    def test_oracle_trace_zero(self):
        play, preds, _ = self._play(_record(1, seed=11), variant="oracle")
        assert all(r.cross_entropy == 0.0 for r in play.trace)
        assert np.all(preds.max(axis=1) == 1.0)

    def test_trace_csv(self, tmp_path):
        play, _, _ = self._play(_record(1, seed=12, T=3))
        write_trace_csv(tmp_path / "t.csv", play.trace)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "episode,step,predicted_index,actual_index,cross_entropy" and len(lines) == 4


class TestScripted:
    def test_drift_walks_moving_actions(self):
        opp = ScriptedOpponent("drift")
        assert [opp.mode(k) for k in range(6)] == [1, 2, 3, 4, 1, 2]

    def test_constant_and_fidelity(self):
        rec = scripted_trajectory(ScriptedOpponent("constant", action=3, fidelity=1.0), 3, 0)
        assert all(int(np.argmax(ev.opp_action)) == 3 for ep in rec.episodes() for ev in ep)

    def test_drift_follows_mode(self):
        rec = scripted_trajectory(ScriptedOpponent("drift", fidelity=1.0), 5, 1)
        for k, ep in enumerate(rec.episodes()):
            assert {int(np.argmax(ev.opp_action)) for ev in ep} == {1 + k % 4}

    def test_deterministic(self):
        opp = ScriptedOpponent("drift")
        assert scripted_trajectory(opp, 3, 4) == scripted_trajectory(opp, 3, 4)

    def test_unknown_schedule(self):
        with pytest.raises(ValueError):
            ScriptedOpponent("random")
