import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calspec.core import EngineInvariantError, RngStream, softmax_with_temperature
from calspec.models import TableModel
from calspec.sd import (DraftBatch, RoundLog, TargetEval, acceptance_prob, draft_propose,
                        residual_dist, sd_generate, sd_verify_round, target_evaluate,
                        vanilla_generate)

from conftest import ScriptedRng, random_table_pair
from oracles import autoregressive_law, sd_sequence_law


def _dist(draw, v):
    w = draw(st.lists(st.floats(0.0, 1.0), min_size=v, max_size=v))
    w = np.asarray(w) + 1e-3
    return w / w.sum()


@st.composite
def dist_pairs(draw):
    v = draw(st.integers(2, 8))
    return _dist(draw, v), _dist(draw, v)


def induced_law(p, q):
    """One verification step's output law, built from the engine primitives."""
    accept = np.array([q[t] * acceptance_prob(p[t], q[t]) for t in range(len(p))])
    reject_mass = 1.0 - accept.sum()
    if not np.any(p > q):  # p == q: nothing can be rejected, leftover mass is rounding
        return accept
    return accept + reject_mass * residual_dist(p, q)


class TestPrimitives:
    def test_acceptance_prob(self):
        assert acceptance_prob(0.3, 0.6) == 0.5
        assert acceptance_prob(0.4, 0.4) == 1.0
        assert acceptance_prob(0.0, 0.2) == 0.0
        assert acceptance_prob(0.9, 0.1) == 1.0

    def test_acceptance_prob_zero_q_is_engine_bug(self):
        with pytest.raises(EngineInvariantError):
            acceptance_prob(0.5, 0.0)

    def test_residual_examples(self):
        np.testing.assert_allclose(residual_dist(np.array([0.5, 0.5]), np.array([1.0, 0.0])), [0, 1])
        np.testing.assert_allclose(residual_dist(np.array([0.7, 0.3]), np.array([0.3, 0.7])), [1, 0])
        p = softmax_with_temperature([0.0, 2.0, 1.0], 0)
        q = softmax_with_temperature([3.0, 2.0, 1.0], 0)
        assert np.array_equal(residual_dist(p, q), p)

    def test_residual_empty_is_error(self):
        with pytest.raises(EngineInvariantError):
            residual_dist(np.array([0.5, 0.5]), np.array([0.5, 0.5]))

    @settings(max_examples=300)
    @given(dist_pairs())
    def test_single_step_lossless(self, pq):
        p, q = pq
        np.testing.assert_allclose(induced_law(p, q), p, rtol=0, atol=1e-12)


def _batch_eval(draft, target, ctx, gamma, T, seed):
    rng = RngStream(seed)
    b = draft_propose(draft, ctx, gamma, T, rng)
    return b, target_evaluate(target, ctx, b, T), rng


class TestDraftAndTarget:
    def test_greedy_chain(self):
        rows = {(0,): [0, 5, 0], (1,): [0, 0, 5], (2,): [5, 0, 0]}
        m = TableModel(3, 1, rows, [0, 0, 0])
        b = draft_propose(m, [0], 4, 0.0, RngStream(0))
        assert b.tokens == (1, 2, 0, 1)

    def test_gamma_one(self, table_pair):
        d, t = table_pair
        b, ev, _ = _batch_eval(d, t, [0], 1, 1.0, 3)
        assert len(b.tokens) == len(b.draft_dists) == 1
        assert len(ev.target_dists) == len(ev.target_logits_T1) == 2

    def test_draft_batch_consistency(self, table_pair):
        d, _ = table_pair
        b = draft_propose(d, [2], 5, 0.7, RngStream(4))
        ctx = [2]
        for tok, q, z in zip(b.tokens, b.draft_dists, b.draft_logits):
            assert np.array_equal(z, d.logits(ctx))
            assert np.array_equal(q, softmax_with_temperature(z, 0.7))
            ctx.append(tok)

    def test_deterministic(self, table_pair):
        d, _ = table_pair
        assert (draft_propose(d, [1], 6, 1.0, RngStream(8)).tokens
                == draft_propose(d, [1], 6, 1.0, RngStream(8)).tokens)

    def test_target_equal_to_draft(self, table_pair):
        d, _ = table_pair
        b, ev, _ = _batch_eval(d, d, [3], 4, 0.8, 1)
        for p, q in zip(ev.target_dists, b.draft_dists):
            assert np.array_equal(p, q)

    def test_target_rows_positional(self, table_pair):
        d, t = table_pair
        b, ev, _ = _batch_eval(d, t, [1, 2], 3, 1.0, 2)
        ctx = [1, 2] + list(b.tokens)
        for i, z in enumerate(ev.target_logits_T1):
            assert np.array_equal(z, t.logits(ctx[:2 + i]))


class TestVerifyRound:
    def test_identical_models_accept_everything(self, table_pair):
        d, _ = table_pair
        b, ev, rng = _batch_eval(d, d, [0], 5, 1.0, 11)
        out = sd_verify_round(b, ev, 1.0, rng)
        assert out.accepted_len == 5 and out.bonus is not None and out.correction is None
        assert out.emitted == b.tokens + (out.bonus,)
        assert out.rescued_positions == ()

    def test_zero_target_mass_rejects_first(self):
        q = np.array([0.0, 1.0, 0.0])
        p = np.array([0.3, 0.0, 0.7])
        b = DraftBatch((1,), (q,), (np.log([1e-9, 1.0, 1e-9]),))
        ev = TargetEval((p, p), (np.log([0.3, 1e-12, 0.7]),) * 2)
        out = sd_verify_round(b, ev, 1.0, ScriptedRng([0.3, 0.5]))
        assert out.accepted_len == 0
        assert out.correction == 2  # residual [0.3, 0, 0.7], u = 0.5
        assert out.emitted == (2,)

    def test_boundary_r_equal_alpha_accepts(self):
        q = np.array([0.5, 0.5])
        p = np.array([0.25, 0.75])
        b = DraftBatch((0,), (q,), (np.zeros(2),))
        ev = TargetEval((p, p), (np.log(p), np.log(p)))
        out = sd_verify_round(b, ev, 1.0, ScriptedRng([0.5, 0.1]))
        assert out.accepted_len == 1 and out.bonus == 0
        out = sd_verify_round(b, ev, 1.0, ScriptedRng([0.5 + 1e-12, 0.1]))
        assert out.accepted_len == 0 and out.correction == 1

    def test_rng_consumption(self, table_pair):
        d, t = table_pair
        for seed in range(30):
            b, ev, rng = _batch_eval(d, t, [0], 4, 1.0, seed)
            before = rng.draws
            out = sd_verify_round(b, ev, 1.0, rng)
            assert rng.draws - before == out.examined + 1
            assert out.examined == (out.accepted_len + 1 if out.correction is not None else 4)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5), st.sampled_from([0.0, 0.5, 1.0, 2.0]))
    def test_outcome_invariants(self, seed, gamma, T):
        d, t = random_table_pair(vocab=5, seed=seed % 17)
        b, ev, rng = _batch_eval(d, t, [seed % 5], gamma, T, seed)
        out = sd_verify_round(b, ev, T, rng)
        assert 0 <= out.accepted_len <= gamma
        if out.correction is not None:
            assert len(out.emitted) == out.accepted_len + 1
            assert out.correction != b.tokens[out.accepted_len]
            (ev_,) = out.rejection_events
            assert ev_.position == out.accepted_len and ev_.target_tok == out.correction
        else:
            assert out.accepted_len == gamma and len(out.emitted) == gamma + 1


@pytest.mark.parametrize("T", [1.0, 0.6, 0.0])
@pytest.mark.parametrize("seed", [0, 1])
def test_sequence_law_matches_target_exactly(T, seed):
    d, t = random_table_pair(vocab=3, seed=seed)
    sd_law = sd_sequence_law(d, t, [0], 2, T, 3)
    ar_law = autoregressive_law(t, [0], T, 3)
    for k in ar_law:
        assert abs(sd_law.get(k, 0.0) - ar_law[k]) < 1e-12


class TestGenerate:
    def test_draft_equals_target(self, table_pair):
        d, _ = table_pair
        out, m = sd_generate(d, d, [0], 6, 1.0, 70, RngStream(1))
        assert len(out) == 70
        assert m.acceptance_rate == 1.0
        assert m.target_calls == 10 and m.rescued == 0

    def test_max_tokens_one(self, table_pair):
        d, t = table_pair
        out, m = sd_generate(d, t, [0], 6, 1.0, 1, RngStream(1))
        assert len(out) == 1 and m.target_calls == 1 and m.emitted_tokens == 1

    def test_deterministic(self, table_pair):
        d, t = table_pair
        a = sd_generate(d, t, [0], 3, 0.9, 40, RngStream(5))
        b = sd_generate(d, t, [0], 3, 0.9, 40, RngStream(5))
        assert a == b

    def test_eos_truncates(self):
        rows = {(0,): [0, 5, 0], (1,): [0, 0, 5], (2,): [0, 0, 5]}
        m = TableModel(3, 1, rows, [0, 0, 0])
        out, _ = sd_generate(m, m, [0], 4, 0.0, 20, RngStream(0), eos_id=2)
        assert out == [1, 2]

    def test_metrics_bookkeeping(self, table_pair):
        d, t = table_pair
        _, m = sd_generate(d, t, [0], 4, 1.0, 400, RngStream(2))
        assert m.rescued == 0 and m.accepted <= m.drafted
        assert m.drafted == m.accepted + m.rejections
        assert m.emitted_tokens == 400

    def test_round_log(self, table_pair):
        d, t = table_pair
        buf = io.StringIO()
        out, m = sd_generate(d, t, [0], 3, 1.0, 30, RngStream(4), log=RoundLog(buf))
        recs = [json.loads(line) for line in buf.getvalue().splitlines()]
        assert len(recs) == m.target_calls
        assert sum(len(r["emitted"]) for r in recs) == 30
        assert [r["round"] for r in recs] == list(range(len(recs)))
        assert sum(len(r["rejections"]) for r in recs) == m.rejections

    def test_vanilla(self, table_pair):
        _, t = table_pair
        out, m = vanilla_generate(t, [0], 1.0, 25, RngStream(0))
        assert len(out) == 25 and m.target_calls == 25 and m.drafted == 0
