from collections import Counter

import numpy as np
import pytest

from moeserve_sim.engine import Trace
from moeserve_sim.fabric import ConfigError
from moeserve_sim.xccl.collectives import (CollectiveCostModel, EpConfig, GatingOutput, IncompleteCombineError,
                                           TokenPayload, TrampolineMap, a2e, all_to_all_timing,
                                           calibrate_disaggregated, calibrate_quantize_overhead, combine,
                                           combine_timing, dense_oracle, disaggregated_cost, dispatch, disaggregated_latencies, e2a,
                                           uniform_counts)


def random_instance(rng, max_ranks=8, max_tokens=32, max_k=4, dim=6):
    ranks = int(rng.integers(1, max_ranks + 1))
    per_rank = int(rng.integers(1, 4))
    ep = EpConfig(ranks, per_rank, rng.permutation(np.repeat(np.arange(ranks), per_rank)))
    n_tok = int(rng.integers(1, max_tokens + 1))
    k = int(rng.integers(1, min(max_k, ep.num_experts) + 1))
    ids = np.array([rng.choice(ep.num_experts, k, replace=False) for _ in range(n_tok)])
    gating = GatingOutput(ids, rng.random((n_tok, k)))
    tokens = [TokenPayload(100 + t, rng.normal(size=dim), src_rank=int(rng.integers(ranks))) for t in range(n_tok)]
    weights = rng.normal(size=(ep.num_experts, dim, dim))
    return ep, gating, tokens, weights


def run_experts(received, weights):
    return {r: [weights[d.expert] @ d.hidden for d in ds] for r, ds in received.items()}


def test_single_token_top1():
    ep = EpConfig(4, 1)
    res = dispatch([TokenPayload(0, np.ones(3))], GatingOutput([[3]], [[1.0]]), ep)
    assert [len(res.received[r]) for r in range(4)] == [0, 0, 0, 1]
    assert res.counts.sum(axis=0).tolist() == [0, 0, 0, 1]


def test_global_batch_ep128():
    assert 96 * EpConfig(128, 2).num_ranks == 12_288


def test_roundtrip_identity_k1():
    rng = np.random.default_rng(0)
    ep = EpConfig(4, 2)
    toks = [TokenPayload(i, rng.normal(size=5), src_rank=i % 4) for i in range(10)]
    g = GatingOutput(rng.integers(0, 8, (10, 1)), np.ones((10, 1)))
    res = dispatch(toks, g, ep)
    out = combine({r: [d.hidden for d in ds] for r, ds in res.received.items()}, g, res)
    np.testing.assert_allclose(out, np.array([t.hidden for t in toks]))


def test_weighted_combine_hand_value():
    ep = EpConfig(2, 1)
    x = np.array([1.0, -2.0, 3.0])
    g = GatingOutput([[0, 1]], [[0.25, 0.75]])
    res = dispatch([TokenPayload(0, x)], g, ep)
    outs = {0: [2 * x], 1: [4 * x]}
    np.testing.assert_allclose(combine(outs, g, res)[0], 3.5 * x, rtol=1e-6)


def test_random_instances_match_dense_oracle():
    rng = np.random.default_rng(11)
    for _ in range(200):
        ep, g, toks, w = random_instance(rng)
        res = dispatch(toks, g, ep)
        placed = Counter((d.row, d.expert, r) for r, ds in res.received.items() for d in ds)
        assert placed == dense_oracle(g, [t.src_rank for t in toks], ep.rank_of_expert)
        out = combine(run_experts(res.received, w), g, res)
        oracle = np.array([sum(g.scores[t, j] * (w[g.expert_ids[t, j]] @ toks[t].hidden) for j in range(g.k))
                           for t in range(len(toks))])
        np.testing.assert_allclose(out, oracle, rtol=1e-6, atol=1e-12)


def test_combine_linear_in_scores():
    rng = np.random.default_rng(2)
    ep, g, toks, w = random_instance(rng)
    res = dispatch(toks, g, ep)
    outs = run_experts(res.received, w)
    scaled = GatingOutput(g.expert_ids, 3.0 * g.scores)
    np.testing.assert_allclose(combine(outs, scaled, res), 3.0 * combine(outs, g, res))


def test_missing_expert_output_raises():
    ep = EpConfig(2, 1)
    g = GatingOutput([[0, 1]], [[0.5, 0.5]])
    res = dispatch([TokenPayload(0, np.ones(2))], g, ep)
    with pytest.raises(IncompleteCombineError):
        combine({0: [np.ones(2)]}, g, res)


def test_quantize_halves_payload_bytes():
    rng = np.random.default_rng(4)
    ep, g, toks, _ = random_instance(rng)
    full = dispatch(toks, g, ep)
    half = dispatch(toks, g, ep, quantize=True)
    assert half.payload_bytes * 2 == full.payload_bytes
    assert half.metadata_bytes == full.metadata_bytes
    assert TokenPayload(0, np.zeros(8), "int8").nbytes * 2 == TokenPayload(0, np.zeros(8)).nbytes


def test_validation():
    with pytest.raises(ConfigError):
        GatingOutput([[0]], [[np.nan]])
    with pytest.raises(ConfigError):
        EpConfig(2, 2, [0, 0, 0, 1])
    with pytest.raises(ConfigError):
        dispatch([TokenPayload(0, np.ones(2))], GatingOutput([[5]], [[1.0]]), EpConfig(2, 1))


def test_barrier_precedes_pulls_and_straggler():
    counts = uniform_counts(4, 16, 2)
    trace = Trace()
    start = [0, 0, 5000, 0]
    t = all_to_all_timing("dispatch", counts, 1024, CollectiveCostModel(), start_ns=start, trace=trace)
    last_meta = max(r.time_ns for r in trace.select("dispatch_meta"))
    assert all(p >= last_meta for p in t.pull_start_ns)
    assert t.straggler_node == 2
    rec = t.summary()
    assert set(rec) == {"collective", "participants", "bytes", "t_start", "t_end", "straggler_node"}


def test_failed_rank_stalls_collective():
    t = all_to_all_timing("dispatch", uniform_counts(4, 8, 2), 1024, CollectiveCostModel(), failed_ranks=[1])
    assert t.t_end is None and t.straggler_node == 1


def test_dispatch_combine_crossover_at_32():
    cost = CollectiveCostModel()
    tok = 7168 * 2
    for b in (8, 16, 32, 33, 48, 96):
        counts = uniform_counts(128, b, 8)
        d = all_to_all_timing("dispatch", counts, tok, cost, quantize=True).latency_us
        c = combine_timing(counts, tok, cost).latency_us
        assert (d < c) == (b > 32), b


def test_quantize_calibration_reproduces_default():
    q = calibrate_quantize_overhead(CollectiveCostModel(), 128, 7168, 8, 32.5)
    assert q == pytest.approx(CollectiveCostModel().quantize_fixed_us, abs=0.01)


# -- trampolines --------------------------------------------------------------------

def test_trampoline_partition():
    tm = TrampolineMap.build(range(3), range(10, 20))
    assert tm.trampolines == [10, 11, 12]
    assert tm.second_stage == {10: [13, 14, 15], 11: [16, 17, 18], 12: [19]}
    tm.check()
    with pytest.raises(ConfigError):
        TrampolineMap.build(range(5), range(3))


def test_symmetric_degenerates_to_direct():
    rng = np.random.default_rng(5)
    tm = TrampolineMap.build(range(4), range(4, 8))
    toks = [TokenPayload(i, rng.normal(size=3), src_rank=i % 4) for i in range(12)]
    g = GatingOutput(rng.integers(0, 8, (12, 2)), rng.random((12, 2)))
    res = a2e(toks, g, tm)
    assert all(not v for v in tm.second_stage.values())
    assert not res.stage2


def random_disagg(rng):
    a = int(rng.integers(1, 5))
    e = int(rng.integers(a + 1, 12))
    tm = TrampolineMap.build(range(a), range(100, 100 + e))
    n_exp = int(rng.integers(e, 2 * e + 1))
    node_of = np.array(tm.expert_nodes)[rng.integers(0, e, n_exp)]
    n_tok = int(rng.integers(1, 25))
    k = int(rng.integers(1, min(4, n_exp) + 1))
    ids = np.array([rng.choice(n_exp, k, replace=False) for _ in range(n_tok)])
    g = GatingOutput(ids, rng.random((n_tok, k)))
    toks = [TokenPayload(t, rng.normal(size=4), src_rank=int(rng.integers(a))) for t in range(n_tok)]
    return tm, node_of, g, toks


def test_a2e_e2a_match_oracle_random():
    rng = np.random.default_rng(8)
    for _ in range(100):
        tm, node_of, g, toks = random_disagg(rng)
        res = a2e(toks, g, tm, node_of_expert=node_of)
        assert res.placement() == Counter((t.token_index, e, int(node_of[e]))
                                          for t, row in zip(toks, g.expert_ids) for e in row)
        assert res.metadata_updates["attention_facing"] < res.metadata_updates["naive"]
        w = rng.normal(size=(len(node_of), 4, 4))
        outs = {n: [w[d.expert] @ d.hidden for d in ds] for n, ds in res.received.items()}
        back, _ = e2a(outs, g, tm, res)
        for t, tok in enumerate(toks):
            want = sum(g.scores[t, j] * (w[g.expert_ids[t, j]] @ tok.hidden) for j in range(g.k))
            np.testing.assert_allclose(back[tm.attention_nodes[tok.src_rank]][tok.token_index], want, rtol=1e-6)


def test_e2a_identity_roundtrip():
    rng = np.random.default_rng(1)
    tm = TrampolineMap.build(range(2), range(10, 15))
    toks = [TokenPayload(t, rng.normal(size=3), src_rank=t % 2) for t in range(6)]
    g = GatingOutput(rng.integers(0, 5, (6, 1)), np.ones((6, 1)))
    res = a2e(toks, g, tm)
    back, _ = e2a({n: [d.hidden for d in ds] for n, ds in res.received.items()}, g, tm, res)
    for tok in toks:
        np.testing.assert_allclose(back[tok.src_rank][tok.token_index], tok.hidden)


def test_trampoline_failure_stalls_subtree():
    tm = TrampolineMap.build(range(2), range(10, 16))
    toks = [TokenPayload(t, np.ones(2), src_rank=t % 2) for t in range(12)]
    g = GatingOutput(np.arange(12).reshape(12, 1) % 6, np.ones((12, 1)))
    res = a2e(toks, g, tm, failed_trampolines=[10], cost=CollectiveCostModel())
    subtree = {10, *tm.second_stage[10]}
    assert res.stalled and all(tm.trampoline_of(int(res.node_of_expert[d.expert])) == 10 for d in res.stalled)
    assert all(not res.received[n] for n in subtree)
    assert all(res.received[n] for n in tm.expert_nodes if n not in subtree)
    assert res.timing.t_end is None
    with pytest.raises(IncompleteCombineError):
        e2a({}, g, tm, res)


def test_stage1_metadata_count_in_trace():
    tm = TrampolineMap.build(range(3), range(10, 19))
    toks = [TokenPayload(t, np.ones(2), src_rank=t % 3) for t in range(9)]
    g = GatingOutput(np.arange(9).reshape(9, 1), np.ones((9, 1)))
    res = a2e(toks, g, tm, cost=CollectiveCostModel())
    assert res.metadata_updates["stage1"] == 3 * 3 < res.metadata_updates["naive"] == 3 * 9


def test_disaggregated_calibration_hits_targets():
    cost = calibrate_disaggregated()
    assert cost == disaggregated_cost()
    a, e = disaggregated_latencies(cost)
    assert a == pytest.approx(172.0, abs=1.0)
    assert e == pytest.approx(193.0, abs=1.0)
