import pytest

from moeserve_sim.fabric import ConfigError
from moeserve_sim.pipeline import (AcceptanceSampler, DecodeTiming, MaLatencies, MtpConfig, PdConfig, PrefillProfile,
                                   closed_form_forward_ms, decode_iteration, expected_tokens_per_step,
                                   kernel_breakdown, ma_pipeline, make_workload, measure_tokens_per_step,
                                   pd_workflow, persistent_moe_worker, solve_next_acceptance, throughput_report,
                                   tpot_ms)
from moeserve_sim.pipeline.ma import host_overhead_per_iteration_us
from moeserve_sim.pipeline.metrics import max_min_ratio
from moeserve_sim.pipeline.pd import DeadlockError, PdCluster, workload_from_spec
from moeserve_sim.requests import DONE, Request

# -- MTP ------------------------------------------------------------------------------

def test_zero_acceptance_is_plain_autoregressive():
    cfg = MtpConfig(1, 1, 0.0)
    res = decode_iteration([1, 2, 3], {}, cfg, AcceptanceSampler(cfg))
    assert all(len(t) == 1 for t in res.tokens.values())
    assert [s[0] for s in res.steps] == ["mtp_forward", "sample_draft", "main_verify", "sample_main", "accept_check"]


def test_single_draft_tpot():
    cfg = MtpConfig(1, 1, 0.9)
    assert expected_tokens_per_step(cfg) == pytest.approx(1.9)
    assert measure_tokens_per_step(cfg) == pytest.approx(1.9, abs=1e-9)
    assert tpot_ms(93, 2, 1.9) == pytest.approx(50.0, abs=1e-9)


def test_two_layer_back_solve():
    reused = solve_next_acceptance([0.9], 2.26)
    trained = solve_next_acceptance([0.9], 2.35)
    assert reused == pytest.approx(0.4)
    assert trained == pytest.approx(0.5)
    assert measure_tokens_per_step(MtpConfig(2, 2, [0.9, reused])) == pytest.approx(2.26, abs=0.01)
    assert measure_tokens_per_step(MtpConfig(2, 2, [0.9, trained])) == pytest.approx(2.35, abs=0.01)
    with pytest.raises(ConfigError):
        solve_next_acceptance([0.9], 3.5)


def test_bernoulli_mode_near_expectation():
    cfg = MtpConfig(2, 2, [0.9, 0.5], bernoulli=True, seed=4)
    assert measure_tokens_per_step(cfg, requests=64, iterations=300) == pytest.approx(2.35, abs=0.03)


def test_sampler_snapshot_restore_replays():
    cfg = MtpConfig(2, 2, [0.8, 0.6], bernoulli=True, seed=1)
    s = AcceptanceSampler(cfg)
    snap = s.snapshot()
    first = [s.accepted(r) for r in range(50)]
    s.restore(snap)
    assert [s.accepted(r) for r in range(50)] == first


def test_mtp_validation():
    with pytest.raises(ConfigError):
        MtpConfig(1, 1, 1.2)
    with pytest.raises(ConfigError):
        MtpConfig(1, 2, 0.5)
    with pytest.raises(ConfigError):
        decode_iteration([], {}, MtpConfig(), AcceptanceSampler(MtpConfig()))


def test_decode_timing_forward_sum():
    t = DecodeTiming.from_forward(93.0, 2.0)
    assert t.forward_ms == pytest.approx(93.0)
    res = decode_iteration([0], {}, MtpConfig(), AcceptanceSampler(MtpConfig()), t)
    assert res.duration_ms == pytest.approx(95.0)


# -- throughput ---------------------------------------------------------------------

def test_dp288_throughput_arithmetic():
    r = throughput_report(93, 2, 1.9, batch_per_die=60, dies=288)
    assert r.tpot_ms == pytest.approx((93 + 2) / 1.9, abs=1e-9)
    assert r.tokens_per_s_per_chip == pytest.approx(2400.0)
    assert r.total_tokens_per_s == pytest.approx(345_600.0)
    assert r.global_batch == 17_280


def test_ma_global_batch():
    assert throughput_report(91, 2, 1.9, batch_per_die=96, dies=160, domains=3).global_batch == 46_080


def test_dispatch_variance_direction():
    ratios = [max_min_ratio(kernel_breakdown(mla_sigma_us=s, moe_sigma_us=s, iterations=10)[0]) for s in (0, 30, 300)]
    assert ratios[0] == pytest.approx(1.0)
    assert ratios[0] < ratios[1] < ratios[2]
    rows = kernel_breakdown(iterations=5)
    assert [r["op"] for r in rows] == ["Dispatch", "Combine"]
    assert all(r["min_us"] <= r["avg_us"] <= r["max_us"] for r in rows)


# -- MA timeline ----------------------------------------------------------------------

def test_ma_forward_arithmetic():
    lat = MaLatencies()
    assert closed_form_forward_ms(lat) == pytest.approx(92.88)
    tl = ma_pipeline(1, 2, 61, lat)
    assert tl.total_ms == pytest.approx(92.88)
    assert not tl.violations()
    tl3 = ma_pipeline(3, 2, 61, lat)
    assert tl3.total_ms == pytest.approx(93.0, abs=1.0)
    assert not tl3.violations()


def test_single_microbatch_is_serial_sum():
    lat = MaLatencies()
    tl = ma_pipeline(1, 1, 61, lat)
    parts = lat.gap_ms + lat.mtp_ms + 61 * (lat.attention_ms_per_layer + lat.a2e_ms + lat.moe_ms + lat.e2a_ms)
    assert tl.total_ms == pytest.approx(parts)
    assert sum(s.duration_ns for s in tl.segments) / 1e6 == pytest.approx(parts)


def test_final_expert_trip_is_exposed():
    tl = ma_pipeline(1, 2, 4)
    last = max(tl.segments, key=lambda s: s.end_ns)
    assert (last.name, last.microbatch, last.layer) == ("E2A", 1, 3)
    attn_end = max(s.end_ns for s in tl.segments if s.resource == "attn0")
    assert last.end_ns - attn_end == pytest.approx((0.17 + 0.12 + 0.19) * 1e6)


def test_more_domains_raise_moe_utilization():
    one = ma_pipeline(1, 2, 61).utilization()
    three = ma_pipeline(3, 2, 61).utilization()
    assert three >= one
    with pytest.raises(ConfigError):
        ma_pipeline(0, 2, 61)


def test_optional_mla_all_to_all_segment():
    base = ma_pipeline(1, 2, 10).total_ms
    extra = ma_pipeline(1, 2, 10, MaLatencies(mla_a2a_ms=0.05)).total_ms
    assert extra == pytest.approx(base + 0.05 * 2 * 10)


def test_persistent_worker_no_host_events_and_overlap():
    w = persistent_moe_worker(7, 5)
    assert not w.host_events and not w.trace.select("host_dispatch")
    assert w.overlaps("a2e_recv", 1, "moe_compute", 0)
    # stream order holds per batch
    for b in range(5):
        r, c, s = (next(i for i in w.intervals if i.stream == n and i.batch == b)
                   for n in ("a2e_recv", "moe_compute", "e2a_send"))
        assert r.end_ns <= c.start_ns and c.end_ns <= s.start_ns


def test_host_dispatch_ablation_adds_launch_cost():
    assert host_overhead_per_iteration_us(8, host_launch_us=1000.0) >= 1000.0
    assert persistent_moe_worker(0, 3, host_dispatch=True).host_events


# -- PD workflow ---------------------------------------------------------------------

def test_single_request_walks_eight_steps():
    res = pd_workflow([Request(0, 1000, 20)])
    steps = [s[0] for s in res.steps[0]]
    assert steps == list(range(1, 9))
    times = [s[1] for s in res.steps[0]]
    assert times == sorted(times)
    r = res.requests[0]
    assert r.state == DONE and len(r.tokens) == 20
    assert res.ledger["balanced"] and res.mismatched_transfers == 0


def test_transfer_task_carries_only_addresses():
    cl = PdCluster(PdConfig())
    cl.submit(Request(0, 512, 4))
    res = cl.run()
    assert res.bytes_moved == 4 * 4096
    trace_ops = [r.op for r in cl.fabric.trace.records]
    assert trace_ops.index("pd_step3") < trace_ops.index("send_stage")
    assert trace_ops.index("pd_step6") < trace_ops.index("send_stage")


def test_backpressure_defers_recv_until_slot_frees():
    cfg = PdConfig(dps_per_decode_te=1, decode_blocks_per_dp=10)
    reqs = [Request(0, 1000, 100), Request(1, 1000, 100)]  # 9 blocks reserved each
    res = pd_workflow(reqs, cfg)
    first_done = res.requests[0].t_done
    steps1 = res.steps[1]
    assert any(s == 6 and d == "deferred" for s, _, d in steps1)
    t7 = next(t for s, t, _ in steps1 if s == 7)
    assert t7 >= first_done
    assert res.unreserved_recvs == 0 and res.ledger["balanced"]


def test_hundred_requests_conserve_blocks():
    cfg = PdConfig(prefill_profiles=[PrefillProfile()] * 3 + [PrefillProfile("scaleout", 2.0, path="scale-out")],
                   decode_tes=1, dps_per_decode_te=4, decode_blocks_per_dp=64)
    res = pd_workflow(make_workload(100, seed=1), cfg)
    assert res.ledger["balanced"] and res.ledger["allocated"] > 0
    assert res.unreserved_recvs == 0 and res.mismatched_transfers == 0
    assert all(r.state == DONE or r.fail_cause for r in res.requests)
    assert res.backpressure_events > 0


def test_capacity_deadline_fails_with_cause():
    cfg = PdConfig(dps_per_decode_te=1, decode_blocks_per_dp=10, capacity_deadline_ms=50.0)
    res = pd_workflow([Request(0, 1000, 100), Request(1, 1000, 100)], cfg)
    assert res.requests[1].fail_cause == "decode_capacity_deadline"
    assert res.ledger["balanced"] and res.ledger["reclaimed"] > 0


def test_cut_link_fails_transfer_and_reclaims():
    cl = PdCluster(PdConfig(dps_per_prefill_te=1, dps_per_decode_te=1, transfer_timeout_us=100.0))
    cl.fabric.cut_link(0, 1)
    cl.submit(Request(0, 300, 4))
    res = cl.run()
    assert res.requests[0].fail_cause == "transfer_timeout"
    assert res.ledger["balanced"] and res.ledger["reclaimed"] == res.ledger["allocated"]


def test_deadlock_detected_without_deadline():
    cfg = PdConfig(dps_per_decode_te=1, decode_blocks_per_dp=10, capacity_deadline_ms=None)
    cl = PdCluster(cfg)
    cl.submit(Request(0, 1000, 100))
    cl.groups[cl.decode_die[(0, 0)]].kv_used_blocks = 5  # capacity held by something that never frees
    with pytest.raises(DeadlockError) as e:
        cl.run()
    assert e.value.stuck[0]["request"] == 0


def test_scale_out_path_tagged():
    cfg = PdConfig(prefill_profiles=[PrefillProfile("scaleout", path="scale-out")])
    cl = PdCluster(cfg)
    cl.submit(Request(0, 256, 3))
    res = cl.run()
    assert res.steps[0][6][2] == "scale-out"
    assert cl.fabric.trace.select("kv_scaleout")
    assert res.requests[0].state == DONE


def test_workload_spec():
    reqs = workload_from_spec({"requests": [{"prompt_len": 10, "max_output": 5}] * 3, "arrival": "fixed", "rate": 10})
    assert [r.arrival_ns for r in reqs] == [0, 100_000_000, 200_000_000]
    with pytest.raises(ConfigError):
        workload_from_spec({"arrival": "burst"})
