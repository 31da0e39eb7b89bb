import json

import pytest

from moeserve_sim.engine import ms_to_ns
from moeserve_sim.fabric import ConfigError, Fabric, build_topology
from moeserve_sim.pipeline import MtpConfig
from moeserve_sim.reliability import (DECODE_SATURATION, HEALTHY, LINK_FAULT, ClusterState, FaultEvent,
                                      HeartbeatConfig, RecoveryPolicy, decode_with_rollback, expert_deployment,
                                      heartbeat_monitor, link_probe, load_fault_schedule, mem_fault_masking,
                                      probe_fuzz, probe_scenario, recover, restart_world, vertical_scale)

ACTORS = {"te0": ["te0/dp0", "te0/dp1"], "te1": ["te1/dp0", "te1/dp1"]}


def test_no_faults_no_detections():
    assert heartbeat_monitor(HeartbeatConfig(), ACTORS, ticks=10_000) == []


@pytest.mark.parametrize("kind", ["stuck_loop", "crash"])
def test_hang_detected_within_threshold_window(kind):
    cfg = HeartbeatConfig()
    t = ms_to_ns(1234)
    det = heartbeat_monitor(cfg, ACTORS, [FaultEvent(kind, "te1/dp0", t)], ticks=50)
    assert [(d.actor, d.tier) for d in det] == [("te1/dp0", "te_to_dp")]
    expect = t + cfg.miss_threshold * ms_to_ns(cfg.te_to_dp_ms)
    assert abs(det[0].time_ns - expect) <= ms_to_ns(cfg.te_to_dp_ms)


def test_te_crash_caught_by_control_tier_only():
    det = heartbeat_monitor(HeartbeatConfig(), ACTORS, [FaultEvent("crash", "te0", 0)], ticks=50)
    assert [(d.actor, d.tier) for d in det] == [("te0", "control_to_te")]
    assert det[0].time_ns == 3 * ms_to_ns(1000)


def test_heartbeat_intervals_independent():
    det = heartbeat_monitor(HeartbeatConfig(control_to_te_ms=50, te_to_dp_ms=500), ACTORS,
                            [FaultEvent("crash", "te1", 0), FaultEvent("stuck_loop", "te0/dp1", 0)], ticks=10)
    assert {d.actor: d.time_ns for d in det} == {"te1": ms_to_ns(150), "te0/dp1": ms_to_ns(1500)}
    with pytest.raises(ConfigError):
        HeartbeatConfig(te_to_dp_ms=0)


def test_probe_constructed_scenarios():
    assert probe_scenario(HEALTHY, 1).classification == HEALTHY
    assert probe_scenario(DECODE_SATURATION, 1).classification == DECODE_SATURATION
    assert probe_scenario(LINK_FAULT, 1).classification == LINK_FAULT


def test_probe_on_cut_link_times_out():
    fab = Fabric(build_topology(1, 2, 4))
    fab.cut_link(0, 1)
    res = link_probe(fab, 0, 1, kv_stalled=False, handler_interval_ns=100, timeout_us=100.0)
    assert res.classification == LINK_FAULT and res.probe_rtt_ns is None


def test_probe_fuzz_small():
    correct, pairs = probe_fuzz(150, seed=9)
    assert correct == 150
    assert {t for t, _ in pairs} == {HEALTHY, DECODE_SATURATION, LINK_FAULT}


def test_rollback_reproduces_clean_token_streams():
    mtp = MtpConfig(2, 2, [0.9, 0.5], bernoulli=True, seed=3)
    clean = decode_with_rollback(list(range(12)), 15, mtp)
    faulted = decode_with_rollback(list(range(12)), 15, mtp, transient_at=[0, 7, 14])
    assert faulted.tokens == clean.tokens
    assert faulted.rollbacks == [0, 7, 14]
    # each faulted iteration runs exactly twice, all others once
    assert sorted(faulted.executed) == sorted(list(range(15)) + [0, 7, 14])
    assert faulted.time_ms > clean.time_ms


def test_mem_fault_masks_three_requests():
    clean = mem_fault_masking()
    hit = mem_fault_masking(fault_blocks=[1, 41, 42, 203])  # owners 0, 10, 50
    assert hit.failed == [0, 10, 50]
    assert hit.masked_blocks == [1, 41, 42, 203]
    for r in range(60):
        if r not in hit.failed:
            assert hit.tokens[r] == clean.tokens[r]
    assert hit.time_ms == pytest.approx(clean.time_ms + 5.0)
    with pytest.raises(ConfigError):
        mem_fault_masking(fault_blocks=[10_000])


def make_state(**kw):
    return ClusterState(["p0", "p1"], ["d0"], expert_deployment(**kw), 288, 288)


def test_vertical_scaling_keeps_every_expert():
    st = make_state()
    full = st.assignment
    # lose the die whose primary has no redundant copy anywhere
    lonely = next(e for e, ss in full.slots.items() if len(ss) == 1)
    node = full.slot_node[full.slots[lonely][0]]
    recs = recover(FaultEvent("crash", f"die{node}"), RecoveryPolicy("pd_failover"), st)
    assert recs[-1].action == "vertical_scale"
    asg = st.assignment
    assert asg.num_experts == 288 and min(asg.replica_count()) >= 1
    assert all(asg.slot_node[s] != node for ss in asg.slots.values() for s in ss)
    assert st.ep_ranks == 287 and st.dp_groups == 287


def test_vertical_scaling_escalates_below_floor():
    asg = expert_deployment(num_routed=4, num_shared=0, redundant_per_node=0, fill_redundant=False)
    assert vertical_scale(asg, [1]) is None
    st = ClusterState(["p0"], ["d0"], asg, 4, 4)
    recs = recover(FaultEvent("crash", "die1"), RecoveryPolicy("pd_failover"), st)
    assert [r.action for r in recs][:2] == ["escalate", "stop_all"]
    assert recs[-1].stage == "restart_world"


def test_restart_world_decode_first():
    st = make_state()
    recs, t_dec, t_pre = restart_world(st, decode_load_ms=[40_000], prefill_load_ms=[1_000, 2_000])
    assert t_dec <= t_pre
    ready = {r.affected[0]: r.time for r in recs if r.action.endswith("_ready")}
    assert max(ready["d0"], 0) <= min(ready["p0"], ready["p1"])


def test_prefill_failure_restarts_independently():
    st = make_state()
    recs = recover(FaultEvent("crash", "p1"), RecoveryPolicy("pd_failover"), st)
    assert [(r.action, r.affected) for r in recs] == [("restart_prefill_te", ["p1"])]


def test_kill_p_to_preserve_d():
    st = make_state()
    recs = recover(FaultEvent("crash", "d0"), RecoveryPolicy("pd_failover", kill_p_to_preserve_d=True), st)
    assert recs[0].action == "kill_prefill_for_decode" and st.prefill_tes == ["p0"]


def test_fine_grained_actions_and_json():
    st = make_state()
    recs = recover(FaultEvent("net_transient", "te0"), RecoveryPolicy(), st)
    assert recs[0].action == "rollback_one_iteration"
    recs = recover(FaultEvent("mem_fault", "die3"), RecoveryPolicy(), st, affected_requests=[4, 5])
    assert [r.action for r in recs] == ["mask_region", "fail_requests"]
    assert set(json.loads(recs[1].to_json())) == {"time", "event", "action", "stage", "affected"}


def test_fault_schedule_parsing():
    evs = load_fault_schedule('[{"kind": "crash", "location": "te0", "inject_time_ns": 5}]')
    assert evs[0].kind == "crash" and evs[0].inject_time_ns == 5
    with pytest.raises(ConfigError):
        load_fault_schedule('[{"kind": "meteor", "location": "x"}]')
    with pytest.raises(ConfigError):
        load_fault_schedule('[{"kind": "crash"}]')
    with pytest.raises(ConfigError):
        load_fault_schedule("[\n{oops")
    with pytest.raises(ConfigError):
        RecoveryPolicy(min_replicas_per_expert=0)
