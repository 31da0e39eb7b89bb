import math

import numpy as np
import pytest

from moeserve_sim.engine import Trace, next_tick, us_to_ns
from moeserve_sim.fabric import (FIELD_BYTES, GiB, KiB, MiB, ConfigError, Fabric, FabricError, LatencyModel,
                                 MetadataField, RingBuffer, SEND_RECV_ANCHORS, build_topology, calibrate,
                                 fabric_from_config)


def run(fab, gen):
    out = {}

    def wrap():
        out["value"] = yield from gen

    fab.env.process(wrap())
    fab.env.run()
    return out.get("value")


@pytest.mark.parametrize("shape, fields, dies", [((384, 2, 48), 73_728, 768), ((1, 1, 1), 2, 1),
                                                 ((8, 2, 4), 128, 16)])
def test_topology_field_counts(shape, fields, dies):
    topo = build_topology(*shape)
    assert topo.field_count == fields
    assert topo.total_dies == dies


def test_full_scale_metadata_area_is_4mib():
    topo = build_topology(384, 2, 48)
    assert topo.metadata_bytes_used == 73_728 * FIELD_BYTES
    assert topo.metadata_area_bytes == 4 * MiB


@pytest.mark.parametrize("bad", [(0, 2, 48), (1, -1, 4), (1, 1, 0)])
def test_topology_rejects_nonpositive(bad):
    with pytest.raises(ConfigError):
        build_topology(*bad)


def test_field_indices_unique_and_in_range():
    topo = build_topology(2, 2, 3)
    seen = {topo.field_index(p, c, d) for p in range(topo.total_dies) for c in range(3) for d in (0, 1)}
    assert seen == set(range(topo.field_count))


def test_node_server_index():
    topo = build_topology(16, 2, 4, 8)
    assert topo.node(15).server_index == 0
    assert topo.node(16).server_index == 1


def test_metadata_field_is_32_bytes_roundtrip():
    f = MetadataField(2**63 + 5, 17, 4096)
    raw = f.pack()
    assert len(raw) == 32
    assert MetadataField.unpack(raw) == f


def test_ring_occupancy_and_overwrite_count():
    ring = RingBuffer(0, 4, 8)
    for _ in range(3):
        ring.produce()
    assert ring.occupied_bytes == 24
    assert ring.occupied_bytes == (ring.tail_ptr - ring.head_ptr) % ring.capacity_bytes
    ring.consume()
    ring.produce()
    ring.produce()
    assert ring.overwrite_violations == 0
    ring.produce()
    assert ring.overwrite_violations == 1


def test_layout_areas_disjoint():
    fab = Fabric(build_topology(1, 2, 4))
    lay = fab.memory(0).layout
    assert lay.app_base < lay.metadata_base < lay.managed_base
    assert lay.area_of(lay.app_base) == "app"
    assert lay.area_of(lay.metadata_base) == "metadata"
    assert lay.area_of(lay.managed_base) == "managed"
    r0, r1 = lay.ring(0), lay.ring(1)
    assert r0.base + r0.capacity_bytes <= r1.base


def test_calibration_reproduces_defaults_and_claims():
    fitted = calibrate(SEND_RECV_ANCHORS)
    assert fitted == LatencyModel()
    lat = LatencyModel()
    assert lat.mem_us(1_000_000, 2) < 20.0
    assert lat.mem_us(9_000_000, 2) / lat.mem_us(9_000_000, 48) >= 2.5


def test_latency_monotone():
    lat = LatencyModel()
    sizes = [0, 1, 4096, 1 << 20, 9 << 20]
    for c in (1, 2, 8, 48, 64):
        vals = [lat.mem_ns(s, c) for s in sizes]
        assert vals == sorted(vals)
    for s in sizes:
        vals = [lat.mem_ns(s, c) for c in (1, 2, 4, 8, 16, 48)]
        assert vals == sorted(vals, reverse=True)


def test_latency_model_validation():
    with pytest.raises(ConfigError):
        LatencyModel(dma_startup_us=1.0)
    with pytest.raises(ConfigError):
        LatencyModel(core_efficiency=0.0)


def test_dma_crossover_matches_equality():
    lat = LatencyModel()
    x = lat.crossover_bytes(48)
    assert math.isfinite(x)
    # both paths cost the same at the crossover size
    assert lat.mem_us(x, 48) == pytest.approx(lat.dma_us(x), rel=1e-9)
    assert lat.dma_us(1 * MiB) > lat.mem_us(1 * MiB, 48)
    assert lat.dma_us(16 * MiB) < lat.mem_us(16 * MiB, 48)
    assert math.isinf(lat.crossover_bytes(2)) or lat.crossover_bytes(2) > 0


def test_chunk_arithmetic_4gib():
    fab = Fabric(build_topology(1, 2, 4), staging_bytes=64 * KiB)
    assert fab.chunk_count(4 * GiB, "memory") >= 65_536
    assert fab.chunk_count(4 * GiB, "dma") == 1


def test_mem_write_empty_completes_after_startup():
    fab = Fabric(build_topology(1, 2, 4))
    before = fab.load(1, 0, 16)
    comp = run(fab, (yield_from_event(fab.mem_write(0, 1, 0, b"", 2))))
    assert comp.t_done == us_to_ns(fab.latency.mem_startup_us)
    assert fab.load(1, 0, 16) == before


def yield_from_event(ev):
    result = yield ev
    return result


def test_mem_write_exact_and_chunked():
    fab = Fabric(build_topology(1, 2, 8), staging_bytes=64 * KiB)
    payload = np.random.default_rng(1).integers(0, 256, 300_001, dtype=np.uint8).tobytes()
    comp = run(fab, yield_from_event(fab.mem_write(0, 1, 4096, payload, 4)))
    assert comp.ok and comp.chunks == 5
    assert fab.load(1, 4096, len(payload)) == payload
    assert comp.latency_ns == fab.latency.mem_ns(len(payload), 4)
    chunks = fab.trace.select("mem_chunk")
    assert all(r.size <= 64 * KiB for r in chunks)


def test_mem_write_out_of_bounds_is_fault():
    fab = Fabric(build_topology(1, 2, 4), app_bytes=1 * MiB)
    comp = run(fab, yield_from_event(fab.mem_write(0, 1, 1 * MiB - 4, b"x" * 8, 2)))
    assert not comp.ok
    assert fab.clock.faults[0].kind == "mem_fault"


def test_mem_write_bad_cores():
    fab = Fabric(build_topology(1, 2, 4))
    with pytest.raises(ConfigError):
        fab.mem_write(0, 1, 0, b"a", 5)


def test_dma_timing_and_no_core_time():
    fab = Fabric(build_topology(1, 2, 4))
    fab.store(0, 0, b"hello world")
    comp = run(fab, yield_from_event(fab.dma_copy(0, 0, 1, 100, 11)))
    assert comp.t_done == fab.latency.dma_ns(11)
    assert fab.load(1, 100, 11) == b"hello world"
    assert fab.core_busy_ns.get(0, 0) == 0


def test_dma_zero_length_completes_at_startup():
    fab = Fabric(build_topology(1, 2, 4))
    comp = run(fab, yield_from_event(fab.dma_copy(0, 0, 1, 0, 0)))
    assert comp.t_done == us_to_ns(fab.latency.dma_startup_us)


def test_dma_rejects_overlap_and_oversize():
    fab = Fabric(build_topology(1, 2, 4), dma_max_bytes=1 * MiB)
    with pytest.raises(FabricError):
        fab.dma_copy(0, 0, 0, 10, 100)
    with pytest.raises(FabricError):
        fab.dma_copy(0, 0, 1, 0, 2 * MiB)


def _meta_off(fab, node=1, index=0):
    return fab.memory(node).layout.field_offset(index)


def test_poll_already_true():
    fab = Fabric(build_topology(1, 2, 4))
    res = run(fab, yield_from_event(fab.poll(1, _meta_off(fab), lambda m: True, 5000)))
    assert res.satisfied and res.time_ns == 0


def test_poll_sees_write_on_next_tick():
    fab = Fabric(build_topology(1, 2, 4))
    off = _meta_off(fab)

    def writer():
        yield fab.env.timeout(us_to_ns(10))
        fab.store(1, off, MetadataField(1, 1, 64).pack())

    fab.env.process(writer())
    pred = lambda m: MetadataField.unpack(m.data.read(off, 32)).tail_ptr != 0
    res = run(fab, yield_from_event(fab.poll(1, off, pred, us_to_ns(100), interval_ns=us_to_ns(1))))
    assert res.satisfied
    assert us_to_ns(10) <= res.time_ns <= us_to_ns(11)
    assert fab.core_busy_ns[1] == res.waited_ns


def test_poll_timeout_is_result():
    fab = Fabric(build_topology(1, 2, 4))
    off = _meta_off(fab)

    def writer():
        yield fab.env.timeout(us_to_ns(10))
        fab.store(1, off, MetadataField(1, 1, 64).pack())

    fab.env.process(writer())
    pred = lambda m: MetadataField.unpack(m.data.read(off, 32)).tail_ptr != 0
    res = run(fab, yield_from_event(fab.poll(1, off, pred, us_to_ns(5), interval_ns=us_to_ns(1))))
    assert not res.satisfied and res.time_ns == us_to_ns(5)


def test_poll_rejects_app_area():
    fab = Fabric(build_topology(1, 2, 4))
    with pytest.raises(FabricError):
        fab.poll(0, 0, lambda m: True, 10)


def test_cut_link_swallows_writes():
    fab = Fabric(build_topology(1, 2, 4))
    fab.cut_link(0, 1)
    ev = fab.write_field(0, 1, 0, MetadataField(1, 1, 1))
    fab.env.run()
    assert not ev.triggered
    fab.restore_link(0, 1)
    assert fab.link_up(1, 0)


def test_next_tick():
    assert next_tick(0, 10, 3) == 12
    assert next_tick(5, 5, 3) == 5
    assert next_tick(5, 2, 3) == 5


def test_trace_csv_roundtrip(tmp_path):
    tr = Trace()
    tr.add(5, 1, "send_stage", 2, 100, "ev=1 chunk=1")
    text = tr.to_csv(tmp_path / "t.csv")
    assert text.splitlines()[0] == "time_ns,node,op,peer,size,detail"
    assert Trace.from_csv(text).records == tr.records


def test_fabric_from_config_keys():
    cfg = {"topology": {"chips": 2, "dies_per_chip": 2, "cores_per_die": 8},
           "latency": {"mem_startup_us": 3.0, "dma_startup_us": 9.0, "bandwidth_gbps": 50.0,
                       "core_efficiency": 0.5}}
    fab = fabric_from_config(cfg)
    assert fab.topology.total_dies == 4
    assert fab.latency.bandwidth_gbps == 50.0
    with pytest.raises(ConfigError):
        fabric_from_config({"topology": {"dies_per_chip": 2}})
    with pytest.raises(ConfigError):
        fabric_from_config({"topology": {"chips": 1}, "latency": {"bogus": 1}})


def test_determinism_same_seed_same_trace():
    def once():
        fab = Fabric(build_topology(1, 2, 4), LatencyModel(jitter_sigma=0.3), seed=7)
        for i in range(5):
            fab.mem_write(0, 1, i * 4096, bytes([i]) * 3000, 2)
        fab.env.run()
        return fab.trace.to_csv()

    assert once() == once()
