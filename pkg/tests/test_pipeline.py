import json
import math

import numpy as np
import pytest

from cospec.drafting import RoutingPolicy
from cospec.models import TabularModel
from cospec.pipeline import (PipelineConfig, SchedulingError, Simulator, TraceError, compute_metrics,
                             dump_workload, load_workload, read_trace, replay, run, write_trace)
from cospec.scheduler import Request, SchedulerConfig
from cospec.synthetic import make_workload

from conftest import point_mass_chain, tiny_cluster


def events(res, kind):
    return [e for e in res.trace[1:] if e["kind"] == kind]


class TestRun:
    def test_self_drafting_accepts_everything(self):
        chain = point_mass_chain(6)
        cl = tiny_cluster(chain, [chain])
        sched = SchedulerConfig(adapt_gamma=False, gamma0=4)
        res = run([Request(0, (0,), max_new=12)], cl, sched, PipelineConfig())
        verifies = events(res, "verify")
        assert len(verifies) == math.ceil(12 / 5)
        assert all(e["accept_len"] == 4 for e in verifies)
        assert res.outputs[0] == tuple((i + 1) % 5 for i in range(12))

    def test_one_token_one_verification(self, cluster, world):
        wl = make_workload(world, 1, seed=0, prompt_len=4, max_new=1)
        res = run(wl, cluster, SchedulerConfig(), PipelineConfig())
        assert len(events(res, "verify")) == 1
        assert len(res.outputs[0]) == 1

    def test_eos_completes_request(self):
        size = 4
        target = TabularModel(0, {}, [0.0, 0.0, 0.0, 1.0])
        cl = tiny_cluster(target, [TabularModel(0, {}, [0.25] * 4)])
        res = run([Request(0, (0,), max_new=50)], cl, SchedulerConfig(), PipelineConfig())
        assert res.outputs[0] == (size - 1,)
        assert events(res, "complete")[0]["tokens"] == 1

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_pipelined_not_slower_when_saturated(self, cluster, world, seed):
        # 40 requests against a 16-request memory cap: the pool stays well beyond two batches
        wl = make_workload(world, 40, seed=seed, prompt_len=8, max_new=16)
        pipe = run(wl, cluster, SchedulerConfig(), PipelineConfig("pipelined", seed))
        seq = run(wl, cluster, SchedulerConfig(), PipelineConfig("sequential", seed))
        assert pipe.metrics.makespan_ms <= seq.metrics.makespan_ms
        assert pipe.outputs == seq.outputs

    def test_deterministic_trace(self, cluster, small_workload, tmp_path):
        a = run(small_workload, cluster, SchedulerConfig(), PipelineConfig(seed=3))
        b = run(small_workload, cluster, SchedulerConfig(), PipelineConfig(seed=3))
        write_trace(a.trace, tmp_path / "a")
        write_trace(b.trace, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_event_order_and_lifecycle(self, cluster, small_workload):
        res = run(small_workload, cluster, SchedulerConfig(), PipelineConfig(seed=1))
        times = [e["t"] for e in res.trace[1:]]
        assert times == sorted(times)
        assert sorted(e["req"] for e in events(res, "complete")) == list(range(len(small_workload)))
        for r in small_workload:
            assert len(res.outputs[r.id]) <= r.max_new

    def test_pool_membership_is_exclusive(self, cluster, small_workload):
        sim = Simulator(small_workload, cluster, SchedulerConfig(), PipelineConfig(seed=2))
        original = sim._dispatch

        def checked():
            original()
            p, f, c = set(sim.pending), sim.inflight, sim.completed
            assert not (p & f) and not (p & c) and not (f & c)
            assert set(sim.matrix.rows) == p | f
        sim._dispatch = checked
        sim.run()

    def test_infeasible_names_constraint(self, cluster, small_workload):
        with pytest.raises(SchedulingError, match="memory"):
            run(small_workload, cluster, SchedulerConfig(m_max=0.5), PipelineConfig())

    def test_measured_timing_runs(self, cluster, small_workload):
        virt = run(small_workload, cluster, SchedulerConfig(), PipelineConfig(seed=4))
        meas = run(small_workload, cluster, SchedulerConfig(), PipelineConfig(seed=4, timing="measured"))
        assert meas.outputs == virt.outputs

    def test_participation_hook_widens_fanout(self, cluster, small_workload):
        cfg = PipelineConfig(seed=0, routing=RoutingPolicy(fanout=1), participation_queue_low=0)
        res = run(small_workload, cluster, SchedulerConfig(), cfg)
        first = events(res, "draft_start")[0]
        assert all(len(r) == 2 for r in first["routes"])


class TestMetrics:
    def trace(self):
        return [
            {"t": 0.0, "kind": "arrival", "req": 0, "domain": "x"},
            {"t": 0.0, "kind": "draft_start", "batch": 0, "reqs": [0], "ms": 400.0},
            {"t": 400.0, "kind": "draft_done", "batch": 0, "busy": {"a": 400.0}},
            {"t": 1000.0, "kind": "verify", "req": 0, "batch": 0, "accept_len": 9, "emitted": list(range(10)),
             "kept_drafts": 9},
            {"t": 1000.0, "kind": "complete", "req": 0, "tokens": 10},
            {"t": 1000.0, "kind": "verify_done", "batch": 0, "busy": {"verifier": 600.0}},
        ]

    def test_definitions(self):
        m = compute_metrics(self.trace(), {"a": 1.0, "b": 2.0, "verifier": 3.0})
        assert m.latency_ms_per_token == 100.0 and m.throughput_tok_s == 10.0
        assert m.busy_ms.get("b", 0.0) == 0.0
        assert m.cost_total == pytest.approx((400 * 1.0 + 600 * 3.0) / 3.6e6)
        assert m.mean_accept_len == 9 and m.tokens_per_step == 10

    def test_cost_is_linear_in_rates(self, cluster, small_workload):
        res = run(small_workload, cluster, SchedulerConfig(), PipelineConfig())
        rates = cluster.cost_rates()
        one = compute_metrics(res.trace, rates).cost_per_token
        two = compute_metrics(res.trace, {k: 2 * v for k, v in rates.items()}).cost_per_token
        assert two == 2 * one

    def test_csv_outputs(self, cluster, small_workload):
        m = run(small_workload, cluster, SchedulerConfig(), PipelineConfig()).metrics
        assert m.summary_csv().startswith("metric,value,unit\n")
        assert m.batch_csv().splitlines()[0].startswith("batch_size,")
        assert len(m.domain_csv().splitlines()) == 1 + len({r.domain for r in small_workload})
        assert json.loads(m.to_json())["requests"] == len(small_workload)


class TestTraceFiles:
    def test_replay_round_trip(self, cluster, small_workload, tmp_path):
        res = run(small_workload, cluster, SchedulerConfig(), PipelineConfig(seed=5))
        write_trace(res.trace, tmp_path / "t.jsonl")
        assert replay(tmp_path / "t.jsonl") == res.metrics

    def test_truncated(self, cluster, small_workload, tmp_path):
        res = run(small_workload, cluster, SchedulerConfig(), PipelineConfig())
        write_trace(res.trace, tmp_path / "t.jsonl")
        data = (tmp_path / "t.jsonl").read_bytes()
        (tmp_path / "cut.jsonl").write_bytes(data[: len(data) // 2])
        with pytest.raises(TraceError, match="byte offset"):
            read_trace(tmp_path / "cut.jsonl")

    def test_empty_and_wrong_version(self, tmp_path):
        (tmp_path / "e").write_text("")
        with pytest.raises(TraceError, match="no events"):
            replay(tmp_path / "e")
        (tmp_path / "v").write_text('{"version": "other"}\n{"t": 0, "kind": "arrival"}\n')
        with pytest.raises(TraceError, match="version"):
            replay(tmp_path / "v")

    def test_workload_round_trip(self, small_workload, tmp_path):
        dump_workload(small_workload, tmp_path / "w.jsonl")
        back = load_workload(tmp_path / "w.jsonl")
        assert [(r.prompt, r.max_new, r.domain) for r in back] == \
               [(r.prompt, r.max_new, r.domain) for r in small_workload]
        (tmp_path / "bad.jsonl").write_text('{"max_new": 3}\n')
        with pytest.raises(ValueError, match="bad.jsonl:1"):
            load_workload(tmp_path / "bad.jsonl")


def test_cluster_validation(world):
    from cospec.pipeline import ClusterSpec, DrafterSpec
    other = TabularModel(0, {}, np.full(4, 0.25))
    with pytest.raises(ValueError):
        ClusterSpec(world.vocab, world.embeddings, world.target, [DrafterSpec("x", other)])
    with pytest.raises(ValueError):
        ClusterSpec(world.vocab, world.embeddings, world.target, [])
