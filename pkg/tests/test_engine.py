from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import replace

import numpy as np
import pytest

from src.cluster import ClusterSpec, paper_default
from src.config import ShardMode
from src.engine import (
    EventKind,
    ReplayOptions,
    StopRule,
    Trace,
    WorkerPool,
    generate_trace,
    inner_schedule,
    mean_breakdown,
    measure_staleness,
    read_trace,
    replay,
    runtime_breakdown,
    trace_hash,
    write_trace,
)
from src.engine.replay import _Replayer
from src.errors import SnapshotError, TraceError
from src.params import SnapshotStore, VersionId
from src.strategies import InnerConfig, NesterovConfig, StrategyConfig, strategy_preset
from src.workloads import QuadraticSpec

PASS_THROUGH = NesterovConfig(lr=1.0, beta=0.0)
CONSTANT_SGD = InnerConfig(kind="sgd", lr=0.1, warmup_fraction=0.0, floor_fraction=1.0, max_norm=None)


def _cluster(speeds, regions=("r",), lps=None, latency=None, message_bytes=1000, step_s=0.1, gps_region=None) -> ClusterSpec:
    n = len(regions)
    workers = [{"region": regions[i % n], "speed": s} for i, s in enumerate(speeds)]
    if lps is None:
        lps = [{"region": r, "members": [i for i, w in enumerate(workers) if w["region"] == r]} for r in regions]
    return ClusterSpec.model_validate({
        "regions": list(regions),
        "bandwidth_gbps": [[100.0 if i == j else 1.0 for j in range(n)] for i in range(n)],
        "latency_s": latency,
        "workers": workers,
        "lps": lps,
        "gps_region": gps_region or regions[0],
        "profiled_step_s": step_s,
        "message_bytes": message_bytes,
    })


def _halos(k=1, alpha=1.0, local_steps=1, inner=CONSTANT_SGD, server=PASS_THROUGH, local=PASS_THROUGH):
    return StrategyConfig(kind="halos", local_steps=local_steps, inner=inner, server=server,
                          local_server=local, accumulation=k, merge_alpha=alpha)


def _preset(name, **inner) -> StrategyConfig:
    raw = strategy_preset(name)
    raw["inner"] = {"kind": "sgd", "lr": 0.05, **inner}
    return StrategyConfig.model_validate(raw)


def _quadratic(dim=8, sources=1, **kw):
    return QuadraticSpec(dim=dim, num_sources=sources, **kw).build()


class TestGeneration:
    def test_single_worker_schedule(self):
        trace = generate_trace(_cluster([10.0]), _halos(), StopRule(max_worker_steps=5))
        kinds = [e.kind for e in trace if e.kind in (
            EventKind.WORKER_START, EventKind.WORKER_FINISH, EventKind.LPS_APPLY_DELTA)]
        assert kinds == [EventKind.WORKER_START, EventKind.WORKER_FINISH, EventKind.LPS_APPLY_DELTA] * 5

    def test_sequence_numbers_and_time(self):
        trace = generate_trace(paper_default(), _preset("halos-paper"), StopRule(max_time_s=60))
        assert [e.seq for e in trace] == list(range(len(trace)))
        assert all(a.t <= b.t for a, b in zip(trace.events, trace.events[1:]))

    def test_sync_round_has_one_barrier(self):
        trace = generate_trace(_cluster([10.0, 5.0, 2.0, 1.0]), _preset("sync-paper"), StopRule(max_time_s=5))
        barriers = trace.of_kind(EventKind.BARRIER)
        applies = trace.of_kind(EventKind.GPS_APPLY)
        assert len(barriers) == len(applies) > 0
        per_round = Counter(e.payload["round"] for e in barriers)
        assert set(per_round.values()) == {1}
        assert not trace.of_kind(EventKind.MSG_SEND)

    def test_lps_pushes_after_k_updates(self):
        trace = generate_trace(paper_default(), _preset("halos-paper"), StopRule(max_time_s=300))
        since = defaultdict(int)
        reached = defaultdict(int)
        sends = defaultdict(int)
        for event in trace:
            if event.kind is EventKind.LPS_APPLY_DELTA:
                since[event.actor] += 1
                if since[event.actor] == 32:
                    reached[event.actor] += 1
            elif event.kind is EventKind.MSG_SEND and event.payload["kind"] == "lps_delta":
                assert since[event.actor] == 32
                sends[event.actor] += 1
                since[event.actor] = 0
            elif event.kind is EventKind.LPS_MERGE:
                since[event.actor] = 0
        assert sum(sends.values()) > 0
        assert sends == reached

    def test_updates_are_conserved(self):
        trace = generate_trace(paper_default(), _preset("halos-paper"), StopRule(max_time_s=120))
        sent = {e.payload["msg"] for e in trace.of_kind(EventKind.MSG_SEND) if e.payload["kind"] == "worker_delta"}
        applied = [e.payload["msg"] for e in trace.of_kind(EventKind.LPS_APPLY_DELTA)]
        assert sorted(applied) == sorted(sent)
        pushed = {e.payload["msg"] for e in trace.of_kind(EventKind.MSG_SEND) if e.payload["kind"] == "lps_delta"}
        assert sorted(e.payload["msg"] for e in trace.of_kind(EventKind.GPS_APPLY)) == sorted(pushed)

    def test_strict_mode_keeps_one_delta_in_flight_per_lps(self):
        spec = _cluster([10.0, 8.0, 6.0, 4.0], regions=("a", "b"), message_bytes=10**8)
        strategy = _halos(k=2).model_copy(update={"strict_single_inflight": True})
        trace = generate_trace(spec, strategy, StopRule(max_worker_steps=200))
        outstanding = defaultdict(int)
        for e in trace:
            if e.kind is EventKind.MSG_SEND and e.payload["kind"] == "lps_delta":
                outstanding[e.actor] += 1
                assert outstanding[e.actor] == 1
            elif e.kind is EventKind.LPS_MERGE:
                outstanding[e.actor] -= 1
        assert trace.of_kind(EventKind.LPS_MERGE)
        report = replay(trace, spec, strategy, _quadratic(dim=4)).report
        assert not report.diverged

    def test_stop_rule_drains_in_flight_rounds(self):
        trace = generate_trace(_cluster([10.0, 3.0]), _preset("async-paper"), StopRule(max_worker_steps=200))
        starts = trace.of_kind(EventKind.WORKER_START)
        assert sum(e.payload["steps"] for e in starts) <= 200
        assert len(trace.of_kind(EventKind.WORKER_FINISH)) == len(starts)

    def test_generation_is_deterministic(self):
        a = generate_trace(paper_default(), _preset("halos-paper"), StopRule(max_time_s=60), "abc", 1)
        b = generate_trace(paper_default(), _preset("halos-paper"), StopRule(max_time_s=60), "abc", 1)
        assert trace_hash(a) == trace_hash(b)

    def test_file_round_trip(self, tmp_path):
        trace = generate_trace(_cluster([10.0, 4.0]), _halos(k=2), StopRule(max_worker_steps=20), "feed", 3)
        for name in ("trace.ndjson", "trace.ndjson.gz"):
            assert trace_hash(read_trace(write_trace(trace, tmp_path / name))) == trace_hash(trace)

    def test_unreadable_header(self, tmp_path):
        path = tmp_path / "bad.ndjson"
        path.write_text('{"seq": 0}\n', encoding="ascii")
        with pytest.raises(TraceError):
            read_trace(path)

    def test_stop_rule_needs_budget(self):
        with pytest.raises(ValueError):
            StopRule()


class TestReplay:
    def test_degenerate_hierarchy_is_sequential_sgd(self):
        task = _quadratic(optimum_scale=0.0, eig_max=1.0, seed=5)
        trace = generate_trace(_cluster([10.0]), _halos(), StopRule(max_worker_steps=1000))
        result = replay(trace, _cluster([10.0]), _halos(), task, ReplayOptions(retain_snapshots=True))
        shard = task.shard(1, ShardMode.IID, 0)[0]

        gps, start = task.init_params(), task.init_params()
        plain = task.init_params()
        for k in range(1000):
            grad, _ = task.grad(start, shard, k)
            delta = (start - 0.1 * grad) - start
            local = gps + delta
            gps = gps + (local - gps)
            start = local
            assert np.array_equal(result.snapshots.get(VersionId("gps", k + 1)), gps)
            plain = plain - 0.1 * task.grad(plain, shard, k)[0]
        assert np.array_equal(result.final_model, gps)
        # x + ((x - u) - x) rounds differently from x - u
        assert np.allclose(result.final_model, plain, rtol=1e-9, atol=1e-12)
        assert not result.report.diverged

    def test_replay_twice_is_identical(self):
        spec, strategy = paper_default(), _preset("halos-paper")
        task = _quadratic(dim=16, sources=16, zeta=0.5, noise=0.1)
        trace = generate_trace(spec, strategy, StopRule(max_time_s=60))
        first = replay(trace, spec, strategy, task)
        second = replay(trace, spec, strategy, task)
        assert first.report.to_json() == second.report.to_json()

    @pytest.mark.parametrize("preset", ["halos-paper", "async-paper", "diloco-dynupd-paper", "sync-paper"])
    def test_parallelism_does_not_change_results(self, preset):
        spec, strategy = paper_default(), _preset(preset)
        task = _quadratic(dim=16, sources=16, zeta=0.5, noise=0.1)
        trace = generate_trace(spec, strategy, StopRule(max_time_s=200))
        serial = replay(trace, spec, strategy, task, ReplayOptions(parallelism=1, shard_mode=ShardMode.NON_IID))
        threaded = replay(trace, spec, strategy, task, ReplayOptions(parallelism=4, shard_mode=ShardMode.NON_IID))
        assert serial.report.final_model_hash == threaded.report.final_model_hash
        assert serial.report.samples == threaded.report.samples

    def test_loss_decreases_and_tokens_are_counted(self):
        spec, strategy = _cluster([10.0, 6.0, 3.0]), _halos(k=2, alpha=0.5, local_steps=2)
        task = _quadratic(dim=8, seed=2)
        trace = generate_trace(spec, strategy, StopRule(max_worker_steps=400))
        report = replay(trace, spec, strategy, task, ReplayOptions(sample_every_s=1.0)).report
        assert report.samples[0].time == 0.0
        assert report.samples[-1].loss < report.samples[0].loss
        assert report.total_tokens == sum(e.payload["steps"] for e in trace.of_kind(EventKind.WORKER_START))
        assert report.global_updates == len(trace.of_kind(EventKind.GPS_APPLY))
        times = [s.time for s in report.samples]
        assert times == sorted(times) and len(set(times)) == len(times)

    def test_stop_at_loss_truncates(self):
        spec, strategy = _cluster([10.0]), _halos()
        task = _quadratic(seed=1)
        trace = generate_trace(spec, strategy, StopRule(max_worker_steps=500))
        target = task.full_loss(task.init_params()) / 2
        report = replay(trace, spec, strategy, task, ReplayOptions(stop_at_loss=target, sample_every_updates=1)).report
        assert report.truncated_at_seq is not None
        assert report.final_loss <= target

    def test_divergence_is_reported(self):
        spec = _cluster([10.0])
        strategy = StrategyConfig(kind="async_local_sgd", inner=InnerConfig(kind="sgd", lr=100.0, max_norm=None),
                                  server=PASS_THROUGH)
        trace = generate_trace(spec, strategy, StopRule(max_worker_steps=2000))
        report = replay(trace, spec, strategy, _quadratic(seed=0), ReplayOptions(blowup_factor=None)).report
        assert report.diverged
        assert report.divergence_seq is not None and "non-finite" in report.diagnosis

    def _unstable(self, **options):
        spec = _cluster([10.0])
        inner = InnerConfig(kind="sgd", lr=2.5, warmup_fraction=0.0, floor_fraction=1.0, max_norm=None)
        strategy = StrategyConfig(kind="async_local_sgd", inner=inner, server=PASS_THROUGH)
        trace = generate_trace(spec, strategy, StopRule(max_worker_steps=60))
        # every coordinate flips sign and grows by 1.5 per step
        task = _quadratic(eig_min=1.0, eig_max=1.0, seed=2)
        return replay(trace, spec, strategy, task, ReplayOptions(sample_every_updates=1, **options)).report

    def test_finite_loss_blowup_is_divergence(self):
        report = self._unstable()
        assert report.diverged
        assert "exceeds" in report.diagnosis and report.divergence_seq is not None
        assert all(s.loss <= 1e3 * max(report.samples[0].loss, 1.0) for s in report.samples)

    def test_blowup_check_can_be_disabled(self):
        report = self._unstable(blowup_factor=None)
        assert not report.diverged
        assert report.final_loss > 1e6 * report.samples[0].loss

    def test_loss_cache_holds_only_live_versions(self):
        spec, strategy = _cluster([10.0, 4.0]), _halos(k=2)
        trace = generate_trace(spec, strategy, StopRule(max_worker_steps=60))
        replayer = _Replayer(trace, spec, strategy, _quadratic(dim=4), ReplayOptions(sample_every_updates=1), "", 0)
        with WorkerPool(1) as pool:
            result = replayer.run(pool)
        assert result.report.global_updates > 3
        assert list(replayer._loss_cache) == [VersionId("gps", result.report.global_updates)]

    def test_schedule_spans_busiest_worker(self):
        spec, strategy = _cluster([10.0, 5.0]), _halos(local_steps=4)
        trace = generate_trace(spec, strategy, StopRule(max_worker_steps=40))
        per_worker = Counter()
        for e in trace.of_kind(EventKind.WORKER_START):
            per_worker[e.actor] += e.payload["steps"]
        assert inner_schedule(trace, strategy).total_steps == max(per_worker.values())


class TestTraceValidation:
    spec = _cluster([10.0, 4.0])
    strategy = _halos(k=2)

    def _trace(self) -> Trace:
        return generate_trace(self.spec, self.strategy, StopRule(max_worker_steps=30), "cafe")

    def _replay(self, trace, **options):
        return replay(trace, self.spec, self.strategy, _quadratic(dim=4), ReplayOptions(**options))

    def test_consuming_before_arrival(self):
        trace = self._trace()
        events = list(trace.events)
        i = next(i for i, e in enumerate(events) if e.kind is EventKind.WORKER_START and i > 0)
        assert events[i - 1].kind is EventKind.MSG_ARRIVE and events[i - 1].t == events[i].t
        events[i - 1], events[i] = events[i], events[i - 1]
        events = [replace(e, seq=n) for n, e in enumerate(events)]
        with pytest.raises(TraceError):
            self._replay(Trace(trace.header, events))

    def test_dropped_update(self):
        trace = self._trace()
        drop = trace.of_kind(EventKind.LPS_APPLY_DELTA)[0].seq
        events = [replace(e, seq=n) for n, e in enumerate(e for e in trace.events if e.seq != drop)]
        with pytest.raises(TraceError):
            self._replay(Trace(trace.header, events))

    def test_sequence_gap(self):
        trace = self._trace()
        with pytest.raises(TraceError):
            self._replay(Trace(trace.header, trace.events[1:]))

    def test_time_going_backwards(self):
        trace = self._trace()
        events = list(trace.events)
        events[-1] = replace(events[-1], t=-1.0)
        with pytest.raises(TraceError):
            self._replay(Trace(trace.header, events))

    def test_header_mismatch(self):
        with pytest.raises(TraceError):
            self._replay(self._trace(), expected_config_hash="beef")
        other = StrategyConfig.model_validate({**strategy_preset("async-paper")})
        with pytest.raises(TraceError):
            replay(self._trace(), self.spec, other, _quadratic(dim=4))


class TestStaleness:
    def test_single_async_worker_has_none(self):
        spec = _cluster([10.0])
        strategy = StrategyConfig(kind="async_local_sgd", inner=CONSTANT_SGD, server=PASS_THROUGH)
        trace = generate_trace(spec, strategy, StopRule(max_worker_steps=50))
        report = replay(trace, spec, strategy, _quadratic(), ReplayOptions(retain_snapshots=True)).report
        assert report.staleness["d_g_hat"] == 0.0
        assert len(report.staleness["global_series"]) == 50

    def test_single_hierarchical_worker_has_none(self):
        spec = _cluster([10.0])
        trace = generate_trace(spec, _halos(), StopRule(max_worker_steps=50))
        report = replay(trace, spec, _halos(), _quadratic(), ReplayOptions(retain_snapshots=True)).report
        assert report.staleness["d_g_hat"] == 0.0
        assert report.staleness["d_l_hat"] <= 1e-12

    def test_slow_worker_sees_local_staleness(self):
        spec = _cluster([10.0, 1.0])
        trace = generate_trace(spec, _halos(k=4), StopRule(max_worker_steps=100))
        report = replay(trace, spec, _halos(k=4), _quadratic(), ReplayOptions(retain_snapshots=True)).report
        assert report.staleness["d_l_hat"] > 0.0

    def test_gps_latency_adds_global_staleness(self):
        # worker and LPS share region a; only the LPS-GPS hop carries latency
        layout = dict(regions=("a", "b"), lps=[{"region": "a", "members": [0]}], gps_region="b")
        fast = _cluster([10.0], **layout)
        slow = _cluster([10.0], latency=[[0.0, 1.0], [1.0, 0.0]], **layout)
        d = []
        for spec in (fast, slow):
            trace = generate_trace(spec, _halos(), StopRule(max_worker_steps=60))
            d.append(replay(trace, spec, _halos(), _quadratic(), ReplayOptions(retain_snapshots=True)).report
                     .staleness["d_g_hat"])
        assert d[0] <= d[1]
        assert d[1] > 0.0

    def test_needs_retained_snapshots(self):
        trace = generate_trace(_cluster([10.0]), _halos(), StopRule(max_worker_steps=5))
        with pytest.raises(SnapshotError):
            measure_staleness(trace, SnapshotStore())


class TestRuntimeBreakdown:
    def test_fractions_sum_to_one(self):
        trace = generate_trace(paper_default(), _preset("diloco-paper"), StopRule(max_time_s=500))
        for split in runtime_breakdown(trace).values():
            total = split.compute_fraction + split.comm_fraction + split.stall_fraction
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_free_network_is_all_compute(self):
        spec = _cluster([10.0, 7.0], message_bytes=1)
        strategy = StrategyConfig(kind="async_local_sgd", local_steps=4, inner=CONSTANT_SGD, server=PASS_THROUGH)
        trace = generate_trace(spec, strategy, StopRule(max_time_s=20))
        assert mean_breakdown(runtime_breakdown(trace)).compute_fraction == pytest.approx(1.0, abs=1e-6)

    def test_synchronous_sgd_is_communication_bound(self):
        trace = generate_trace(paper_default(), _preset("sync-paper"), StopRule(max_time_s=400))
        assert 0.887 <= mean_breakdown(runtime_breakdown(trace)).comm_fraction <= 0.987

    def test_diloco_stalls_on_stragglers(self):
        trace = generate_trace(paper_default(), _preset("diloco-paper"), StopRule(max_time_s=1000))
        assert 0.375 <= mean_breakdown(runtime_breakdown(trace)).stall_fraction <= 0.575

    def test_async_workers_wait_on_transfers(self):
        trace = generate_trace(paper_default(), _preset("async-paper"), StopRule(max_time_s=600))
        assert 0.192 <= mean_breakdown(runtime_breakdown(trace)).comm_fraction <= 0.392

    def test_slow_straggler_stalls_fast_workers(self):
        spec = _cluster([1.0, 10.0, 10.0], message_bytes=1)
        trace = generate_trace(spec, _preset("sync-paper"), StopRule(max_time_s=20))
        split = runtime_breakdown(trace)
        for worker in ("w1", "w2"):
            assert split[worker].stall_fraction >= 0.89
