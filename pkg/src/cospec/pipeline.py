"""Discrete-event engine for the speculation cluster / verification server loop.

The engine repeatedly asks the scheduler for a batch, drafts it on the
cluster, verifies it on the server and feeds the results back into the
request pool. In ``pipelined`` mode the cluster drafts the next batch while
the server verifies the current one; in ``sequential`` mode the stages
alternate. Time is virtual (latency model) unless ``timing="measured"``.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .core import EmbeddingTable, Vocabulary
from .drafting import (RoutingMatrix, RoutingPolicy, cooperative_generate, route_request,
                       tree_selection, update_routing)
from .sampling import Sampler
from .scheduler import (AffineLatency, LatencyModel, Request, SchedulerConfig, batch_assign,
                        update_gamma)
from .verification import verify_tree

log = logging.getLogger(__name__)

TRACE_VERSION = "cospec-trace/1"
MS_PER_HOUR = 3_600_000.0

# default rent rates in $/hr: 2080Ti-class drafter, 3090-class drafter, A100-class verifier
RATE_2080TI = 0.12
RATE_3090 = 0.22
RATE_A100 = 5.67


class SchedulingError(RuntimeError):
    pass


class TraceError(ValueError):
    pass


@dataclass
class DrafterSpec:
    name: str
    model: object
    domain: str = ""
    cost_rate: float = RATE_2080TI
    ssm: AffineLatency | None = None     # overrides the cluster-wide drafting latency

    def __post_init__(self):
        if self.cost_rate < 0:
            raise ValueError("cost rate must be >= 0")


@dataclass
class ClusterSpec:
    vocab: Vocabulary
    embeddings: EmbeddingTable
    target: object
    drafters: list
    verifier_cost_rate: float = RATE_A100
    latency: LatencyModel = field(default_factory=LatencyModel)

    def __post_init__(self):
        if not self.drafters:
            raise ValueError("cluster needs at least one drafter")
        if self.verifier_cost_rate < 0:
            raise ValueError("cost rate must be >= 0")
        sizes = {d.model.vocab_size for d in self.drafters} | {self.target.vocab_size}
        if sizes != {self.vocab.size}:
            raise ValueError(f"target and drafters must share the {self.vocab.size}-token vocabulary")
        if len(self.embeddings) != self.vocab.size:
            raise ValueError("embedding table does not cover the vocabulary")

    def cost_rates(self) -> dict:
        rates = {d.name: d.cost_rate for d in self.drafters}
        rates["verifier"] = self.verifier_cost_rate
        return rates

    def node_ssm(self, n: int) -> AffineLatency:
        return self.drafters[n].ssm or self.latency.ssm


@dataclass
class PipelineConfig:
    mode: str = "pipelined"          # pipelined | sequential
    seed: int = 0
    routing: RoutingPolicy = field(default_factory=RoutingPolicy)
    timing: str = "virtual"          # virtual | measured
    mem_base: float = 1.0
    mem_per_token: float = 0.0
    participation_queue_low: int | None = None
    participation_queue_high: int | None = None

    def __post_init__(self):
        if self.mode not in ("pipelined", "sequential"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.timing not in ("virtual", "measured"):
            raise ValueError(f"unknown timing {self.timing!r}")


class InProcessCluster:
    """Drafting backend that calls the drafter models directly."""

    def __init__(self, cluster: ClusterSpec):
        self.models = {i: d.model for i, d in enumerate(cluster.drafters)}

    def generate(self, request_id: int, nodes, prefix, K):
        return cooperative_generate({n: self.models[n] for n in nodes}, prefix, K)

    def close(self):
        pass


@dataclass
class _Batch:
    id: int
    reqs: list
    gammas: list
    routes: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    trees: list = field(default_factory=list)
    results: list = field(default_factory=list)
    draft_ms: float = 0.0


@dataclass
class RunResult:
    metrics: "Metrics"
    trace: list
    outputs: dict


def load_workload(path) -> list[Request]:
    """JSON Lines: ``{"arrival_ms", "prompt", "max_new", "domain"}`` per request."""
    reqs = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                reqs.append(Request(
                    id=len(reqs),
                    prompt=tuple(int(t) for t in doc["prompt"]),
                    max_new=int(doc.get("max_new", 128)),
                    arrival_ms=float(doc.get("arrival_ms", 0.0)),
                    domain=str(doc.get("domain", "")),
                ))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad workload record ({exc})") from None
    if not reqs:
        raise ValueError(f"{path}: empty workload")
    return reqs


def dump_workload(reqs: Sequence[Request], path) -> None:
    with Path(path).open("w") as fh:
        for r in reqs:
            fh.write(json.dumps({"arrival_ms": r.arrival_ms, "prompt": list(r.prompt),
                                 "max_new": r.max_new, "domain": r.domain}) + "\n")


class Simulator:
    def __init__(self, workload: Sequence[Request], cluster: ClusterSpec,
                 sched: SchedulerConfig, cfg: PipelineConfig, backend=None):
        if not workload:
            raise ValueError("workload is empty")
        self.cluster = cluster
        self.sched = sched
        self.cfg = cfg
        self.backend = backend or InProcessCluster(cluster)
        self.vocab = cluster.vocab
        self.requests = {}
        for r in workload:
            if r.max_new < 1:
                raise ValueError(f"request {r.id}: max_new must be >= 1")
            self.vocab.check_seq(r.prompt)
            req = Request(r.id, tuple(r.prompt), r.max_new, r.arrival_ms, r.domain,
                          gamma=sched.gamma0)
            self.requests[req.id] = req
        self.route_rng = {i: Sampler.for_request(cfg.seed, i, 0) for i in self.requests}
        self.verify_rng = {i: Sampler.for_request(cfg.seed, i, 1) for i in self.requests}
        self.matrix = RoutingMatrix(len(cluster.drafters))
        self.pending: dict[int, Request] = {}
        self.inflight: set[int] = set()
        self.completed: set[int] = set()
        self.events: list = []
        self.seq = 0
        self.now = 0.0
        self.cluster_busy = False
        self.server_busy = False
        self.waiting: list[_Batch] = []
        self.batch_counter = 0
        self.trace: list[dict] = []

    def _push(self, t, kind, payload=None):
        heapq.heappush(self.events, (t, self.seq, kind, payload))
        self.seq += 1

    def _emit(self, kind, **fields):
        ev = {"t": self.now, "kind": kind}
        ev.update(fields)
        self.trace.append(ev)

    def run(self) -> RunResult:
        for req in sorted(self.requests.values(), key=lambda r: (r.arrival_ms, r.id)):
            self._push(req.arrival_ms, "arrival", req.id)
        header = {"version": TRACE_VERSION, "mode": self.cfg.mode, "seed": self.cfg.seed,
                  "cost_rates": self.cluster.cost_rates()}
        try:
            while self.events:
                self.now, _, kind, payload = heapq.heappop(self.events)
                getattr(self, f"_on_{kind}")(payload)
                # settle every event at this instant before planning a batch
                if self.events and self.events[0][0] == self.now:
                    continue
                self._dispatch()
        finally:
            self.backend.close()
        stuck = set(self.requests) - self.completed
        if stuck:
            raise SchedulingError(f"requests {sorted(stuck)[:5]} never completed")
        metrics = compute_metrics(self.trace, header["cost_rates"])
        outputs = {i: tuple(r.generated) for i, r in self.requests.items()}
        return RunResult(metrics, [header] + self.trace, outputs)

    def _on_arrival(self, rid):
        req = self.requests[rid]
        self.pending[rid] = req
        self.matrix.add(rid, inherit=self.cfg.routing.inherit_column_means)
        self._emit("arrival", req=rid, domain=req.domain, max_new=req.max_new,
                   prompt_len=len(req.prompt))

    def _can_dispatch(self) -> bool:
        if self.cluster_busy or not self.pending or self.waiting:
            return False
        if self.cfg.mode == "sequential" and self.server_busy:
            return False
        return True

    def _fanout(self) -> int:
        base = self.cfg.routing.fanout
        low, high = self.cfg.participation_queue_low, self.cfg.participation_queue_high
        n = len(self.cluster.drafters)
        if low is not None or high is not None:
            depth = int(self.server_busy) + len(self.waiting)
            if low is not None and depth <= low:
                base += 1
            elif high is not None and depth >= high:
                base -= 1
        return max(1, min(base, n))

    def _plan(self):
        pool = [self.pending[i] for i in sorted(self.pending)]
        for r in pool:
            r.mem = self.cfg.mem_base + self.cfg.mem_per_token * r.seq_len
        plan = batch_assign(pool, self.sched, self.cluster.latency)
        if plan.infeasible and any(r.gamma > 1 for r in pool):
            log.info("no feasible batch (%s); retrying with unit draft budgets", plan.infeasible)
            for r in pool:
                r.gamma = 1
            plan = batch_assign(pool, self.sched, self.cluster.latency)
        return pool, plan

    def _dispatch(self):
        if not self._can_dispatch():
            return
        pool, plan = self._plan()
        if plan.infeasible:
            if not (self.server_busy or self.inflight):
                raise SchedulingError(
                    f"no feasible batch: '{plan.infeasible}' constraint violated "
                    f"(T_max={self.sched.t_max}, M_max={self.sched.m_max}, "
                    f"Gamma_max={self.sched.gamma_max})")
            return
        if self.server_busy and plan.b == len(pool):
            # drafting ahead would split off a partial batch; requests coming
            # back from the server could still join this one, so wait for them
            return
        batch = _Batch(self.batch_counter, [pool[i].id for i in plan.selected], list(plan.gammas))
        self.batch_counter += 1
        fanout = self._fanout()
        b, l = plan.b, plan.critical_len
        started = time.perf_counter()
        draft_ms = 0.0
        busy = defaultdict(float)
        for rid, gamma in zip(batch.reqs, batch.gammas):
            req = self.pending.pop(rid)
            self.inflight.add(rid)
            route = route_request(self.matrix[rid], self.cfg.routing, req.accept_len_last,
                                  self.route_rng[rid], fanout=fanout)
            ctx = req.prompt + tuple(req.generated)
            rnd = self.backend.generate(rid, route, ctx, gamma)
            batch.routes.append(route)
            batch.rounds.append(rnd)
            batch.trees.append(tree_selection(rnd, gamma))
            draft_ms = max(draft_ms, max(self.cluster.node_ssm(n)(b, l, gamma) for n in route))
        if self.cfg.timing == "measured":
            draft_ms = (time.perf_counter() - started) * 1000.0
        for route in batch.routes:
            for n in route:
                busy[self.cluster.drafters[n].name] += draft_ms / b
        batch.draft_ms = draft_ms
        self.cluster_busy = True
        self._emit("draft_start", batch=batch.id, reqs=batch.reqs, gammas=batch.gammas,
                   routes=[list(r) for r in batch.routes], ms=draft_ms)
        self._push(self.now + draft_ms, "draft_done", (batch, dict(sorted(busy.items()))))

    def _on_draft_done(self, payload):
        batch, busy = payload
        self.cluster_busy = False
        self._emit("draft_done", batch=batch.id, busy=busy)
        self.waiting.append(batch)
        self._start_verify()

    def _start_verify(self):
        if self.server_busy or not self.waiting:
            return
        batch = self.waiting.pop(0)
        started = time.perf_counter()
        for rid, tree in zip(batch.reqs, batch.trees):
            req = self.requests[rid]
            ctx = req.prompt + tuple(req.generated)
            batch.results.append(verify_tree(self.cluster.target, ctx, tree, self.verify_rng[rid]))
        tokens = sum(len(t) for t in batch.trees)
        b = len(batch.reqs)
        l = max(self.requests[r].seq_len for r in batch.reqs)
        ms = self.cluster.latency.t_llm(b, l, tokens)
        if self.cfg.timing == "measured":
            ms = (time.perf_counter() - started) * 1000.0
        self.server_busy = True
        self._emit("verify_start", batch=batch.id, tokens=tokens)
        self._push(self.now + ms, "verify_done", (batch, ms))

    def _on_verify_done(self, payload):
        batch, ms = payload
        eos = self.vocab.eos_id
        for rid, rnd, tree, res in zip(batch.reqs, batch.rounds, batch.trees, batch.results):
            req = self.requests[rid]
            res.per_node_draft = {n: tuple(rnd.own[n].tokens) for n in rnd.nodes}
            kept = []
            for tok in res.accepted:
                if len(req.generated) + len(kept) >= req.max_new:
                    break
                kept.append(tok)
                if tok == eos:
                    break
            req.generated.extend(kept)
            req.steps += 1
            update_routing(self.matrix, rid, rnd, res, self.cluster.embeddings, self.cfg.routing)
            update_gamma(req, res.accept_len, self.sched)
            self.inflight.discard(rid)
            self._emit("verify", req=rid, batch=batch.id, accept_len=res.accept_len,
                       emitted=kept, kept_drafts=min(res.accept_len, len(kept)),
                       tree=len(tree), nodes=list(rnd.nodes))
            if (kept and kept[-1] == eos) or req.remaining <= 0:
                self.completed.add(rid)
                self.matrix.remove(rid)
                self._emit("complete", req=rid, tokens=len(req.generated))
            else:
                self.pending[rid] = req
        self.server_busy = False
        self._emit("verify_done", batch=batch.id, busy={"verifier": ms})
        self._start_verify()


def run(workload: Sequence[Request], cluster: ClusterSpec, sched: SchedulerConfig,
        cfg: PipelineConfig, backend=None) -> RunResult:
    return Simulator(workload, cluster, sched, cfg, backend).run()


@dataclass
class Metrics:
    requests: int
    tokens: int
    makespan_ms: float
    latency_ms_per_token: float
    throughput_tok_s: float
    cost_total: float
    cost_per_token: float
    verification_steps: int
    mean_accept_len: float
    acceptance_ratio: float
    tokens_per_step: float
    busy_ms: dict = field(default_factory=dict)
    by_domain: dict = field(default_factory=dict)
    by_batch_size: dict = field(default_factory=dict)

    UNITS = {
        "requests": "count", "tokens": "tokens", "makespan_ms": "ms",
        "latency_ms_per_token": "ms/token", "throughput_tok_s": "tokens/s",
        "cost_total": "$", "cost_per_token": "$/token", "verification_steps": "count",
        "mean_accept_len": "tokens", "acceptance_ratio": "tokens/step",
        "tokens_per_step": "tokens/step",
    }

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "unit"])
        for name, unit in self.UNITS.items():
            w.writerow([name, repr(getattr(self, name)), unit])
        return buf.getvalue()

    def batch_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["batches", "mean_stage_ms", "latency_ms_per_token", "throughput_tok_s"]
        w.writerow(["batch_size"] + cols)
        for size in sorted(self.by_batch_size, key=int):
            row = self.by_batch_size[size]
            w.writerow([size] + [repr(row[c]) for c in cols])
        return buf.getvalue()

    def domain_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["requests", "steps", "mean_accept_len", "tokens_per_step"]
        w.writerow(["domain"] + cols)
        for dom in sorted(self.by_domain):
            row = self.by_domain[dom]
            w.writerow([dom] + [repr(row[c]) for c in cols])
        return buf.getvalue()


def compute_metrics(trace: Sequence[dict], cost_rates: dict) -> Metrics:
    """Derive all metrics from trace events (a leading header line is skipped)."""
    events = [e for e in trace if "kind" in e]
    if not events:
        raise TraceError("no events")
    arrival, domain, done, ntok = {}, {}, {}, {}
    busy = defaultdict(float)
    steps = accept_sum = kept_sum = emitted_sum = 0
    dom_stats = defaultdict(lambda: {"requests": 0, "steps": 0, "accept": 0, "emitted": 0})
    batch_size, draft_ms, verify_ms, batch_tokens = {}, {}, {}, defaultdict(int)
    for e in events:
        kind = e["kind"]
        if kind == "arrival":
            arrival[e["req"]] = e["t"]
            domain[e["req"]] = e.get("domain", "")
            dom_stats[domain[e["req"]]]["requests"] += 1
        elif kind == "complete":
            done[e["req"]] = e["t"]
            ntok[e["req"]] = e["tokens"]
        elif kind == "verify":
            steps += 1
            accept_sum += e["accept_len"]
            kept_sum += e["kept_drafts"]
            emitted_sum += len(e["emitted"])
            d = dom_stats[domain.get(e["req"], "")]
            d["steps"] += 1
            d["accept"] += e["accept_len"]
            d["emitted"] += len(e["emitted"])
            batch_tokens[e["batch"]] += len(e["emitted"])
        elif kind == "draft_start":
            batch_size[e["batch"]] = len(e["reqs"])
            draft_ms[e["batch"]] = e["ms"]
        elif kind in ("draft_done", "verify_done"):
            for node, ms in e["busy"].items():
                busy[node] += ms
            if kind == "verify_done":
                verify_ms[e["batch"]] = e["busy"]["verifier"]
    if not done:
        raise TraceError("trace contains no completed requests")
    tokens = sum(ntok.values())
    makespan = max(e["t"] for e in events) - min(arrival.values())
    latencies = [(done[r] - arrival[r]) / ntok[r] for r in sorted(done)]
    cost_total = sum(cost_rates.get(node, 0.0) * ms / MS_PER_HOUR for node, ms in sorted(busy.items()))
    by_size = defaultdict(lambda: {"batches": 0, "stage_ms": 0.0, "tokens": 0, "req_tokens": 0.0})
    for bid, size in batch_size.items():
        if bid not in verify_ms:
            continue
        row = by_size[str(size)]
        stage = draft_ms[bid] + verify_ms[bid]
        row["batches"] += 1
        row["stage_ms"] += stage
        row["tokens"] += batch_tokens[bid]
    by_batch = {}
    for size, row in by_size.items():
        n = row["batches"]
        per_req_tokens = row["tokens"] / (n * int(size))
        by_batch[size] = {
            "batches": n,
            "mean_stage_ms": row["stage_ms"] / n,
            "latency_ms_per_token": (row["stage_ms"] / n) / per_req_tokens if per_req_tokens else 0.0,
            "throughput_tok_s": row["tokens"] / (row["stage_ms"] / 1000.0) if row["stage_ms"] else 0.0,
        }
    by_domain = {
        dom: {
            "requests": d["requests"],
            "steps": d["steps"],
            "mean_accept_len": d["accept"] / d["steps"] if d["steps"] else 0.0,
            "tokens_per_step": d["emitted"] / d["steps"] if d["steps"] else 0.0,
        }
        for dom, d in sorted(dom_stats.items())
    }
    return Metrics(
        requests=len(done),
        tokens=tokens,
        makespan_ms=makespan,
        latency_ms_per_token=sum(latencies) / len(latencies),
        throughput_tok_s=tokens / (makespan / 1000.0) if makespan > 0 else float("inf"),
        cost_total=cost_total,
        cost_per_token=cost_total / tokens,
        verification_steps=steps,
        mean_accept_len=accept_sum / steps if steps else 0.0,
        acceptance_ratio=kept_sum / steps if steps else 0.0,
        tokens_per_step=emitted_sum / steps if steps else 0.0,
        busy_ms=dict(sorted(busy.items())),
        by_domain=by_domain,
        by_batch_size=dict(sorted(by_batch.items(), key=lambda kv: int(kv[0]))),
    )


def write_trace(trace: Sequence[dict], path) -> None:
    with Path(path).open("w") as fh:
        for ev in trace:
            fh.write(json.dumps(ev) + "\n")


def read_trace(path) -> tuple[dict, list[dict]]:
    data = Path(path).read_bytes()
    if not data.strip():
        raise TraceError("no events")
    header, events = None, []
    offset = 0
    for raw in data.splitlines(keepends=True):
        line = raw.strip()
        if line:
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"parse error at byte offset {offset + exc.pos}: {exc.msg}") from None
            if header is None:
                if doc.get("version") != TRACE_VERSION:
                    raise TraceError(f"trace version {doc.get('version')!r} does not match {TRACE_VERSION!r}")
                header = doc
            else:
                events.append(doc)
        offset += len(raw)
    if not events:
        raise TraceError("no events")
    if data and not data.endswith(b"\n"):
        raise TraceError(f"parse error at byte offset {len(data)}: trace ends mid-line")
    return header, events


def replay(path) -> Metrics:
    header, events = read_trace(path)
    return compute_metrics(events, header["cost_rates"])
