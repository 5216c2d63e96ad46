"""Command-line entry point: ``cospec {run,check-dist,calibrate,replay,synth}``.

The run config is one JSON document::

    {
      "vocabulary": "vocab.json",
      "target": "target.json",
      "drafters": [{"name": "d0", "model": "d0.json", "domain": "physics",
                    "cost_rate": 0.12, "ssm": {"c0": 1.0, "cb": 0.5}}],
      "verifier_cost_rate": 5.67,
      "latency": {"ssm": {...}, "llm": {...}},
      "scheduler": {"lam": 0.01, "m_max": 16, ...},
      "routing": {"alpha": 0.9, "beta": 0.6, "tau": 2.0, "fanout": 2},
      "pipeline": {"mode": "pipelined", "seed": 0, "timing": "virtual",
                   "transport": "inprocess", "node_timeout_ms": 50},
      "output": "out"
    }

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .core import DomainError, load_vocabulary, vocabulary_to_dict
from .drafting import RoutingPolicy
from .models import TabularModel
from .oracle import check_distribution
from .pipeline import (ClusterSpec, DrafterSpec, PipelineConfig, SchedulingError, TraceError,
                       dump_workload, load_workload, replay, run, write_trace)
from .scheduler import (AffineLatency, CalibrationError, LatencyModel, SchedulerConfig, calibrate,
                        read_samples)

log = logging.getLogger("cospec")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
TVD_TOL = 1e-12
MAX_SEED = (1 << 64) - 1


class ConfigError(ValueError):
    pass


def _seed(text: str) -> int:
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= val <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return val


def _bounded(lo: int, hi: int | None = None):
    def parse(text: str) -> int:
        try:
            val = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if val < lo or (hi is not None and val > hi):
            rng = f">= {lo}" if hi is None else f"in [{lo}, {hi}]"
            raise argparse.ArgumentTypeError(f"value must be {rng}, got {val}")
        return val
    return parse


def load_config(path) -> dict:
    """Parse the run config into ready-to-use objects."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    base = path.parent

    def resolve(p):
        if p is None:
            raise ConfigError(f"{path}: missing required file reference")
        p = Path(p)
        full = p if p.is_absolute() else base / p
        if not full.exists():
            raise ConfigError(f"{path}: referenced file not found: {full}")
        return full

    try:
        vocab, table = load_vocabulary(resolve(doc.get("vocabulary")))
        if table is None:
            raise ConfigError(f"{path}: vocabulary file carries no embeddings")
        target = TabularModel.load(resolve(doc.get("target")))
        latency = LatencyModel.from_dict(doc.get("latency", {}))
        drafters = []
        for i, d in enumerate(doc.get("drafters", [])):
            ssm = AffineLatency.from_dict(d["ssm"]) if "ssm" in d else None
            drafters.append(DrafterSpec(d.get("name", f"drafter{i}"), TabularModel.load(resolve(d.get("model"))),
                                        d.get("domain", ""), float(d.get("cost_rate", 0.12)), ssm))
        cluster = ClusterSpec(vocab, table, target, drafters,
                              float(doc.get("verifier_cost_rate", 5.67)), latency)
        sched = SchedulerConfig.from_dict(doc.get("scheduler", {}))
        routing = RoutingPolicy(**doc.get("routing", {}))
        pipe = dict(doc.get("pipeline", {}))
        transport = pipe.pop("transport", "inprocess")
        timeout_ms = float(pipe.pop("node_timeout_ms", 50.0))
        pcfg = PipelineConfig(routing=routing, **pipe)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None
    if transport not in ("inprocess", "loopback", "tcp"):
        raise ConfigError(f"{path}: unknown transport {transport!r}")
    return {"cluster": cluster, "scheduler": sched, "pipeline": pcfg, "transport": transport,
            "timeout_s": timeout_ms / 1000.0, "output": doc.get("output"), "base": base}


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    wl_path = Path(args.workload)
    if not wl_path.exists():
        print(f"error: workload file not found: {wl_path}", file=sys.stderr)
        return EXIT_USAGE
    try:
        workload = load_workload(wl_path)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    pcfg: PipelineConfig = cfg["pipeline"]
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        pcfg = PipelineConfig(**{**pcfg.__dict__, **overrides})
    out = Path(args.out or cfg["output"] or "out")
    if not out.is_absolute() and not args.out and cfg["output"]:
        out = cfg["base"] / out
    backend = None
    if cfg["transport"] != "inprocess":
        from .net import NetworkCluster
        models = {i: d.model for i, d in enumerate(cfg["cluster"].drafters)}
        backend = NetworkCluster(models, cfg["transport"], cfg["timeout_s"])
    try:
        result = run(workload, cfg["cluster"], cfg["scheduler"], pcfg, backend)
    except (SchedulingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out.mkdir(parents=True, exist_ok=True)
    write_trace(result.trace, out / "trace.jsonl")
    m = result.metrics
    (out / "metrics.json").write_text(m.to_json())
    (out / "metrics.csv").write_text(m.summary_csv())
    (out / "plot_batch.csv").write_text(m.batch_csv())
    (out / "plot_domain.csv").write_text(m.domain_csv())
    print(f"{m.requests} requests, {m.tokens} tokens, makespan {m.makespan_ms:.3f} ms, "
          f"mean accept_len {m.mean_accept_len:.4f}, cost/token ${m.cost_per_token:.3e}; wrote {out}")
    return EXIT_OK


def cmd_check_dist(args) -> int:
    worst, worst_case = 0.0, None
    failures = 0
    for i, (case, tvd) in enumerate(check_distribution(args.trials, args.vocab, args.gamma,
                                                        args.seed, tree=args.tree)):
        if tvd > worst:
            worst, worst_case = tvd, (i, case)
        if tvd > TVD_TOL:
            failures += 1
    print(f"cases={args.trials} max_tvd={worst:.3e} tolerance={TVD_TOL:.0e}")
    if failures:
        i, case = worst_case
        print(f"FAIL: {failures} case(s) above tolerance; worst is case {i}", file=sys.stderr)
        json.dump(_describe_case(case), sys.stderr, indent=1)
        print(file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _describe_case(case) -> dict:
    doc = {"prefix": list(case.prefix), "target": case.target.to_dict()}
    if hasattr(case, "gamma"):
        doc.update(gamma=case.gamma, drafter=case.drafter.to_dict())
    else:
        doc.update(drafters=[d.to_dict() for d in case.drafters], branching=list(case.branching))
    return doc


def cmd_calibrate(args) -> int:
    try:
        samples = read_samples(args.samples)
        coef, stats = calibrate(samples)
    except FileNotFoundError:
        print(f"error: samples file not found: {args.samples}", file=sys.stderr)
        return EXIT_USAGE
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    doc = {"coefficients": coef.to_dict(), "residuals": stats}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        m = replay(args.trace)
    except FileNotFoundError:
        print(f"error: trace file not found: {args.trace}", file=sys.stderr)
        return EXIT_USAGE
    except TraceError as exc:
        print(f"error: {args.trace}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    sys.stdout.write(m.to_json())
    return EXIT_OK


def cmd_synth(args) -> int:
    """Write the bundled three-domain toy world as a ready-to-run config."""
    from .synthetic import build_world, make_workload
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = build_world(args.seed)
    (out / "vocab.json").write_text(json.dumps(vocabulary_to_dict(world.vocab, world.embeddings)))
    world.target.save(out / "target.json")
    drafters = []
    for dom, model in zip(world.domains, world.drafters):
        model.save(out / f"drafter-{dom}.json")
        drafters.append({"name": f"drafter-{dom}", "model": f"drafter-{dom}.json",
                         "domain": dom, "cost_rate": 0.12})
    config = {
        "vocabulary": "vocab.json",
        "target": "target.json",
        "drafters": drafters,
        "verifier_cost_rate": 5.67,
        "latency": LatencyModel().to_dict(),
        "scheduler": {"lam": 0.01, "m_max": 16},
        "routing": {"alpha": 0.9, "beta": 0.6, "tau": 2.0, "fanout": 2},
        "pipeline": {"mode": "pipelined", "seed": args.seed},
        "output": "out",
    }
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    dump_workload(make_workload(world, args.requests, args.seed, prompt_len=args.prompt_len,
                                max_new=args.max_new, arrival_gap_ms=args.arrival_gap_ms),
                  out / "workload.jsonl")
    print(f"wrote config.json, workload.jsonl and model files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cospec", description="Collaborative speculative decoding simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a workload and write trace, metrics and plot data")
    r.add_argument("--config", required=True, help="run config JSON")
    r.add_argument("--workload", required=True, help="workload JSON Lines file")
    r.add_argument("--mode", choices=("pipelined", "sequential"), help="override the config's mode")
    r.add_argument("--seed", type=_seed, help="override the config's seed (u64)")
    r.add_argument("--out", help="output directory (default: config 'output' or ./out)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check-dist", help="exact distribution-preservation check of verification")
    c.add_argument("--vocab", type=_bounded(2, 6), default=4, help="largest vocabulary size, 2..6 (default 4)")
    c.add_argument("--gamma", type=_bounded(1, 3), default=2, help="largest draft length or tree depth, 1..3 (default 2)")
    c.add_argument("--trials", type=_bounded(1), default=100, help="number of random cases (default 100)")
    c.add_argument("--seed", type=_seed, default=0, help="case generator seed (default 0)")
    c.add_argument("--tree", action="store_true", help="check multi-candidate trees instead of chains")
    c.set_defaults(func=cmd_check_dist)

    k = sub.add_parser("calibrate", help="fit the affine latency model to benchmark samples")
    k.add_argument("samples", help="CSV with header b,l,tokens,ms")
    k.add_argument("--out", help="also write the fitted model JSON here")
    k.set_defaults(func=cmd_calibrate)

    y = sub.add_parser("replay", help="recompute metrics from a saved trace")
    y.add_argument("trace", help="trace JSON Lines file")
    y.set_defaults(func=cmd_replay)

    s = sub.add_parser("synth", help="write the bundled three-domain demo config and workload")
    s.add_argument("--out", required=True, help="directory to write into")
    s.add_argument("--seed", type=_seed, default=0, help="world and workload seed (default 0)")
    s.add_argument("--requests", type=_bounded(1), default=100, help="number of requests (default 100)")
    s.add_argument("--prompt-len", type=_bounded(1), default=16, help="prompt length (default 16)")
    s.add_argument("--max-new", type=_bounded(1), default=32, help="tokens to generate per request (default 32)")
    s.add_argument("--arrival-gap-ms", type=float, default=0.0, help="spacing between arrivals (default 0)")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    level = os.environ.get("COSPEC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
