"""kvsim command line: gen-trace, simulate, sweep, analyze.

Exit codes: 0 success, 1 usage error, 2 input/validation error, 3 simulation abort.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence

from . import analysis
from .config import POLICIES, config_to_dict, load_config, with_overrides
from .core import ConfigError, kv_cache_bytes
from .engine import EngineConfig, SimulationAbort, pipeline_factor, run
from .predictor import BucketScheme, PredictionError, Predictor, PredictorSpec
from .report import (
    EVENT_COLUMNS,
    ITERATION_COLUMNS,
    SEQUENCE_COLUMNS,
    load_run,
    read_summary,
    write_run,
)
from .scheduler import UnschedulableError
from .trace import LengthDist, TraceError, generate_trace, read_trace, to_requests, write_trace

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("kvsim")

COMPARISON_COLUMNS = [
    "point", "status", "error", "policy", "num_gpus", "batch_cap", "accuracy", "pipeline_factor",
    "total_time_s", "makespan_s", "throughput_seqs_per_s", "sequences_completed",
    "sequences_within_slo", "average_batch_size", "num_iterations", "eviction_count",
    "generation_s", "penalty_s", "overhead_s",
]

OUTPUT_HELP = f"""\
output files:
  run_summary.json  run totals plus the effective config
  sequences.csv     {', '.join(SEQUENCE_COLUMNS)}
  iterations.csv    {', '.join(ITERATION_COLUMNS)}
  events.csv        {', '.join(EVENT_COLUMNS)}
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x != ""]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _setup_logging() -> None:
    level = os.environ.get("KVSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


# -- gen-trace ------------------------------------------------------------------

def cmd_gen_trace(args) -> int:
    try:
        output = LengthDist.parse(args.dist)
        prompt = LengthDist.parse(args.prompt_dist)
        records = generate_trace(args.count, output, seed=args.seed, prompt=prompt,
                                 arrival=args.arrival, max_seq_len=args.max_seq_len)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if args.predict_accuracy is not None:
        spec = PredictorSpec(mode="stochastic", bucket_accuracy=args.predict_accuracy,
                             rng_seed=args.seed)
        predictor = Predictor(spec, BucketScheme(args.max_seq_len, args.num_buckets))
        records = [type(r)(r.id, r.arrival_s, r.prompt_tokens, r.output_tokens,
                           predictor.predict(r.to_request()).bucket_index) for r in records]
    write_trace(args.out, records)
    log.info("wrote %d records to %s", len(records), args.out)
    return EXIT_OK


# -- simulate -------------------------------------------------------------------

def _load_inputs(config_path, trace_path):
    cfg = load_config(config_path)
    records = read_trace(trace_path, cfg.model)
    return cfg, records


def _run_point(cfg: EngineConfig, records, policy_name: str):
    requests, buckets = to_requests(records)
    return run(cfg, requests, buckets, policy_name=policy_name)


def _metadata(cfg: EngineConfig) -> Dict[str, Any]:
    return {"config": config_to_dict(cfg),
            "pipeline_factor_exact": pipeline_factor(cfg.model, cfg.gpu)}


def cmd_simulate(args) -> int:
    cfg, records = _load_inputs(args.config, args.trace)
    cfg = with_overrides(cfg, policy=args.policy, seed=args.seed, slo_per_token=args.slo_per_token,
                         gpus=args.gpus, batch_cap=args.batch_cap,
                         eviction_overlap=args.eviction_overlap)
    policy = args.policy or cfg.policy.mode.value
    report = _run_point(cfg, records, policy)
    write_run(report, args.out, _metadata(cfg))
    s = report.summary()
    print(f"{policy}: {s['sequences_completed']} sequences in {s['makespan_s']:.3f} s "
          f"({s['throughput_seqs_per_s']:.4f} seq/s), avg batch {s['average_batch_size']:.2f}, "
          f"{s['eviction_count']} evictions, {s['sequences_within_slo']} within SLO")
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------

def _sweep_point(job):
    index, cfg, records, policy, point_dir = job
    row = {"point": index, "policy": policy, "num_gpus": cfg.gpu.num_gpus,
           "batch_cap": cfg.batch_size_cap or 0, "accuracy": cfg.policy.bucket_accuracy,
           "pipeline_factor": pipeline_factor(cfg.model, cfg.gpu)}
    try:
        report = _run_point(cfg, records, policy)
    except (SimulationAbort, UnschedulableError, PredictionError, ConfigError, ValueError) as exc:
        row.update(status="error", error=str(exc))
        return row
    write_run(report, point_dir, _metadata(cfg))
    s = report.summary()
    row.update(status="ok", error="", **{k: s[k] for k in COMPARISON_COLUMNS if k in s})
    return row


def build_sweep(cfg: EngineConfig, policies, gpus, caps, accuracies, seed=None):
    points = []
    for policy, g, cap, acc in itertools.product(policies or [None], gpus or [None],
                                                 caps or [None], accuracies or [None]):
        try:
            point = with_overrides(cfg, policy=policy, gpus=g, batch_cap=cap, accuracy=acc, seed=seed)
            points.append((policy or point.policy.mode.value, point, None))
        except ConfigError as exc:
            points.append((policy or cfg.policy.mode.value, cfg, str(exc)))
    return points


def cmd_sweep(args) -> int:
    cfg, records = _load_inputs(args.config, args.trace)
    cfg = with_overrides(cfg, slo_per_token=args.slo_per_token)
    points = build_sweep(cfg, args.policy, args.gpus, args.batch_cap, args.accuracy, args.seed)
    os.makedirs(args.out, exist_ok=True)
    jobs = []
    rows: List[Optional[Dict[str, Any]]] = [None] * len(points)
    for i, (policy, point_cfg, err) in enumerate(points):
        if err is not None:
            rows[i] = {"point": i, "policy": policy, "status": "error", "error": err}
            continue
        jobs.append((i, point_cfg, records, policy, os.path.join(args.out, f"point_{i:03d}")))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    for row in results:
        rows[row["point"]] = row
    with open(os.path.join(args.out, "comparison.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in COMPARISON_COLUMNS})
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"{len(rows)} points, {failed} failed -> {os.path.join(args.out, 'comparison.csv')}")
    return EXIT_OK


# -- analyze --------------------------------------------------------------------

def _print_analysis(summary: analysis.PoolSummary, cfg: EngineConfig) -> None:
    free = cfg.gpu.kv_capacity(cfg.model)
    print(f"pool size N: {summary.n}")
    print(f"sum S_A bytes: {summary.sum_sa_bytes}")
    print(f"sum S_P bytes: {summary.sum_sp_bytes}")
    print(f"short-prediction probability p: {summary.p_short:.6g}")
    if summary.sum_sp_bytes > 0:
        print(f"underutilization ratio: {analysis.underutilization_ratio(summary):.6g}")
    if summary.n:
        if summary.sum_sa_bytes:
            print(f"expected batch size (oracle): "
                  f"{analysis.expected_batch_size(free, summary.sum_sa_bytes / summary.n):.6g}")
        if summary.sum_sp_bytes:
            print(f"expected batch size (predicted): "
                  f"{analysis.expected_batch_size(free, summary.sum_sp_bytes / summary.n):.6g}")
    print(f"expected pool penalty s: {analysis.pool_penalty(summary, cfg.gpu):.6g}")


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    if args.run:
        report = load_run(args.run)
        meta = read_summary(args.run).get("config")
        if meta:
            from .config import config_from_dict
            cfg = config_from_dict(meta)
        summary = analysis.summarize_run(report)
        _print_analysis(summary, cfg)
        reference = ref_summary = None
        if args.reference:
            reference = load_run(args.reference)
            ref_summary = analysis.summarize_run(reference)
        result = analysis.validate_against_run(report, summary, cfg.gpu, reference, ref_summary,
                                               penalty_tolerance=args.penalty_tolerance,
                                               batch_tolerance=args.batch_tolerance)
        text = result.to_text()
        print(text, end="")
        with open(os.path.join(args.run, "validation.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        return EXIT_OK
    if args.trace:
        cfg = with_overrides(cfg, policy=args.policy, seed=args.seed)
        records = read_trace(args.trace, cfg.model)
        requests, buckets = to_requests(records)
        predictor = Predictor(cfg.policy, cfg.scheme)
        allocs = [predictor.predict(r, buckets.get(r.id)).allocated_tokens for r in requests]
        # a saturated batch holds roughly the whole KV capacity
        summary = analysis.summarize_pool(requests, allocs, cfg.model,
                                          mean_resident_bytes=cfg.gpu.kv_capacity(cfg.model))
        _print_analysis(summary, cfg)
        return EXIT_OK
    if args.sum_sp is not None or args.p is not None:
        needed = {"--n": args.n, "--sum-sp": args.sum_sp, "--sum-sa": args.sum_sa, "--p": args.p}
        missing = [k for k, v in needed.items() if v is None]
        if missing:
            raise UsageError(f"inline summary needs {', '.join(missing)}")
        summary = analysis.PoolSummary(args.n, args.sum_sp, args.sum_sa, args.p,
                                       args.mean_resident or 0.0)
        _print_analysis(summary, cfg)
        return EXIT_OK
    raise UsageError("analyze needs --run, --trace, or an inline summary (--n --sum-sp --sum-sa --p)")


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kvsim", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-trace", help="write a synthetic request trace")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--dist", default="lognormal-mean:200,0.8",
                   help="output lengths: fixed:L | uniform:A,B | lognormal:MU,SIGMA | lognormal-mean:MEAN,SIGMA")
    g.add_argument("--prompt-dist", default="fixed:0", help="prompt lengths, same syntax as --dist")
    g.add_argument("--arrival", default="offline", help="offline | poisson:RATE")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-seq-len", type=int, default=2048)
    g.add_argument("--num-buckets", type=int, default=10)
    g.add_argument("--predict-accuracy", type=float, default=None,
                   help="also write a stochastic predicted_bucket column with this accuracy")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_trace)

    def common(p, policy=True):
        p.add_argument("--config", default=None, help="TOML config; omitted keys use defaults")
        p.add_argument("--trace", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--slo-per-token", type=float, default=None)

    s = sub.add_parser("simulate", help="run one policy over a trace", epilog=OUTPUT_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(s)
    s.add_argument("--policy", choices=POLICIES, default=None)
    s.add_argument("--gpus", type=int, default=None)
    s.add_argument("--batch-cap", type=int, default=None, help="0 = unlimited")
    s.add_argument("--eviction-overlap", choices=("none", "full"), default=None)
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="run a parameter grid and merge into comparison.csv",
                       epilog=OUTPUT_HELP + f"  comparison.csv    {', '.join(COMPARISON_COLUMNS)}\n",
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    common(w)
    w.add_argument("--policy", type=_csv_list(str), default=None, help=f"comma list of {POLICIES}")
    w.add_argument("--gpus", type=_csv_list(int), default=None)
    w.add_argument("--batch-cap", type=_csv_list(int), default=None)
    w.add_argument("--accuracy", type=_csv_list(float), default=None)
    w.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    w.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="closed-form penalties, optionally checked against a run")
    a.add_argument("--config", default=None)
    a.add_argument("--run", default=None, help="run directory written by simulate")
    a.add_argument("--reference", default=None, help="oracle run directory on the same trace")
    a.add_argument("--trace", default=None)
    a.add_argument("--policy", choices=POLICIES, default=None)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--n", type=int, default=None)
    a.add_argument("--sum-sp", type=int, default=None)
    a.add_argument("--sum-sa", type=int, default=None)
    a.add_argument("--p", type=float, default=None)
    a.add_argument("--mean-resident", type=float, default=None)
    a.add_argument("--penalty-tolerance", type=float, default=analysis.PENALTY_TOLERANCE)
    a.add_argument("--batch-tolerance", type=float, default=analysis.BATCH_RATIO_TOLERANCE)
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kvsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UnschedulableError, SimulationAbort) as exc:
        print(f"kvsim: simulation aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (TraceError, ConfigError, PredictionError, OSError, ValueError) as exc:
        print(f"kvsim: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
