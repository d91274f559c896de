"""Command-line front end.

    egret gen-traces --n 100 --length 20 --out runs/traces
    egret train --mode scom --method egret --seed 0 --out runs/egret0
    egret evaluate --checkpoint runs/egret0/checkpoint.json --out runs/eval
    egret oracle --out runs/oracle
    egret compare --checkpoint egret=runs/e/checkpoint.json --campaign poisson --out runs/cmp

Every subcommand takes ``--seed``, ``--out``, ``--mode``, ``--config`` and
repeated ``--set path=value`` overrides.  Outputs are CSV/JSON/text files
under ``--out``; identical arguments give byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from ..env import dump_traces, load_traces
from ..oracle import exact_plan, greedy_plan, payment_matrix, plan_csv_rows
from ..rl import checkpoint
from .config import (ConfigError, ExperimentConfig, _merge, apply_overrides, default_config,
                     dump_config, population_and_catalog, rng_stream)
from .runner import (CURVE_FIELDS, METHODS, METRIC_FIELDS, STEP_FIELDS, OracleActor, episode_metrics,
                     eval_traces, is_stochastic, policy_actor, summarize, train)

LENGTHS = (10, 15, 20, 25)
MU_BDS = (30.0, 40.0, 50.0, 60.0)
LAMBDAS = (2.0, 3.0, 4.0, 5.0)
CAMPAIGNS = ("length", "data", "bandwidth", "poisson")
SUMMARY_FIELDS = ("campaign", "setting", "method", "traces", "revenue", "oracle", "margin", "margin_per_step")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields] if isinstance(r, dict) else [_fmt(v) for v in r])


def _config(args, base: dict = None) -> ExperimentConfig:
    """Mode defaults, then a checkpoint's stored config, then --config, then --set."""
    d = {}
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
    mode = args.mode or d.get("mode") or (base or {}).get("mode") or "scom"
    merged = default_config(mode).to_dict()
    if base:
        merged = _merge(merged, base)
    merged = _merge(merged, d)
    merged["mode"] = mode
    if args.seed is not None:
        merged["seed"] = args.seed
    merged["out"] = args.out
    return ExperimentConfig.from_dict(apply_overrides(merged, args.set))


def _traces(args, cfg, length=None, n=None):
    if getattr(args, "traces", None):
        with open(args.traces) as fh:
            return load_traces(fh.read())
    return eval_traces(cfg, n or args.n_traces, length)


def cmd_gen_traces(args):
    cfg = _config(args)
    if args.arrivals:
        cfg.dscom.arrivals = args.arrivals
    if args.lam is not None:
        cfg.dscom.lam = args.lam
    traces = eval_traces(cfg, args.n, args.length or cfg.dscom.episode_length)
    with open(os.path.join(args.out, "traces.txt"), "w") as fh:
        fh.write(dump_traces(traces))


def cmd_train(args):
    cfg = _config(args)
    method = args.method or cfg.train.method
    steps = cfg.hp.total_steps if args.steps is None else args.steps
    clients, catalog = population_and_catalog(cfg)

    def log(row):
        if not args.quiet:
            print(" ".join(f"{k}={row[k]:.6g}" for k in CURVE_FIELDS), file=sys.stderr, flush=True)

    res = train(cfg, method, cfg.seed, steps, clients, catalog, log)
    # the output directory is where results go, not part of what produced them
    cfg = replace(cfg, out="")
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(dump_config(cfg))
    write_csv(os.path.join(args.out, "curve.csv"), CURVE_FIELDS, res.curve)
    checkpoint.save(res.policy, os.path.join(args.out, "checkpoint.json"),
                    meta=dict(method=method, seed=cfg.seed, steps=steps, episodes=res.episodes,
                              config=cfg.to_dict()))


def _load_policy(path):
    try:
        return checkpoint.load(path)
    except FileNotFoundError:
        raise SystemExit(f"missing checkpoint: {path}")


def _actor(policy, cfg, seed, exact):
    if policy is None:
        return OracleActor(exact), 1, False
    eps = cfg.train.final_eval_episodes if is_stochastic(policy) else 1
    return policy_actor(policy, rng_stream(seed, "eval"), greedy=True), eps, policy.cfg.full_state


def _check_dims(policy, cfg):
    n, m = cfg.population.n_clients, len(cfg.catalog.capacities)
    if policy is not None and (policy.n_clients, policy.n_instances) != (n, m):
        raise SystemExit(f"checkpoint expects {policy.n_clients} clients x {policy.n_instances} instances, "
                         f"config has {n} x {m}")


def cmd_evaluate(args):
    policy, meta = (None, {}) if args.checkpoint in (None, "oracle") else _load_policy(args.checkpoint)
    cfg = _config(args, meta.get("config"))
    _check_dims(policy, cfg)
    clients, catalog = population_and_catalog(cfg)
    traces = _traces(args, cfg) if cfg.mode == "dscom" else None
    if traces and policy is not None:
        bad = [t for tr in traces for iv in tr.intervals for t in iv if t >= cfg.population.n_clients]
        if bad:
            raise SystemExit(f"trace refers to client type {max(bad)} but the population has "
                             f"{cfg.population.n_clients}")
    act, eps, full = _actor(policy, cfg, cfg.seed, args.exact)
    rows, steps = episode_metrics(act, cfg, clients, catalog, traces, eps, full, args.exact)
    write_csv(os.path.join(args.out, "metrics.csv"), METRIC_FIELDS, rows)
    write_csv(os.path.join(args.out, "steps.csv"), STEP_FIELDS, steps)
    s = summarize(rows)
    print(" ".join(f"{k}={v:.6g}" for k, v in s.items()))


def cmd_oracle(args):
    cfg = _config(args)
    if args.tau:
        tau = np.asarray(json.loads(args.tau), dtype=np.float64)
        P = None
    else:
        clients, catalog = population_and_catalog(cfg)
        tau, P = payment_matrix(clients, catalog)
        avail = np.asarray(catalog.available, dtype=bool)
        tau = np.where(avail[None, :], tau, 0.0)
    g = greedy_plan(tau, P)
    e = exact_plan(tau, P)
    rows = list(plan_csv_rows(g, "greedy")) + list(plan_csv_rows(e, "exact"))
    write_csv(os.path.join(args.out, "plan.csv"),
              ("plan", "round", "client", "instance", "posted_price", "payment"), rows)
    summary = [dict(greedy=g.expected_revenue, exact=e.expected_revenue,
                    gap=e.expected_revenue - g.expected_revenue)]
    write_csv(os.path.join(args.out, "summary.csv"), ("greedy", "exact", "gap"), summary)
    print(f"greedy={g.expected_revenue:.6g} exact={e.expected_revenue:.6g} "
          f"gap={e.expected_revenue - g.expected_revenue:.6g}")


def campaign_settings(name: str):
    """(setting label, config overrides, trace length) for one evaluation sweep."""
    if name == "length":
        return [(f"length={n}", {}, n) for n in LENGTHS]
    if name == "data":
        return [("data", {"dscom.perturb": "data"}, None)]
    if name == "bandwidth":
        return [(f"mu_bd={m:g}", {"dscom.perturb": "bandwidth", "dscom.mu_bd": m}, None) for m in MU_BDS]
    if name == "poisson":
        return [(f"lam={v:g}", {"dscom.arrivals": "poisson", "dscom.lam": v}, None) for v in LAMBDAS]
    raise ConfigError(f"unknown campaign {name!r}; expected one of {CAMPAIGNS}")


def cmd_compare(args):
    methods = []
    for item in args.checkpoint or ():
        name, sep, path = item.partition("=")
        if not sep:
            raise SystemExit(f"{item}: expected method=path")
        policy, meta = _load_policy(path)
        methods.append((name, policy, meta))
    base = methods[0][2].get("config") if methods else None
    cfg0 = _config(args, base)
    if cfg0.mode != "dscom":
        raise SystemExit("compare runs dynamic-arrival campaigns; use --mode dscom")
    for _, policy, _ in methods:
        _check_dims(policy, cfg0)
    campaigns = CAMPAIGNS if args.campaign == "all" else (args.campaign,)
    out = []
    for camp in campaigns:
        for label, over, length in campaign_settings(camp):
            d = cfg0.to_dict()
            for k, v in over.items():
                sec, key = k.split(".")
                d[sec][key] = v
            cfg = ExperimentConfig.from_dict(d)
            clients, catalog = population_and_catalog(cfg)
            traces = eval_traces(cfg, args.n_traces, length)
            entries = [("oracle", None)] + [(n, p) for n, p, _ in methods]
            for name, policy in entries:
                act, eps, full = _actor(policy, cfg, cfg.seed, False)
                rows, _ = episode_metrics(act, cfg, clients, catalog, traces, eps, full)
                s = summarize(rows)
                out.append(dict(campaign=camp, setting=label, method=name, traces=len(traces), **s))
                print(f"{camp} {label} {name}: " + " ".join(f"{k}={v:.6g}" for k, v in s.items()),
                      file=sys.stderr, flush=True)
    write_csv(os.path.join(args.out, "summary.csv"), SUMMARY_FIELDS, out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="runs")
    common.add_argument("--mode", choices=("scom", "dscom"), default=None)
    common.add_argument("--config", default="")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")

    ap = argparse.ArgumentParser(prog="egret", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-traces", parents=[common], help="write random arrival traces")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--arrivals", choices=("uniform", "poisson"), default=None)
    p.add_argument("--lam", type=float, default=None)
    p.set_defaults(fn=cmd_gen_traces)

    p = sub.add_parser("train", parents=[common], help="train a policy; writes checkpoint and learning curve")
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="per-trace revenue and margins against the Oracle")
    p.add_argument("--checkpoint", default=None, help="policy checkpoint, or 'oracle'")
    p.add_argument("--traces", default=None, help="trace file from gen-traces (DSCOM)")
    p.add_argument("--n-traces", type=int, default=100)
    p.add_argument("--exact", action="store_true", help="use the exact assignment as the Oracle")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("oracle", parents=[common], help="greedy and exact Oracle plans")
    p.add_argument("--tau", default=None, help="payment matrix as JSON, instead of the population")
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("compare", parents=[common], help="margin campaigns over trace length, perturbation, arrivals")
    p.add_argument("--checkpoint", action="append", metavar="METHOD=PATH")
    p.add_argument("--campaign", choices=CAMPAIGNS + ("all",), default="all")
    p.add_argument("--n-traces", type=int, default=100)
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
