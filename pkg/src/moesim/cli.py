"""Command-line driver: gen-trace, calibrate, plan, run, sweep, ablate.

Exit codes: 0 success, 1 configuration error, 2 runtime invariant
violation, 3 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import yaml

from . import plotting, report
from .bench import (ABLATION_MODES, MODES, SWEEP_AXES, RunConfig, ablate, build_devices, build_plan,
                    make_workload, padding_impact, run_prefill, sweep)
from .calibration import load_profile, profile_traces, save_profile, validate_profile
from .errors import ConfigError, InvariantError, MoESimError, SchemaVersionError, ValidationError
from .workload import export_trace, generate_workload, ingest_trace

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("moesim")

# flag name -> (RunConfig field, type)
_FLAGS = {
    "experts": ("num_experts", int), "top-k": ("top_k", int), "hidden": ("hidden_dim", int),
    "ffn": ("ffn_dim", int), "layers": ("num_layers", int), "prompt-len": ("prompt_len", int),
    "chunk-size": ("chunk_size", int), "group-size": ("group_size", int),
    "hot-fraction": ("hot_fraction", float), "overflow-policy": ("overflow_policy", str),
    "capacity": ("capacity", int), "mode": ("mode", str), "seed": ("seed", int),
    "zipf-s": ("zipf_s", float), "layer-jitter": ("layer_jitter", float),
    "calib-tokens": ("calib_tokens", int), "attention-macs-per-token": ("attention_macs_per_token", int),
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (overrides --config)")
    g.add_argument("--config", help="JSON or YAML file with RunConfig fields")
    for flag, (name, typ) in _FLAGS.items():
        kwargs = {"type": typ, "default": None, "dest": name}
        if name == "mode":
            kwargs["choices"] = MODES
        if name == "overflow_policy":
            kwargs["choices"] = ("prune", "pad-only")
        g.add_argument(f"--{flag}", **kwargs)
    g.add_argument("--tiers", type=_int_list, default=None, dest="tier_multipliers",
                   help="tier multipliers over base capacity, e.g. 4,2,1")
    g.add_argument("--no-verify", action="store_const", const=False, default=None, dest="verify",
                   help="skip the per-layer oracle comparison")
    g.add_argument("--no-cpu-fallback", action="store_const", const=False, default=None,
                   dest="allow_cpu_fallback")


def load_config_file(path) -> dict:
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return doc


def config_from_args(args) -> RunConfig:
    doc = load_config_file(args.config) if getattr(args, "config", None) else {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            doc[f.name] = value
    return RunConfig.from_dict(doc).validate()


def _out_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _inputs(args, cfg):
    trace = ingest_trace(args.trace) if getattr(args, "trace", None) else None
    profile = load_profile(args.profile) if getattr(args, "profile", None) else None
    return trace, profile


def cmd_gen_trace(args) -> int:
    cfg = config_from_args(args)
    if args.heldout_out:
        # same split as the bench: calibration tokens, then prompt_len held-out tokens
        if args.tokens is not None:
            cfg = cfg.replace(calib_tokens=args.tokens)
        wl = make_workload(cfg)
        outputs = [(wl.calibration, args.out), (wl.runtime, args.heldout_out)]
    else:
        n = cfg.prompt_len if args.tokens is None else args.tokens
        outputs = [(generate_workload(cfg.seed, n, cfg.num_layers, cfg.num_experts, cfg.top_k, cfg.zipf_s,
                                      cfg.layer_jitter), args.out)]
    for trace, path in outputs:
        export_trace(trace, path)
        print(f"wrote {trace.num_layers}x{trace.num_tokens} routing records to {path}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    traces = [ingest_trace(p) for p in args.traces]
    profile = profile_traces(traces)
    save_profile(profile, args.out)
    ratios = ", ".join(f"{r:.2f}" for r in profile.imbalance_ratios)
    print(f"profiled {profile.total_tokens} tokens over {profile.num_layers} layers; imbalance ratios: {ratios}")
    if args.heldout:
        k = min(args.k, profile.num_experts)
        ov = validate_profile(profile, ingest_trace(args.heldout), k)
        print(f"Overlap@{k}: per layer {[round(v, 3) for v in ov.per_layer]}, median {ov.median:.3f}, "
              f"mean {ov.mean:.3f}")
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = config_from_args(args)
    profile = load_profile(args.profile)
    if (profile.num_layers, profile.num_experts) != (cfg.num_layers, cfg.num_experts):
        cfg = cfg.replace(num_layers=profile.num_layers, num_experts=profile.num_experts,
                          top_k=profile.top_k).validate()
    devices = build_devices(cfg)
    plan = build_plan(cfg, profile, devices)
    doc = {"mode": cfg.mode, "imbalance_ratios": profile.imbalance_ratios,
           "capacity_plan": plan.capacity.summary(), "placement_plan": plan.placement.summary(),
           "devices": {k: v.to_dict() for k, v in devices.items()}}
    if args.out:
        report.write_json(doc, args.out)
        print(f"wrote plan to {args.out}")
    else:
        print(json.dumps(doc, indent=1))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    trace, profile = _inputs(args, cfg)
    rep = run_prefill(cfg, trace, profile)
    out = _out_dir(args.out_dir)
    report.report_csv(rep, os.path.join(out, "report.csv"))
    report.report_plotdata(rep, os.path.join(out, "plotdata.json"))
    report.write_json(report.report_document(rep), os.path.join(out, "report.json"))
    if not args.no_figures:
        plotting.stage_breakdown_figure({cfg.mode: rep}, os.path.join(out, "stage_breakdown.png"))
    a = rep.aggregate
    print(f"{cfg.mode}: TTFT {a.ttft:.6g}, latency/token {a.latency_per_token:.6g}, EPT {a.ept:.6g}, "
          f"CPU cycles {a.cpu_cycles:.6g}, launches {a.launches}, padded rows {a.padded_rows}, "
          f"dropped {a.dropped_tokens}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = config_from_args(args)
    trace, profile = _inputs(args, cfg)
    result = sweep(cfg, args.axis, args.values, trace, profile)
    out = _out_dir(args.out_dir)
    report.sweep_csv(result, os.path.join(out, "sweep.csv"))
    for v, rep in zip(result.values, result.reports):
        if rep is not None:
            report.report_csv(rep, os.path.join(out, f"run_{args.axis}_{v}.csv"))
    report.write_json(report.sweep_series(result), os.path.join(out, "plotdata.json"))
    if not args.no_figures:
        plotting.sweep_figure(result, os.path.join(out, "sweep.png"))
    for row in result.summary():
        if row["status"] == "ok":
            print(f"{args.axis}={row['value']}: latency/token {row['latency_per_token']:.6g}, "
                  f"EPT {row['ept']:.6g}, launches {row['launches']}")
        else:
            print(f"{args.axis}={row['value']}: FAILED ({row['error']})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    trace, profile = _inputs(args, cfg)
    modes = list(MODES) if args.all_modes else list(ABLATION_MODES)
    reports = ablate(cfg, modes, trace, profile)
    impact = padding_impact(cfg, trace, profile)
    out = _out_dir(args.out_dir)
    report.ablation_csv(reports, os.path.join(out, "ablation.csv"))
    for mode, rep in reports.items():
        report.report_csv(rep, os.path.join(out, f"run_{mode}.csv"))
    report.write_json({
        "padded_rows_tiered": impact.tiered.aggregate.padded_rows,
        "padded_rows_uniform_max": impact.padded.aggregate.padded_rows,
        "padded_rows_reduction": impact.padded_rows_reduction,
        "cpu_cycle_ratio": impact.cpu_cycle_ratio,
        "latency_ratio": impact.latency_ratio,
    }, os.path.join(out, "padding_impact.json"))
    if not args.no_figures:
        plotting.ablation_figure(reports, os.path.join(out, "ablation.png"))
        plotting.stage_breakdown_figure(reports, os.path.join(out, "stage_breakdown.png"))
    for row in report.ablation_rows(reports):
        print(f"{row['mode']:>13}: latency/token {row['latency_per_token']:.6g}, EPT {row['ept']:.6g}, "
              f"CPU cycles {row['cpu_cycles']:.6g}")
    print(f"padding impact: {impact.padded_rows_reduction:.1%} fewer padded rows with tiers, "
          f"uniform max-load uses {impact.cpu_cycle_ratio:.2f}x the CPU cycles")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are configuration errors; 2 is reserved for invariant violations
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moesim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="write a seeded synthetic routing trace")
    _add_config_flags(p)
    p.add_argument("--tokens", type=int, default=None, help="tokens to generate (default: prompt length)")
    p.add_argument("--out", required=True)
    p.add_argument("--heldout-out", help="also write prompt-length held-out tokens from the same distribution")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("calibrate", help="routing traces -> calibration profile")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--heldout", help="trace to validate the profile against (Overlap@K)")
    p.add_argument("-k", type=int, default=8)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("plan", help="profile -> capacity and placement summary")
    _add_config_flags(p)
    p.add_argument("--profile", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    for name, func, helptext in (("run", cmd_run, "single configuration"),
                                 ("sweep", cmd_sweep, "sweep capacity, group size or chunk size"),
                                 ("ablate", cmd_ablate, "ablation ladder plus padding impact")):
        p = sub.add_parser(name, help=helptext)
        _add_config_flags(p)
        p.add_argument("--trace", help="replay this routing trace instead of generating one")
        p.add_argument("--profile", help="calibration profile (default: calibrate on generated data)")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--no-figures", action="store_true")
        if name == "sweep":
            p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
            p.add_argument("--values", required=True, type=_int_list)
        if name == "ablate":
            p.add_argument("--all-modes", action="store_true", help="include cpu-only and naive-offload")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, ValidationError, SchemaVersionError, MoESimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
