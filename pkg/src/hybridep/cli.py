"""Command-line entry point: ``hybridep {plan,topo,simulate,compress-demo,sweep}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from hybridep import perfmodel, simcore, sparsecomp, sweep, units
from hybridep.config import ConfigFile, load_config
from hybridep.errors import ConfigError, DomainError
from hybridep.plan import model_device, plan_for_cluster
from hybridep.topology import build_topology, frequency_json

log = logging.getLogger("hybridep")


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _figures(args) -> bool:
    return not args.no_figures


def _require_workload(cfg: ConfigFile):
    if cfg.workload is None:
        raise ConfigError("this command needs a 'workload' section")
    return cfg.workload


def _plan(cfg: ConfigFile):
    return plan_for_cluster(
        cfg.cluster, _require_workload(cfg), p=cfg.plan_p, domain_sizes=cfg.plan_domains,
        **cfg.sim.plan_options(),
    )


def plan_report(cfg: ConfigFile) -> dict:
    w = _require_workload(cfg)
    g = cfg.cluster.total_gpus
    device = model_device(cfg.cluster)
    plan = _plan(cfg)
    point = plan.point
    lat = point.latency
    return {
        "total_gpus": g,
        "model_bandwidth": device.bandwidth,
        "case": perfmodel.classify_case(w.data_size, w.expert_size, g).value,
        "boundary_p": perfmodel.boundary_p(w, device, g),
        "continuous_p": perfmodel.continuous_optimum(w, device, g),
        "p": str(plan.p),
        "p_float": float(plan.p),
        "domain_size": point.domain_size,
        "domain_sizes": list(plan.domain_sizes),
        "point_case": point.case_tag.value,
        "latency": {
            "comp": lat.comp,
            "pre_expert": lat.pre_expert,
            "comm_a2a": lat.comm_a2a,
            "comm_ag": lat.comm_ag,
            "overlap": lat.overlap,
            "backward": lat.backward,
            "final": lat.final,
        },
    }


def cmd_plan(cfg: ConfigFile, args) -> int:
    report = plan_report(cfg)
    if args.json:
        print(_dump(report))
    else:
        lat = report["latency"]
        print(f"case            {report['case']}")
        print(f"continuous p    {report['continuous_p']:.6g}")
        print(f"chosen p        {report['p']} (S_ED={report['domain_size']}, per level {report['domain_sizes']})")
        print(f"point regime    {report['point_case']}")
        for key in ("pre_expert", "comp", "comm_a2a", "comm_ag", "overlap", "backward", "final"):
            print(f"{key:<15} {units.to_ms(lat[key]):.6g} ms")
    if args.out:
        out = _outdir(args)
        (out / "plan.json").write_text(_dump(report) + "\n")
        if _figures(args):
            w = cfg.workload
            g = cfg.cluster.total_gpus
            from hybridep import plotting

            point = perfmodel.evaluate_domain(w, model_device(cfg.cluster), g, report["domain_size"])
            plotting.plot_latency_curve(w, model_device(cfg.cluster), g, out / "plan.png", chosen=point)
    return 0


def cmd_topo(cfg: ConfigFile, args) -> int:
    cluster = cfg.cluster
    if cfg.plan_domains is not None or cfg.plan_p is not None:
        cluster = cluster.with_domains(_plan(cfg).domain_sizes)
    topo = build_topology(cluster)
    out = _outdir(args)
    (out / "topo.csv").write_text(topo.to_csv())
    freq = frequency_json(topo)
    (out / "freq.json").write_text(freq + "\n")
    if _figures(args):
        from hybridep import plotting

        plotting.plot_topology(topo, out / "topo.png")
    print(freq if args.json else _freq_table(topo))
    return 0


def _freq_table(topo) -> str:
    lines = ["level  A2A  AG"]
    for l, c in enumerate(topo.frequency_report()):
        lines.append(f"{l:<6} {c['A2A']:<4} {c['AG']}")
    return "\n".join(lines)


def cmd_simulate(cfg: ConfigFile, args) -> int:
    w = _require_workload(cfg)
    plan = _plan(cfg)
    report = simcore.compare_ep(cfg.cluster, w, plan=plan, **cfg.sim.plan_options())
    trace = simcore.simulate(cfg.cluster, w, plan)
    summary = dict(report["hybrid"])
    summary["ep_latency"] = report["ep_latency"]
    summary["speedup_vs_ep"] = report["speedup"]
    summary["frequency_delta"] = report["frequency_delta"]
    if cfg.cluster.num_levels == 1 and plan.matched and plan.layers == 1:
        summary["model_check"] = simcore.validate_against_model(cfg.cluster, w, plan)
    out = _outdir(args)
    (out / "trace.csv").write_text(trace.to_csv())
    (out / "summary.json").write_text(simcore.summary_json(summary) + "\n")
    if _figures(args):
        from hybridep import plotting

        plotting.plot_trace(trace, out / "trace.png")
    if args.json:
        print(simcore.summary_json(summary))
    else:
        print(f"makespan      {units.to_ms(summary['makespan']):.6g} ms")
        print(f"EP makespan   {units.to_ms(summary['ep_latency']):.6g} ms")
        print(f"speedup       {summary['speedup_vs_ep']:.4f}x")
    return 0


def compress_report(cfg: ConfigFile, seed: int) -> dict:
    demo = cfg.demo
    experts = sparsecomp.synthetic_experts(demo.experts, demo.hidden, demo.inner, demo.noise, seed)
    shared = sparsecomp.init_shared(experts)
    rows = []
    for i, e in enumerate(experts):
        comp = sparsecomp.sr_encode(e, shared, cfg.compression)
        payload = comp.to_bytes()
        decoded = sparsecomp.sr_decode(sparsecomp.CompressedResidual.from_bytes(payload), shared)
        max_abs, fro = sparsecomp.reconstruction_error(e, decoded)
        rows.append(
            {
                "expert": i,
                "k": comp.k,
                "payload_bytes": len(payload),
                "ratio": sparsecomp.compression_ratio(comp, e.nbytes),
                "max_abs_error": max_abs,
                "frobenius_error": fro,
                "relative_error": fro / float(sparsecomp.reconstruction_error(e, shared)[1] or 1.0),
            }
        )
    return {
        "seed": seed,
        "experts": demo.experts,
        "shape": [demo.hidden, demo.inner],
        "noise": demo.noise,
        "index_width": cfg.compression.index_width,
        "value_width": cfg.compression.value_width,
        "concentration": sparsecomp.residual_concentration(experts),
        "per_expert": rows,
        "mean_ratio": sum(r["ratio"] for r in rows) / len(rows),
    }, experts, shared


def cmd_compress_demo(cfg: ConfigFile, args) -> int:
    report, experts, shared = compress_report(cfg, args.seed if args.seed is not None else cfg.sim.seed)
    if args.json:
        print(_dump(report))
    else:
        print(f"experts         {report['experts']} x {report['shape']}")
        print(f"mean ratio      {report['mean_ratio']:.3f}x")
        print(f"concentration   {report['concentration']}")
        worst = max(r["frobenius_error"] for r in report["per_expert"])
        print(f"worst fro error {worst:.6g}")
    if args.out:
        out = _outdir(args)
        (out / "compress.json").write_text(_dump(report) + "\n")
        if _figures(args):
            from hybridep import plotting

            plotting.plot_residual_hist(experts, shared, out / "compress.png")
    return 0


def cmd_sweep(cfg: ConfigFile, args) -> int:
    if args.axis is None or args.values is None:
        raise ConfigError("sweep needs --axis and --values")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc
    rows = sweep.run_sweep(
        cfg.cluster, _require_workload(cfg), args.axis, values, mode=args.mode, sed=args.sed, p=args.p
    )
    text = sweep.rows_to_csv(rows)
    out = _outdir(args)
    (out / "sweep.csv").write_text(text)
    if _figures(args):
        from hybridep import plotting

        plotting.plot_sweep(rows, args.axis, out / "sweep.png")
    print(text, end="")
    return 0


COMMANDS = {
    "plan": cmd_plan,
    "topo": cmd_topo,
    "simulate": cmd_simulate,
    "compress-demo": cmd_compress_demo,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON configuration file")
    common.add_argument("--json", action="store_true", help="print JSON instead of text")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    parser = argparse.ArgumentParser(prog="hybridep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("plan", "compress-demo"):
        sub.add_parser(name, parents=[common])
    for name in ("topo", "simulate"):
        sub.add_parser(name, parents=[common]).set_defaults(out="out")
    sw = sub.add_parser("sweep", parents=[common])
    sw.set_defaults(out="out")
    sw.add_argument("--axis", choices=sweep.AXES)
    sw.add_argument("--values", help="comma-separated, strictly monotone")
    sw.add_argument("--mode", choices=sweep.MODES, default="optimal")
    sw.add_argument("--sed", type=int, help="effective domain size for --mode fixed-sed")
    sw.add_argument("--p", type=float, help="proportion for --mode fixed-p")
    return parser


def main(argv=None) -> int:
    level = os.environ.get("HYBRIDEP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"error: {v}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
