"""Command-line entry point: ``optonet run|validate|oracle|guardband``.

Exit codes: 0 success, 1 validation findings, 2 schema error,
3 infeasible topology/routing/config, 4 flows incomplete at the horizon.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import scenario as scn
from .controller import guardband_calc, raw_guardband
from .core import OptonetError, Unreachable
from .oracle import TooLarge, exhaustive
from .simulator import HorizonExceeded, Metrics

OUTPUT_ENV = "OPTONET_OUTPUT_DIR"
EXIT_OK, EXIT_FINDINGS, EXIT_SCHEMA, EXIT_INFEASIBLE, EXIT_HORIZON = 0, 1, 2, 3, 4


def _set_path(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = data
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value


def apply_overrides(raw: dict, sets: Sequence[str] = (), seed: Optional[int] = None) -> dict:
    out = json.loads(json.dumps(raw))
    for item in sets:
        if "=" not in item:
            raise scn.ScenarioError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        _set_path(out, key, parsed)
    if seed is not None:
        out["seed"] = seed
    return out


def write_outputs(out_dir: Path, resolved: dict, metrics: Metrics, flows) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(metrics.dumps() + "\n", encoding="utf-8")
    (out_dir / "summary.json").write_text(json.dumps(metrics.summary(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (out_dir / "scenario.resolved.json").write_text(json.dumps(resolved, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    with open(out_dir / "fct.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["flow_id", "src_host", "dst_host", "size_bytes", "arrival_ns", "fct_ns", "reorder_events"])
        for f in sorted(flows, key=lambda f: f.flow_id):
            fct = metrics.fct_ns.get(f.flow_id)
            w.writerow([f.flow_id, f.src_host, f.dst_host, f.size_bytes, repr(f.arrival_time_ns),
                        "" if fct is None else repr(fct), metrics.reorders.get(f.flow_id, 0)])
    with open(out_dir / "buffer.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "port", "interval", "start_ns", "max_buffer_bytes", "tx_bytes"])
        step = metrics.sample_interval_ns
        for (node, port), series in sorted(metrics.port_buffer.items()):
            tx = metrics.port_tx_bytes[(node, port)]
            for i, (b, t) in enumerate(zip(series, tx)):
                w.writerow([node, port, i, repr(i * step), b, t])


def run_scenario(path: str, out_dir: Path, sets: Sequence[str] = (), seed: Optional[int] = None) -> tuple[int, str]:
    """Run one scenario file; returns (exit code, message)."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        resolved = scn.resolve(apply_overrides(raw, sets, seed), base_dir=Path(path).parent)
    except (scn.ScenarioError, json.JSONDecodeError) as e:
        return EXIT_SCHEMA, f"{path}: {e}"
    try:
        built = scn.build(resolved)
    except (OptonetError, scn.ScenarioError, ValueError) as e:
        return EXIT_INFEASIBLE, f"{path}: {type(e).__name__}: {e}"
    try:
        metrics = built.sim.run()
    except HorizonExceeded as e:
        write_outputs(out_dir, resolved, e.metrics, built.flows)
        return EXIT_HORIZON, f"{path}: {e}"
    write_outputs(out_dir, resolved, metrics, built.flows)
    s = metrics.summary()
    return EXIT_OK, f"{path}: {s['flows_completed']}/{s['flows_total']} flows, loss {s['loss_rate']:.4g}, p99 FCT {s['fct_ns']['p99']} ns -> {out_dir}"


def _run_job(args) -> tuple[int, str]:
    return run_scenario(*args)


def cmd_run(ns) -> int:
    base = Path(ns.output_dir or os.environ.get(OUTPUT_ENV) or "optonet-out")
    jobs = []
    for sc in ns.scenario:
        out = base if len(ns.scenario) == 1 else base / Path(sc).stem
        jobs.append((sc, out, tuple(ns.set or ()), ns.seed))
    if ns.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ns.jobs) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    for code, msg in results:
        print(msg, file=sys.stderr if code else sys.stdout)
    return max(code for code, _ in results)


def cmd_validate(ns) -> int:
    try:
        resolved = scn.load(ns.scenario)
    except scn.ScenarioError as e:
        print(json.dumps({"findings": [{"severity": "error", "kind": "SchemaError", "detail": str(e)}]}, indent=1))
        return EXIT_SCHEMA
    findings = scn.validate(resolved)
    print(json.dumps({"findings": findings}, indent=1))
    return EXIT_FINDINGS if any(f["severity"] == "error" for f in findings) else EXIT_OK


def cmd_oracle(ns) -> int:
    try:
        resolved = scn.load(ns.scenario)
    except scn.ScenarioError as e:
        print(str(e), file=sys.stderr)
        return EXIT_SCHEMA
    try:
        schedule = scn.build_schedule(resolved)
        report = exhaustive(schedule, ns.pair[0], ns.pair[1], ns.ts, ns.max_hop)
    except TooLarge as e:
        print(f"TooLarge: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Unreachable as e:
        print(json.dumps({"unreachable": str(e)}))
        return EXIT_FINDINGS
    except OptonetError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(json.dumps(report.to_json(), indent=1))
    return EXIT_OK


def cmd_guardband(ns) -> int:
    raw = raw_guardband(ns.rotation_variance, ns.estimator_error, ns.bandwidth, ns.sync_error)
    guard, min_slice = guardband_calc(ns.rotation_variance, ns.estimator_error, ns.bandwidth, ns.sync_error, ns.headroom)
    print(json.dumps({"raw_guardband_ns": raw, "guardband_ns": guard, "min_slice_ns": min_slice}))
    return EXIT_OK


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="optonet", description="Optical DCN simulator with time-flow tables.")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one or more scenario files")
    r.add_argument("scenario", nargs="+")
    r.add_argument("-o", "--output-dir", help=f"output directory (default ${OUTPUT_ENV} or ./optonet-out)")
    r.add_argument("--seed", type=int)
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a field, e.g. services.K=8")
    r.add_argument("--jobs", type=int, default=1, help="scenarios to run in parallel")
    r.set_defaults(fn=cmd_run)

    v = sub.add_parser("validate", help="check a scenario without running it")
    v.add_argument("scenario")
    v.set_defaults(fn=cmd_validate)

    o = sub.add_parser("oracle", help="exhaustive earliest-arrival search (N <= 10)")
    o.add_argument("scenario")
    o.add_argument("--pair", nargs=2, type=int, required=True, metavar=("SRC", "DST"))
    o.add_argument("--ts", type=int, default=0)
    o.add_argument("--max-hop", type=int, default=2)
    o.set_defaults(fn=cmd_oracle)

    g = sub.add_parser("guardband", help="guardband and minimum slice duration")
    g.add_argument("--rotation-variance", type=float, default=0.0, help="ns")
    g.add_argument("--estimator-error", type=float, default=0.0, help="bytes")
    g.add_argument("--bandwidth", type=float, default=100e9, help="bits/s")
    g.add_argument("--sync-error", type=float, default=0.0, help="ns")
    g.add_argument("--headroom", type=float, default=0.0, help="ns")
    g.set_defaults(fn=cmd_guardband)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    ns = parser().parse_args(argv)
    return ns.fn(ns)


if __name__ == "__main__":
    sys.exit(main())
