"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 input or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import control as ctl
from . import engine, ids, metrics
from . import ledger as lg
from .core import DEFAULT_CONFIG_PATH, ConfigError, ScenarioConfig, derive_seed, load_config, validate_config

log = logging.getLogger("distbvnet")

DATA_DIR = Path(__file__).parent / "data"
GAS_TABLE = DATA_DIR / "gas_measurements.csv"
IDS_FIXTURE = DATA_DIR / "ids_fixture.csv"

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _load_scenario(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "rounds", None) is not None:
        changes["rounds"] = args.rounds
    cfg = cfg.replace(**changes) if changes else cfg
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("\n".join(problems))
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path: Optional[str]) -> Optional[ids.IsolationForest]:
    if path is None:
        return None
    try:
        return ids.load_forest(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load IDS model {path}: {exc}") from exc


def cell_config(base: ScenarioConfig, vehicles: int, cluster_size: int) -> ScenarioConfig:
    """Sweep cell: seeds depend only on (base seed, cell), so adding cells never moves others."""
    return base.replace(n_vehicles=vehicles, cluster_size_target=cluster_size,
                        seed=derive_seed(base.seed, vehicles, cluster_size))


def _write_run_artifacts(report: engine.RunReport, out: Path, verbose: bool, events: bool) -> None:
    ledger_dir = out / "ledgers"
    ledger_dir.mkdir(exist_ok=True)
    for cid, led in sorted(report.cluster_ledgers.items()):
        lg.export_ledger(led, ledger_dir / f"cluster_{cid}.jsonl")
    lg.export_ledger(report.cloud, ledger_dir / "cloud.jsonl")
    metrics.write_cluster_rows(report.cluster_rows, out / "clusters.csv")
    c = report.counters
    summary = {k: getattr(c, k) for k in c.__dataclass_fields__}
    summary["gas_used_cluster"] = sum(l.total_gas() for l in report.cluster_ledgers.values())
    summary["gas_used_cloud"] = report.cloud.total_gas()
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if events:
        report.write_events(out / "events.jsonl")
    if verbose:
        with open(out / "decisions.jsonl", "w") as fh:
            for ev in report.events:
                if ev.kind == "controller-route":
                    d = ev.as_dict()
                    fh.write(ctl.decision_record(ev.round, ev.subject, d["action"], d["outcome"],
                                                 report.config.delay_model.t_s, d["t_n_effective"]) + "\n")


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    problems = validate_config(cfg)
    for p in problems:
        print(p)
    if problems:
        return EXIT_INPUT
    print("config ok")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_scenario(args)
    if args.vehicles is not None or args.cluster_size is not None:
        cfg = cell_config(cfg, cfg.n_vehicles if args.vehicles is None else args.vehicles,
                          cfg.cluster_size_target if args.cluster_size is None else args.cluster_size)
        problems = validate_config(cfg)
        if problems:
            raise ConfigError("\n".join(problems))
    out = _out_dir(args)
    forest = _load_model(args.model)
    log.info("running %d vehicles, %d rounds, seed %d", cfg.n_vehicles, cfg.rounds, cfg.seed)
    report = engine.run(cfg, forest, record_events=True)
    row = metrics.compute_kpis(report)
    model = metrics.model_throughput(report)
    metrics.emit_report([row], out, {(row.vehicles, row.cluster_size): model},
                        lg.read_gas_table(GAS_TABLE))
    _write_run_artifacts(report, out, args.verbose, args.events)
    print(",".join(metrics.KPI_HEADER))
    print(",".join(metrics._fmt(getattr(row, k)) for k in metrics.KPI_HEADER))
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _load_scenario(args)
    out = _out_dir(args)
    forest = _load_model(args.model)
    rows = []
    model = {}
    for v in args.vehicles:
        for cs in args.cluster_sizes:
            cfg = cell_config(base, v, cs)
            log.info("cell vehicles=%d cluster_size=%d seed=%d", v, cs, cfg.seed)
            report = engine.run(cfg, forest, record_events=False)
            row = metrics.compute_kpis(report)
            rows.append(row)
            model[(v, cs)] = metrics.model_throughput(report)
    rows.sort(key=lambda r: (r.vehicles, r.cluster_size))
    metrics.emit_report(rows, out, model, lg.read_gas_table(GAS_TABLE))
    with open(out / "model_throughput.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("vehicles", "cluster_size", "mean_cluster_size", "data_mbit", "t_n",
                    "cluster_mbps", "vehicles_mbps"))
        for (v, cs), m in sorted(model.items()):
            w.writerow([v, cs] + [metrics._fmt(x) for x in (m.mean_cluster_size, m.data_mbit, m.t_n,
                                                           m.cluster_mbps, m.vehicles_mbps)])
    print(f"{len(rows)} runs written to {out / metrics.KPI_FILE}")
    return EXIT_OK


def _schema(args, path: Path) -> ids.FlowSchema:
    with open(path, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    if not header:
        raise InputError(f"{path} is empty")
    label = args.label if args.label in header else None
    if args.features:
        feats = tuple(f.strip() for f in args.features.split(","))
    else:
        feats = tuple(h for h in header if h not in (args.label, args.predictions))
    return ids.FlowSchema(feats, label, args.benign_value)


def _read_flows(args) -> tuple[list[ids.FlowFeatures], ids.FlowSchema]:
    path = Path(args.data)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    schema = _schema(args, path)
    try:
        flows, dropped = ids.ingest_flows(path, schema)
    except KeyError as exc:
        raise InputError(str(exc)) from exc
    if dropped:
        log.warning("dropped %d rows with non-finite or unparseable values", dropped)
    if not flows:
        raise InputError(f"{path} has no usable rows")
    return flows, schema


def cmd_ids_train(args) -> int:
    flows, _ = _read_flows(args)
    cfg = ids.ForestConfig(n_trees=args.trees, subsample_size=args.subsample, threshold=args.threshold)
    forest = ids.fit(flows, cfg, seed=args.seed)
    out = _out_dir(args)
    ids.save_forest(forest, out / "forest.json")
    print(f"trained {forest.n_trees} trees on {len(flows)} flows "
          f"(subsample {forest.subsample_size}, {forest.dimensionality} features) -> {out / 'forest.json'}")
    return EXIT_OK


def cmd_ids_eval(args) -> int:
    flows, schema = _read_flows(args)
    if schema.label is None or any(f.label is None for f in flows):
        raise InputError("evaluation data needs a label column")
    labels = [f.label for f in flows]
    if args.predictions:
        with open(args.data, newline="") as fh:
            raw = [row[args.predictions] for row in csv.DictReader(fh)]
        preds = [ids._label_of(p, schema.benign_value) for p in raw]
        if len(preds) != len(labels):
            raise InputError("prediction column has rows that were dropped from the features")
    else:
        if args.model is None:
            raise InputError("need --model or --predictions")
        forest = _load_model(args.model)
        preds = forest.predict(flows)
    report = ids.evaluate(preds, labels)
    out = _out_dir(args)
    with open(out / "eval.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"accuracy {report.accuracy:.2f}%  precision {report.precision:.2f}%  "
          f"recall {report.recall:.2f}%  f1 {report.f1:.2f}%")
    return EXIT_OK


def cmd_gas_fit(args) -> int:
    try:
        table = lg.read_gas_table(args.table)
    except FileNotFoundError as exc:
        raise InputError(f"no such file: {args.table}") from exc
    try:
        fit = lg.fit_gas_table(table)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = _out_dir(args)
    metrics.emit_gas(table, out)
    with open(out / "gas_model.toml", "w") as fh:
        fh.write("# affine gas model fitted by `distbvnet gas-fit`\n[gas_model]\n")
        fh.write(f"g0 = {fit.slope!r}\ncb = 0.0\nfixed_overhead = {fit.intercept!r}\n")
    print(f"slope {fit.slope!r}\nintercept {fit.intercept!r}\nr_squared {fit.r_squared!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help=f"scenario TOML (default: {DEFAULT_CONFIG_PATH.name})")
    common.add_argument("--seed", type=int, default=None, help="override the scenario / model seed")
    common.add_argument("--out", default="out", help="output directory (created if absent)")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress and controller decisions")

    p = argparse.ArgumentParser(prog="distbvnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", parents=[common], help="check a scenario file")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("run", parents=[common], help="run one scenario and write reports")
    s.add_argument("--rounds", type=int, default=None)
    s.add_argument("--model", default=None, help="trained forest from ids-train")
    s.add_argument("--events", action="store_true", help="also write events.jsonl")
    s.add_argument("--vehicles", type=int, default=None, help="run one sweep cell with this vehicle count")
    s.add_argument("--cluster-size", type=int, default=None, help="run one sweep cell with this cluster size")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", parents=[common], help="grid of vehicle counts x cluster sizes")
    s.add_argument("--vehicles", type=_int_list, default=[20, 30, 40, 50])
    s.add_argument("--cluster-sizes", type=_int_list, default=[5, 10])
    s.add_argument("--rounds", type=int, default=None)
    s.add_argument("--model", default=None)
    s.set_defaults(func=cmd_sweep)

    for name, func, help_ in (("ids-train", cmd_ids_train, "train an isolation forest on a flow CSV"),
                              ("ids-eval", cmd_ids_eval, "score labelled flows and report metrics")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--data", default=str(IDS_FIXTURE), help="flow CSV with a header row")
        s.add_argument("--features", default=None, help="comma-separated feature columns (default: all but label)")
        s.add_argument("--label", default="Label", help="label column")
        s.add_argument("--benign-value", default="Benign", help="label value meaning benign")
        s.add_argument("--predictions", default=None, help="(eval) column of precomputed predictions")
        s.add_argument("--model", default=None, help="(eval) forest.json from ids-train")
        s.add_argument("--trees", type=int, default=100)
        s.add_argument("--subsample", type=int, default=256)
        s.add_argument("--threshold", type=float, default=0.5)
        s.set_defaults(func=func)

    s = sub.add_parser("gas-fit", parents=[common], help="least-squares gas model from a tx_count,gas CSV")
    s.add_argument("--table", default=str(GAS_TABLE))
    s.set_defaults(func=cmd_gas_fit)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command in ("ids-train",) and args.seed is None:
        args.seed = 42
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
