"""KPIs, analytic throughput models and CSV report emission."""

from __future__ import annotations

import csv
import dataclasses
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .core import DelayModel

KPI_HEADER = ("vehicles", "cluster_size", "nlt_rounds", "pdr_pct", "thrpt_kbps",
              "eted_s", "ecm_mj", "overhead_msgs")

KPI_FILE = "kpi.csv"
SERIES_DIR = "series"


@dataclass(frozen=True)
class MetricsRow:
    vehicles: int
    cluster_size: int
    nlt_rounds: int
    pdr_pct: float
    thrpt_kbps: float
    eted_s: float
    ecm_mj: float
    overhead_msgs: int


@dataclass(frozen=True)
class ModelThroughput:
    """Inputs and outputs of the two analytic throughput formulas for one run."""

    mean_cluster_size: float
    data_mbit: float  # mean generated Mbit per vehicle per aggregation window
    t_n: float
    cluster_mbps: float
    vehicles_mbps: float


def throughput_by_cluster(cluster_size: float, data_mbit: float, delays: DelayModel,
                          t_n: Optional[float] = None) -> float:
    """C * D(C) / (t_b + t_s + t_n + t_c), in Mbps."""
    if cluster_size < 1:
        raise ValueError("cluster size must be >= 1")
    if data_mbit < 0:
        raise ValueError("data volume must be >= 0")
    denom = delays.cluster_denominator(t_n)
    if denom <= 0:
        raise ZeroDivisionError("t_b + t_s + t_n + t_c must be > 0")
    return cluster_size * data_mbit / denom


def throughput_by_vehicles(vehicles: float, data_mbit: float, delays: DelayModel,
                           t_n: Optional[float] = None) -> float:
    """V * D(V) / (t_b + t_s + t_n + t_v), in Mbps."""
    if vehicles < 1:
        raise ValueError("vehicle count must be >= 1")
    if data_mbit < 0:
        raise ValueError("data volume must be >= 0")
    denom = delays.vehicle_denominator(t_n)
    if denom <= 0:
        raise ZeroDivisionError("t_b + t_s + t_n + t_v must be > 0")
    return vehicles * data_mbit / denom


def _cluster_size_label(report) -> int:
    target = report.config.cluster_size_target
    if target:
        return int(target)
    samples = report.cluster_size_samples
    return int(round(sum(samples) / len(samples))) if samples else 0


def compute_kpis(report) -> MetricsRow:
    """Per-run KPIs: lifetime, delivery ratio, throughput, delay, energy and overhead."""
    if report.rounds != report.config.rounds:
        raise ValueError("run is incomplete")
    c = report.counters
    rounds = report.rounds
    pdr = 100.0 * c.delivered / c.sent if c.sent else 0.0
    thrpt = c.delivered_bits / rounds / 1000.0 if rounds else 0.0
    eted = math.fsum(report.delays) / len(report.delays) if report.delays else 0.0
    nlt = report.first_depletion_round if report.first_depletion_round is not None else rounds
    ecm = report.energy_consumed() / report.n_vehicles
    return MetricsRow(report.n_vehicles, _cluster_size_label(report), nlt, pdr, thrpt, eted, ecm,
                      c.exchanged)


def replay_kpis(events: Iterable, n_vehicles: int, rounds: int, cluster_size: int) -> MetricsRow:
    """Recompute the KPIs from the event log alone."""
    sent = delivered = bits = overhead = 0
    delays: list[float] = []
    drained: list[float] = []
    first_depletion = None
    for ev in events:
        kind, data = ev.kind, ev.data
        if kind == "generate":
            sent += 1
        elif kind == "controller-route":
            if data[2] == "delivered":
                delivered += 1
                delays.append(data[4])
                bits += 8 * data[6]
        elif kind == "energy":
            drained.append(data[0])
        elif kind == "deplete":
            if first_depletion is None or ev.round < first_depletion:
                first_depletion = ev.round
        elif kind == "exchange":
            overhead += sum(data)
    return MetricsRow(
        vehicles=n_vehicles,
        cluster_size=cluster_size,
        nlt_rounds=rounds if first_depletion is None else first_depletion,
        pdr_pct=100.0 * delivered / sent if sent else 0.0,
        thrpt_kbps=bits / rounds / 1000.0 if rounds else 0.0,
        eted_s=math.fsum(delays) / len(delays) if delays else 0.0,
        ecm_mj=math.fsum(drained) / n_vehicles,
        overhead_msgs=overhead,
    )


def model_throughput(report) -> ModelThroughput:
    """Evaluate both throughput formulas on a run's measured inputs.

    The cluster size is the mean over sampled non-empty clusters, the data
    volume is generated Mbit per vehicle per window, and t_n is the mean
    effective NFV delay seen by delivered messages.
    """
    cfg = report.config
    delays = cfg.delay_model
    windows = report.n_vehicles * report.rounds / cfg.window_rounds
    data = report.counters.generated_bits / 1e6 / windows if windows else 0.0
    samples = report.cluster_size_samples
    mean_c = sum(samples) / len(samples) if samples else 0.0
    t_n = math.fsum(report.t_n_samples) / len(report.t_n_samples) if report.t_n_samples else delays.t_n
    cluster = throughput_by_cluster(mean_c, data, delays, t_n) if mean_c >= 1 else 0.0
    vehicles = throughput_by_vehicles(report.n_vehicles, data, delays, t_n)
    return ModelThroughput(mean_c, data, t_n, cluster, vehicles)


# -- CSV --------------------------------------------------------------------

def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_kpi_csv(rows: Sequence[MetricsRow], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(KPI_HEADER)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in KPI_HEADER])
    return path


def read_kpi_csv(path: str | Path) -> list[MetricsRow]:
    types = {f.name: f.type for f in dataclasses.fields(MetricsRow)}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != KPI_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRow(**{k: (int(v) if types[k] in ("int", int) else float(v))
                              for k, v in row.items()}) for row in reader]


def write_series(path: str | Path, header: tuple[str, str], points: Iterable[tuple]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, y in points:
            w.writerow([_fmt(x), _fmt(y)])
    return path


def read_series(path: str | Path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(float(x), float(y)) for x, y in reader]


def write_cluster_rows(rows: Iterable[tuple], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("round", "cluster_id", "rsu_id", "head_id", "member_count"))
        w.writerows(rows)
    return path


def emit_report(rows: Sequence[MetricsRow], destination: str | Path,
                model: Optional[Mapping[tuple[int, int], ModelThroughput]] = None,
                gas_table: Optional[Sequence[tuple[float, float]]] = None) -> list[Path]:
    """Write the KPI table, the plot series and, when given, the gas table with its fit.

    ``model`` maps ``(vehicles, cluster_size)`` to the run's analytic
    throughput. Series files are two-column CSVs under ``series/``.
    """
    if not rows:
        raise ValueError("no rows to emit")
    dest = Path(destination)
    (dest / SERIES_DIR).mkdir(parents=True, exist_ok=True)
    written = [write_kpi_csv(rows, dest / KPI_FILE)]
    sizes = sorted({r.cluster_size for r in rows})

    overhead: dict[int, list[int]] = defaultdict(list)
    for r in rows:
        overhead[r.vehicles].append(r.overhead_msgs)
    written.append(write_series(dest / SERIES_DIR / "overhead_vs_vehicles.csv", ("vehicles", "overhead_msgs"),
                                [(v, sum(o) / len(o)) for v, o in sorted(overhead.items())]))
    for cs in sizes:
        sub = sorted((r for r in rows if r.cluster_size == cs), key=lambda r: r.vehicles)
        written.append(write_series(dest / SERIES_DIR / f"overhead_cluster_size_{cs}.csv",
                                    ("vehicles", "overhead_msgs"), [(r.vehicles, r.overhead_msgs) for r in sub]))
        written.append(write_series(dest / SERIES_DIR / f"measured_thrpt_cluster_size_{cs}.csv",
                                    ("vehicles", "thrpt_kbps"), [(r.vehicles, r.thrpt_kbps) for r in sub]))
        if model:
            pts = [(r.vehicles, model[(r.vehicles, cs)].cluster_mbps) for r in sub if (r.vehicles, cs) in model]
            written.append(write_series(dest / SERIES_DIR / f"throughput_cluster_size_{cs}.csv",
                                        ("vehicles", "throughput_mbps"), pts))
            pts = [(r.vehicles, model[(r.vehicles, cs)].vehicles_mbps) for r in sub if (r.vehicles, cs) in model]
            written.append(write_series(dest / SERIES_DIR / f"throughput_vehicles_cluster_size_{cs}.csv",
                                        ("vehicles", "throughput_mbps"), pts))
    if gas_table:
        written.extend(emit_gas(gas_table, dest))
    return written


def emit_gas(table: Sequence[tuple[float, float]], destination: str | Path) -> list[Path]:
    from .ledger import fit_gas_table

    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    fit = fit_gas_table(table)
    table_path = dest / "gas_table.csv"
    with open(table_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tx_count", "gas", "fitted_gas"))
        for x, y in table:
            w.writerow([_fmt(x), _fmt(y), _fmt(fit.slope * x + fit.intercept)])
    fit_path = dest / "gas_fit.csv"
    with open(fit_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("slope", "intercept", "r_squared"))
        w.writerow([_fmt(fit.slope), _fmt(fit.intercept), _fmt(fit.r_squared)])
    return [table_path, fit_path]
