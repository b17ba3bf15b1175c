import random
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from distbvnet import engine, metrics
from distbvnet.core import DelayModel, ScenarioConfig
from distbvnet.metrics import KPI_HEADER, MetricsRow


def _delays(total, t_v=None):
    # t_b carries the remainder so that the cluster denominator equals ``total``
    return DelayModel(t_b=total - 0.3, t_s=0.1, t_n=0.1, t_c=0.1, t_v=0.1 if t_v is None else t_v)


def test_cluster_formula_substitution():
    assert metrics.throughput_by_cluster(5, 1.0, _delays(0.5)) == pytest.approx(10.0)
    assert metrics.throughput_by_cluster(5, 0.0, _delays(0.5)) == 0.0


def test_cluster_formula_linear():
    d = _delays(0.5)
    assert metrics.throughput_by_cluster(10, 1.0, d) == 2 * metrics.throughput_by_cluster(5, 1.0, d)


def test_vehicle_formula_substitution():
    assert metrics.throughput_by_vehicles(20, 1.0, _delays(0.5)) == pytest.approx(40.0)


def test_vehicle_formula_halves_when_delays_double():
    a = metrics.throughput_by_vehicles(20, 1.0, DelayModel(0.2, 0.1, 0.1, 0.05, 0.1))
    b = metrics.throughput_by_vehicles(20, 1.0, DelayModel(0.4, 0.2, 0.2, 0.1, 0.2))
    assert b == pytest.approx(a / 2, rel=1e-15)


def test_formula_domain_errors():
    with pytest.raises(ValueError):
        metrics.throughput_by_cluster(0, 1.0, DelayModel())
    with pytest.raises(ValueError):
        metrics.throughput_by_vehicles(5, -1.0, DelayModel())
    with pytest.raises(ZeroDivisionError):
        metrics.throughput_by_cluster(5, 1.0, DelayModel(0, 0, 0, 0, 0))


@given(st.floats(1, 1e4), st.floats(0, 1e3), st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_throughput_matches_scalar_arithmetic(n, data, t_b, t_x):
    d = DelayModel(t_b, t_x, t_x / 2, t_x / 3, t_x / 4)
    c = metrics.throughput_by_cluster(n, data, d)
    v = metrics.throughput_by_vehicles(n, data, d)
    assert c == pytest.approx(n * data / (t_b + t_x + t_x / 2 + t_x / 3), rel=1e-12)
    assert v == pytest.approx(n * data / (t_b + t_x + t_x / 2 + t_x / 4), rel=1e-12)


class _FakeReport:
    def __init__(self, sent, delivered, rounds=1000):
        self.config = ScenarioConfig(rounds=rounds)
        self.rounds = rounds
        self.counters = engine.Counters(sent=sent, delivered=delivered, in_flight=sent - delivered,
                                        delivered_bits=8000 * delivered)
        self.delays = [1.0] * delivered
        self.first_depletion_round = None
        self.energy_drains = [1.0] * 80
        self.vehicles = [None] * 80
        self.cluster_size_samples = [8, 8]

    n_vehicles = property(lambda self: 80)
    energy_consumed = engine.RunReport.energy_consumed


def test_pdr_ratio():
    assert metrics.compute_kpis(_FakeReport(1000, 990)).pdr_pct == pytest.approx(99.0)


def test_nlt_defaults_to_round_count():
    row = metrics.compute_kpis(_FakeReport(10, 10, rounds=1000))
    assert row.nlt_rounds == 1000 and row.cluster_size == 8


def test_zero_sent_gives_zero_pdr():
    assert metrics.compute_kpis(_FakeReport(0, 0)).pdr_pct == 0.0


@pytest.fixture(scope="module")
def report():
    return engine.run(ScenarioConfig(n_vehicles=25, n_rsus=5, rounds=50, seed=11))


def test_event_replay_matches_kpis(report):
    row = metrics.compute_kpis(report)
    assert metrics.replay_kpis(report.events, report.n_vehicles, report.rounds, row.cluster_size) == row


def test_model_throughput_inputs(report):
    m = metrics.model_throughput(report)
    assert m.mean_cluster_size == pytest.approx(sum(report.cluster_size_samples) / len(report.cluster_size_samples))
    assert m.cluster_mbps == pytest.approx(
        metrics.throughput_by_cluster(m.mean_cluster_size, m.data_mbit, report.config.delay_model, m.t_n))


def _rows(n, seed=0):
    rng = random.Random(seed)
    return [MetricsRow(20 + 10 * i, 5, rng.randrange(2000), rng.random() * 100, rng.random() * 1e3,
                       rng.random() * 10, rng.random() * 1e4, rng.randrange(10**6)) for i in range(n)]


def test_single_row_csv(tmp_path):
    metrics.emit_report(_rows(1), tmp_path)
    lines = (tmp_path / "kpi.csv").read_text().splitlines()
    assert len(lines) == 2 and tuple(lines[0].split(",")) == KPI_HEADER


def test_csv_round_trip(tmp_path):
    rows = _rows(6, seed=3)
    metrics.emit_report(rows, tmp_path)
    assert metrics.read_kpi_csv(tmp_path / "kpi.csv") == rows


def test_series_files(tmp_path):
    rows = _rows(4) + [replace(r, cluster_size=10) for r in _rows(4, seed=1)]
    model = {(r.vehicles, r.cluster_size): metrics.ModelThroughput(r.cluster_size, 0.1, 0.1, 1.0 * r.cluster_size, 2.0)
             for r in rows}
    metrics.emit_report(rows, tmp_path, model, [(1, 5400), (2, 10800)])
    s5 = metrics.read_series(tmp_path / "series" / "throughput_cluster_size_5.csv")
    s10 = metrics.read_series(tmp_path / "series" / "throughput_cluster_size_10.csv")
    assert [x for x, _ in s5] == [20, 30, 40, 50] and all(y == 5.0 for _, y in s5)
    assert all(y == 10.0 for _, y in s10)
    assert (tmp_path / "gas_fit.csv").exists()
    over = metrics.read_series(tmp_path / "series" / "overhead_cluster_size_5.csv")
    assert [y for _, y in over] == [r.overhead_msgs for r in _rows(4)]


def test_emit_requires_rows(tmp_path):
    with pytest.raises(ValueError):
        metrics.emit_report([], tmp_path)
