"""RSU-anchored cluster formation and ledger-recorded cluster-head election."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

from . import ledger as lg
from .core import Rsu, ScenarioConfig, Vehicle, distance, signal_strength


@dataclass(frozen=True)
class CandidateScore:
    vehicle_id: int
    normalized_signal: float
    normalized_power: float
    type_weight: float
    total: float


@dataclass(frozen=True)
class Cluster:
    id: int
    rsu_id: int
    members: frozenset[int]
    head: int
    key_pair: lg.KeyPair
    vote_record: tuple[tuple[int, int, float], ...]
    formed_round: int = 0

    @property
    def size(self) -> int:
        return len(self.members)


class Clustering(NamedTuple):
    clusters: list[Cluster]
    unclustered: list[int]


def _minmax(values: Sequence[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.5] * len(values)
    span = hi - lo
    return [(v - lo) / span for v in values]


def score_candidates(vehicles: Sequence[Vehicle], rsu: Rsu, cfg: ScenarioConfig) -> list[CandidateScore]:
    """Weighted election scores; signal and power are min-max normalised over the candidates."""
    if not vehicles:
        return []
    w_s, w_p, w_t = cfg.election_weights
    signal = _minmax([signal_strength(v, rsu, cfg.tx_power_dbm, cfg.path_loss_exp) for v in vehicles])
    power = _minmax([v.processing_power for v in vehicles])
    return [
        CandidateScore(v.id, s, p, v.vehicle_type_weight, w_s * s + w_p * p + w_t * v.vehicle_type_weight)
        for v, s, p in zip(vehicles, signal, power)
    ]


def vote_tx(cluster_id: int, rsu_id: int, round_: int, candidates: Sequence[CandidateScore],
            elected: int) -> bytes:
    votes = [[rsu_id, c.vehicle_id, c.total] for c in sorted(candidates, key=lambda c: c.vehicle_id)]
    return lg.encode_tx(lg.VOTE, cluster=cluster_id, rsu=rsu_id, round=round_, votes=votes, elected=elected)


def elect_head(candidates: Sequence[CandidateScore], ledger: Optional[lg.Ledger] = None, *,
               cluster_id: int = 0, rsu_id: int = 0, round_: int = 0) -> int:
    """Highest total wins, lowest vehicle id on ties.

    With a ledger the vote record is committed as its own block before the
    winner is returned.
    """
    if not candidates:
        raise ValueError("no candidates to elect from")
    best = min(candidates, key=lambda c: (-c.total, c.vehicle_id))
    if ledger is not None:
        lg.append_block(ledger, [vote_tx(cluster_id, rsu_id, round_, candidates, best.vehicle_id)], round_)
    return best.vehicle_id


def assign_vehicles(vehicles: Iterable[Vehicle], rsus: Sequence[Rsu]) -> dict[int, Optional[int]]:
    """Nearest in-coverage RSU per live vehicle (lower RSU id on ties); None when out of range."""
    out: dict[int, Optional[int]] = {}
    for v in vehicles:
        if v.depleted:
            continue
        best = None
        for r in rsus:
            d = distance(v.position, r.position)
            if d > r.coverage_radius:
                continue
            key = (d, r.id)
            if best is None or key < best:
                best = key
        out[v.id] = None if best is None else best[1]
    return out


def _establish(cluster_id: int, rsu: Rsu, members: Sequence[Vehicle], cfg: ScenarioConfig,
               ledger: Optional[lg.Ledger], round_: int) -> Cluster:
    candidates = score_candidates(members, rsu, cfg)
    head = elect_head(candidates, ledger, cluster_id=cluster_id, rsu_id=rsu.id, round_=round_)
    key = lg.generate_keypair(cfg.seed, "cluster", cluster_id, round_, head)
    if ledger is not None:
        lg.append_block(ledger, [lg.registration_tx(cluster_id, rsu.id, head, key.public, round_)], round_)
    votes = tuple((rsu.id, c.vehicle_id, c.total) for c in sorted(candidates, key=lambda c: c.vehicle_id))
    return Cluster(cluster_id, rsu.id, frozenset(v.id for v in members), head, key, votes, round_)


def form_clusters(vehicles: Sequence[Vehicle], rsus: Sequence[Rsu], cfg: ScenarioConfig,
                  ledgers: Optional[Mapping[int, lg.Ledger]] = None, round_: int = 0) -> Clustering:
    """One cluster per RSU that attracts at least one live vehicle; the cluster id is the RSU id."""
    if not rsus:
        raise ValueError("at least one RSU is required")
    assignment = assign_vehicles(vehicles, rsus)
    by_id = {v.id: v for v in vehicles}
    groups: dict[int, list[Vehicle]] = {}
    unclustered = []
    for vid in sorted(assignment):
        rid = assignment[vid]
        if rid is None:
            unclustered.append(vid)
        else:
            groups.setdefault(rid, []).append(by_id[vid])
    rsu_by_id = {r.id: r for r in rsus}
    clusters = [
        _establish(rid, rsu_by_id[rid], groups[rid], cfg, ledgers.get(rid) if ledgers else None, round_)
        for rid in sorted(groups)
    ]
    return Clustering(clusters, unclustered)


def handle_churn(cluster: Cluster, departed: Iterable[int], joined: Iterable[int],
                 vehicles: Mapping[int, Vehicle], rsu: Rsu, cfg: ScenarioConfig,
                 ledger: Optional[lg.Ledger] = None, round_: int = 0,
                 clustered: Optional[set[int]] = None) -> Optional[Cluster]:
    """Apply departures and arrivals; returns None when the cluster dissolves.

    ``clustered`` is the set of vehicles currently in any cluster and is used
    to reject arrivals that already belong somewhere.
    """
    departed = set(departed)
    joined = set(joined)
    strangers = departed - cluster.members
    if strangers:
        raise ValueError(f"vehicles {sorted(strangers)} are not members of cluster {cluster.id}")
    taken = joined & (cluster.members | (clustered or set()))
    if taken:
        raise ValueError(f"vehicles {sorted(taken)} already belong to a cluster")
    members = (cluster.members - departed) | joined
    if not members:
        return None
    if cluster.head not in departed:
        return replace(cluster, members=frozenset(members))
    # the head left: re-elect among whoever is still here and rotate the cluster key
    remaining = [vehicles[v] for v in sorted(members)]
    return _establish(cluster.id, rsu, remaining, cfg, ledger, round_)
