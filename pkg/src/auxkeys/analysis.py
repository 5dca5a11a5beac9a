"""Connectivity formulas, empirical estimators, node capture and audits."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import crypto, protocol
from .config import ScenarioConfig
from .netsim import AuxNotFound, RoundReport, Simulation, discover_aux


class InvalidParam(ValueError):
    pass


class NoLinks(ValueError):
    pass


DEFAULT_D_VALUES = (20, 40, 60, 80, 100)
DEFAULT_RATIOS = tuple(round(0.01 * k, 2) for k in range(1, 11))
FIGURE_M_VALUES = tuple(range(50, 501, 50))


@dataclass(frozen=True)
class ConnectivityParams:
    n: int
    m: int
    d: float

    def __post_init__(self):
        if self.n < 0 or self.m < 0 or self.d < 0:
            raise InvalidParam("n, m and d must be non-negative")
        if self.m + self.n == 0:
            raise InvalidParam("need at least one node")
        if self.d > self.m + self.n:
            raise InvalidParam(f"d={self.d} exceeds m+n={self.m + self.n}")


def _no_aux_prob(params: ConnectivityParams, exponent: float) -> float:
    """(1 - d/(m+n)) ** exponent, via log1p to avoid cancellation for small d/(m+n)."""
    if exponent == 0:
        return 1.0
    x = params.d / (params.m + params.n)
    if x >= 1.0:
        return 0.0
    return math.exp(exponent * math.log1p(-x))


def analytic_p_prime(params: ConnectivityParams) -> float:
    """Probability that two neighbouring regular nodes can establish a key directly."""
    x = params.d / (params.m + params.n)
    if params.m == 0:
        return 0.0
    if x >= 1.0:
        return 1.0
    return -math.expm1(params.m * math.log1p(-x))


def analytic_p(params: ConnectivityParams) -> float:
    """Overall direct connectivity: aux-regular links always succeed."""
    m, n = params.m, params.n
    return (m + n * analytic_p_prime(params)) / (m + n)


def analytic_p1(params: ConnectivityParams) -> float:
    """Connectivity after the one-hop supplemental phase."""
    p = analytic_p(params)
    return p + (1.0 - p) * (1.0 - _no_aux_prob(params, params.m * params.d))


def empirical_p(report: RoundReport) -> float:
    """Fraction of adjacent pairs secured in the direct phase (Case 1 direct plus Case 2)."""
    if report.attempted == 0:
        raise NoLinks("no adjacent pairs in this round")
    return report.direct_ok / report.attempted


def empirical_p1(report: RoundReport) -> float:
    if report.attempted == 0:
        raise NoLinks("no adjacent pairs in this round")
    return (report.direct_ok + report.supplemental_ok) / report.attempted


# ---------------------------------------------------------------------------
# Node capture
# ---------------------------------------------------------------------------


@dataclass
class AdversaryKnowledge:
    captured: frozenset[int] = frozenset()
    # (node, peer) -> key, as found in the captured node's memory
    learned_keys: dict[tuple[int, int], bytes] = field(default_factory=dict)
    master_keys: dict[int, bytes] = field(default_factory=dict)

    def key_values(self) -> set[bytes]:
        return set(self.learned_keys.values()) | set(self.master_keys.values())


@dataclass(frozen=True)
class ResilienceReport:
    c: int
    total_links: int
    compromised_links: int

    @property
    def fraction(self) -> float:
        return self.compromised_links / self.total_links if self.total_links else 0.0


def _require_protocol(sim: Simulation) -> None:
    if not sim.full_protocol:
        raise InvalidParam("simulation was run without key material (full_protocol=False)")


def capture_nodes(sim: Simulation, c: int, rng: np.random.Generator) -> AdversaryKnowledge:
    """Capture ``c`` regular nodes chosen uniformly and harvest everything they store.

    Auxiliaries are tamper resistant and never captured.
    """
    _require_protocol(sim)
    population = sorted(sim.regular)
    if not 0 <= c <= len(population):
        raise InvalidParam(f"cannot capture {c} of {len(population)} regular nodes")
    chosen = sorted(rng.choice(population, size=c, replace=False).tolist()) if c else []
    knowledge = AdversaryKnowledge(captured=frozenset(chosen))
    for node_id in chosen:
        node = sim.regular[node_id]
        knowledge.master_keys[node_id] = node.master_key
        for peer, key in node.pairwise_keys.items():
            knowledge.learned_keys[(node_id, peer)] = key
    return knowledge


def secured_links(sim: Simulation) -> list[tuple[int, int, bytes]]:
    """Every unordered pair of nodes currently holding the same key for each other."""
    _require_protocol(sim)
    links = []
    for u_id in sorted(sim.regular):
        for peer, key in sorted(sim.regular[u_id].pairwise_keys.items()):
            if peer in sim.auxiliary:
                if sim.auxiliary[peer].session_keys.get(u_id) == key:
                    links.append((u_id, peer, key))
            elif peer > u_id and sim.regular[peer].pairwise_keys.get(u_id) == key:
                links.append((u_id, peer, key))
    return links


def resilience(knowledge: AdversaryKnowledge, sim: Simulation, *, include_captured: bool = False) -> ResilienceReport:
    """Count links between non-captured nodes whose key the adversary knows or can derive.

    A link key is derivable only from an endpoint's master key, which the
    adversary holds only for captured nodes.  With ``include_captured`` the
    links touching captured nodes are counted instead (they are all exposed).
    """
    known = knowledge.key_values()
    masters = set(knowledge.master_keys.values())
    total = compromised = 0
    for u, v, key in secured_links(sim):
        touches = u in knowledge.captured or v in knowledge.captured
        if touches != include_captured:
            continue
        total += 1
        endpoint_masters = {sim.regular[x].master_key for x in (u, v) if x in sim.regular}
        if key in known or endpoint_masters & masters:
            compromised += 1
    return ResilienceReport(c=len(knowledge.captured), total_links=total, compromised_links=compromised)


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    figure: str
    series: str
    x: float
    y: float
    kind: str

    def __post_init__(self):
        if not 0.0 <= self.y <= 1.0:
            raise InvalidParam(f"probability out of range: {self.y}")


def run_trial(config: ScenarioConfig, trial: int, full_protocol: bool = False) -> list[RoundReport]:
    """Initial establishment plus one re-establishment per mobility round."""
    sim = Simulation(config, trial, full_protocol=full_protocol)
    reports = [sim.run_establishment_round()]
    for _ in range(config.mobility_rounds):
        sim.move()
        reports.append(sim.run_establishment_round())
    return reports


def run_trials(config: ScenarioConfig, jobs: int = 1) -> list[list[RoundReport]]:
    """Round reports for every trial, in trial order whatever ``jobs`` is."""
    trials = range(config.trials)
    if jobs <= 1 or config.trials == 1:
        return [run_trial(config, t) for t in trials]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_trial, [config] * config.trials, trials))


def sweep(
    mode: str,
    *,
    n: int = 5000,
    d_values: Sequence[int] = DEFAULT_D_VALUES,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    m_values: Sequence[int] = FIGURE_M_VALUES,
    base: Optional[ScenarioConfig] = None,
    jobs: int = 1,
) -> list[CurvePoint]:
    """Curve points for one sweep mode.

    ``fig1``/``fig2`` evaluate the closed forms over ``d_values x ratios``;
    ``fig3`` pairs analytic and simulated direct connectivity for each
    ``m``; ``fig4`` adds mobility rounds (taken from ``base``, default 10)
    and reports each round separately.
    """
    if mode in ("fig1", "fig2"):
        if not d_values or not ratios:
            raise InvalidParam("empty sweep grid")
        formula = analytic_p if mode == "fig1" else analytic_p1
        points = []
        for d in d_values:
            for ratio in ratios:
                m = int(round(ratio * n))
                y = formula(ConnectivityParams(n=n, m=m, d=d))
                points.append(CurvePoint(mode, f"d={d}", float(ratio), y, "analytic"))
        return points
    if mode not in ("fig3", "fig4"):
        raise InvalidParam(f"unknown sweep mode {mode!r}")
    if not m_values:
        raise InvalidParam("empty sweep grid")
    base = base or ScenarioConfig(n=n, d=80, trials=10)
    if mode == "fig4" and base.mobility_rounds == 0:
        base = replace(base, mobility_rounds=10)
    if mode == "fig3":
        base = replace(base, mobility_rounds=0)
    points = []
    for m in m_values:
        config = replace(base, m=m).validate()
        x = m / config.n
        trials = run_trials(config, jobs)
        if mode == "fig3":
            points.append(CurvePoint(mode, f"d={config.d}", x, analytic_p(ConnectivityParams(config.n, m, config.d)), "analytic"))
            points.append(CurvePoint(mode, f"d={config.d}", x, float(np.mean([empirical_p(t[0]) for t in trials])), "empirical"))
        else:
            for rnd in range(config.mobility_rounds + 1):
                y = float(np.mean([empirical_p(t[rnd]) for t in trials]))
                points.append(CurvePoint(mode, f"round={rnd}", x, y, "empirical"))
    return points


# ---------------------------------------------------------------------------
# Overheads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StorageAudit:
    regular_nodes: int
    auxiliary_nodes: int
    regular_preloaded: Counter
    auxiliary_preloaded: Counter
    session_keys: int


def storage_audit(sim: Simulation) -> StorageAudit:
    """Preloaded-secret counts per role; session keys are tallied separately."""
    _require_protocol(sim)
    return StorageAudit(
        regular_nodes=len(sim.regular),
        auxiliary_nodes=len(sim.auxiliary),
        regular_preloaded=Counter(node.preloaded_secrets for node in sim.regular.values()),
        auxiliary_preloaded=Counter(node.preloaded_secrets for node in sim.auxiliary.values()),
        session_keys=sum(len(node.pairwise_keys) for node in sim.regular.values())
        + sum(len(node.session_keys) for node in sim.auxiliary.values()),
    )


def _counted(tallies: dict[str, Counter], role: str, fn, *args):
    with crypto.count_ops() as ops:
        result = fn(*args)
    tallies.setdefault(role, Counter()).update(ops)
    return result


def case1_operation_counts(
    u: protocol.RegularNodeState,
    v: protocol.RegularNodeState,
    aux: protocol.AuxiliaryNodeState,
    rng_u,
    rng_v,
    rng_aux,
) -> dict[str, Counter]:
    """Primitive calls made by each role during one Case 1 exchange."""
    tallies: dict[str, Counter] = {"initiator": Counter(), "responder": Counter(), "auxiliary": Counter()}
    m1 = _counted(tallies, "initiator", protocol.initiate, u, v.id, rng_u)
    m2 = _counted(tallies, "responder", protocol.handle_init, v, m1, rng_v)
    m3 = _counted(tallies, "auxiliary", protocol.aux_handle, aux, m2, rng_aux)
    m4 = _counted(tallies, "responder", protocol.responder_handle_reply, v, m3, u.id)
    _counted(tallies, "initiator", protocol.initiator_handle_forward, u, m4, v.id)
    return tallies


def case2_operation_counts(u: protocol.RegularNodeState, aux: protocol.AuxiliaryNodeState, rng_aux) -> dict[str, Counter]:
    tallies: dict[str, Counter] = {"regular": Counter(), "auxiliary": Counter()}
    req = _counted(tallies, "regular", protocol.request_aux_key, u)
    reply = _counted(tallies, "auxiliary", protocol.aux_handle_direct, aux, req, rng_aux)
    _counted(tallies, "regular", protocol.handle_aux_direct_reply, u, reply, aux.id)
    return tallies


OPERATIONS = ("prf", "mac", "verify", "encrypt", "decrypt")


def operation_audit(sim: Simulation, samples: int = 100) -> dict[tuple[str, str], dict[str, set[int]]]:
    """Per-handshake primitive counts over up to ``samples`` pairs of each case.

    Returns ``{(case, role): {op: distinct per-handshake counts}}``; a
    singleton set means every sampled handshake agreed.
    """
    _require_protocol(sim)
    out: dict[tuple[str, str], dict[str, set[int]]] = {}
    done = {"case1": 0, "case2": 0}
    for a, b in sim.topology.pairs.tolist():
        if done["case1"] >= samples and done["case2"] >= samples:
            break
        a_aux, b_aux = bool(sim.is_aux[a]), bool(sim.is_aux[b])
        if a_aux and b_aux:
            continue
        if a_aux or b_aux:
            case = "case2"
            if done[case] >= samples:
                continue
            reg, aux_id = (b, a) if a_aux else (a, b)
            tallies = case2_operation_counts(sim.regular[reg], sim.auxiliary[aux_id], sim.node_rng(aux_id))
        else:
            case = "case1"
            if done[case] >= samples:
                continue
            try:
                aux_id = discover_aux(b, sim.topology, 0).aux
            except AuxNotFound:
                continue
            tallies = case1_operation_counts(
                sim.regular[a], sim.regular[b], sim.auxiliary[aux_id],
                sim.node_rng(a), sim.node_rng(b), sim.node_rng(aux_id),
            )
        done[case] += 1
        for role, ops in tallies.items():
            seen = out.setdefault((case, role), {op: set() for op in OPERATIONS})
            for op in OPERATIONS:
                seen[op].add(ops[op])
    return out
