"""Placement, topology, mobility and the establishment engine.

Node ids double as row indices into the position array: regular nodes are
``0..n-1``, auxiliaries ``n..n+m-1`` and nodes added later take the next free
id.  Adjacency is a closed ball of radius ``rho`` under either the toroidal
or the plain Euclidean metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import crypto, protocol
from .config import ScenarioConfig

# stream tags for crypto.stream(seed, trial, tag, ...)
_SETUP, _DEPLOY_REGULAR, _DEPLOY_AUX, _MOBILITY, _NODE, _ADDITION = range(6)


class InvalidParam(ValueError):
    pass


class UnknownNode(KeyError):
    pass


class AuxNotFound(LookupError):
    pass


@dataclass(frozen=True)
class FieldGeometry:
    side: float
    area: float
    rho: float
    boundary: str = "torus"

    @property
    def toroidal(self) -> bool:
        return self.boundary == "torus"


def compute_field(n: int, d: int, rho: float, boundary: str = "torus") -> FieldGeometry:
    """Square field sized so that ``n`` nodes see ``d`` neighbours on average.

    Solves ``n = (d + 1) * A / (pi * rho**2)`` for the area ``A``.
    """
    if n < 1 or d < 1 or not rho > 0:
        raise InvalidParam(f"need n >= 1, d >= 1, rho > 0 (got n={n}, d={d}, rho={rho})")
    if boundary not in ("torus", "bounded"):
        raise InvalidParam(f"unknown boundary mode {boundary!r}")
    area = n * math.pi * rho**2 / (d + 1)
    return FieldGeometry(side=math.sqrt(area), area=area, rho=float(rho), boundary=boundary)


def deploy_regular(n: int, geom: FieldGeometry, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.0, geom.side, size=(n, 2))


def aux_cells(m: int) -> tuple[int, list[tuple[int, int]]]:
    """Grid dimension ``c = ceil(sqrt(m))`` and the (row, col) cells that get an auxiliary.

    Cells are taken row-major from (0, 0).
    """
    if m < 1:
        raise InvalidParam("need at least one auxiliary node")
    c = math.isqrt(m - 1) + 1
    return c, [divmod(k, c) for k in range(m)]


def deploy_auxiliary(m: int, geom: FieldGeometry, rng: np.random.Generator) -> np.ndarray:
    """One auxiliary at a uniform point inside each of the first ``m`` grid cells."""
    c, cells = aux_cells(m)
    cell = geom.side / c
    offsets = rng.uniform(0.0, cell, size=(m, 2))
    corners = np.array([(col * cell, row * cell) for row, col in cells], dtype=float)
    return np.minimum(corners + offsets, np.nextafter(geom.side, 0.0))


def deploy_auxiliary_uniform(m: int, geom: FieldGeometry, rng: np.random.Generator) -> np.ndarray:
    """Auxiliaries placed independently and uniformly over the whole field."""
    return rng.uniform(0.0, geom.side, size=(m, 2))


def distance(a: np.ndarray, b: np.ndarray, geom: FieldGeometry) -> np.ndarray:
    delta = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    if geom.toroidal:
        delta = np.minimum(delta, geom.side - delta)
    return np.hypot(delta[..., 0], delta[..., 1])


def adjacent_pairs(positions: np.ndarray, geom: FieldGeometry) -> np.ndarray:
    """All index pairs (i < j) within ``rho`` of each other, sorted."""
    if len(positions) < 2:
        return np.empty((0, 2), dtype=np.int64)
    if geom.toroidal:
        pts = np.mod(positions, geom.side)
        pts[pts >= geom.side] = 0.0
        tree = cKDTree(pts, boxsize=geom.side)
    else:
        tree = cKDTree(positions)
    pairs = tree.query_pairs(geom.rho, output_type="ndarray").astype(np.int64)
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    pairs.sort(axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


class Topology:
    """Adjacency over every node in a deployment."""

    def __init__(self, positions: np.ndarray, is_aux: np.ndarray, geom: FieldGeometry):
        self.positions = positions
        self.is_aux = is_aux
        self.geom = geom
        self.pairs = adjacent_pairs(positions, geom)
        size = len(positions)
        both = np.concatenate([self.pairs, self.pairs[:, ::-1]])
        both = both[np.lexsort((both[:, 1], both[:, 0]))]
        self._indptr = np.searchsorted(both[:, 0], np.arange(size + 1))
        self._indices = both[:, 1]

    def __len__(self) -> int:
        return len(self.positions)

    def neighbor_array(self, x: int) -> np.ndarray:
        if not 0 <= x < len(self.positions):
            raise UnknownNode(x)
        return self._indices[self._indptr[x]:self._indptr[x + 1]]

    def neighbors(self, x: int) -> set[int]:
        return set(self.neighbor_array(x).tolist())

    def degrees(self) -> np.ndarray:
        return np.diff(self._indptr)


@dataclass(frozen=True)
class Discovery:
    aux: int
    # regular neighbour that relays for a one-hop discovery, None when direct
    helper: Optional[int] = None


def discover_aux(v: int, topo: Topology, hops: int) -> Discovery:
    """Pick the auxiliary node ``v`` will use.

    Looks in v's own neighbourhood first and, with ``hops=1``, in the
    neighbourhoods of v's regular neighbours.  The nearest candidate to v
    wins, ties go to the smaller id.
    """
    if hops not in (0, 1):
        raise InvalidParam("hops must be 0 or 1")
    nbrs = topo.neighbor_array(v)
    direct = nbrs[topo.is_aux[nbrs]]
    if len(direct):
        return Discovery(_nearest(v, direct, topo))
    if hops == 0:
        raise AuxNotFound(v)
    found: dict[int, int] = {}
    for w in nbrs[~topo.is_aux[nbrs]]:
        w_nbrs = topo.neighbor_array(int(w))
        for a in w_nbrs[topo.is_aux[w_nbrs]].tolist():
            found.setdefault(a, int(w))  # w ascending, so smallest helper id
    if not found:
        raise AuxNotFound(v)
    aux = _nearest(v, np.array(sorted(found)), topo)
    return Discovery(aux, helper=found[aux])


def _nearest(v: int, candidates: np.ndarray, topo: Topology) -> int:
    dist = distance(topo.positions[candidates], topo.positions[v], topo.geom)
    order = np.lexsort((candidates, dist))
    return int(candidates[order[0]])


@dataclass(frozen=True)
class MobilityModel:
    max_step: float
    rounds: int = 0


def _disk_offsets(count: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(size=count))
    theta = rng.uniform(0.0, 2 * np.pi, size=count)
    return np.column_stack((r * np.cos(theta), r * np.sin(theta)))


def move_points(points: np.ndarray, geom: FieldGeometry, max_step: float, rng: np.random.Generator) -> np.ndarray:
    """Move every point to a uniform position in the disk of radius ``max_step`` around it.

    Toroidal fields wrap; bounded fields resample steps that leave the field.
    """
    points = np.asarray(points, dtype=float)
    if max_step <= 0 or len(points) == 0:
        return points.copy()
    moved = points + _disk_offsets(len(points), max_step, rng)
    if geom.toroidal:
        moved = np.mod(moved, geom.side)
        moved[moved >= geom.side] = 0.0
        return moved
    outside = np.flatnonzero(((moved < 0) | (moved > geom.side)).any(axis=1))
    while len(outside):
        moved[outside] = points[outside] + _disk_offsets(len(outside), max_step, rng)
        bad = ((moved[outside] < 0) | (moved[outside] > geom.side)).any(axis=1)
        outside = outside[bad]
    return moved


def move_regular(position, geom: FieldGeometry, model: MobilityModel, rng: np.random.Generator) -> np.ndarray:
    return move_points(np.asarray(position, dtype=float).reshape(1, 2), geom, model.max_step, rng)[0]


@dataclass
class RoundReport:
    trial: int
    round: int
    case1_direct: int = 0
    case1_supplemental: int = 0
    case1_failed: int = 0
    case2: int = 0
    messages: int = 0

    @property
    def attempted(self) -> int:
        return self.case1_direct + self.case1_supplemental + self.case1_failed + self.case2

    @property
    def direct_ok(self) -> int:
        return self.case1_direct + self.case2

    @property
    def supplemental_ok(self) -> int:
        return self.case1_supplemental

    @property
    def failed(self) -> int:
        return self.case1_failed


@dataclass
class TranscriptEntry:
    src: int
    dst: int
    round: int
    payload: bytes

    def line(self) -> str:
        return f"{self.src},{self.dst},{self.round},{self.payload.hex()}"


class Simulation:
    """One deployment of regular and auxiliary nodes.

    With ``full_protocol`` every establishment runs the real message
    exchange and nodes carry key material; otherwise only the discovery
    outcome is evaluated, which yields identical counts much faster.
    """

    def __init__(
        self,
        config: ScenarioConfig,
        trial: int = 0,
        *,
        full_protocol: bool = True,
        record_transcript: bool = False,
        geom: Optional[FieldGeometry] = None,
        regular_positions=None,
        aux_positions=None,
    ):
        """``geom`` and explicit positions override the generated deployment
        (used for hand-built fixtures); counts must match ``config.n``/``config.m``.
        """
        self.config = config
        self.trial = trial
        self.full_protocol = full_protocol
        self.record_transcript = record_transcript and full_protocol
        self.geom = geom or compute_field(config.n, config.d, config.rho_m, config.boundary)
        self.mobility = MobilityModel(config.mobility_step_factor * self.geom.rho, config.mobility_rounds)
        if regular_positions is None:
            regular = deploy_regular(config.n, self.geom, self._stream(_DEPLOY_REGULAR))
        else:
            regular = np.asarray(regular_positions, dtype=float).reshape(-1, 2)
        if aux_positions is not None:
            aux = np.asarray(aux_positions, dtype=float).reshape(-1, 2)
        elif config.m:
            placer = deploy_auxiliary if config.aux_placement == "cells" else deploy_auxiliary_uniform
            aux = placer(config.m, self.geom, self._stream(_DEPLOY_AUX))
        else:
            aux = np.empty((0, 2))
        if len(regular) != config.n or len(aux) != config.m:
            raise InvalidParam("explicit positions do not match config n/m")
        self.positions = np.vstack([regular, aux])
        self.is_aux = np.concatenate([np.zeros(config.n, bool), np.ones(config.m, bool)])
        self.round = 0
        self.transcript: list[TranscriptEntry] = []
        self._rngs: dict[int, crypto.ByteStream] = {}
        self._additions = 0

        self.server: Optional[protocol.SetupServer] = None
        self.regular: dict[int, protocol.RegularNodeState] = {}
        self.auxiliary: dict[int, protocol.AuxiliaryNodeState] = {}
        if full_protocol:
            self.server = protocol.SetupServer.create(self._stream(_SETUP))
            for i in range(config.n):
                self.regular[i] = protocol.provision_regular(self.server, i)
            for i in range(config.n, config.n + config.m):
                self.auxiliary[i] = protocol.provision_auxiliary(self.server, i)
        self.topology = Topology(self.positions, self.is_aux, self.geom)

    def _stream(self, *path: int) -> np.random.Generator:
        return crypto.stream(self.config.seed, self.trial, *path)

    def node_rng(self, node_id: int) -> crypto.ByteStream:
        rng = self._rngs.get(node_id)
        if rng is None:
            rng = self._rngs[node_id] = crypto.ByteStream(self._stream(_NODE, node_id), chunk=1024)
        return rng

    @property
    def regular_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.is_aux)

    @property
    def aux_ids(self) -> np.ndarray:
        return np.flatnonzero(self.is_aux)

    # -- topology changes -------------------------------------------------

    def _rebuild(self) -> None:
        self.topology = Topology(self.positions, self.is_aux, self.geom)

    def move(self) -> None:
        """One mobility round: every regular node moves, auxiliaries stay put."""
        self.round += 1
        rng = self._stream(_MOBILITY, self.round)
        idx = self.regular_ids
        self.positions = self.positions.copy()
        self.positions[idx] = move_points(self.positions[idx], self.geom, self.mobility.max_step, rng)
        self._rebuild()

    def _add(self, position, aux: bool):
        node_id = len(self.positions)
        if position is None:
            self._additions += 1
            position = self._stream(_ADDITION, self._additions).uniform(0.0, self.geom.side, size=2)
        self.positions = np.vstack([self.positions, np.asarray(position, dtype=float).reshape(1, 2)])
        self.is_aux = np.append(self.is_aux, aux)
        state = None
        if self.full_protocol:
            if aux:
                state = self.auxiliary[node_id] = protocol.add_auxiliary_node(self.server, node_id)
            else:
                state = self.regular[node_id] = protocol.add_regular_node(self.server, node_id)
        self._rebuild()
        return node_id, state

    def add_regular(self, position=None):
        return self._add(position, aux=False)

    def add_auxiliary(self, position=None):
        return self._add(position, aux=True)

    # -- establishment ----------------------------------------------------

    def run_establishment_round(self) -> RoundReport:
        """Establish keys over every adjacent regular-regular and regular-aux pair.

        Pairs are re-keyed even if they already share a key, since nodes
        re-run establishment after each movement.  Aux-aux pairs are ignored.
        """
        if self.full_protocol:
            return self._round_full()
        return self._round_fast()

    def _round_fast(self) -> RoundReport:
        report = RoundReport(self.trial, self.round)
        pairs = self.topology.pairs
        aux_a = self.is_aux[pairs[:, 0]]
        aux_b = self.is_aux[pairs[:, 1]]
        mixed = pairs[aux_a != aux_b]
        rr = pairs[~aux_a & ~aux_b]
        report.case2 = len(mixed)

        has_aux = np.zeros(len(self.positions), dtype=bool)
        has_aux[mixed.ravel()] = True
        has_aux &= ~self.is_aux
        responders = rr[:, 1]
        direct = has_aux[responders]
        report.case1_direct = int(direct.sum())
        if self.config.hops >= 1:
            via_neighbor = np.zeros(len(self.positions), dtype=bool)
            via_neighbor[rr[has_aux[rr[:, 1]], 0]] = True
            via_neighbor[rr[has_aux[rr[:, 0]], 1]] = True
            supplemental = ~direct & via_neighbor[responders]
            report.case1_supplemental = int(supplemental.sum())
        report.case1_failed = len(rr) - report.case1_direct - report.case1_supplemental
        report.messages = 4 * report.case1_direct + 6 * report.case1_supplemental + 2 * report.case2
        return report

    def _send(self, src: int, dst: int, msg: protocol.Message, report: RoundReport) -> None:
        report.messages += 1
        if self.record_transcript:
            self.transcript.append(TranscriptEntry(src, dst, self.round, protocol.encode(msg)))

    def _round_full(self) -> RoundReport:
        report = RoundReport(self.trial, self.round)
        discovered: dict[int, Optional[Discovery]] = {}
        for a, b in self.topology.pairs.tolist():
            a_aux, b_aux = self.is_aux[a], self.is_aux[b]
            if a_aux and b_aux:
                continue
            if a_aux or b_aux:
                reg, aux = (b, a) if a_aux else (a, b)
                self.case2(reg, aux, report)
                report.case2 += 1
                continue
            if b not in discovered:
                try:
                    discovered[b] = discover_aux(b, self.topology, self.config.hops)
                except AuxNotFound:
                    discovered[b] = None
            found = discovered[b]
            if found is None:
                report.case1_failed += 1
                continue
            self.case1(a, b, found, report)
            if found.helper is None:
                report.case1_direct += 1
            else:
                report.case1_supplemental += 1
        return report

    def case1(self, u_id: int, v_id: int, found: Discovery, report: RoundReport) -> bytes:
        u, v = self.regular[u_id], self.regular[v_id]
        aux = self.auxiliary[found.aux]
        m1 = protocol.initiate(u, v_id, self.node_rng(u_id))
        self._send(u_id, v_id, m1, report)
        m2 = protocol.handle_init(v, m1, self.node_rng(v_id))
        hop = [v_id] if found.helper is None else [v_id, found.helper]
        for src, dst in zip(hop, hop[1:] + [aux.id]):
            self._send(src, dst, m2, report)
        m3 = protocol.aux_handle(aux, m2, self.node_rng(aux.id))
        back = [aux.id] + hop[::-1]
        for src, dst in zip(back, back[1:]):
            self._send(src, dst, m3, report)
        m4 = protocol.responder_handle_reply(v, m3, u_id)
        self._send(v_id, u_id, m4, report)
        return protocol.initiator_handle_forward(u, m4, v_id)

    def case2(self, reg_id: int, aux_id: int, report: RoundReport) -> bytes:
        u, aux = self.regular[reg_id], self.auxiliary[aux_id]
        req = protocol.request_aux_key(u)
        self._send(reg_id, aux_id, req, report)
        reply = protocol.aux_handle_direct(aux, req, self.node_rng(aux_id))
        self._send(aux_id, reg_id, reply, report)
        return protocol.handle_aux_direct_reply(u, reply, aux_id)
