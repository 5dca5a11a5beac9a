import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxkeys import analysis, crypto
from auxkeys.config import ScenarioConfig
from auxkeys.netsim import (
    AuxNotFound,
    FieldGeometry,
    InvalidParam,
    MobilityModel,
    Simulation,
    Topology,
    UnknownNode,
    adjacent_pairs,
    aux_cells,
    compute_field,
    deploy_auxiliary,
    deploy_regular,
    discover_aux,
    distance,
    move_points,
    move_regular,
)

from oracles import brute_force_pairs

BOX = FieldGeometry(side=100.0, area=1e4, rho=30.0, boundary="bounded")


def fixture_sim(regular, aux, hops=0, geom=BOX, full=True, **kw):
    config = ScenarioConfig(n=len(regular), m=len(aux), d=1, rho_m=geom.rho, boundary=geom.boundary, hops=hops, seed=3)
    return Simulation(config, geom=geom, regular_positions=regular, aux_positions=aux, full_protocol=full, **kw)


def test_field_at_simulation_scale():
    geom = compute_field(5000, 80, 30.0)
    area = 5000 * math.pi * 900 / 81
    assert geom.area == pytest.approx(area, rel=1e-12)
    assert geom.area == pytest.approx(1.7453e5, rel=1e-4)
    assert geom.side == pytest.approx(417.77, abs=0.01)


def test_field_identity():
    rho = 1 / math.sqrt(math.pi)
    assert compute_field(11, 10, rho).area == pytest.approx(1.0)


@pytest.mark.parametrize("args", [(5000, 0, 30.0), (0, 80, 30.0), (10, 5, 0.0), (10, 5, -1.0)])
def test_field_rejects_bad_params(args):
    with pytest.raises(InvalidParam):
        compute_field(*args)


def test_regular_deployment():
    geom = compute_field(5000, 80, 30.0)
    a = deploy_regular(10_000, geom, crypto.stream(1, 2))
    b = deploy_regular(10_000, geom, crypto.stream(1, 2))
    assert np.array_equal(a, b)
    assert ((a >= 0) & (a <= geom.side)).all()
    assert np.abs(a.mean(axis=0) - geom.side / 2).max() <= 0.02 * geom.side / 2


def test_aux_cells_four():
    geom = BOX
    c, cells = aux_cells(4)
    assert c == 2 and cells == [(0, 0), (0, 1), (1, 0), (1, 1)]
    pos = deploy_auxiliary(4, geom, crypto.stream(1))
    quadrants = {(int(x // 50), int(y // 50)) for x, y in pos}
    assert quadrants == {(0, 0), (1, 0), (0, 1), (1, 1)}


def test_aux_cells_five_row_major():
    c, cells = aux_cells(5)
    assert c == 3
    assert cells == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)]


@pytest.mark.parametrize("m", [1, 2, 5, 50, 99, 100, 101, 500])
def test_each_aux_in_its_cell(m):
    geom = compute_field(5000, 80, 30.0)
    c, cells = aux_cells(m)
    assert c == math.ceil(math.sqrt(m))
    size = geom.side / c
    pos = deploy_auxiliary(m, geom, crypto.stream(m))
    for (row, col), (x, y) in zip(cells, pos):
        assert col * size <= x <= (col + 1) * size
        assert row * size <= y <= (row + 1) * size


def test_closed_ball_and_isolation():
    pos = np.array([[10.0, 10.0], [40.0, 10.0], [90.0, 90.0]])
    topo = Topology(pos, np.zeros(3, bool), BOX)
    assert topo.neighbors(0) == {1}
    assert topo.neighbors(2) == set()
    with pytest.raises(UnknownNode):
        topo.neighbors(3)


def test_torus_wraps():
    geom = FieldGeometry(side=100.0, area=1e4, rho=30.0, boundary="torus")
    pos = np.array([[2.0, 50.0], [95.0, 50.0]])
    assert distance(pos[0], pos[1], geom) == pytest.approx(7.0)
    assert Topology(pos, np.zeros(2, bool), geom).neighbors(0) == {1}
    assert Topology(pos, np.zeros(2, bool), BOX).neighbors(0) == set()


@pytest.mark.parametrize("boundary", ["torus", "bounded"])
def test_adjacency_matches_brute_force_100(boundary):
    geom = compute_field(100, 8, 30.0, boundary)
    pos = deploy_regular(100, geom, crypto.stream(100))
    got = {tuple(p) for p in adjacent_pairs(pos, geom).tolist()}
    assert got == brute_force_pairs(pos, geom.side, geom.rho, boundary == "torus")
    assert len(got) > 100


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 500), st.integers(0, 2**32), st.sampled_from(["torus", "bounded"]), st.integers(1, 30))
def test_adjacency_matches_brute_force_property(size, seed, boundary, d):
    geom = compute_field(size, d, 30.0, boundary)
    pos = deploy_regular(size, geom, crypto.stream(seed))
    got = {tuple(p) for p in adjacent_pairs(pos, geom).tolist()}
    assert got == brute_force_pairs(pos, geom.side, geom.rho, boundary == "torus")


def test_mean_degree_matches_d():
    degrees = []
    for seed in range(20):
        sim = Simulation(ScenarioConfig(n=5000, m=0, d=80, seed=seed), full_protocol=False)
        degrees.append(sim.topology.degrees().mean())
    assert abs(np.mean(degrees) - 80) <= 0.05 * 80


def test_discover_direct_prefers_nearest_then_smallest_id():
    # regular 0 at centre, auxes 1 and 2 equidistant, aux 3 farther
    sim = fixture_sim([[50, 50]], [[60, 50], [40, 50], [50, 75]], full=False)
    assert discover_aux(0, sim.topology, 0).aux == 1
    sim = fixture_sim([[50, 50]], [[50, 75], [62, 50]], full=False)
    assert discover_aux(0, sim.topology, 0).aux == 2


def test_discover_one_hop():
    # u=0 -- v=1 -- w=2 -- aux=3 on a line, 25 m apart
    sim = fixture_sim([[100, 25], [100, 50], [100, 75]], [[100, 100]], geom=FieldGeometry(200, 4e4, 30.0, "bounded"))
    with pytest.raises(AuxNotFound):
        discover_aux(1, sim.topology, 0)
    found = discover_aux(1, sim.topology, 1)
    assert found.aux == 3 and found.helper == 2
    with pytest.raises(AuxNotFound):
        discover_aux(0, sim.topology, 1)
    with pytest.raises(InvalidParam):
        discover_aux(0, sim.topology, 2)


def test_five_node_fixture():
    regular = [[40, 50], [60, 50], [50, 40], [50, 60]]
    sim = fixture_sim(regular, [[50, 50]], record_transcript=True)
    # every pair is within 30 m: C(4,2)=6 regular pairs plus 4 regular-aux pairs
    assert len(sim.topology.pairs) == 10
    report = sim.run_establishment_round()
    assert (report.case1_direct, report.case1_supplemental, report.case1_failed, report.case2) == (6, 0, 0, 4)
    assert report.messages == 6 * 4 + 4 * 2 == len(sim.transcript)
    keys = analysis.secured_links(sim)
    assert len(keys) == 10
    assert len({k for _, _, k in keys}) == 10
    fast = fixture_sim(regular, [[50, 50]], full=False).run_establishment_round()
    assert fast == report


def test_supplemental_fixture():
    geom = FieldGeometry(200, 4e4, 30.0, "bounded")
    line = [[100, 25], [100, 50], [100, 75]]
    sim = fixture_sim(line, [[100, 100]], hops=1, geom=geom, record_transcript=True)
    report = sim.run_establishment_round()
    # (0,1): responder 1 borrows helper 2; (1,2): direct; (2,aux): case 2
    assert (report.case1_direct, report.case1_supplemental, report.case1_failed, report.case2) == (1, 1, 0, 1)
    assert sim.regular[0].pairwise_keys[1] == sim.regular[1].pairwise_keys[0]
    # 6 messages for the relayed exchange, 4 direct, 2 for case 2
    assert report.messages == 12
    hops = [(e.src, e.dst) for e in sim.transcript[:6]]
    assert hops == [(0, 1), (1, 2), (2, 3), (3, 2), (2, 1), (1, 0)]
    no_supp = fixture_sim(line, [[100, 100]], hops=0, geom=geom).run_establishment_round()
    assert (no_supp.case1_direct, no_supp.case1_failed) == (1, 1)


def test_isolated_pair_fails():
    geom = FieldGeometry(300, 9e4, 30.0, "bounded")
    sim = fixture_sim([[10, 10], [20, 10]], [[250, 250]], hops=1, geom=geom)
    report = sim.run_establishment_round()
    assert report.case1_failed == 1 and report.attempted == 1
    assert not sim.regular[0].pairwise_keys


@pytest.mark.parametrize("hops", [0, 1])
@pytest.mark.parametrize("boundary", ["torus", "bounded"])
def test_fast_and_full_rounds_agree(hops, boundary):
    config = ScenarioConfig(n=300, m=6, d=12, hops=hops, boundary=boundary, seed=21, mobility_rounds=2)
    full = Simulation(config, full_protocol=True)
    fast = Simulation(config, full_protocol=False)
    for _ in range(3):
        a, b = full.run_establishment_round(), fast.run_establishment_round()
        assert a == b
        assert a.attempted == a.direct_ok + a.supplemental_ok + a.failed
        full.move()
        fast.move()
    assert np.array_equal(full.positions, fast.positions)


def test_keys_match_after_round():
    config = ScenarioConfig(n=200, m=8, d=10, hops=1, seed=4)
    sim = Simulation(config)
    report = sim.run_establishment_round()
    links = analysis.secured_links(sim)
    assert len(links) == report.direct_ok + report.supplemental_ok


def test_mobility_step_bounds():
    geom = compute_field(2000, 40, 30.0, "torus")
    pts = deploy_regular(2000, geom, crypto.stream(8))
    moved = move_points(pts, geom, 60.0, crypto.stream(9))
    assert (distance(pts, moved, geom) <= 60.0 + 1e-9).all()
    assert ((moved >= 0) & (moved < geom.side)).all()
    bounded = FieldGeometry(geom.side, geom.area, geom.rho, "bounded")
    moved = move_points(pts, bounded, 60.0, crypto.stream(9))
    assert ((moved >= 0) & (moved <= geom.side)).all()
    assert (np.hypot(*(moved - pts).T) <= 60.0 + 1e-9).all()
    assert np.array_equal(move_points(pts, geom, 0.0, crypto.stream(9)), pts)
    one = move_regular(pts[0], geom, MobilityModel(0.0), crypto.stream(1))
    assert np.array_equal(one, pts[0])


def test_auxiliaries_static_under_mobility():
    sim = Simulation(ScenarioConfig(n=500, m=20, d=20, seed=2), full_protocol=False)
    aux_before = sim.positions[sim.aux_ids].copy()
    reg_before = sim.positions[sim.regular_ids].copy()
    sim.move()
    assert np.array_equal(sim.positions[sim.aux_ids], aux_before)
    assert not np.array_equal(sim.positions[sim.regular_ids], reg_before)


def test_determinism():
    config = ScenarioConfig(n=150, m=5, d=10, hops=1, seed=99, mobility_rounds=1)

    def run():
        sim = Simulation(config, trial=1, record_transcript=True)
        reports = [sim.run_establishment_round()]
        sim.move()
        reports.append(sim.run_establishment_round())
        return sim.positions.tobytes(), reports, [e.line() for e in sim.transcript]

    assert run() == run()
    other = Simulation(config, trial=2, full_protocol=False)
    assert not np.array_equal(other.positions, Simulation(config, trial=1, full_protocol=False).positions)


def test_dynamic_addition_after_mobility():
    sim = Simulation(ScenarioConfig(n=200, m=9, d=15, seed=5))
    sim.run_establishment_round()
    for _ in range(5):
        sim.move()
    anchor = 0
    target = sim.positions[anchor] + np.array([5.0, 0.0])
    new_id, state = sim.add_regular(np.mod(target, sim.geom.side))
    assert state.preloaded_secrets == 1
    assert anchor in sim.topology.neighbors(new_id)
    aux_id, aux_state = sim.add_auxiliary(sim.positions[anchor])
    assert aux_state.special_key == sim.auxiliary[sim.config.n].special_key
    sim.run_establishment_round()
    # the new aux sits on the anchor, so the new node reaches it directly
    assert sim.regular[new_id].pairwise_keys[anchor] == sim.regular[anchor].pairwise_keys[new_id]
    assert sim.regular[new_id].pairwise_keys[aux_id] == sim.auxiliary[aux_id].session_keys[new_id]
