from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosense.domain import Agent, AgentKind, AssignmentSet, GridMap, Order, OrderStatus
from cosense.sensing import SensingRewardConfig
from cosense.simulator import (
    ConfigError,
    ConstraintViolation,
    MapConfig,
    OrderParseError,
    SimParams,
    WorkloadConfig,
    WorldState,
    courier_objective,
    delivery_reward_realized,
    generate_orders,
    guard_fires,
    ingest_orders,
    make_world,
    order_rng,
    read_events,
    remaining_time,
    step,
    write_events,
)


def tiny_world(agents, orders=(), width=5, height=5, horizon=50, **params) -> WorldState:
    grid = GridMap(width, height)
    wl = WorkloadConfig(arrival_rate=0.0, horizon=horizon, n_couriers=0, n_rvs=0)
    w = WorldState(0, grid, {a.id: a for a in agents}, {o.id: o for o in orders}, 0, wl, SimParams(**params),
                   agent_visits=np.full((len(agents), grid.n_regions), -(10**12)))
    return w


def test_delivery_reward_examples():
    o = Order(0, 0, 1, 0, 10, 10.0)
    assert delivery_reward_realized(o, 10, 0.9) == 10.0
    assert delivery_reward_realized(o, 12, 0.5) == 2.5
    assert delivery_reward_realized(Order(1, 0, 1, 0, 10, 8.0), 13, 0.9) == pytest.approx(5.832, abs=1e-12)
    with pytest.raises(ConfigError):
        delivery_reward_realized(o, 10, 1.0)


def test_idle_courier_holds():
    w = tiny_world([Agent(0, AgentKind.COURIER, 12)])
    w, recs = step(w, AssignmentSet(0), {})
    assert w.agents[0].location == 12 and w.t == 1
    assert recs[0].r_delivery == 0.0


def test_courier_adjacent_completes_on_time():
    o = Order(0, 6, 7, 0, 5, 9.0, status=OrderStatus.PICKED_UP, agent_id=0)
    w = tiny_world([Agent(0, AgentKind.COURIER, 6, assigned_orders=[0])], [o])
    w, recs = step(w)
    assert o.status is OrderStatus.COMPLETED and o.completed_at == 1
    assert recs[0].r_delivery == 9.0 and recs[0].completed_order_ids == (0,)


def test_guard_redirects_rv():
    # dropoff two cells east, deadline in 3 slots: routing west would leave 3 cells for 2 slots
    g = GridMap(5, 5)
    o = Order(0, g.region_id(2, 2), g.region_id(4, 2), 0, 3, 5.0, status=OrderStatus.PICKED_UP, agent_id=0)
    rv = Agent(0, AgentKind.RV, g.region_id(2, 2), assigned_orders=[0])
    w = tiny_world([rv], [o])
    w, recs = step(w, None, {0: g.region_id(1, 2)})
    assert w.agents[0].location == g.region_id(3, 2)
    assert recs[0].guard_fired
    assert any(e[1] == "guard" for e in w.event_log)
    w, _ = step(w, None, {0: g.region_id(2, 2)})
    assert o.status is OrderStatus.COMPLETED and o.completed_at == 2


def test_guard_follows_routing_with_slack():
    o = Order(0, 12, 14, 0, 20, 5.0, status=OrderStatus.PICKED_UP, agent_id=0)
    w = tiny_world([Agent(0, AgentKind.RV, 12, assigned_orders=[0])], [o])
    w, recs = step(w, None, {0: 11})
    assert w.agents[0].location == 11 and not recs[0].guard_fired


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 24), st.integers(0, 24), st.integers(0, 24), st.integers(0, 8), st.integers(1, 40))
def test_guard_silent_with_enough_slack(loc, pick, drop, act, slack):
    g = GridMap(5, 5)
    o = Order(0, pick, drop, 0, 1, 1.0, status=OrderStatus.ASSIGNED, agent_id=0)
    rv = Agent(0, AgentKind.RV, loc, assigned_orders=[0])
    need = remaining_time(g, loc, o)
    o.deadline = need + 2 + slack
    target = g.action_target(loc, act) if g.action_mask(loc)[act] else loc
    # any single step costs at most one extra slot, so deadline - t >= need + 2 + safety never triggers
    assert not guard_fires(g, rv, {0: o}, 0, target, safety=1)


def test_invalid_routing_holds_and_logs():
    w = tiny_world([Agent(0, AgentKind.RV, 0)])
    w, _ = step(w, None, {0: 24})
    assert w.agents[0].location == 0
    assert any(e[1] == "invalid_route" for e in w.event_log)


def test_constraint_violation_leaves_world_unchanged():
    orders = [Order(i, 0, 1, 0, 9, 1.0) for i in range(3)]
    w = tiny_world([Agent(0, AgentKind.COURIER, 0)], orders, capacity=2)
    before = (w.t, len(w.event_log), [o.status for o in orders])
    with pytest.raises(ConstraintViolation):
        step(w, AssignmentSet(0, ((0, 0), (0, 0))))
    with pytest.raises(ConstraintViolation):
        step(w, AssignmentSet(0, ((0, 0), (1, 0), (2, 0))))
    assert before == (w.t, len(w.event_log), [o.status for o in orders])


def test_courier_objective_rules():
    orders = {
        1: Order(1, 0, 5, 0, 20, 1.0, status=OrderStatus.PICKED_UP),
        2: Order(2, 0, 6, 0, 10, 1.0, status=OrderStatus.PICKED_UP),
        3: Order(3, 7, 8, 0, 5, 1.0, status=OrderStatus.ASSIGNED),
    }
    assert courier_objective(Agent(0, AgentKind.COURIER, 0), orders) is None
    assert courier_objective(Agent(0, AgentKind.COURIER, 0, assigned_orders=[3]), orders) == 7
    assert courier_objective(Agent(0, AgentKind.COURIER, 0, assigned_orders=[1, 2, 3]), orders) == 6


def test_overdue_expired_and_penalty():
    pending = Order(0, 0, 24, 0, 2, 3.0)
    late = Order(1, 0, 24, 0, 2, 3.0, status=OrderStatus.ASSIGNED, agent_id=0)
    w = tiny_world([Agent(0, AgentKind.RV, 0, assigned_orders=[1])], [pending, late])
    for _ in range(3):
        w, recs = step(w, None, {})
    assert pending.status is OrderStatus.EXPIRED
    kinds = [(e[0], e[1], e[3]) for e in w.event_log]
    assert (3, "overdue", 0) in kinds and (3, "expired", 0) in kinds and (3, "overdue", 1) in kinds
    # penalty applied once, at the slot the deadline is missed
    assert recs[0].r_sensing < 0
    w, recs = step(w, None, {})
    assert recs[0].r_sensing >= 0


def test_late_by_one_completion_counts_overdue():
    o = Order(0, 6, 7, 0, 1, 4.0, status=OrderStatus.PICKED_UP, agent_id=0)
    w = tiny_world([Agent(0, AgentKind.COURIER, 5, assigned_orders=[0])], [o])
    w, _ = step(w)
    w, recs = step(w)
    assert o.completed_at == 2
    assert recs[0].r_delivery == pytest.approx(4.0 * 0.9)
    assert sum(1 for e in w.event_log if e[1] == "overdue") == 1


def test_slow_region_move_credit():
    from cosense.domain import RegionAttr

    grid = GridMap(3, 1, regions={(0, 0): RegionAttr(speed_multiplier=0.5)})
    w = tiny_world([Agent(0, AgentKind.RV, 0)])
    w.grid = grid
    w.agent_visits = np.full((1, 3), -(10**12))
    w, _ = step(w, None, {0: 1})
    assert w.agents[0].location == 0
    w, _ = step(w, None, {0: 1})
    assert w.agents[0].location == 1


def test_generate_orders_determinism_and_empty():
    g = GridMap(10, 10)
    cfg = WorkloadConfig(arrival_rate=3.0)
    a = generate_orders(cfg, g, 5, order_rng(7, 5))
    b = generate_orders(cfg, g, 5, order_rng(7, 5))
    assert [(o.pickup, o.dropoff, o.deadline, o.fee) for o in a] == [(o.pickup, o.dropoff, o.deadline, o.fee) for o in b]
    assert generate_orders(WorkloadConfig(arrival_rate=0.0), g, 5, order_rng(7, 5)) == []
    for o in a:
        assert o.deadline >= 5 + g.travel_time(o.pickup, o.dropoff) + 10
        assert 4.0 <= o.fee <= 16.0


def test_generate_orders_poisson_mean():
    g = GridMap(10, 10)
    cfg = WorkloadConfig(arrival_rate=5.0)
    counts = [len(generate_orders(cfg, g, t, order_rng(1, t))) for t in range(1000)]
    # mean of 1000 Poisson(5) draws: sd of the mean is sqrt(5/1000)
    assert abs(np.mean(counts) - 5.0) < 3 * math.sqrt(5.0 / 1000)


def test_workload_validation():
    with pytest.raises(ConfigError):
        WorkloadConfig(arrival_rate=-1.0).validate()
    with pytest.raises(ConfigError):
        WorkloadConfig(arrival_rate=[1.0] * 5).validate()
    with pytest.raises(ConfigError):
        WorkloadConfig(deadline_slack=(0, 3)).validate()
    assert WorkloadConfig(arrival_rate=[float(h) for h in range(24)], start_hour=8).rate_at(61) == 9.0


CSV_HEAD = "order_id,pickup_x,pickup_y,dropoff_x,dropoff_y,created_slot,deadline_slot,fee\n"


def test_ingest_orders(tmp_path):
    g = GridMap(10, 10)
    p = tmp_path / "o.csv"
    p.write_text(CSV_HEAD)
    assert ingest_orders(p, g) == []
    p.write_text(CSV_HEAD + "4,1.7,2.2,9,9,3,20,7.5\n")
    (o,) = ingest_orders(p, g)
    assert (o.id, o.pickup, o.dropoff, o.created_at, o.deadline, o.fee) == (4, 21, 99, 3, 20, 7.5)


def test_ingest_orders_errors(tmp_path):
    g = GridMap(10, 10)
    p = tmp_path / "o.csv"
    p.write_text(CSV_HEAD + "1,1,1,2,2,0,9,1\n2,1,1,2,2,10,4,1\n")
    with pytest.raises(OrderParseError) as e:
        ingest_orders(p, g)
    assert e.value.row == 3
    p.write_text(CSV_HEAD + "1,1,x,2,2,0,9,1\n")
    with pytest.raises(OrderParseError) as e:
        ingest_orders(p, g)
    assert e.value.row == 2 and e.value.column == "pickup_y"
    p.write_text(CSV_HEAD + "1,1,1,2,2,0,9,1\n2,11,1,2,2,0,9,1\n3,1,1,2,-1,0,9,1\n")
    with pytest.raises(OrderParseError) as e:
        ingest_orders(p, g)
    assert "[3, 4]" in str(e.value)


def small_run(seed=0, horizon=90, policy=None):
    from cosense.baselines import fastd

    w = make_world(MapConfig(8, 8), WorkloadConfig(arrival_rate=0.6, horizon=horizon, n_couriers=4, n_rvs=3,
                                                  deadline_slack=(3, 10), n_hotspots=2),
                   SimParams(), seed)
    total_r = 0.0
    prev_status = {}
    while not w.done:
        d, r = (policy or fastd)(w)
        before = {a.id: list(a.assigned_orders) for a in w.agents.values()}
        locs = {a.id: a.location for a in w.agents.values()}
        w, recs = step(w, d, r)
        for rec in recs:
            assert rec.r_delivery >= 0
            assert set(rec.completed_order_ids) <= set(before[rec.agent_id]) | {o for o, a in d.pairs if a == rec.agent_id}
            total_r += rec.r_delivery
        for a in w.agents.values():
            assert w.grid.chebyshev(a.location, locs[a.id]) <= 1 and w.grid.accessible[a.location]
            assert len(a.assigned_orders) <= w.params.capacity
        rank = {s: i for i, s in enumerate(OrderStatus)}
        for o in w.orders.values():
            if o.id in prev_status:
                assert rank[o.status] >= rank[prev_status[o.id]]
            prev_status[o.id] = o.status
    return w, total_r


def test_conservation_and_reward_reconciliation():
    w, total = small_run()
    created = sum(1 for e in w.event_log if e[1] == "created")
    assert created == len(w.orders) > 0
    counts = {s: 0 for s in OrderStatus}
    for o in w.orders.values():
        counts[o.status] += 1
    assert sum(counts.values()) == created
    realized = sum(delivery_reward_realized(o, o.completed_at, w.params.beta)
                   for o in w.orders.values() if o.status is OrderStatus.COMPLETED)
    assert total == pytest.approx(realized, abs=1e-9)
    slots = [e[0] for e in w.event_log]
    assert slots == sorted(slots)


def test_replay_determinism(tmp_path):
    a, _ = small_run(seed=3)
    b, _ = small_run(seed=3)
    write_events(a.event_log, tmp_path / "a.jsonl")
    write_events(b.event_log, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert read_events(tmp_path / "a.jsonl") == [tuple(e) for e in a.event_log]


def test_zero_horizon_world_is_done():
    w = make_world(MapConfig(4, 4), WorkloadConfig(horizon=0, n_couriers=1, n_rvs=1), SimParams(), 0)
    assert w.done and not w.orders


def test_sensing_reward_recorded_before_marking():
    w = tiny_world([Agent(0, AgentKind.RV, 12)], sensing=SensingRewardConfig(w_reg=1.0, w_nbr=0.5))
    w, recs = step(w, None, {0: 13})
    # every region is initially unsensed: full regional and neighbour reward
    assert recs[0].r_sensing == pytest.approx(1.5)
    w, recs = step(w, None, {0: 13})
    # holding: region 13 is fresh, its 8 neighbours were never sensed
    assert recs[0].r_sensing == pytest.approx(0.5)
    w, recs = step(w, None, {0: 12})
    assert recs[0].r_sensing == pytest.approx(1.0 + 0.5 * 7 / 8)
