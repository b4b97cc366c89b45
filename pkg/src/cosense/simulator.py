"""Discrete-time delivery/sensing environment.

One call to :func:`step` advances the world from slot ``t`` to ``t + 1``:
dispatch is applied, couriers follow fastest routes, RVs follow routing
actions (subject to the deadline guard), pickups/completions/overdue orders
are resolved and every agent passively senses the region it ends up in.

Events are stamped with the slot at which they take effect, so anything that
happens on arrival (sense, pickup after moving, completion, overdue) carries
``t + 1`` while dispatch-side events carry ``t``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .domain import (
    Agent,
    AgentKind,
    AssignmentSet,
    DomainError,
    GridMap,
    Order,
    OrderStatus,
    RegionAttr,
)
from .sensing import SensingRewardConfig, sensing_reward

log = logging.getLogger(__name__)

EVENT_FIELDS = ("slot", "kind", "agent_id", "order_id", "region", "value")


class ConfigError(ValueError):
    pass


class ConstraintViolation(DomainError):
    pass


class OrderParseError(ValueError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


@dataclass
class MapConfig:
    width: int = 20
    height: int = 20
    cell_size_km: float = 0.05
    slots_per_cell: int = 1
    n_region_types: int = 3
    inaccessible_fraction: float = 0.0
    slow_fraction: float = 0.0
    slow_multiplier: float = 0.5

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError("map.width and map.height must be >= 1")
        if not 0 <= self.inaccessible_fraction < 0.25:
            raise ConfigError("map.inaccessible_fraction must be in [0, 0.25)")
        if not 0 <= self.slow_fraction <= 1:
            raise ConfigError("map.slow_fraction must be in [0, 1]")
        if not 0 < self.slow_multiplier <= 1:
            raise ConfigError("map.slow_multiplier must be in (0, 1]")


@dataclass
class WorkloadConfig:
    # orders per slot; a list is read as a 24-entry hour-of-day profile
    arrival_rate: float | list[float] = 1.0
    start_hour: int = 8
    fee_range: tuple[float, float] = (4.0, 16.0)
    deadline_slack: tuple[int, int] = (10, 30)
    spatial_hotspots: list[tuple[int, float]] = field(default_factory=list)
    n_hotspots: int = 0
    hotspot_spread: float = 2.0
    horizon: int = 720
    n_couriers: int = 50
    n_rvs: int = 50

    def validate(self) -> None:
        rates = self.arrival_rate if isinstance(self.arrival_rate, list) else [self.arrival_rate]
        if isinstance(self.arrival_rate, list) and len(self.arrival_rate) != 24:
            raise ConfigError("workload.arrival_rate profile must have 24 hourly entries")
        if any(r < 0 for r in rates):
            raise ConfigError("workload.arrival_rate must be >= 0")
        if self.horizon < 0:
            raise ConfigError("workload.horizon must be >= 0")
        if self.n_couriers < 0 or self.n_rvs < 0:
            raise ConfigError("workload.n_couriers and workload.n_rvs must be >= 0")
        lo, hi = self.fee_range
        if lo < 0 or hi < lo:
            raise ConfigError("workload.fee_range must satisfy 0 <= lo <= hi")
        lo, hi = self.deadline_slack
        if lo < 1 or hi < lo:
            raise ConfigError("workload.deadline_slack must satisfy 1 <= lo <= hi")
        if any(w < 0 for _, w in self.spatial_hotspots):
            raise ConfigError("workload.spatial_hotspots weights must be >= 0")

    def rate_at(self, t: int) -> float:
        if isinstance(self.arrival_rate, list):
            return float(self.arrival_rate[(self.start_hour + t // 60) % 24])
        return float(self.arrival_rate)


@dataclass
class SimParams:
    capacity: int = 3
    beta: float = 0.9
    guard_safety: int = 1
    sensing: SensingRewardConfig = field(default_factory=SensingRewardConfig)

    def validate(self) -> None:
        if self.capacity < 1:
            raise ConfigError("capacity must be >= 1")
        if not 0 < self.beta < 1:
            raise ConfigError("beta must be in (0, 1)")
        if self.guard_safety < 0:
            raise ConfigError("guard_safety must be >= 0")


@dataclass
class SlotRewardRecord:
    agent_id: int
    r_delivery: float
    r_sensing: float
    completed_order_ids: tuple[int, ...]
    regions_sensed: tuple[int, ...]
    directed_to: int
    guard_fired: bool = False


@dataclass
class WorldState:
    t: int
    grid: GridMap
    agents: dict[int, Agent]
    orders: dict[int, Order]
    rng_seed: int
    workload: WorkloadConfig
    params: SimParams
    event_log: list[tuple] = field(default_factory=list)
    agent_visits: np.ndarray | None = None
    missed: dict[int, list[int]] = field(default_factory=dict)
    scheduled: list[Order] | None = None
    hotspots: list[tuple[int, float]] = field(default_factory=list)
    next_order_id: int = 0

    def log(self, slot, kind, agent_id=None, order_id=None, region=None, value=None) -> None:
        self.event_log.append((slot, kind, agent_id, order_id, region, value))

    def pending(self) -> list[Order]:
        return sorted((o for o in self.orders.values() if o.status is OrderStatus.PENDING), key=lambda o: o.id)

    def couriers(self) -> list[Agent]:
        return [a for a in self.agents.values() if a.kind is AgentKind.COURIER]

    def rvs(self) -> list[Agent]:
        return [a for a in self.agents.values() if a.kind is AgentKind.RV]

    @property
    def done(self) -> bool:
        return self.t >= self.workload.horizon


# map and workload -------------------------------------------------------------


def build_grid(cfg: MapConfig, seed: int) -> GridMap:
    """Synthetic city grid: random region types, isolated closures, slow cells."""
    cfg.validate()
    rng = np.random.default_rng([seed, 1])
    n = cfg.width * cfg.height
    types = rng.integers(0, cfg.n_region_types, size=n)
    blocked = np.zeros(n, dtype=bool)
    target = int(round(cfg.inaccessible_fraction * n))
    if target:
        g0 = GridMap(cfg.width, cfg.height)
        for g in rng.permutation(n):
            if blocked.sum() >= target:
                break
            x, y = g % cfg.width, g // cfg.width
            if x in (0, cfg.width - 1) or y in (0, cfg.height - 1):
                continue
            # keep closures isolated so greedy routing never gets trapped
            if blocked[g0.neighbor_table[g][g0.neighbor_table[g] >= 0]].any():
                continue
            blocked[g] = True
    slow = rng.random(n) < cfg.slow_fraction
    regions = {}
    for g in range(n):
        regions[(g % cfg.width, g // cfg.width)] = RegionAttr(
            int(types[g]), not blocked[g], cfg.slow_multiplier if slow[g] else 1.0
        )
    return GridMap(cfg.width, cfg.height, cfg.cell_size_km, regions, cfg.slots_per_cell, cfg.n_region_types)


def default_hotspots(grid: GridMap, k: int, seed: int) -> list[tuple[int, float]]:
    if k <= 0:
        return []
    rng = np.random.default_rng([seed, 2])
    ids = np.flatnonzero(grid.accessible)
    picks = rng.choice(ids, size=min(k, len(ids)), replace=False)
    weights = rng.uniform(0.5, 1.5, size=len(picks))
    return [(int(g), round(float(w), 4)) for g, w in zip(picks, weights)]


def _sample_pickup(grid: GridMap, hotspots, spread: float, rng) -> int:
    ids = np.flatnonzero(grid.accessible)
    if not hotspots:
        return int(rng.choice(ids))
    w = np.array([h[1] for h in hotspots], dtype=float)
    h = hotspots[int(rng.choice(len(hotspots), p=w / w.sum()))][0]
    hx, hy = h % grid.width, h // grid.width
    for _ in range(10):
        ox, oy = np.rint(rng.normal(0.0, spread, size=2)).astype(int)
        x = min(max(hx + ox, 0), grid.width - 1)
        y = min(max(hy + oy, 0), grid.height - 1)
        g = y * grid.width + x
        if grid.accessible[g]:
            return int(g)
    return int(rng.choice(ids))


def generate_orders(cfg: WorkloadConfig, grid: GridMap, t: int, rng: np.random.Generator,
                    start_id: int = 0, hotspots=None) -> list[Order]:
    """Poisson arrivals for slot ``t``; deterministic for a given generator state."""
    k = int(rng.poisson(cfg.rate_at(t)))
    if k == 0:
        return []
    hotspots = cfg.spatial_hotspots if hotspots is None else hotspots
    ids = np.flatnonzero(grid.accessible)
    dmax = max(grid.width, grid.height) - 1 or 1
    lo_fee, hi_fee = cfg.fee_range
    out = []
    for i in range(k):
        pickup = _sample_pickup(grid, hotspots, cfg.hotspot_spread, rng)
        dropoff = int(rng.choice(ids))
        slack = int(rng.integers(cfg.deadline_slack[0], cfg.deadline_slack[1] + 1))
        deadline = t + grid.travel_time(pickup, dropoff) + slack
        fee = lo_fee + (hi_fee - lo_fee) * min(1.0, grid.chebyshev(pickup, dropoff) / dmax)
        out.append(Order(start_id + i, pickup, dropoff, t, deadline, round(fee, 2)))
    return out


def order_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, 3, t])


CSV_HEADER = ["order_id", "pickup_x", "pickup_y", "dropoff_x", "dropoff_y", "created_slot", "deadline_slot", "fee"]


def ingest_orders(path, grid: GridMap, unit: str = "cell") -> list[Order]:
    """Read orders from CSV; coordinates are snapped to regions.

    ``unit`` is ``"cell"`` (coordinates in cell units) or ``"km"`` (map frame).
    """
    scale = 1.0 if unit == "cell" else 1.0 / grid.cell_size_km
    out: list[Order] = []
    out_of_bounds: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise OrderParseError("missing header", row=1) from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise OrderParseError(f"header must be {','.join(CSV_HEADER)}", row=1)
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_HEADER):
                raise OrderParseError(f"row {rowno}: expected {len(CSV_HEADER)} columns, got {len(row)}", row=rowno)
            vals = {}
            for col, raw in zip(CSV_HEADER, row):
                try:
                    vals[col] = int(raw) if col in ("order_id", "created_slot", "deadline_slot") else float(raw)
                except ValueError:
                    raise OrderParseError(f"row {rowno}, column {col}: cannot parse {raw!r}",
                                          row=rowno, column=col) from None
            cells = []
            for p in ("pickup", "dropoff"):
                x = math.floor(vals[f"{p}_x"] * scale)
                y = math.floor(vals[f"{p}_y"] * scale)
                if not (0 <= x < grid.width and 0 <= y < grid.height) or not grid.accessible[y * grid.width + x]:
                    cells = None
                    break
                cells.append(y * grid.width + x)
            if cells is None:
                out_of_bounds.append(rowno)
                continue
            if vals["deadline_slot"] <= vals["created_slot"]:
                raise OrderParseError(f"row {rowno}: deadline_slot must be greater than created_slot",
                                      row=rowno, column="deadline_slot")
            if vals["fee"] < 0:
                raise OrderParseError(f"row {rowno}: negative fee", row=rowno, column="fee")
            out.append(Order(vals["order_id"], cells[0], cells[1], vals["created_slot"],
                             vals["deadline_slot"], vals["fee"]))
    if out_of_bounds:
        raise OrderParseError(f"rows outside the grid or inaccessible: {out_of_bounds}", row=out_of_bounds[0])
    ids = [o.id for o in out]
    if len(set(ids)) != len(ids):
        raise OrderParseError("duplicate order_id values")
    return out


# world construction -----------------------------------------------------------


def make_world(
    map_cfg: MapConfig,
    workload: WorkloadConfig,
    params: SimParams,
    seed: int,
    scheduled: Sequence[Order] | None = None,
    grid: GridMap | None = None,
) -> WorldState:
    workload.validate()
    params.validate()
    grid = build_grid(map_cfg, seed) if grid is None else grid
    if grid.n_regions <= 1024:
        grid.travel_table()  # the simulation reuses it every slot
    hotspots = list(workload.spatial_hotspots) or default_hotspots(grid, workload.n_hotspots, seed)
    for g, _ in hotspots:
        grid.check(g)
    rng = np.random.default_rng([seed, 4])
    agents: dict[int, Agent] = {}
    for i in range(workload.n_couriers):
        agents[i] = Agent(i, AgentKind.COURIER, _sample_pickup(grid, hotspots, 2 * workload.hotspot_spread, rng))
    ids = np.flatnonzero(grid.accessible)
    for j in range(workload.n_rvs):
        i = workload.n_couriers + j
        agents[i] = Agent(i, AgentKind.RV, int(rng.choice(ids)))
    world = WorldState(
        t=0, grid=grid, agents=agents, orders={}, rng_seed=int(seed), workload=workload, params=params,
        agent_visits=np.full((len(agents), grid.n_regions), -(10**12), dtype=np.int64),
        scheduled=None if scheduled is None else sorted(scheduled, key=lambda o: (o.created_at, o.id)),
        hotspots=hotspots,
    )
    for a in agents.values():
        world.log(0, "spawn_" + a.kind.value, a.id, None, a.location)
    _arrivals(world)
    return world


def _arrivals(world: WorldState) -> None:
    t = world.t
    if t >= world.workload.horizon:
        return
    if world.scheduled is not None:
        new = []
        while world.scheduled and world.scheduled[0].created_at <= t:
            new.append(world.scheduled.pop(0))
    else:
        new = generate_orders(world.workload, world.grid, t, order_rng(world.rng_seed, t),
                              start_id=world.next_order_id, hotspots=world.hotspots)
        world.next_order_id += len(new)
    for o in new:
        world.orders[o.id] = o
        world.log(t, "created", None, o.id, o.pickup, o.fee)


# behaviour rules --------------------------------------------------------------


def delivery_reward_realized(order: Order, completion_slot: int, beta: float) -> float:
    """Fee discounted by ``beta`` per slot of lateness."""
    if not 0 < beta < 1:
        raise ConfigError("beta must be in (0, 1)")
    late = max(0, completion_slot - order.deadline)
    return order.fee if late == 0 else order.fee * beta**late


def courier_objective(agent: Agent, orders: Mapping[int, Order]) -> int | None:
    mine = sorted((orders[o] for o in agent.assigned_orders), key=lambda o: (o.deadline, o.id))
    picked = [o for o in mine if o.status is OrderStatus.PICKED_UP]
    if picked:
        return picked[0].dropoff
    waiting = [o for o in mine if o.status is OrderStatus.ASSIGNED]
    if waiting:
        return waiting[0].pickup
    return None


def remaining_time(grid: GridMap, loc: int, order: Order) -> int:
    if order.status is OrderStatus.PICKED_UP:
        return int(grid.travel_times(loc, order.dropoff))
    return int(grid.travel_times(loc, order.pickup) + grid.travel_times(order.pickup, order.dropoff))


def _urgent(agent: Agent, orders: Mapping[int, Order]) -> Order:
    return min((orders[o] for o in agent.assigned_orders), key=lambda o: (o.deadline, o.id))


def guard_fires(grid: GridMap, agent: Agent, orders: Mapping[int, Order], t: int, target: int, safety: int) -> bool:
    """True when following ``target`` this slot would jeopardise the earliest deadline."""
    o = _urgent(agent, orders)
    return t + 1 + remaining_time(grid, target, o) + safety > o.deadline


def _validate_dispatch(world: WorldState, dispatch: AssignmentSet) -> None:
    problems = []
    for o, d in dispatch.pairs:
        if o not in world.orders:
            problems.append(f"unknown order {o}")
        elif world.orders[o].status is not OrderStatus.PENDING:
            problems.append(f"order {o} is not pending")
        if d not in world.agents:
            problems.append(f"unknown agent {d}")
    load = {a.id: len(a.assigned_orders) for a in world.agents.values()}
    problems += dispatch.violations(load, world.params.capacity)
    if problems:
        raise ConstraintViolation("; ".join(problems))


def _pickups(world: WorldState, agent: Agent, slot: int) -> None:
    for oid in agent.assigned_orders:
        o = world.orders[oid]
        if o.status is OrderStatus.ASSIGNED and o.pickup == agent.location:
            o.advance(OrderStatus.PICKED_UP)
            world.log(slot, "pickup", agent.id, oid, agent.location)


def step(world: WorldState, dispatch: AssignmentSet | None = None,
         routing: Mapping[int, int] | None = None) -> tuple[WorldState, list[SlotRewardRecord]]:
    """Advance ``world`` by one slot in place and return it with per-agent rewards."""
    t = world.t
    grid = world.grid
    params = world.params
    routing = routing or {}
    if dispatch is not None and dispatch.pairs:
        _validate_dispatch(world, dispatch)
        for o, d in dispatch.pairs:
            order = world.orders[o]
            order.advance(OrderStatus.ASSIGNED)
            order.agent_id = d
            world.agents[d].assigned_orders.append(o)
            world.log(t, "assigned", d, o, order.pickup)

    agents = [world.agents[i] for i in sorted(world.agents)]
    for a in agents:
        _pickups(world, a, t)

    directed: dict[int, tuple[int, bool]] = {}
    for a in agents:
        loc = a.location
        guard = False
        if a.kind is AgentKind.COURIER:
            goal = courier_objective(a, world.orders)
            nxt = loc if goal is None else grid.step_toward(loc, goal)
        else:
            nxt = routing.get(a.id, loc)
            if nxt != loc and (not isinstance(nxt, (int, np.integer)) or nxt not in grid.neighbor_table[loc]):
                world.log(t, "invalid_route", a.id, None, loc, None if nxt is None else float(nxt))
                nxt = loc
            if a.assigned_orders and guard_fires(grid, a, world.orders, t, int(nxt), params.guard_safety):
                o = _urgent(a, world.orders)
                goal = o.dropoff if o.status is OrderStatus.PICKED_UP else o.pickup
                forced = grid.step_toward(loc, goal)
                if forced != nxt:
                    nxt = forced
                    guard = True
                    world.log(t, "guard", a.id, o.id, loc)
        nxt = int(nxt)
        directed[a.id] = (nxt, guard)
        if nxt == loc:
            a.move_credit = 0.0
        else:
            a.move_credit += grid.speed[loc]
            if a.move_credit >= 1.0 - 1e-9:
                a.move_credit -= 1.0
                a.location = nxt

    now = t + 1
    completed: dict[int, list[int]] = {}
    r_delivery: dict[int, float] = {}
    for a in agents:
        _pickups(world, a, now)
        done = []
        for oid in list(a.assigned_orders):
            o = world.orders[oid]
            if o.status is OrderStatus.PICKED_UP and o.dropoff == a.location:
                o.advance(OrderStatus.COMPLETED)
                o.completed_at = now
                reward = delivery_reward_realized(o, now, params.beta)
                r_delivery[a.id] = r_delivery.get(a.id, 0.0) + reward
                a.assigned_orders.remove(oid)
                done.append(oid)
                world.log(now, "completed", a.id, oid, a.location, reward)
        completed[a.id] = done

    # deadlines passing this slot
    world.missed = {}
    for o in sorted(world.orders.values(), key=lambda o: o.id):
        if o.deadline != t or (o.status is OrderStatus.COMPLETED and o.completed_at <= t):
            continue
        world.log(now, "overdue", o.agent_id, o.id, o.dropoff)
        if o.status is OrderStatus.PENDING:
            o.advance(OrderStatus.EXPIRED)
            world.log(now, "expired", None, o.id, o.pickup)
        else:
            world.missed.setdefault(o.agent_id, []).append(o.id)

    records = []
    window = params.sensing.staleness_window
    nbr = grid.neighbor_table
    for a in agents:
        g = a.location
        r_s = sensing_reward(a, g, world, params.sensing, now=now)
        grid.last_visit[g] = now
        world.agent_visits[a.id, g] = now
        nb = nbr[g][nbr[g] >= 0]
        a.neigh_count = int(((now - world.agent_visits[a.id, nb]) < window).sum())
        a.last_sensed_region = g
        a.available = len(a.assigned_orders) < params.capacity
        world.log(now, "sense", a.id, None, g)
        target, guard = directed[a.id]
        records.append(SlotRewardRecord(a.id, r_delivery.get(a.id, 0.0), r_s, tuple(completed[a.id]), (g,),
                                        target, guard))

    world.t = now
    _arrivals(world)
    return world, records


# event log export -------------------------------------------------------------


def event_dicts(event_log) -> list[dict]:
    return [dict(zip(EVENT_FIELDS, e)) for e in event_log]


def write_events(event_log, path) -> None:
    with open(path, "w") as fh:
        for e in event_log:
            fh.write(json.dumps(dict(zip(EVENT_FIELDS, e)), separators=(",", ":")))
            fh.write("\n")


def read_events(path) -> list[tuple]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(tuple(d.get(k) for k in EVENT_FIELDS))
    return out


def order_status_counts(world: WorldState) -> dict[str, int]:
    counts = {s.value: 0 for s in OrderStatus}
    for o in world.orders.values():
        counts[o.status.value] += 1
    return counts
