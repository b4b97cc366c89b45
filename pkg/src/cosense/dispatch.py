"""Order dispatch: per-order top-N candidate selection, threshold greedy and a
two-round map/reduce driver.

The objective of an assignment set S is R_d(S) + V_s(S): summed predicted
delivery rewards plus summed sensing values discounted by the redundancy of
the dropoff locations. ``DispatchObjective`` keeps the running sums needed to
evaluate marginal gains in O(1) per pair.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .domain import Agent, AssignmentSet, GridMap, Order, OrderStatus
from .sensing import kernel_matrix

log = logging.getLogger(__name__)

INFEASIBLE = -math.inf
_KNUTH = 2654435761


class PartitionError(RuntimeError):
    def __init__(self, worker: int, cause: BaseException):
        super().__init__(f"dispatch worker {worker} failed: {cause!r}")
        self.worker = worker
        self.cause = cause


@dataclass(frozen=True)
class PairScore:
    order_id: int
    agent_id: int
    r_d: float
    v_s: float

    def __post_init__(self):
        if not self.r_d >= 0:
            raise ValueError(f"pair ({self.order_id}, {self.agent_id}): r_d must be >= 0, got {self.r_d}")

    @property
    def total(self) -> float:
        return self.r_d + self.v_s


def hash_partition(order_id: int, n_workers: int) -> int:
    return ((int(order_id) * _KNUTH) & 0xFFFFFFFF) % n_workers


@dataclass(frozen=True)
class DispatchConfig:
    top_n: int = 3
    epsilon: float = 0.1
    n_workers: int = 1
    capacity: int = 3
    sigma_km: float = 0.1
    beta: float = 0.9
    backend: str = "serial"

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must be in (0, 1)")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.sigma_km <= 0:
            raise ValueError("sigma_km must be > 0")
        if self.backend not in ("serial", "process"):
            raise ValueError(f"unknown backend {self.backend!r}")

    def partition(self, order_id: int) -> int:
        return hash_partition(order_id, self.n_workers)


# score tables -----------------------------------------------------------------


@dataclass
class ScoreTable:
    """Delivery (DQ) and sensing (SQ) score matrices over orders x agents.

    Infeasible pairs carry ``r_d = -inf``. ``dropoff_xy`` holds each order's
    dropoff centre in km, used by the redundancy kernel.
    """

    order_ids: np.ndarray
    agent_ids: np.ndarray
    r_d: np.ndarray
    v_s: np.ndarray
    dropoff_xy: np.ndarray
    existing_load: np.ndarray

    def __post_init__(self):
        self.order_ids = np.asarray(self.order_ids, dtype=np.int64)
        self.agent_ids = np.asarray(self.agent_ids, dtype=np.int64)
        n, m = len(self.order_ids), len(self.agent_ids)
        self.r_d = np.asarray(self.r_d, dtype=np.float64).reshape(n, m)
        self.v_s = np.asarray(self.v_s, dtype=np.float64).reshape(n, m)
        self.dropoff_xy = np.asarray(self.dropoff_xy, dtype=np.float64).reshape(n, 2)
        self.existing_load = np.asarray(self.existing_load, dtype=np.int64).reshape(m)
        self._orow = {int(o): i for i, o in enumerate(self.order_ids)}
        self._acol = {int(a): j for j, a in enumerate(self.agent_ids)}

    @property
    def feasible(self) -> np.ndarray:
        return np.isfinite(self.r_d)

    def row(self, order_id: int) -> int:
        return self._orow[int(order_id)]

    def col(self, agent_id: int) -> int:
        return self._acol[int(agent_id)]

    def pair(self, order_id: int, agent_id: int) -> PairScore:
        i, j = self.row(order_id), self.col(agent_id)
        return PairScore(int(order_id), int(agent_id), float(self.r_d[i, j]), float(self.v_s[i, j]))

    def subset(self, order_ids: Iterable[int]) -> ScoreTable:
        rows = [self.row(o) for o in order_ids]
        return ScoreTable(self.order_ids[rows], self.agent_ids, self.r_d[rows], self.v_s[rows],
                          self.dropoff_xy[rows], self.existing_load)

    def restrict(self, pairs: Iterable[tuple[int, int]]) -> ScoreTable:
        """Copy keeping only ``pairs`` feasible (the candidate bipartite graph)."""
        keep = np.zeros_like(self.feasible)
        for o, d in pairs:
            keep[self.row(o), self.col(d)] = True
        return ScoreTable(self.order_ids, self.agent_ids, np.where(keep, self.r_d, INFEASIBLE),
                          np.where(keep, self.v_s, 0.0), self.dropoff_xy, self.existing_load)

    @classmethod
    def from_pairs(cls, pairs: Sequence[PairScore], dropoff_xy: Mapping[int, tuple[float, float]],
                   existing_load: Mapping[int, int] | None = None) -> ScoreTable:
        oids = sorted({p.order_id for p in pairs} | set(dropoff_xy))
        aids = sorted({p.agent_id for p in pairs} | set(existing_load or {}))
        r = np.full((len(oids), len(aids)), INFEASIBLE)
        v = np.zeros((len(oids), len(aids)))
        oi = {o: i for i, o in enumerate(oids)}
        ai = {a: j for j, a in enumerate(aids)}
        for p in pairs:
            r[oi[p.order_id], ai[p.agent_id]] = p.r_d
            v[oi[p.order_id], ai[p.agent_id]] = p.v_s
        load = [(existing_load or {}).get(a, 0) for a in aids]
        return cls(np.array(oids), np.array(aids), r, v, np.array([dropoff_xy[o] for o in oids]), np.array(load))


# objective --------------------------------------------------------------------


class Objective(Protocol):
    def tau0(self, candidates: Sequence[tuple[int, int]]) -> float: ...
    def gain(self, order_id: int, agent_id: int) -> float: ...
    def add(self, order_id: int, agent_id: int) -> None: ...
    def value(self) -> float: ...


class DispatchObjective:
    """R_d(S) + (sum v_s)(1 - rho(S)) with incremental bookkeeping.

    The kernel sum over ordered pairs changes by ``2 * ksum[o]`` when a pair
    for order ``o`` is added, where ``ksum[o]`` is the kernel mass between
    ``o``'s dropoff and every pair already in S.
    """

    def __init__(self, table: ScoreTable, sigma_km: float):
        self.table = table
        self.kmat = kernel_matrix(table.dropoff_xy, sigma_km) if len(table.order_ids) else np.zeros((0, 0))
        self.reset()

    def reset(self) -> None:
        self.n = 0
        self.sum_rd = 0.0
        self.sum_v = 0.0
        self.ksum_pairs = 0.0
        self.ksum = np.zeros(len(self.table.order_ids))
        self.pairs: list[tuple[int, int]] = []

    def _rho(self, n: int, K: float) -> float:
        return K / (n * (n - 1)) if n >= 2 else 0.0

    def value(self) -> float:
        return self.sum_rd + self.sensing_part()

    def sensing_part(self) -> float:
        return self.sum_v * (1.0 - self._rho(self.n, self.ksum_pairs))

    def tau0(self, candidates) -> float:
        t = self.table
        vals = [t.r_d[t.row(o), t.col(d)] for o, d in candidates]
        return max(vals) if vals else 0.0

    def gain_row(self, i: int, cols: np.ndarray) -> np.ndarray:
        t = self.table
        n2 = self.n + 1
        rho2 = self._rho(n2, self.ksum_pairs + 2.0 * self.ksum[i])
        return t.r_d[i, cols] + (self.sum_v + t.v_s[i, cols]) * (1.0 - rho2) - self.sensing_part()

    def gain(self, order_id: int, agent_id: int) -> float:
        t = self.table
        return float(self.gain_row(t.row(order_id), np.array([t.col(agent_id)]))[0])

    def gains(self, order_ids: np.ndarray, agent_ids: np.ndarray) -> np.ndarray:
        """Vectorised ``gain`` over parallel arrays of order and agent ids."""
        t = self.table
        rows = np.array([t.row(o) for o in order_ids], dtype=np.int64)
        cols = np.array([t.col(d) for d in agent_ids], dtype=np.int64)
        n2 = self.n + 1
        K2 = self.ksum_pairs + 2.0 * self.ksum[rows]
        rho2 = K2 / (n2 * (n2 - 1)) if n2 >= 2 else np.zeros(len(rows))
        return t.r_d[rows, cols] + (self.sum_v + t.v_s[rows, cols]) * (1.0 - rho2) - self.sensing_part()

    def add(self, order_id: int, agent_id: int) -> None:
        t = self.table
        i, j = t.row(order_id), t.col(agent_id)
        self.ksum_pairs += 2.0 * self.ksum[i]
        self.ksum += self.kmat[:, i]
        self.n += 1
        self.sum_rd += t.r_d[i, j]
        self.sum_v += t.v_s[i, j]
        self.pairs.append((int(order_id), int(agent_id)))


def set_value(table: ScoreTable, pairs: Sequence[tuple[int, int]], sigma_km: float) -> float:
    """Objective of ``pairs`` evaluated from scratch (reference for the incremental form)."""
    if not pairs:
        return 0.0
    rows = [table.row(o) for o, _ in pairs]
    cols = [table.col(d) for _, d in pairs]
    r = float(table.r_d[rows, cols].sum())
    v = float(table.v_s[rows, cols].sum())
    n = len(pairs)
    if n < 2:
        return r + v
    K = kernel_matrix(table.dropoff_xy[rows], sigma_km)
    rho = (K.sum() - np.trace(K)) / (n * (n - 1))
    return r + v * (1.0 - rho)


def marginal_gain(S: AssignmentSet | Sequence[tuple[int, int]], pair: PairScore | tuple[int, int],
                  table: ScoreTable, sigma_km: float) -> float:
    pairs = list(S.pairs if isinstance(S, AssignmentSet) else S)
    p = (pair.order_id, pair.agent_id) if isinstance(pair, PairScore) else tuple(pair)
    if p in pairs:
        raise ValueError(f"pair {p} already in S")
    return set_value(table, pairs + [p], sigma_km) - set_value(table, pairs, sigma_km)


# algorithm 1 ------------------------------------------------------------------


@dataclass
class TopNResult:
    pairs: list[tuple[int, int]]
    trace: list[tuple[int, int, float]]  # (order, agent, gain) in selection order


def topn_dispatch(table: ScoreTable, cfg: DispatchConfig) -> TopNResult:
    """Each order, in ascending id, greedily picks up to N agents by marginal
    gain against its own candidate set."""
    pairs: list[tuple[int, int]] = []
    trace = []
    feasible = table.feasible
    for i in np.argsort(table.order_ids, kind="stable"):
        oid = int(table.order_ids[i])
        sub = table.subset([oid])
        obj = DispatchObjective(sub, cfg.sigma_km)
        cols = np.flatnonzero(feasible[i])
        cols = cols[np.argsort(table.agent_ids[cols], kind="stable")]
        for _ in range(min(cfg.top_n, len(cols))):
            g = obj.gain_row(0, cols)
            k = int(np.argmax(g))
            aid = int(table.agent_ids[cols[k]])
            obj.add(oid, aid)
            pairs.append((oid, aid))
            trace.append((oid, aid, float(g[k])))
            cols = np.delete(cols, k)
    return TopNResult(pairs, trace)


# algorithm 2 ------------------------------------------------------------------


@dataclass
class ThresholdResult:
    pairs: list[tuple[int, int]]
    value: float
    tau0: float
    passes: int
    trace: list[tuple[int, float, int, int, float]]  # (pass, tau, order, agent, gain)


def threshold_greedy(candidates: Sequence[tuple[int, int]], objective: Objective, epsilon: float, capacity: int,
                     existing_load: Mapping[int, int] | None = None) -> ThresholdResult:
    """Decreasing-threshold greedy under order uniqueness and agent capacity.

    Each pass scans candidates in (order, agent) order and accepts any
    eligible pair whose gain reaches the threshold. Gains only change after an
    acceptance, so they are evaluated in one batch per acceptance when the
    objective offers ``gains``.
    """
    cands = sorted(set((int(o), int(d)) for o, d in candidates))
    co = np.array([o for o, _ in cands], dtype=np.int64)
    cd = np.array([d for _, d in cands], dtype=np.int64)
    batch = getattr(objective, "gains", None)
    load = dict(existing_load or {})
    tau0 = objective.tau0(cands)
    tau = tau0
    assigned: set[int] = set()
    trace = []
    passes = 0
    while tau0 > 0 and tau > epsilon * tau0:
        pos = 0
        while pos < len(cands):
            idx = [k for k in range(pos, len(cands)) if co[k] not in assigned and load.get(int(cd[k]), 0) < capacity]
            if not idx:
                break
            idx = np.array(idx)
            if batch is not None:
                g = batch(co[idx], cd[idx])
            else:
                g = np.array([objective.gain(int(co[k]), int(cd[k])) for k in idx])
            hit = np.flatnonzero(g >= tau)
            if not len(hit):
                break
            k = int(idx[hit[0]])
            o, d = int(co[k]), int(cd[k])
            objective.add(o, d)
            assigned.add(o)
            load[d] = load.get(d, 0) + 1
            trace.append((passes, tau, o, d, float(g[hit[0]])))
            pos = k + 1
        tau *= 1.0 - epsilon
        passes += 1
    pairs = [(o, d) for _, _, o, d, _ in trace]
    return ThresholdResult(pairs, objective.value(), tau0, passes, trace)


def threshold_dispatch(table: ScoreTable, cfg: DispatchConfig,
                       candidates: Sequence[tuple[int, int]] | None = None) -> ThresholdResult:
    if candidates is None:
        f = table.feasible
        candidates = [(int(table.order_ids[i]), int(table.agent_ids[j])) for i, j in zip(*np.nonzero(f))]
    load = {int(a): int(n) for a, n in zip(table.agent_ids, table.existing_load)}
    return threshold_greedy(candidates, DispatchObjective(table, cfg.sigma_km), cfg.epsilon, cfg.capacity, load)


# scoring ----------------------------------------------------------------------


def agent_schedules(agents: Sequence[Agent], orders: Mapping[int, Order], grid: GridMap,
                    t: int) -> tuple[np.ndarray, np.ndarray]:
    """Slot and region at which each agent finishes its current orders, serialised
    picked-up first, then earliest deadline."""
    src, dst, owner = [], [], []
    free_loc = np.empty(len(agents), dtype=np.int64)
    for k, agent in enumerate(agents):
        mine = sorted((orders[o] for o in agent.assigned_orders),
                      key=lambda o: (o.status is not OrderStatus.PICKED_UP, o.deadline, o.id))
        loc = agent.location
        for o in mine:
            stops = (o.dropoff,) if o.status is OrderStatus.PICKED_UP else (o.pickup, o.dropoff)
            for g in stops:
                src.append(loc)
                dst.append(g)
                owner.append(k)
                loc = g
        free_loc[k] = loc
    free_t = np.full(len(agents), t, dtype=np.int64)
    if src:
        np.add.at(free_t, np.array(owner), grid.travel_times(np.array(src), np.array(dst)))
    return free_t, free_loc


def agent_schedule(agent: Agent, orders: Mapping[int, Order], grid: GridMap, t: int) -> tuple[int, int]:
    free_t, free_loc = agent_schedules([agent], orders, grid, t)
    return int(free_t[0]), int(free_loc[0])


def predict_delivery_reward(order: Order, agent: Agent, grid: GridMap, t: int, beta: float,
                            orders: Mapping[int, Order] | None = None, capacity: int | None = None) -> float:
    if capacity is not None and len(agent.assigned_orders) >= capacity:
        return INFEASIBLE
    free_t, free_loc = agent_schedule(agent, orders or {}, grid, t)
    trip = int(grid.travel_times(free_loc, order.pickup)) + int(grid.travel_times(order.pickup, order.dropoff))
    done = max(free_t + trip, t + 1)
    late = max(0, done - order.deadline)
    return order.fee * beta**late


def delivery_table(order_list: Sequence[Order], agents: Sequence[Agent], orders: Mapping[int, Order],
                   grid: GridMap, t: int, beta: float, capacity: int) -> np.ndarray:
    """Vectorised ``predict_delivery_reward`` over orders x agents."""
    free_t, free_loc = agent_schedules(agents, orders, grid, t)
    pick = np.array([o.pickup for o in order_list], dtype=np.int64)
    drop = np.array([o.dropoff for o in order_list], dtype=np.int64)
    fee = np.array([o.fee for o in order_list], dtype=np.float64)
    dl = np.array([o.deadline for o in order_list], dtype=np.int64)
    trip = grid.travel_times(free_loc[None, :], pick[:, None]) + grid.travel_times(pick, drop)[:, None]
    done = free_t[None, :] + trip
    done = np.maximum(done, t + 1)
    late = np.maximum(0, done - dl[:, None])
    r = fee[:, None] * np.power(beta, late)
    full = np.array([len(a.assigned_orders) >= capacity for a in agents], dtype=bool)
    r[:, full] = INFEASIBLE
    return r


@dataclass
class Snapshot:
    """Immutable view of the world that dispatch workers score against."""

    t: int
    grid: GridMap
    agents: list[Agent]
    orders: dict[int, Order]
    pending: list[int]
    capacity: int
    beta: float
    sensing: Callable | None = None  # (order list, agents) -> v_s matrix

    def order_list(self, ids: Sequence[int]) -> list[Order]:
        return [self.orders[o] for o in ids]


def score_snapshot(snap: Snapshot, order_ids: Sequence[int]) -> ScoreTable:
    ol = snap.order_list(order_ids)
    agents = snap.agents
    r = delivery_table(ol, agents, snap.orders, snap.grid, snap.t, snap.beta, snap.capacity)
    v = np.zeros_like(r) if snap.sensing is None or not len(ol) else snap.sensing(ol, agents)
    v = np.where(np.isfinite(r), v, 0.0)
    xy = snap.grid.centers_km([o.dropoff for o in ol]) if ol else np.zeros((0, 2))
    load = [len(a.assigned_orders) for a in agents]
    return ScoreTable(np.array(order_ids, dtype=np.int64), np.array([a.id for a in agents]), r, v, xy, load)


# map / reduce -----------------------------------------------------------------


@dataclass
class WorkerOutput:
    worker: int
    n_orders: int
    candidates: list[tuple[int, int]]
    r_d: list[float]
    v_s: list[float]
    seconds: float


@dataclass
class DispatchResult:
    assignment: AssignmentSet
    n_candidates: int
    worker_sizes: list[int]
    passes: int
    map_seconds: float
    reduce_seconds: float
    trace: list[tuple] = field(default_factory=list)

    def trace_record(self) -> dict:
        return {
            "slot": self.assignment.slot,
            "candidates": self.n_candidates,
            "worker_outputs": self.worker_sizes,
            "assigned": len(self.assignment),
            "R_d": self.assignment.delivery_reward,
            "V_s": self.assignment.sensing_value,
            "passes": self.passes,
        }


def _map_task(worker: int, source, order_ids: list[int], cfg: DispatchConfig) -> WorkerOutput:
    t0 = time.perf_counter()
    table = source.subset(order_ids) if isinstance(source, ScoreTable) else score_snapshot(source, order_ids)
    res = topn_dispatch(table, cfg)
    r = [float(table.r_d[table.row(o), table.col(d)]) for o, d in res.pairs]
    v = [float(table.v_s[table.row(o), table.col(d)]) for o, d in res.pairs]
    return WorkerOutput(worker, len(order_ids), res.pairs, r, v, time.perf_counter() - t0)


class Dispatcher:
    """Runs round 1 on M workers (in-process or a process pool) and round 2 on the caller."""

    def __init__(self, cfg: DispatchConfig):
        self.cfg = cfg
        self._pool: ProcessPoolExecutor | None = None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def partitions(self, order_ids: Sequence[int]) -> list[list[int]]:
        parts: list[list[int]] = [[] for _ in range(self.cfg.n_workers)]
        for o in sorted(int(o) for o in order_ids):
            parts[self.cfg.partition(o)].append(o)
        return parts

    def map_phase(self, source, order_ids: Sequence[int]) -> list[WorkerOutput]:
        parts = self.partitions(order_ids)
        if self.cfg.backend == "serial" or self.cfg.n_workers == 1:
            outs = []
            for w, ids in enumerate(parts):
                try:
                    outs.append(_map_task(w, source, ids, self.cfg))
                except Exception as exc:
                    raise PartitionError(w, exc) from exc
            return outs
        if self._pool is None:
            self._pool = ProcessPoolExecutor(max_workers=self.cfg.n_workers)
        futs = [self._pool.submit(_map_task, w, source, ids, self.cfg) for w, ids in enumerate(parts)]
        outs = []
        for w, f in enumerate(futs):
            try:
                outs.append(f.result())
            except Exception as exc:
                raise PartitionError(w, exc) from exc
        return outs

    def dispatch(self, source: ScoreTable | Snapshot, slot: int = 0) -> DispatchResult:
        if isinstance(source, ScoreTable):
            order_ids = [int(o) for o in source.order_ids]
            agent_ids = source.agent_ids
            load = source.existing_load
        else:
            order_ids = list(source.pending)
            agent_ids = np.array([a.id for a in source.agents], dtype=np.int64)
            load = np.array([len(a.assigned_orders) for a in source.agents], dtype=np.int64)
        t0 = time.perf_counter()
        outs = self.map_phase(source, order_ids) if order_ids else []
        t1 = time.perf_counter()
        cand = [p for w in outs for p in w.candidates]
        r_d = [x for w in outs for x in w.r_d]
        v_s = [x for w in outs for x in w.v_s]
        if not cand:
            empty = AssignmentSet(slot)
            return DispatchResult(empty, 0, [len(w.candidates) for w in outs], 0, t1 - t0, 0.0)
        cand_orders = sorted({o for o, _ in cand})
        oi = {o: i for i, o in enumerate(cand_orders)}
        ai = {int(a): j for j, a in enumerate(agent_ids)}
        R = np.full((len(cand_orders), len(agent_ids)), INFEASIBLE)
        V = np.zeros_like(R)
        for (o, d), r, v in zip(cand, r_d, v_s):
            R[oi[o], ai[d]] = r
            V[oi[o], ai[d]] = v
        if isinstance(source, ScoreTable):
            xy = source.dropoff_xy[[source.row(o) for o in cand_orders]]
        else:
            xy = source.grid.centers_km([source.orders[o].dropoff for o in cand_orders])
        table = ScoreTable(np.array(cand_orders), agent_ids, R, V, xy, load)
        res = threshold_dispatch(table, self.cfg, cand)
        obj = DispatchObjective(table, self.cfg.sigma_km)
        for o, d in res.pairs:
            obj.add(o, d)
        assignment = AssignmentSet(slot, tuple(res.pairs), obj.sum_rd, obj.sensing_part())
        t2 = time.perf_counter()
        return DispatchResult(assignment, len(cand), [len(w.candidates) for w in outs], res.passes,
                              t1 - t0, t2 - t1, res.trace)


def mapreduce_dispatch(source: ScoreTable | Snapshot, cfg: DispatchConfig, slot: int = 0) -> DispatchResult:
    with Dispatcher(cfg) as d:
        return d.dispatch(source, slot)
