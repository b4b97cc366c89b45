"""Core value types: grid geometry, agents, orders, assignment sets and state encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

# last_visit sentinel for regions that were never sensed
NEVER = -(10**12)

# (dx, dy) for the 8 movement directions, row-major with y as the row index
DIRECTIONS: tuple[tuple[int, int], ...] = (
    (-1, -1), (0, -1), (1, -1),
    (-1, 0), (1, 0),
    (-1, 1), (0, 1), (1, 1),
)
HOLD = 8
N_ACTIONS = 9
_DIR_INDEX = {d: i for i, d in enumerate(DIRECTIONS)}


class DomainError(ValueError):
    """Raised for invalid regions, dangling ids or illegal state transitions."""


def _sign(v: int) -> int:
    return (v > 0) - (v < 0)


@dataclass(frozen=True)
class RegionAttr:
    region_type: int = 0
    accessible: bool = True
    speed_multiplier: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.speed_multiplier <= 1.0):
            raise DomainError(f"speed_multiplier must be in (0, 1], got {self.speed_multiplier}")


class GridMap:
    """Rectangular lattice of regions with 8-connectivity.

    Region ids are row-major: ``g = y * width + x``. Static attributes live in
    numpy arrays; ``last_visit`` is the only mutable table and is written by the
    simulator alone.
    """

    def __init__(
        self,
        width: int,
        height: int,
        cell_size_km: float = 0.05,
        regions: Mapping[tuple[int, int], RegionAttr] | None = None,
        slots_per_cell: int = 1,
        n_region_types: int = 3,
    ):
        if width < 1 or height < 1:
            raise DomainError("grid must be at least 1x1")
        if slots_per_cell < 1:
            raise DomainError("slots_per_cell must be >= 1")
        self.width = int(width)
        self.height = int(height)
        self.cell_size_km = float(cell_size_km)
        self.slots_per_cell = int(slots_per_cell)
        self.n_region_types = int(n_region_types)
        n = self.width * self.height
        self.region_type = np.zeros(n, dtype=np.int64)
        self.accessible = np.ones(n, dtype=bool)
        self.speed = np.ones(n, dtype=np.float64)
        for (x, y), attr in (regions or {}).items():
            g = self.region_id(x, y)
            if not 0 <= attr.region_type < self.n_region_types:
                raise DomainError(f"region_type {attr.region_type} out of range at {(x, y)}")
            self.region_type[g] = attr.region_type
            self.accessible[g] = attr.accessible
            self.speed[g] = attr.speed_multiplier
        self.last_visit = np.full(n, NEVER, dtype=np.int64)
        self._xs = np.arange(n) % self.width
        self._ys = np.arange(n) // self.width
        self._nbr = self._build_neighbor_table()
        self._travel: np.ndarray | None = None

    # geometry ---------------------------------------------------------------

    @property
    def n_regions(self) -> int:
        return self.width * self.height

    def region_id(self, x: int, y: int) -> int:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise DomainError(f"coordinates {(x, y)} outside {self.width}x{self.height} grid")
        return int(y) * self.width + int(x)

    def xy(self, g: int) -> tuple[int, int]:
        self.check(g)
        return int(g) % self.width, int(g) // self.width

    def center_km(self, g: int) -> tuple[float, float]:
        x, y = self.xy(g)
        return (x + 0.5) * self.cell_size_km, (y + 0.5) * self.cell_size_km

    def centers_km(self, regions) -> np.ndarray:
        regions = np.asarray(regions, dtype=np.int64)
        return np.stack(
            [(self._xs[regions] + 0.5) * self.cell_size_km, (self._ys[regions] + 0.5) * self.cell_size_km],
            axis=-1,
        )

    def check(self, g) -> None:
        if not (isinstance(g, (int, np.integer)) and 0 <= g < self.n_regions):
            raise DomainError(f"invalid region id {g!r}")

    def region(self, g: int) -> RegionAttr:
        self.check(g)
        return RegionAttr(int(self.region_type[g]), bool(self.accessible[g]), float(self.speed[g]))

    def chebyshev(self, a: int, b: int) -> int:
        return int(max(abs(self._xs[a] - self._xs[b]), abs(self._ys[a] - self._ys[b])))

    def _build_neighbor_table(self) -> np.ndarray:
        table = np.full((self.n_regions, 8), -1, dtype=np.int64)
        for d, (dx, dy) in enumerate(DIRECTIONS):
            nx = self._xs + dx
            ny = self._ys + dy
            ok = (nx >= 0) & (nx < self.width) & (ny >= 0) & (ny < self.height)
            nid = np.where(ok, ny * self.width + nx, -1)
            ok &= self.accessible[np.clip(nid, 0, None)]
            table[:, d] = np.where(ok, nid, -1)
        return table

    @property
    def neighbor_table(self) -> np.ndarray:
        """(n_regions, 8) direction-indexed neighbours; -1 where blocked or out of bounds."""
        return self._nbr

    def neighbors8(self, g: int) -> list[int]:
        self.check(g)
        return [int(n) for n in self._nbr[g] if n >= 0]

    def action_mask(self, g: int) -> np.ndarray:
        """Feasible actions at ``g``: the 8 directions plus hold (always allowed)."""
        mask = np.empty(N_ACTIONS, dtype=bool)
        mask[:8] = self._nbr[g] >= 0
        mask[HOLD] = True
        return mask

    def action_target(self, g: int, action: int) -> int:
        if action == HOLD:
            return int(g)
        n = int(self._nbr[g, action])
        if n < 0:
            raise DomainError(f"action {action} infeasible at region {g}")
        return n

    def action_between(self, a: int, b: int) -> int:
        """Action index that moves from ``a`` to the adjacent (or same) region ``b``."""
        if a == b:
            return HOLD
        d = (int(self._xs[b] - self._xs[a]), int(self._ys[b] - self._ys[a]))
        if d not in _DIR_INDEX:
            raise DomainError(f"regions {a} and {b} are not adjacent")
        return _DIR_INDEX[d]

    # movement ---------------------------------------------------------------

    def _require_accessible(self, g: int) -> None:
        self.check(g)
        if not self.accessible[g]:
            raise DomainError(f"region {g} is inaccessible")

    def travel_time(self, a: int, b: int) -> int:
        """Slots to travel a -> b along the diagonal-first path.

        Chebyshev cells times slots per cell, divided by the slowest speed
        multiplier met on the path and rounded up.
        """
        self._require_accessible(a)
        self._require_accessible(b)
        ax, ay = int(self._xs[a]), int(self._ys[a])
        bx, by = int(self._xs[b]), int(self._ys[b])
        dx, dy = bx - ax, by - ay
        cheb = max(abs(dx), abs(dy))
        if cheb == 0:
            return 0
        sx, sy = _sign(dx), _sign(dy)
        m = 1.0
        for k in range(cheb + 1):
            g = (ay + sy * min(k, abs(dy))) * self.width + ax + sx * min(k, abs(dx))
            if self.accessible[g] and self.speed[g] < m:
                m = float(self.speed[g])
        return int(math.ceil(cheb * self.slots_per_cell / m - 1e-9))

    def travel_times(self, a, b) -> np.ndarray:
        """``travel_time`` broadcast over region arrays ``a`` and ``b``.

        Reads the all-pairs table when it has been built, otherwise walks only
        the requested paths.
        """
        a, b = np.broadcast_arrays(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
        if self._travel is not None:
            return self._travel[a, b]
        ax, ay = self._xs[a], self._ys[a]
        dx, dy = self._xs[b] - ax, self._ys[b] - ay
        adx, ady = np.abs(dx), np.abs(dy)
        sx, sy = np.sign(dx), np.sign(dy)
        cheb = np.maximum(adx, ady)
        m = np.ones(a.shape)
        speed = np.where(self.accessible, self.speed, 1.0)
        for k in range(int(cheb.max(initial=0)) + 1):
            g = (ay + sy * np.minimum(k, ady)) * self.width + ax + sx * np.minimum(k, adx)
            m = np.minimum(m, speed[g])
        return np.ceil(cheb * self.slots_per_cell / m - 1e-9).astype(np.int64)

    def travel_table(self) -> np.ndarray:
        """All-pairs travel_time as an int array (computed once, vectorised)."""
        if self._travel is None:
            n = self.n_regions
            ax, ay = self._xs[:, None], self._ys[:, None]
            dx = self._xs[None, :] - ax
            dy = self._ys[None, :] - ay
            adx, ady = np.abs(dx), np.abs(dy)
            sx, sy = np.sign(dx), np.sign(dy)
            cheb = np.maximum(adx, ady)
            m = np.ones((n, n))
            speed = np.where(self.accessible, self.speed, 1.0)
            for k in range(int(cheb.max()) + 1):
                g = (ay + sy * np.minimum(k, ady)) * self.width + ax + sx * np.minimum(k, adx)
                m = np.minimum(m, speed[g])
            self._travel = np.ceil(cheb * self.slots_per_cell / m - 1e-9).astype(np.int64)
        return self._travel

    def step_toward(self, g: int, target: int) -> int:
        """Next region on the fastest route from ``g`` to ``target`` (``g`` if already there)."""
        if g == target:
            return int(g)
        dx = int(self._xs[target] - self._xs[g])
        dy = int(self._ys[target] - self._ys[g])
        nxt = int(self._nbr[g, _DIR_INDEX[(_sign(dx), _sign(dy))]])
        if nxt >= 0:
            return nxt
        # blocked diagonal: best accessible neighbour by remaining distance
        cur = max(abs(dx), abs(dy))
        best, best_d = int(g), cur
        for n in self._nbr[g]:
            if n < 0:
                continue
            d = self.chebyshev(int(n), target)
            if d < best_d or (d == best_d and best == g):
                best, best_d = int(n), d
        return best

    def route(self, a: int, b: int) -> list[int]:
        """Regions visited moving a -> b with ``step_toward`` (excluding ``a``)."""
        path = []
        g = a
        for _ in range(2 * self.n_regions):
            if g == b:
                break
            nxt = self.step_toward(g, b)
            if nxt == g:
                break
            path.append(nxt)
            g = nxt
        return path

    # staleness --------------------------------------------------------------

    def stale_mask(self, now: int, window: int) -> np.ndarray:
        """True where the region was not sensed within the last ``window`` slots."""
        return ((now - self.last_visit) >= window) & self.accessible


class AgentKind(Enum):
    COURIER = "courier"
    RV = "rv"


@dataclass
class Agent:
    id: int
    kind: AgentKind
    location: int
    available: bool = True
    assigned_orders: list[int] = field(default_factory=list)
    last_sensed_region: int | None = None
    neigh_count: int = 0
    move_credit: float = 0.0

    @property
    def is_rv(self) -> bool:
        return self.kind is AgentKind.RV


class OrderStatus(Enum):
    PENDING = "pending"
    ASSIGNED = "assigned"
    PICKED_UP = "picked_up"
    COMPLETED = "completed"
    EXPIRED = "expired"


_TRANSITIONS = {
    OrderStatus.PENDING: {OrderStatus.ASSIGNED, OrderStatus.EXPIRED},
    OrderStatus.ASSIGNED: {OrderStatus.PICKED_UP},
    OrderStatus.PICKED_UP: {OrderStatus.COMPLETED},
    OrderStatus.COMPLETED: set(),
    OrderStatus.EXPIRED: set(),
}


@dataclass
class Order:
    id: int
    pickup: int
    dropoff: int
    created_at: int
    deadline: int
    fee: float
    status: OrderStatus = OrderStatus.PENDING
    agent_id: int | None = None
    completed_at: int | None = None

    def __post_init__(self):
        if self.deadline <= self.created_at:
            raise DomainError(f"order {self.id}: deadline {self.deadline} <= created_at {self.created_at}")
        if self.fee < 0:
            raise DomainError(f"order {self.id}: negative fee")

    def advance(self, status: OrderStatus) -> None:
        if status not in _TRANSITIONS[self.status]:
            raise DomainError(f"order {self.id}: illegal transition {self.status.value} -> {status.value}")
        self.status = status


@dataclass(frozen=True)
class AssignmentSet:
    slot: int
    pairs: tuple[tuple[int, int], ...] = ()
    delivery_reward: float = 0.0
    sensing_value: float = 0.0

    def __len__(self) -> int:
        return len(self.pairs)

    def order_ids(self) -> list[int]:
        return [o for o, _ in self.pairs]

    def violations(self, existing_load: Mapping[int, int], capacity: int) -> list[str]:
        """Uniqueness and capacity violations (empty list when feasible)."""
        problems = []
        seen: set[int] = set()
        load = dict(existing_load)
        for o, d in self.pairs:
            if o in seen:
                problems.append(f"order {o} assigned more than once")
            seen.add(o)
            load[d] = load.get(d, 0) + 1
        for d, n in load.items():
            if n > capacity:
                problems.append(f"agent {d} load {n} exceeds capacity {capacity}")
        return problems


# state encoding ---------------------------------------------------------------


@dataclass(frozen=True)
class Normalization:
    max_fee: float = 20.0
    max_horizon: int = 1440
    max_slack: int = 60


class StateEncoder:
    """Fixed-length agent state vectors ``[as, os, ss]``.

    as: t, x, y, available, is_rv
    os: per order slot (capacity many, EDF order): pickup xy, dropoff xy, slack, fee
    ss: last-sensed xy, neighbour count, region-type one-hot, accessibility,
        a (2r+1)^2 staleness patch (1 stale, 0 fresh, -1 blocked) and the
        distance-weighted stale fraction in each of the 8 direction sectors.
    """

    ORDER_FEATURES = 6

    def __init__(
        self,
        grid: GridMap,
        capacity: int = 3,
        norm: Normalization = Normalization(),
        staleness_window: int = 60,
        patch_radius: int = 2,
        sector_length: float = 4.0,
    ):
        self.grid = grid
        self.capacity = capacity
        self.norm = norm
        self.window = staleness_window
        self.patch_radius = patch_radius
        self.sector_length = sector_length
        T = grid.n_region_types
        c = capacity * self.ORDER_FEATURES
        p = (2 * patch_radius + 1) ** 2
        self.i_orders = 5
        self.i_last = 5 + c
        self.i_neigh = self.i_last + 2
        self.i_type = self.i_neigh + 1
        self.i_access = self.i_type + T
        self.i_patch = self.i_access + 1
        self.i_sector = self.i_patch + p
        self.length = self.i_sector + 8
        self.loc_cols = np.concatenate([[1, 2], np.arange(self.i_type, self.length)])
        # inner ring of the patch, in action order
        r = patch_radius
        side = 2 * r + 1
        self._ring = np.array([(dy + r) * side + (dx + r) for dx, dy in DIRECTIONS]) + self.i_patch
        offs = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
        xs, ys = grid._xs, grid._ys
        idx = np.full((grid.n_regions, len(offs)), -1, dtype=np.int64)
        for k, (dx, dy) in enumerate(offs):
            nx, ny = xs + dx, ys + dy
            ok = (nx >= 0) & (nx < grid.width) & (ny >= 0) & (ny < grid.height)
            idx[:, k] = np.where(ok, ny * grid.width + nx, -1)
        self._patch_idx = idx
        self._sector_cache = self._sector_matrix(np.arange(grid.n_regions)) if grid.n_regions <= 2500 else None

    def _sector_matrix(self, positions: np.ndarray) -> np.ndarray:
        g = self.grid
        px = g._xs[positions][:, None]
        py = g._ys[positions][:, None]
        dx = g._xs[None, :] - px
        dy = g._ys[None, :] - py
        k = np.rint(np.arctan2(dy, dx) / (np.pi / 4)).astype(np.int64) % 8
        lut = np.array([_DIR_INDEX[(int(round(math.cos(j * math.pi / 4))), int(round(math.sin(j * math.pi / 4))))]
                        for j in range(8)])
        sector = lut[k]
        w = np.exp(-np.maximum(np.abs(dx), np.abs(dy)) / self.sector_length)
        w = np.where((dx == 0) & (dy == 0), 0.0, w) * g.accessible[None, :]
        out = np.zeros((len(positions), 8, g.n_regions), dtype=np.float32)
        rows = np.arange(len(positions))[:, None]
        out[rows, sector, np.arange(g.n_regions)[None, :]] = w
        norm = out.sum(axis=2, keepdims=True)
        return out / np.where(norm > 0, norm, 1.0)

    def stale(self, now: int) -> np.ndarray:
        return self.grid.stale_mask(now, self.window)

    def location_features(self, regions, stale: np.ndarray) -> np.ndarray:
        """Location-dependent columns (``loc_cols``) for each region in ``regions``."""
        g = self.grid
        regions = np.asarray(regions, dtype=np.int64)
        k = len(regions)
        out = np.zeros((k, len(self.loc_cols)))
        wx = max(g.width - 1, 1)
        wy = max(g.height - 1, 1)
        out[:, 0] = g._xs[regions] / wx
        out[:, 1] = g._ys[regions] / wy
        T = g.n_region_types
        out[np.arange(k), 2 + g.region_type[regions]] = 1.0
        out[:, 2 + T] = g.accessible[regions]
        pidx = self._patch_idx[regions]
        safe = np.clip(pidx, 0, None)
        patch = np.where(g.accessible[safe], stale[safe].astype(float), -1.0)
        patch[pidx < 0] = -1.0
        c0 = 3 + T
        out[:, c0:c0 + patch.shape[1]] = patch
        sw = self._sector_cache[regions] if self._sector_cache is not None else self._sector_matrix(regions)
        out[:, c0 + patch.shape[1]:] = sw @ stale.astype(np.float32)
        return out

    def encode_batch(
        self,
        agents: Sequence[Agent],
        orders: Mapping[int, Order],
        t: int,
        stale: np.ndarray | None = None,
        locations: Sequence[int] | None = None,
    ) -> np.ndarray:
        g = self.grid
        if stale is None:
            stale = self.stale(t)
        n = len(agents)
        X = np.zeros((n, self.length))
        locs = [a.location for a in agents] if locations is None else list(locations)
        X[:, 0] = min(t / self.norm.max_horizon, 1.0)
        X[:, 3] = [a.available for a in agents]
        X[:, 4] = [a.is_rv for a in agents]
        wx = max(g.width - 1, 1)
        wy = max(g.height - 1, 1)
        for i, a in enumerate(agents):
            try:
                mine = sorted((orders[o] for o in a.assigned_orders), key=lambda o: (o.deadline, o.id))
            except KeyError as exc:
                raise DomainError(f"agent {a.id} references unknown order {exc.args[0]}") from None
            for j, o in enumerate(mine[: self.capacity]):
                c = self.i_orders + j * self.ORDER_FEATURES
                X[i, c] = g._xs[o.pickup] / wx
                X[i, c + 1] = g._ys[o.pickup] / wy
                X[i, c + 2] = g._xs[o.dropoff] / wx
                X[i, c + 3] = g._ys[o.dropoff] / wy
                X[i, c + 4] = np.clip((o.deadline - t) / self.norm.max_slack, -1.0, 1.0)
                X[i, c + 5] = np.clip(o.fee / self.norm.max_fee, 0.0, 1.0)
            if a.last_sensed_region is None:
                X[i, self.i_last:self.i_last + 2] = -1.0
            else:
                X[i, self.i_last] = g._xs[a.last_sensed_region] / wx
                X[i, self.i_last + 1] = g._ys[a.last_sensed_region] / wy
            X[i, self.i_neigh] = a.neigh_count / 8.0
        if n:
            X[:, self.loc_cols] = self.location_features(locs, stale)
        return X

    def encode(self, agent: Agent, orders: Mapping[int, Order], t: int, stale: np.ndarray | None = None,
               location: int | None = None) -> np.ndarray:
        locs = None if location is None else [location]
        return self.encode_batch([agent], orders, t, stale, locs)[0]

    def relocate(self, base: np.ndarray, loc_feats: np.ndarray) -> np.ndarray:
        """Counterfactual states: every base row moved to every location.

        Returns an array of shape (n_locations, n_base, length).
        """
        out = np.broadcast_to(base, (loc_feats.shape[0],) + base.shape).copy()
        out[:, :, self.loc_cols] = loc_feats[:, None, :]
        return out

    def mask_from_state(self, s: np.ndarray) -> np.ndarray:
        """Feasible-action mask recovered from the staleness patch of a state."""
        s = np.asarray(s)
        mask = np.ones(s.shape[:-1] + (N_ACTIONS,), dtype=bool)
        mask[..., :8] = s[..., self._ring] >= 0
        return mask


def encode_state(agent: Agent, orders: Mapping[int, Order], grid: GridMap, t: int,
                 encoder: StateEncoder | None = None) -> np.ndarray:
    """AgentStateVector for ``agent`` at slot ``t`` (pure function of its inputs)."""
    enc = encoder if encoder is not None else StateEncoder(grid)
    return enc.encode(agent, orders, t)


def neighbors8(grid: GridMap, g: int) -> list[int]:
    return grid.neighbors8(g)


def travel_time(grid: GridMap, a: int, b: int) -> int:
    return grid.travel_time(a, b)


def load_of(agents: Iterable[Agent]) -> dict[int, int]:
    return {a.id: len(a.assigned_orders) for a in agents}
