"""Comparison policies, simplified "lite" versions built from one-line descriptions.

Every policy maps a world snapshot to ``(AssignmentSet, routing)`` and assigns
greedily in ascending order id while tracking agent load, so order uniqueness
and agent capacity hold by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .domain import AssignmentSet, GridMap
from .simulator import WorldState, courier_objective


def _stale(world: WorldState) -> np.ndarray:
    return world.grid.stale_mask(world.t, world.params.sensing.staleness_window)


def _stale_along(grid: GridMap, a: np.ndarray, b: np.ndarray, stale: np.ndarray) -> np.ndarray:
    """Stale regions entered on the diagonal-first path a -> b, elementwise over broadcast arrays."""
    ax, ay = grid._xs[a], grid._ys[a]
    dx, dy = grid._xs[b] - ax, grid._ys[b] - ay
    adx, ady = np.abs(dx), np.abs(dy)
    sx, sy = np.sign(dx), np.sign(dy)
    cheb = np.maximum(adx, ady)
    out = np.zeros(cheb.shape, dtype=np.int64)
    for k in range(1, int(cheb.max(initial=0)) + 1):
        cell = (ay + sy * np.minimum(k, ady)) * grid.width + ax + sx * np.minimum(k, adx)
        out += stale[cell] & (k <= cheb)
    return out


def path_stale_counts(grid: GridMap, starts, end, stale: np.ndarray) -> np.ndarray:
    """Stale regions entered along the diagonal-first path from each start to ``end``.

    With an array of ends the result has shape (len(ends), len(starts)).
    """
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(end, dtype=np.int64)
    if ends.ndim == 0:
        return _stale_along(grid, starts, np.broadcast_to(ends, starts.shape), stale)
    return _stale_along(grid, starts[None, :], ends[:, None], stale)


def _cheb(grid: GridMap, locs: np.ndarray, g) -> np.ndarray:
    """Chebyshev distance from each of ``locs`` to ``g`` (rows per target when ``g`` is an array)."""
    g = np.asarray(g)
    if g.ndim == 0:
        return np.maximum(np.abs(grid._xs[locs] - grid._xs[g]), np.abs(grid._ys[locs] - grid._ys[g]))
    return np.maximum(np.abs(grid._xs[locs][None, :] - grid._xs[g][:, None]),
                      np.abs(grid._ys[locs][None, :] - grid._ys[g][:, None]))


@dataclass
class _Fleet:
    ids: np.ndarray
    locs: np.ndarray
    is_rv: np.ndarray
    load: np.ndarray


def _fleet(world: WorldState) -> _Fleet:
    agents = [world.agents[i] for i in sorted(world.agents)]
    return _Fleet(
        np.array([a.id for a in agents], dtype=np.int64),
        np.array([a.location for a in agents], dtype=np.int64),
        np.array([a.is_rv for a in agents], dtype=bool),
        np.array([len(a.assigned_orders) for a in agents], dtype=np.int64),
    )


def _greedy(world: WorldState, keys: Callable, couriers_first: bool = False) -> AssignmentSet:
    """Assign each pending order (ascending id) to the agent with the smallest key.

    ``keys(orders, fleet, stale)`` returns a tuple of (orders x agents) arrays
    for ``np.lexsort``, most significant first; agent id is the final tie-break.
    """
    fleet = _fleet(world)
    stale = _stale(world)
    cap = world.params.capacity
    pending = world.pending()
    if not pending or not len(fleet.ids):
        return AssignmentSet(world.t)
    K = keys(pending, fleet, stale)
    pairs = []
    for i, o in enumerate(pending):
        free = fleet.load < cap
        if not free.any():
            break
        if couriers_first and (free & ~fleet.is_rv).any():
            free &= ~fleet.is_rv
        order = np.lexsort((fleet.ids,) + tuple(k[i] for k in reversed(K)))
        j = int(order[free[order]][0])
        pairs.append((o.id, int(fleet.ids[j])))
        fleet.load[j] += 1
    return AssignmentSet(world.t, tuple(pairs))


# routing rules ----------------------------------------------------------------


def route_to_objectives(world: WorldState) -> dict[int, int]:
    """RVs step along the fastest route to their current objective, else hold."""
    routing = {}
    for a in world.rvs():
        goal = courier_objective(a, world.orders)
        routing[a.id] = a.location if goal is None else world.grid.step_toward(a.location, goal)
    return routing


def _nearest_stale_step(grid: GridMap, g: int, stale: np.ndarray) -> int:
    ids = np.flatnonzero(stale)
    if not len(ids):
        return g
    d = _cheb(grid, ids, g)
    return grid.step_toward(g, int(ids[np.argmin(d)]))


def route_stale_greedy(world: WorldState, neighbour_bonus: bool = True) -> dict[int, int]:
    """Each RV moves to the neighbour with the highest stale score; when no
    neighbour scores, it heads for the nearest stale region."""
    grid = world.grid
    stale = _stale(world)
    nbr = grid.neighbor_table
    frac = np.zeros(grid.n_regions)
    if neighbour_bonus:
        valid = nbr >= 0
        cnt = (stale[np.clip(nbr, 0, None)] & valid).sum(axis=1)
        frac = cnt / np.maximum(valid.sum(axis=1), 1)
    score = stale.astype(float) + frac
    routing = {}
    for a in world.rvs():
        g = a.location
        cand = nbr[g]
        s = np.where(cand >= 0, score[np.clip(cand, 0, None)], -1.0)
        k = int(np.argmax(s))
        routing[a.id] = int(cand[k]) if s[k] > 0 else _nearest_stale_step(grid, g, stale)
    return routing


# policies ---------------------------------------------------------------------


def _pickups(orders) -> np.ndarray:
    return np.array([o.pickup for o in orders], dtype=np.int64)


def _leg(grid: GridMap, orders) -> np.ndarray:
    """Pickup-to-dropoff distance per order as a column."""
    return np.array([grid.chebyshev(o.pickup, o.dropoff) for o in orders], dtype=np.int64)[:, None]


def _route_len(grid: GridMap, locs, orders) -> np.ndarray:
    return _cheb(grid, locs, _pickups(orders)) + _leg(grid, orders)


def _route_stale(grid: GridMap, locs, orders, stale) -> np.ndarray:
    leg = _stale_along(grid, _pickups(orders), np.array([o.dropoff for o in orders], dtype=np.int64), stale)
    return path_stale_counts(grid, locs, _pickups(orders), stale) + leg[:, None]


def fastd(world: WorldState):
    grid = world.grid
    disp = _greedy(world, lambda os, f, s: (_cheb(grid, f.locs, _pickups(os)),))
    return disp, route_to_objectives(world)


def highs(world: WorldState):
    grid = world.grid
    disp = _greedy(world, lambda os, f, s: (-_route_stale(grid, f.locs, os, s), _cheb(grid, f.locs, _pickups(os))))
    return disp, route_stale_greedy(world)


def jointds(world: WorldState):
    grid = world.grid

    def keys(os, f, s):
        ratio = _route_stale(grid, f.locs, os, s) / np.maximum(_route_len(grid, f.locs, os), 1)
        return (-ratio, _cheb(grid, f.locs, _pickups(os)))

    return _greedy(world, keys), route_stale_greedy(world, neighbour_bonus=False)


def lstalloc_lite(world: WorldState, lam: float | None = None):
    """Global greedy on fee - lam * distance; couriers first, leftovers to RVs."""
    grid = world.grid
    pending = world.pending()
    fleet = _fleet(world)
    cap = world.params.capacity
    if lam is None:
        lam = float(np.mean([o.fee / max(1, grid.chebyshev(o.pickup, o.dropoff)) for o in pending])) if pending else 0.0
    pairs = []
    left = list(pending)
    for pool in (~fleet.is_rv, fleet.is_rv):
        if not left:
            break
        cols = np.flatnonzero(pool)
        if not len(cols):
            continue
        fees = np.array([o.fee for o in left])[:, None]
        score = (fees - lam * _route_len(grid, fleet.locs[cols], left)).astype(np.float64)
        load = fleet.load[cols].copy()
        score[:, load >= cap] = -np.inf
        taken = np.zeros(len(left), dtype=bool)
        while True:
            flat = int(np.argmax(score))
            i, j = divmod(flat, len(cols))
            if not np.isfinite(score[i, j]):
                break
            pairs.append((left[i].id, int(fleet.ids[cols[j]])))
            taken[i] = True
            score[i, :] = -np.inf
            load[j] += 1
            if load[j] >= cap:
                score[:, j] = -np.inf
        left = [o for o, tk in zip(left, taken) if not tk]
    pairs.sort()
    return AssignmentSet(world.t, tuple(pairs)), route_to_objectives(world)


def ajrp_lite(world: WorldState):
    """Sensing-only assignment score, couriers first."""
    grid = world.grid
    nbr = grid.neighbor_table

    def keys(os, f, s):
        around = np.array([int(s[o.dropoff]) + int(s[nbr[o.dropoff][nbr[o.dropoff] >= 0]].sum()) for o in os])
        return (-(_route_stale(grid, f.locs, os, s) + around[:, None]),)

    return _greedy(world, keys, couriers_first=True), route_stale_greedy(world)


BASELINES = {
    "fastd": fastd,
    "highs": highs,
    "jointds": jointds,
    "lstalloc": lstalloc_lite,
    "ajrp": ajrp_lite,
}


@dataclass
class BaselinePolicy:
    kind: str

    def __post_init__(self):
        if self.kind not in BASELINES:
            raise ValueError(f"unknown baseline {self.kind!r}; choose from {sorted(BASELINES)}")

    def act(self, world: WorldState):
        return BASELINES[self.kind](world)
