"""Metrics derived from the event log.

Events stamped at slot ``s`` describe what happened during step ``s - 1``, so
hour attribution uses ``(s - 1) // 60``. Every figure in a report is
recomputed from the log; nothing is accumulated separately during a run.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np

SLOTS_PER_HOUR = 60


def event_hour(slot: int) -> int:
    return (slot - 1) // SLOTS_PER_HOUR


def n_hours(horizon: int) -> tuple[int, int]:
    """(full hours, slots in a trailing partial hour)."""
    return horizon // SLOTS_PER_HOUR, horizon % SLOTS_PER_HOUR


def agent_kinds(event_log: Iterable[tuple]) -> dict[int, str]:
    return {e[2]: e[1][len("spawn_"):] for e in event_log if e[1].startswith("spawn_")}


def overdue_count(event_log: Iterable[tuple], hour: int) -> int:
    """Orders whose deadline fell in ``hour`` without completion by then."""
    return sum(1 for e in event_log if e[1] == "overdue" and event_hour(e[0]) == hour)


def hourly_overdue(event_log: Sequence[tuple], hours: int) -> list[int]:
    out = [0] * hours
    for e in event_log:
        if e[1] == "overdue":
            h = event_hour(e[0])
            if 0 <= h < hours:
                out[h] += 1
    return out


def regions_visited(event_log: Iterable[tuple], hour: int | None = None, kinds: tuple[str, ...] = ("rv",)) -> set[int]:
    """Distinct regions sensed by agents of the given kinds (whole run if ``hour`` is None)."""
    log = list(event_log)
    who = {a for a, k in agent_kinds(log).items() if k in kinds}
    return {e[4] for e in log
            if e[1] == "sense" and e[2] in who and (hour is None or event_hour(e[0]) == hour)}


def hourly_regions(event_log: Sequence[tuple], hours: int, kinds: tuple[str, ...] = ("rv",)) -> list[int]:
    who = {a for a, k in agent_kinds(event_log).items() if k in kinds}
    sets: list[set] = [set() for _ in range(hours)]
    for e in event_log:
        if e[1] == "sense" and e[2] in who:
            h = event_hour(e[0])
            if 0 <= h < hours:
                sets[h].add(e[4])
    return [len(s) for s in sets]


def normalized_coverage(run: Sequence[tuple], reference: Sequence[tuple], hour: int | None = None,
                        kinds: tuple[str, ...] = ("rv",)) -> float | None:
    """Distinct regions visited by ``run`` over those visited by ``reference``.

    Returns None when the reference visited nothing (report absolute counts then).
    """
    ref = len(regions_visited(reference, hour, kinds))
    if ref == 0:
        return None
    return len(regions_visited(run, hour, kinds)) / ref


def courier_income(event_log: Sequence[tuple], courier_id: int, hours: int, penalty: float) -> list[float]:
    """Hourly realized delivery revenue minus ``penalty`` per overdue order."""
    out = [0.0] * hours
    for e in event_log:
        if e[2] != courier_id:
            continue
        h = event_hour(e[0])
        if not 0 <= h < hours:
            continue
        if e[1] == "completed":
            out[h] += e[5]
        elif e[1] == "overdue":
            out[h] -= penalty
    return out


def income_by_courier(event_log: Sequence[tuple], hours: int, penalty: float) -> dict[int, list[float]]:
    kinds = agent_kinds(event_log)
    out = {a: [0.0] * hours for a, k in sorted(kinds.items()) if k == "courier"}
    for e in event_log:
        if e[2] not in out or e[1] not in ("completed", "overdue"):
            continue
        h = event_hour(e[0])
        if 0 <= h < hours:
            out[e[2]][h] += e[5] if e[1] == "completed" else -penalty
    return out


def metrics_rows(event_log: Sequence[tuple], horizon: int, penalty: float) -> list[tuple[int, int, int, float]]:
    """Per-slot cumulative (slot, overdue, distinct RV regions, courier income)."""
    kinds = agent_kinds(event_log)
    by_slot: dict[int, list[tuple]] = defaultdict(list)
    for e in event_log:
        by_slot[e[0]].append(e)
    rows = []
    overdue = 0
    seen: set[int] = set()
    income = 0.0
    for s in range(1, horizon + 1):
        for e in by_slot.get(s, ()):
            kind = kinds.get(e[2])
            if e[1] == "overdue":
                overdue += 1
                if kind == "courier":
                    income -= penalty
            elif e[1] == "completed" and kind == "courier":
                income += e[5]
            elif e[1] == "sense" and kind == "rv":
                seen.add(e[4])
        rows.append((s, overdue, len(seen), round(income, 6)))
    return rows


def summarize(event_log: Sequence[tuple], horizon: int, penalty: float) -> dict:
    """All report metrics, recomputed from the event log."""
    full, partial = n_hours(horizon)
    hours = full + (1 if partial else 0)
    kinds = agent_kinds(event_log)
    n_couriers = sum(1 for k in kinds.values() if k == "courier")
    overdue = hourly_overdue(event_log, hours)
    regions = hourly_regions(event_log, hours)
    regions_all = hourly_regions(event_log, hours, kinds=("rv", "courier"))
    income = income_by_courier(event_log, hours, penalty)
    hourly_income = [sum(v[h] for v in income.values()) / n_couriers if n_couriers else 0.0 for h in range(hours)]
    counts = defaultdict(int)
    for e in event_log:
        counts[e[1]] += 1
    total_income = sum(sum(v) for v in income.values())
    return {
        "hours_full": full,
        "partial_hour_slots": partial,
        "orders_created": counts["created"],
        "orders_assigned": counts["assigned"],
        "orders_completed": counts["completed"],
        "orders_expired": counts["expired"],
        "overdue_total": sum(overdue),
        "overdue_per_hour": overdue,
        "overdue_peak_hour": max(overdue[:full], default=0),
        "guard_events": counts["guard"],
        "invalid_routes": counts["invalid_route"],
        "regions_visited_per_hour": regions,
        "regions_visited_per_hour_all_agents": regions_all,
        "coverage_mean_hourly": float(np.mean(regions[:full])) if full else float(np.mean(regions)) if regions else 0.0,
        "regions_visited_total": len(regions_visited(event_log)),
        "courier_income_per_hour": [round(x, 6) for x in hourly_income],
        "courier_income_mean_hourly": round(total_income / (n_couriers * horizon / SLOTS_PER_HOUR), 6)
        if n_couriers and horizon else 0.0,
        "courier_income_total": round(total_income, 6),
    }
