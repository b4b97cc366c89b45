"""The two-layer joint policy: map/reduce dispatch on top, learned sensing
routing below, plus the training loop for the Q-function."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dispatch import DispatchConfig, Dispatcher, DispatchResult, Snapshot
from .domain import Agent, AssignmentSet, Order, StateEncoder
from .sensing import QFunction, ReplayBuffer, sensing_value_table, td_update
from .simulator import WorldState, step

log = logging.getLogger(__name__)


@dataclass
class LearnerConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 0.01
    gamma: float = 0.9
    batch_size: int = 128
    buffer_capacity: int = 100_000
    sync_every: int = 200
    grad_clip: float | None = 10.0
    episodes: int = 6
    episode_horizon: int | None = None
    updates_per_slot: int = 2
    eps_start: float = 1.0
    eps_end: float = 0.05
    warmup: int = 512
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or not 0 <= self.gamma < 1:
            raise ValueError("learner.lr must be > 0 and learner.gamma in [0, 1)")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("learner.buffer_capacity must be >= learner.batch_size >= 1")
        if self.episodes < 0 or self.updates_per_slot < 0:
            raise ValueError("learner.episodes and learner.updates_per_slot must be >= 0")


@dataclass
class QSensing:
    """Picklable v_s scorer bound to one slot's state."""

    q: QFunction
    encoder: StateEncoder
    orders: dict[int, Order]
    t: int
    stale: np.ndarray

    def __call__(self, order_list: list[Order], agents: list[Agent]) -> np.ndarray:
        return sensing_value_table(self.q, [o.dropoff for o in order_list], agents, self.orders, self.t,
                                   self.encoder, self.stale)


class UrbanHuRoPolicy:
    def __init__(self, q: QFunction, encoder: StateEncoder, cfg: DispatchConfig, explore_eps: float = 0.0,
                 seed: int = 0):
        self.q = q
        self.encoder = encoder
        self.cfg = cfg
        self.explore_eps = explore_eps
        self.rng = np.random.default_rng([seed, 5])
        self.dispatcher = Dispatcher(cfg)
        self.last_dispatch: DispatchResult | None = None
        self.last_states: dict[int, np.ndarray] = {}

    def close(self) -> None:
        self.dispatcher.close()

    def snapshot(self, world: WorldState) -> Snapshot:
        agents = [world.agents[i] for i in sorted(world.agents)]
        stale = self.encoder.stale(world.t)
        return Snapshot(world.t, world.grid, agents, world.orders, [o.id for o in world.pending()],
                        self.cfg.capacity, self.cfg.beta, QSensing(self.q, self.encoder, world.orders, world.t, stale))

    def dispatch(self, world: WorldState) -> AssignmentSet:
        if not any(True for _ in world.pending()):
            self.last_dispatch = None
            return AssignmentSet(world.t)
        self.last_dispatch = self.dispatcher.dispatch(self.snapshot(world), world.t)
        return self.last_dispatch.assignment

    def route(self, world: WorldState, assignment: AssignmentSet | None = None) -> dict[int, int]:
        """Greedy Q routing, RVs in id order; each claimed target is treated as
        already sensed by the RVs that decide after it."""
        grid = world.grid
        rvs = world.rvs()
        self.last_states = {}
        if not rvs:
            return {}
        orders = world.orders
        extra: dict[int, list[int]] = {}
        for o, d in (assignment.pairs if assignment is not None else ()):
            extra.setdefault(d, []).append(o)
        if extra:
            # states reflect the orders dispatched this slot
            rvs = [Agent(a.id, a.kind, a.location, a.available, a.assigned_orders + extra.get(a.id, []),
                         a.last_sensed_region, a.neigh_count, a.move_credit) for a in rvs]
        stale = self.encoder.stale(world.t).copy()
        X = self.encoder.encode_batch(rvs, orders, world.t, stale)
        routing = {}
        for k, a in enumerate(rvs):
            g = a.location
            if k:
                X[k, self.encoder.loc_cols] = self.encoder.location_features([g], stale)[0]
            mask = grid.action_mask(g)
            feasible = np.flatnonzero(mask)
            if self.explore_eps > 0 and self.rng.random() < self.explore_eps:
                act = int(feasible[self.rng.integers(len(feasible))])
            else:
                qv = self.q.forward(X[k])
                if not np.isfinite(qv).all():
                    raise FloatingPointError(f"non-finite Q-values for RV {a.id} at slot {world.t}")
                act = int(np.argmax(np.where(mask, qv, -np.inf)))
            target = grid.action_target(g, act)
            stale[target] = False
            routing[a.id] = target
            self.last_states[a.id] = X[k].copy()
        return routing

    def act(self, world: WorldState):
        disp = self.dispatch(world)
        return disp, self.route(world, disp)


def make_encoder(world: WorldState, norm=None) -> StateEncoder:
    kw = {} if norm is None else {"norm": norm}
    return StateEncoder(world.grid, world.params.capacity, staleness_window=world.params.sensing.staleness_window, **kw)


@dataclass
class TrainingHistory:
    losses: list[float] = field(default_factory=list)
    episode_rewards: list[float] = field(default_factory=list)
    transitions: int = 0


def train_q(world_factory: Callable[[int], WorldState], learner: LearnerConfig, cfg: DispatchConfig,
            norm=None, q: QFunction | None = None) -> tuple[QFunction, TrainingHistory]:
    """Train the shared RV Q-function on separate episodes with epsilon decay.

    ``world_factory(episode)`` builds a fresh world; the sensing reward config
    carried by that world (including ablation flags) defines the reward.
    """
    learner.validate()
    hist = TrainingHistory()
    rng = np.random.default_rng([learner.seed, 6])
    buf = None
    total = None
    done_slots = 0
    for ep in range(learner.episodes):
        world = world_factory(ep)
        if learner.episode_horizon is not None:
            world.workload.horizon = min(world.workload.horizon, learner.episode_horizon)
        enc = make_encoder(world, norm)
        if q is None:
            q = QFunction(enc.length, learner.hidden, seed=learner.seed, sync_every=learner.sync_every,
                          grad_clip=learner.grad_clip)
        if buf is None:
            buf = ReplayBuffer(learner.buffer_capacity, enc.length)
        if total is None:
            total = max(1, learner.episodes * world.workload.horizon)
        pol = UrbanHuRoPolicy(q, enc, cfg, seed=learner.seed * 1000 + ep)
        ep_reward = 0.0
        try:
            while not world.done:
                frac = min(1.0, done_slots / (0.7 * total))
                pol.explore_eps = learner.eps_start + (learner.eps_end - learner.eps_start) * frac
                prev_loc = {a.id: a.location for a in world.rvs()}
                disp, routing = pol.act(world)
                states = pol.last_states
                world, recs = step(world, disp, routing)
                done_slots += 1
                rvs = world.rvs()
                if rvs:
                    S2 = enc.encode_batch(rvs, world.orders, world.t)
                    M2 = enc.mask_from_state(S2)
                    rec_by_id = {r.agent_id: r for r in recs}
                    for k, a in enumerate(rvs):
                        r = rec_by_id[a.id]
                        act = world.grid.action_between(prev_loc[a.id], r.directed_to)
                        buf.push(states[a.id], act, r.r_sensing, S2[k], world.done, M2[k])
                        ep_reward += r.r_sensing
                        hist.transitions += 1
                if len(buf) >= learner.warmup:
                    for _ in range(learner.updates_per_slot):
                        batch = buf.sample(learner.batch_size, rng)
                        hist.losses.append(td_update(q, batch, learner.gamma, learner.lr))
        finally:
            pol.close()
        hist.episode_rewards.append(ep_reward)
        log.info("episode %d: sensing reward %.1f, buffer %d", ep, ep_reward, len(buf))
    if q is None:
        raise ValueError("train_q needs at least one episode or an initial Q-function")
    q.sync_target()
    return q, hist
