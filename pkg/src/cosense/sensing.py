"""Sensing layer: reward, Q-function, routing choice and sensing-value export."""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .domain import HOLD, N_ACTIONS, Agent, AssignmentSet, GridMap, Order, StateEncoder

if TYPE_CHECKING:
    from .simulator import WorldState

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


# reward -----------------------------------------------------------------------


@dataclass(frozen=True)
class SensingRewardConfig:
    w_reg: float = 1.0
    w_nbr: float = 0.5
    w_pen: float = 10.0
    staleness_window: int = 60
    use_reg: bool = True
    use_nbr: bool = True
    use_pen: bool = True

    def __post_init__(self):
        if min(self.w_reg, self.w_nbr, self.w_pen) < 0:
            raise ValueError("sensing reward weights must be >= 0")
        if self.staleness_window < 1:
            raise ValueError("staleness_window must be >= 1")

    def ablate(self, variant: str | None) -> SensingRewardConfig:
        if variant in (None, "", "none", "full"):
            return self
        key = variant.lstrip("-")
        if key not in ("reg", "nbr", "pen"):
            raise ValueError(f"unknown ablation {variant!r}")
        return replace(self, **{f"use_{key}": False})


def sensing_reward(agent: Agent, g: int, world: WorldState, cfg: SensingRewardConfig, now: int | None = None) -> float:
    """Reward for ending the slot in region ``g``; must run before ``g`` is marked visited."""
    grid = world.grid
    now = world.t if now is None else now
    lv = grid.last_visit
    r = 0.0
    if cfg.use_reg and now - lv[g] >= cfg.staleness_window:
        r += cfg.w_reg
    if cfg.use_nbr:
        nb = grid.neighbor_table[g]
        nb = nb[nb >= 0]
        if len(nb):
            r += cfg.w_nbr * float(np.mean(now - lv[nb] >= cfg.staleness_window))
    if cfg.use_pen and world.missed.get(agent.id):
        r -= cfg.w_pen
    return r


# Q-function -------------------------------------------------------------------


def _masked_max(Q: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return Q.max(axis=-1)
    return np.where(mask, Q, -np.inf).max(axis=-1)


class QFunction:
    """Feed-forward action-value network with a target copy and Adam state."""

    def __init__(
        self,
        state_dim: int,
        hidden: Sequence[int] = (64, 64),
        activation: str = "tanh",
        seed: int | None = 0,
        zero: bool = False,
        sync_every: int = 200,
        grad_clip: float | None = 10.0,
    ):
        if activation != "tanh":
            raise ValueError("only tanh is supported")
        self.state_dim = int(state_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.sync_every = int(sync_every)
        self.grad_clip = grad_clip
        self.steps = 0
        widths = (self.state_dim, *self.hidden, N_ACTIONS)
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            if zero:
                W = np.zeros((a, b))
            else:
                lim = math.sqrt(6.0 / (a + b))
                W = rng.uniform(-lim, lim, size=(a, b))
                if i == len(widths) - 2:
                    W *= 0.1
            self.params += [W, np.zeros(b)]
        self.target = [p.copy() for p in self.params]
        self._m = [np.zeros_like(p) for p in self.params]
        self._v = [np.zeros_like(p) for p in self.params]
        self._adam_t = 0

    @property
    def descriptor(self) -> dict:
        return {"state_dim": self.state_dim, "hidden": list(self.hidden), "activation": self.activation,
                "n_actions": N_ACTIONS, "sync_every": self.sync_every, "grad_clip": self.grad_clip}

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.state_dim:
            raise ValueError(f"state length {X.shape[-1]} != {self.state_dim}")
        return X

    @staticmethod
    def _forward(params, X):
        acts = [X]
        h = X
        n = len(params) // 2
        for i in range(n):
            z = h @ params[2 * i] + params[2 * i + 1]
            h = np.tanh(z) if i < n - 1 else z
            acts.append(h)
        return h, acts

    def forward(self, X: np.ndarray, target: bool = False) -> np.ndarray:
        X = self._check(X)
        flat = X.reshape(-1, self.state_dim)
        out, _ = self._forward(self.target if target else self.params, flat)
        return out.reshape(X.shape[:-1] + (N_ACTIONS,))

    def loss_and_grads(self, X: np.ndarray, actions: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
        """Mean squared TD error on the taken actions and its parameter gradients."""
        X = self._check(X)
        out, acts = self._forward(self.params, X)
        n = len(X)
        idx = np.arange(n)
        err = out[idx, actions] - y
        loss = float(np.mean(err**2))
        delta = np.zeros_like(out)
        delta[idx, actions] = 2.0 * err / n
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        L = len(self.params) // 2
        for i in reversed(range(L)):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.params[2 * i].T) * (1.0 - acts[i] ** 2)
        return loss, grads

    def apply_adam(self, grads: list[np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float((g**2).sum()) for g in grads))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        self._adam_t += 1
        c1 = 1 - b1**self._adam_t
        c2 = 1 - b2**self._adam_t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def sync_target(self) -> None:
        self.target = [p.copy() for p in self.params]

    def copy(self) -> QFunction:
        q = QFunction.__new__(QFunction)
        q.__dict__.update(self.__dict__)
        q.params = [p.copy() for p in self.params]
        q.target = [p.copy() for p in self.target]
        q._m = [p.copy() for p in self._m]
        q._v = [p.copy() for p in self._v]
        return q


def q_forward(q: QFunction, s: np.ndarray) -> np.ndarray:
    return q.forward(s)


# replay and TD ----------------------------------------------------------------


class ReplayBuffer:
    """Uniform ring buffer of (s, a, r, s', terminal, mask') transitions."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim), dtype=np.float32)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=bool)
        self.mask2 = np.ones((capacity, N_ACTIONS), dtype=bool)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, s, a, r, s2, done=False, mask2=None) -> None:
        i = self._next
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = done
        self.mask2[i] = True if mask2 is None else mask2
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(self.size, size=min(batch_size, self.size), replace=False)
        return (self.s[idx].astype(np.float64), self.a[idx], self.r[idx], self.s2[idx].astype(np.float64),
                self.done[idx], self.mask2[idx])


def td_update(q: QFunction, batch, gamma: float = 0.9, lr: float = 0.01) -> float:
    """One Adam step on the one-step TD loss; returns the pre-step loss."""
    s, a, r, s2, done = batch[:5]
    mask2 = batch[5] if len(batch) > 5 else None
    if len(s) == 0:
        raise ValueError("empty batch")
    nxt = _masked_max(q.forward(s2, target=True), mask2)
    y = np.asarray(r, dtype=np.float64) + gamma * np.where(done, 0.0, nxt)
    loss, grads = q.loss_and_grads(s, np.asarray(a), y)
    if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
        raise TrainingError(
            f"non-finite TD loss at step {q.steps}",
            {"step": q.steps, "loss": loss, "reward_range": [float(np.min(r)), float(np.max(r))],
             "param_norms": [float(np.linalg.norm(p)) for p in q.params]},
        )
    q.apply_adam(grads, lr)
    q.steps += 1
    if q.sync_every and q.steps % q.sync_every == 0:
        q.sync_target()
    return loss


# action selection and values --------------------------------------------------


def select_action(q: QFunction | None, s: np.ndarray | None, grid: GridMap, g: int, explore_eps: float,
                  rng: np.random.Generator | None = None, qvals: np.ndarray | None = None) -> int:
    """Epsilon-greedy over feasible actions; argmax ties go to the lowest index."""
    mask = grid.action_mask(g)
    feasible = np.flatnonzero(mask)
    if explore_eps > 0 and rng is not None and rng.random() < explore_eps:
        return int(feasible[rng.integers(len(feasible))])
    if qvals is None:
        if q is None:
            return HOLD
        qvals = q.forward(s)
    return int(np.argmax(np.where(mask, qvals, -np.inf)))


def region_value(q: QFunction, s: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray | float:
    """Q-value of the greedy feasible action."""
    v = _masked_max(q.forward(s), mask)
    return float(v) if np.ndim(v) == 0 else v


def sensing_value(q: QFunction, order: Order, agent: Agent, world: WorldState,
                  encoder: StateEncoder | None = None) -> float:
    """V_reg at the order's dropoff minus V_reg where the agent stands (0 for couriers)."""
    if not agent.is_rv:
        return 0.0
    enc = encoder if encoder is not None else StateEncoder(world.grid, world.params.capacity,
                                                           staleness_window=world.params.sensing.staleness_window)
    stale = enc.stale(world.t)
    s = enc.encode(agent, world.orders, world.t, stale)
    if order.dropoff == agent.location:
        return 0.0
    s2 = enc.encode(agent, world.orders, world.t, stale, location=order.dropoff)
    g = world.grid
    return region_value(q, s2, g.action_mask(order.dropoff)) - region_value(q, s, g.action_mask(agent.location))


def sensing_value_table(q: QFunction, dropoffs: Sequence[int], agents: Sequence[Agent], orders, t: int,
                        encoder: StateEncoder, stale: np.ndarray | None = None) -> np.ndarray:
    """v_s for every (dropoff, agent) combination; courier columns are 0."""
    out = np.zeros((len(dropoffs), len(agents)))
    rv_cols = [i for i, a in enumerate(agents) if a.is_rv]
    if not rv_cols or not len(dropoffs):
        return out
    if stale is None:
        stale = encoder.stale(t)
    rvs = [agents[i] for i in rv_cols]
    base = encoder.encode_batch(rvs, orders, t, stale)
    v_cur = _masked_max(q.forward(base), encoder.mask_from_state(base))
    uniq, inv = np.unique(np.asarray(dropoffs, dtype=np.int64), return_inverse=True)
    moved = encoder.relocate(base, encoder.location_features(uniq, stale))
    v_drop = _masked_max(q.forward(moved), encoder.mask_from_state(moved))
    vs = v_drop - v_cur[None, :]
    locs = np.array([a.location for a in rvs])
    vs[uniq[:, None] == locs[None, :]] = 0.0
    out[:, rv_cols] = vs[inv]
    return out


# redundancy -------------------------------------------------------------------


def kernel_matrix(xy: np.ndarray, sigma: float) -> np.ndarray:
    """exp(-dis / (2 sigma^2)) between every pair of points (km)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    dis = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    return np.exp(-dis / (2.0 * sigma * sigma))


def _positions(S: AssignmentSet | None, positions) -> np.ndarray:
    if isinstance(positions, dict):
        return np.array([positions[o] for o, _ in S.pairs], dtype=np.float64).reshape(-1, 2)
    return np.asarray(positions, dtype=np.float64).reshape(-1, 2)


def redundancy(S: AssignmentSet | None, positions, sigma: float) -> float:
    """Mean kernel similarity over ordered pairs of assignments (0 for fewer than two).

    ``positions`` is either one dropoff centre per pair of ``S`` or a mapping
    from order id to dropoff centre.
    """
    xy = _positions(S, positions)
    n = len(xy)
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if n <= 1:
        return 0.0
    K = kernel_matrix(xy, sigma)
    return float((K.sum() - np.trace(K)) / (n * (n - 1)))


def aggregate_sensing_value(S: AssignmentSet | None, v_s, positions, sigma: float) -> float:
    """(sum of v_s) * (1 - redundancy)."""
    v = np.asarray(v_s, dtype=np.float64)
    return float(v.sum()) * (1.0 - redundancy(S, positions, sigma))


# checkpoints ------------------------------------------------------------------


def _enc(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype=np.float64).reshape(d["shape"]).copy()


def checkpoint_dict(q: QFunction) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "architecture": q.descriptor,
        "steps": q.steps,
        "adam_t": q._adam_t,
        "theta": [_enc(p) for p in q.params],
        "target": [_enc(p) for p in q.target],
        "adam_m": [_enc(p) for p in q._m],
        "adam_v": [_enc(p) for p in q._v],
    }


def from_checkpoint_dict(d: dict) -> QFunction:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    arch = d["architecture"]
    q = QFunction(arch["state_dim"], arch["hidden"], arch["activation"], seed=None, zero=True,
                  sync_every=arch["sync_every"], grad_clip=arch["grad_clip"])
    q.params = [_dec(p) for p in d["theta"]]
    q.target = [_dec(p) for p in d["target"]]
    q._m = [_dec(p) for p in d["adam_m"]]
    q._v = [_dec(p) for p in d["adam_v"]]
    q.steps = int(d["steps"])
    q._adam_t = int(d["adam_t"])
    return q


def save_checkpoint(q: QFunction, path) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(q), fh)


def load_checkpoint(path) -> QFunction:
    with open(path) as fh:
        return from_checkpoint_dict(json.load(fh))
