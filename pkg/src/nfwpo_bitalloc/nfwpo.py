"""Frank-Wolfe policy optimisation with a rate-critic feasible set.

For a state ``s`` the rate critic defines the set of admissible QPs on a
fixed grid (all grid points whose predicted rate reward-to-go is at least
``epsilon``). The actor output is projected onto that set, the distortion
critic's action gradient at the projected point picks a Frank-Wolfe vertex,
and the actor regresses towards a step of size ``alpha`` along that
direction. The projection never enters the differentiated path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import Adam, MlpNet, NumericError, ShapeError
from .rl import (
    Agent,
    Batch,
    RLConfig,
    TrainingSession,
    critic_input,
    critic_update,
    make_actor,
    make_critic,
    n_step_targets,
)

# A rate critic as seen by the kernel: q(state, actions) -> values, one per action.
RateCritic = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class QpGrid:
    """Uniform candidate grid ``base + [delta_min, delta_max]`` with spacing ``step``."""

    base_qp: float = 0.0
    delta_min: float = -10.0
    delta_max: float = 10.0
    step: float = 0.1
    values: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.step > 0 or not self.delta_max >= self.delta_min:
            raise ValueError("invalid grid specification")
        n = int(round((self.delta_max - self.delta_min) / self.step)) + 1
        deltas = np.round(self.delta_min + self.step * np.arange(n), 10)
        values = np.round(self.base_qp + deltas, 10)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def deltas(self) -> np.ndarray:
        return self.values - self.base_qp

    def index(self, qp) -> np.ndarray:
        """Grid index of ``qp`` by decimal rounding (no float drift)."""
        return np.rint((np.asarray(qp) - self.values[0]) / self.step).astype(np.intp)

    def snap(self, qp):
        idx = np.clip(self.index(qp), 0, len(self) - 1)
        return self.values[idx]


@dataclass
class FeasibleSet:
    values: np.ndarray
    indices: np.ndarray
    epsilon: float
    fallback: bool = False

    def __post_init__(self):
        if len(self.values) == 0:
            raise ValueError("feasible set must be non-empty")

    def __len__(self) -> int:
        return len(self.values)

    def __contains__(self, qp) -> bool:
        return bool(np.any(self.values == qp))

    @property
    def low(self) -> float:
        return float(self.values[0])

    @property
    def high(self) -> float:
        return float(self.values[-1])


@dataclass
class NfwpoConfig(RLConfig):
    epsilon: float = -0.05
    alpha: float = 0.05

    def __post_init__(self):
        super().__post_init__()
        if not self.epsilon < 0:
            raise ValueError("epsilon must be negative")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


# ----------------------------------------------------------------------------
# kernel


def net_critic(net: MlpNet) -> RateCritic:
    """Adapt a state-action critic network to the ``q(state, actions)`` form."""

    def q(state, actions):
        actions = np.asarray(actions, dtype=np.float64)
        states = np.broadcast_to(np.asarray(state, dtype=np.float64), (len(actions), net.n_inputs - 1))
        return net(critic_input(states, actions))[:, 0]

    return q


def feasible_set(rate_critic: RateCritic, state, grid: QpGrid, epsilon: float) -> FeasibleSet:
    """Grid points whose predicted rate reward-to-go is at least ``epsilon``.

    When no point qualifies the singleton argmax of the critic is returned
    with ``fallback`` set.
    """
    q = np.asarray(rate_critic(state, grid.values), dtype=np.float64)
    if q.shape != grid.values.shape:
        raise ShapeError("rate critic must return one value per grid point")
    if not np.all(np.isfinite(q)):
        raise NumericError("non-finite rate critic output")
    keep = np.flatnonzero(q >= epsilon)
    if len(keep) == 0:
        best = np.array([int(np.argmax(q))])
        return FeasibleSet(grid.values[best], best, epsilon, fallback=True)
    return FeasibleSet(grid.values[keep], keep, epsilon)


def project(action: float, fs: FeasibleSet) -> float:
    """Nearest feasible member; an exact tie goes to the lower QP."""
    d = np.abs(fs.values - action)
    return float(fs.values[int(np.argmin(d))])


def fw_direction(grad: float, fs: FeasibleSet, projected: float) -> float:
    """Maximiser of ``c * grad`` over the feasible set (1-D Frank-Wolfe vertex)."""
    if grad > 0:
        return fs.high
    if grad < 0:
        return fs.low
    return float(projected)


def reference_action(projected, direction, alpha: float):
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    return projected + alpha * (direction - projected)


def actor_regression_grad(actor: MlpNet, states, targets):
    """Loss and parameter gradient of mean((actor(s) - target)^2)."""
    states = np.atleast_2d(states)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(states) != len(targets):
        raise ShapeError("states and reference actions differ in length")

    def loss_fn(out):
        resid = out[:, 0] - targets
        return float(np.mean(resid * resid)), (2.0 / len(targets)) * resid[:, None]

    _, grads = actor.forward_backward(states, loss_fn)
    return grads


def actor_update(actor: MlpNet, opt: Adam, states, reference_actions) -> float:
    """One optimizer step regressing the actor onto the reference actions."""
    grads = actor_regression_grad(actor, states, reference_actions)
    opt.step(actor, grads)
    return grads.loss


def act_greedy(actor, rate_critic: RateCritic, state, grid: QpGrid, epsilon: float) -> float:
    """Deployment action: the actor output projected onto the feasible set."""
    a = actor(state)
    a = float(np.asarray(a).reshape(-1)[0])
    return project(a, feasible_set(rate_critic, state, grid, epsilon))


# ---------------------------------------------------------- batched kernel


def feasible_mask(rate_net: MlpNet, states: np.ndarray, grid_values: np.ndarray, epsilon: float):
    """Row-wise feasible masks for a batch of states, one critic pass.

    Rows with no qualifying point keep only their argmax (fallback).
    """
    b, g = len(states), len(grid_values)
    x = critic_input(np.repeat(states, g, axis=0), np.tile(grid_values, b))
    q = rate_net(x)[:, 0].reshape(b, g)
    if not np.all(np.isfinite(q)):
        raise NumericError("non-finite rate critic output")
    mask = q >= epsilon
    empty = ~mask.any(axis=1)
    if empty.any():
        rows = np.flatnonzero(empty)
        mask[rows, np.argmax(q[rows], axis=1)] = True
    return mask, empty


def project_rows(actions: np.ndarray, grid_values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    d = np.abs(grid_values[None, :] - np.asarray(actions)[:, None])
    d = np.where(mask, d, np.inf)
    return grid_values[np.argmin(d, axis=1)]


def fw_direction_rows(grad, grid_values, mask, projected) -> np.ndarray:
    g = len(grid_values)
    lo = grid_values[np.argmax(mask, axis=1)]
    hi = grid_values[g - 1 - np.argmax(mask[:, ::-1], axis=1)]
    return np.where(grad > 0, hi, np.where(grad < 0, lo, projected))


# ----------------------------------------------------------------------------
# agent


class NfwpoAgent(Agent):
    """Actor, distortion critic and rate critic trained by NFWPO."""

    kind = "nfwpo"

    def _build(self, rng) -> None:
        cfg = self.config
        self._add("actor", make_actor(cfg, rng, self.state_dim), cfg.actor_lr)
        self._add("q_d", make_critic(cfg, rng, self.state_dim), cfg.critic_lr)
        self._add("q_r", make_critic(cfg, rng, self.state_dim), cfg.critic_lr)
        self.grid = QpGrid(0.0, cfg.delta_min, cfg.delta_max, cfg.grid_step)

    def update_critics(self, batch: Batch) -> dict:
        cfg, nets = self.config, self.nets
        x = critic_input(batch.states, batch.actions)
        y_d = n_step_targets(batch, cfg.gamma, nets["q_d_target"], nets["actor_target"], "distortion")
        y_r = n_step_targets(batch, cfg.gamma_rate, nets["q_r_target"], nets["actor_target"], "rate")
        loss_d = critic_update(nets["q_d"], self.opts["q_d"], x, y_d)
        loss_r = critic_update(nets["q_r"], self.opts["q_r"], x, y_r)
        return {"loss_d": loss_d, "loss_r": loss_r}

    def reference_actions(self, states: np.ndarray):
        """Feasible masks, projections, FW vertices and reference actions."""
        cfg, nets = self.config, self.nets
        values = self.grid.values
        mask, fallback = feasible_mask(nets["q_r"], states, values, cfg.epsilon)
        pi = nets["actor"](states)[:, 0]
        proj = project_rows(pi, values, mask)
        grad = nets["q_d"].input_grad(critic_input(states, proj))[:, -1]
        cbar = fw_direction_rows(grad, values, mask, proj)
        ref = reference_action(proj, cbar, cfg.alpha)
        return ref, {"pi": pi, "proj": proj, "cbar": cbar, "grad": grad, "fallback": fallback}

    def update(self, batch: Batch, batch_deviation=None) -> dict:
        losses = self.update_critics(batch)
        ref, info = self.reference_actions(batch.states)
        losses["loss_actor"] = actor_update(self.nets["actor"], self.opts["actor"], batch.states, ref)
        losses["fallback_rate"] = float(np.mean(info["fallback"]))
        self.soft_update_targets()
        return losses

    def rate_critic(self) -> RateCritic:
        return net_critic(self.nets["q_r"])

    def greedy(self, features) -> tuple[float, float]:
        raw = self.act(features)
        fs = feasible_set(self.rate_critic(), features, self.grid, self.config.epsilon)
        return project(raw, fs), raw


def train(config: NfwpoConfig, frame_source, seed: int = 0, log_rows: list | None = None):
    """Run the full training loop; returns ``(agent, session, log_rows)``."""
    agent = NfwpoAgent(config, seed)
    session = TrainingSession(agent, frame_source, config, seed)
    rows = session.run(config.n_episodes, log_rows)
    return agent, session, rows
