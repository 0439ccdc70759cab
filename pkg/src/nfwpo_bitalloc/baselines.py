"""Comparison agents and trivial allocators.

* :class:`SingleCriticAgent` learns one critic on ``r_D + lam * r_R`` and
  takes ordinary deterministic-policy-gradient actor steps.
* :class:`DualCriticAgent` keeps separate distortion and rate critics and,
  per sampled transition, lets the distortion critic drive the actor when
  that transition's episode met the rate tolerance and the rate critic
  otherwise.
* :class:`ProjectionDdpgAgent` clamps the actor output into the rate
  critic's feasible interval and backpropagates *through* the clamp, so any
  sample whose raw action lies outside the interval contributes exactly
  zero actor gradient.
* :func:`fixed_qp_allocate` and :func:`uniform_budget_allocate` need no
  training; the first is the BD-rate anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec_env import CodecEnv, Frame
from .nfwpo import QpGrid, feasible_mask, feasible_set, net_critic
from .nn import GradRecord, MlpNet
from .rl import (
    ACTION_SCALE,
    Agent,
    Batch,
    EpisodeLog,
    RLConfig,
    TrainingSession,
    clip_action,
    critic_input,
    critic_update,
    episode_log,
    make_actor,
    make_critic,
    n_step_targets,
    run_episode,
)

DISTORTION, RATE = "distortion", "rate"


def combined_reward(r_d: float, r_r: float, lam: float) -> float:
    """Single-critic reward ``r_D + lam * r_R``."""
    return r_d + lam * r_r


def dual_critic_select(deviation: float, tolerance: float = 0.05) -> str:
    """Critic that should drive the actor for a transition; boundary inclusive."""
    return DISTORTION if abs(deviation) <= tolerance else RATE


@dataclass
class SingleCriticConfig(RLConfig):
    lam: float = 100.0

    def __post_init__(self):
        super().__post_init__()
        if not self.lam >= 0:
            raise ValueError("lam must be non-negative")


@dataclass
class DualCriticConfig(RLConfig):
    tolerance: float = 0.05

    def __post_init__(self):
        super().__post_init__()
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class ProjectionDdpgConfig(RLConfig):
    epsilon: float = -0.05

    def __post_init__(self):
        super().__post_init__()
        if not self.epsilon < 0:
            raise ValueError("epsilon must be negative")


# ----------------------------------------------------------------------------
# deterministic policy gradient pieces


def action_gradient(critic: MlpNet, states, actions) -> np.ndarray:
    """dQ/da for each row, accounting for the critic's action input scaling."""
    return critic.input_grad(critic_input(states, actions))[:, -1] / ACTION_SCALE


def dpg_actor_grad(actor: MlpNet, states, dq_da) -> GradRecord:
    """Gradient of ``-mean(Q(s, pi(s)))`` given ``dQ/da`` per sample.

    Samples with ``dq_da == 0`` contribute nothing.
    """
    states = np.atleast_2d(states)
    dq_da = np.asarray(dq_da, dtype=np.float64).reshape(-1)
    return actor.param_grad(states, (-dq_da / len(dq_da))[:, None])


def clamp_with_grad(actions, low, high) -> tuple[np.ndarray, np.ndarray]:
    """Clamp to ``[low, high]`` and return the clamp's derivative (1 inside, 0 outside).

    The endpoints count as inside.
    """
    a = np.asarray(actions, dtype=np.float64)
    inside = (a >= low) & (a <= high)
    return np.clip(a, low, high), inside.astype(np.float64)


def feasible_interval(rate_net: MlpNet, states, grid: QpGrid, epsilon: float):
    """Per-state ``(low, high)`` hull of the rate critic's feasible grid points."""
    values = grid.values
    mask, _ = feasible_mask(rate_net, np.atleast_2d(states), values, epsilon)
    g = len(values)
    low = values[np.argmax(mask, axis=1)]
    high = values[g - 1 - np.argmax(mask[:, ::-1], axis=1)]
    return low, high


def projection_actor_grad(actor: MlpNet, q_d: MlpNet, states, low, high) -> tuple[GradRecord, dict]:
    """DDPG gradient through a clamp projection layer.

    The critic is evaluated at the clamped action; the chain rule then
    multiplies by the clamp derivative, which is zero for raw actions
    strictly outside ``[low, high]``.
    """
    states = np.atleast_2d(states)
    raw = actor(states)[:, 0]
    proj, dclamp = clamp_with_grad(raw, low, high)
    dq = action_gradient(q_d, states, proj)
    grads = dpg_actor_grad(actor, states, dq * dclamp)
    return grads, {"raw": raw, "proj": proj, "dclamp": dclamp, "dq_da": dq}


# ----------------------------------------------------------------------------
# agents


class SingleCriticAgent(Agent):
    """One critic on the fixed-weight combined reward."""

    kind = "single"

    def _build(self, rng) -> None:
        cfg = self.config
        self._add("actor", make_actor(cfg, rng, self.state_dim), cfg.actor_lr)
        self._add("q", make_critic(cfg, rng, self.state_dim), cfg.critic_lr)

    def update(self, batch: Batch, batch_deviation=None) -> dict:
        cfg, nets = self.config, self.nets
        x = critic_input(batch.states, batch.actions)
        y = n_step_targets(batch, cfg.gamma, nets["q_target"], nets["actor_target"], "combined", lam=cfg.lam)
        loss_q = critic_update(nets["q"], self.opts["q"], x, y)
        pi = nets["actor"](batch.states)[:, 0]
        grads = dpg_actor_grad(nets["actor"], batch.states, action_gradient(nets["q"], batch.states, pi))
        grads.loss = -float(np.mean(nets["q"](critic_input(batch.states, pi))))
        self.opts["actor"].step(nets["actor"], grads)
        self.soft_update_targets()
        return {"loss_d": loss_q, "loss_r": np.nan, "loss_actor": grads.loss}


class _TwoCriticAgent(Agent):
    def _build(self, rng) -> None:
        cfg = self.config
        self._add("actor", make_actor(cfg, rng, self.state_dim), cfg.actor_lr)
        self._add("q_d", make_critic(cfg, rng, self.state_dim), cfg.critic_lr)
        self._add("q_r", make_critic(cfg, rng, self.state_dim), cfg.critic_lr)

    def update_critics(self, batch: Batch) -> dict:
        cfg, nets = self.config, self.nets
        x = critic_input(batch.states, batch.actions)
        y_d = n_step_targets(batch, cfg.gamma, nets["q_d_target"], nets["actor_target"], "distortion")
        y_r = n_step_targets(batch, cfg.gamma_rate, nets["q_r_target"], nets["actor_target"], "rate")
        return {
            "loss_d": critic_update(nets["q_d"], self.opts["q_d"], x, y_d),
            "loss_r": critic_update(nets["q_r"], self.opts["q_r"], x, y_r),
        }


class DualCriticAgent(_TwoCriticAgent):
    """Alternates the actor's driving critic on the episode's rate outcome."""

    kind = "dual"

    def select(self, batch_deviation) -> np.ndarray:
        """Boolean mask: True where the distortion critic drives the sample."""
        tol = self.config.tolerance
        return np.array([dual_critic_select(d, tol) == DISTORTION for d in np.asarray(batch_deviation)])

    def update(self, batch: Batch, batch_deviation=None) -> dict:
        if batch_deviation is None:
            raise ValueError("dual-critic updates need the per-sample episode deviation")
        losses = self.update_critics(batch)
        nets = self.nets
        pi = nets["actor"](batch.states)[:, 0]
        use_d = self.select(batch_deviation)
        dq = np.where(
            use_d,
            action_gradient(nets["q_d"], batch.states, pi),
            action_gradient(nets["q_r"], batch.states, pi),
        )
        grads = dpg_actor_grad(nets["actor"], batch.states, dq)
        self.opts["actor"].step(nets["actor"], grads)
        self.soft_update_targets()
        losses["loss_actor"] = float(np.mean(use_d))  # share of distortion-driven samples
        return losses


class ProjectionDdpgAgent(_TwoCriticAgent):
    """DDPG whose actor ends in a clamp onto the rate critic's feasible interval."""

    kind = "proj-ddpg"

    def _build(self, rng) -> None:
        super()._build(rng)
        cfg = self.config
        self.grid = QpGrid(0.0, cfg.delta_min, cfg.delta_max, cfg.grid_step)

    def interval(self, states):
        return feasible_interval(self.nets["q_r"], states, self.grid, self.config.epsilon)

    def act(self, features) -> float:
        raw = super().act(features)
        low, high = self.interval(features)
        return float(np.clip(raw, low[0], high[0]))

    def greedy(self, features) -> tuple[float, float]:
        raw = super().act(features)
        fs = feasible_set(net_critic(self.nets["q_r"]), features, self.grid, self.config.epsilon)
        return clip_action(float(np.clip(raw, fs.low, fs.high)), self.config.delta_min, self.config.delta_max), raw

    def update(self, batch: Batch, batch_deviation=None) -> dict:
        losses = self.update_critics(batch)
        low, high = self.interval(batch.states)
        grads, info = projection_actor_grad(self.nets["actor"], self.nets["q_d"], batch.states, low, high)
        self.opts["actor"].step(self.nets["actor"], grads)
        self.soft_update_targets()
        losses["loss_actor"] = float(np.mean(info["dclamp"] == 0.0))  # share of stalled samples
        return losses


def _train(agent_cls, config, frame_source, seed: int, log_rows):
    agent = agent_cls(config, seed)
    session = TrainingSession(agent, frame_source, config, seed)
    rows = session.run(config.n_episodes, log_rows)
    return agent, session, rows


def train_single_critic(config: SingleCriticConfig, frame_source, seed: int = 0, log_rows=None):
    return _train(SingleCriticAgent, config, frame_source, seed, log_rows)


def train_dual_critic(config: DualCriticConfig, frame_source, seed: int = 0, log_rows=None):
    return _train(DualCriticAgent, config, frame_source, seed, log_rows)


def train_projection_ddpg(config: ProjectionDdpgConfig, frame_source, seed: int = 0, log_rows=None):
    return _train(ProjectionDdpgAgent, config, frame_source, seed, log_rows)


# ----------------------------------------------------------------------------
# allocators without learning


def fixed_qp_allocate(frame: Frame, qp: float, env: CodecEnv | None = None) -> EpisodeLog:
    """Encode every CTU of ``frame`` at the same absolute ``qp``."""
    env = env or CodecEnv()
    delta = float(qp) - frame.base_qp
    return run_episode(env, frame, lambda _f: (delta, delta), agent="fixed-qp")


def uniform_budget_allocate(frame: Frame, env: CodecEnv | None = None) -> EpisodeLog:
    """Give each remaining CTU an equal share of the outstanding budget.

    The QP for a target bit count inverts the CTU's power-law rate model,
    clamped to the delta-QP range. This baseline peeks at the simulator's
    model parameters, which a learned agent never sees.
    """
    env = env or CodecEnv()
    state = env.reset(frame)
    raw = []
    while True:
        i = state.index
        ctu = frame.ctus[i]
        share = max(frame.budget - state.bits_spent, 1.0) / (frame.n_ctus - i)
        step = (ctu.rate_scale / share) ** (1.0 / ctu.rate_exp)
        delta = 4.0 + 6.0 * np.log2(step) - frame.base_qp
        raw.append(delta)
        out = env.step(clip_action(delta))
        if out.done:
            break
        state = out.next_state
    return episode_log(env, raw, agent="uniform-budget")

