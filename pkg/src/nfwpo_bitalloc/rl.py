"""Replay buffer, exploration noise, n-step targets and the training loop.

The loop is agent-agnostic: an agent supplies ``act``/``greedy`` for
rollouts and ``update(batch)`` for one training round. NFWPO and the
baselines all plug into :class:`TrainingSession`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .codec_env import N_FEATURES, CodecEnv, Frame
from .nn import Adam, MlpNet, ShapeError

log = logging.getLogger(__name__)

DELTA_MIN, DELTA_MAX = -10.0, 10.0
ACTION_SCALE = 10.0


class NotReady(RuntimeError):
    """The replay buffer holds fewer transitions than requested."""


@dataclass
class Transition:
    state: np.ndarray
    action: float
    r_d: float
    r_r: float
    next_state: np.ndarray | None
    done: bool
    episode: int = 0
    step: int = 0
    d_scale: float = 1.0

    def __post_init__(self):
        if not DELTA_MIN <= self.action <= DELTA_MAX:
            raise ValueError(f"action {self.action} outside [{DELTA_MIN}, {DELTA_MAX}]")
        if not (np.isfinite(self.r_d) and np.isfinite(self.r_r)):
            raise ValueError("rewards must be finite")


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored column-wise."""

    def __init__(self, capacity: int = 100_000, state_dim: int = N_FEATURES):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity)
        self.r_d = np.zeros(capacity)
        self.r_r = np.zeros(capacity)
        self.d_scale = np.ones(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.episode = np.zeros(capacity, dtype=np.int64)
        self.step = np.zeros(capacity, dtype=np.int64)
        self.head = 0  # physical slot of the oldest item
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def _slot(self, logical):
        return (self.head + np.asarray(logical)) % self.capacity

    def append(self, t: Transition) -> None:
        if self.size < self.capacity:
            k = (self.head + self.size) % self.capacity
            self.size += 1
        else:
            k = self.head
            self.head = (self.head + 1) % self.capacity
        self.states[k] = t.state
        self.next_states[k] = 0.0 if t.next_state is None else t.next_state
        self.actions[k] = t.action
        self.r_d[k] = t.r_d
        self.r_r[k] = t.r_r
        self.d_scale[k] = t.d_scale
        self.done[k] = t.done
        self.episode[k] = t.episode
        self.step[k] = t.step

    def extend(self, transitions: Sequence[Transition]) -> None:
        for t in transitions:
            self.append(t)

    def __getitem__(self, i: int) -> Transition:
        if not -self.size <= i < self.size:
            raise IndexError(i)
        k = int(self._slot(i % self.size))
        return Transition(
            self.states[k].copy(),
            float(self.actions[k]),
            float(self.r_d[k]),
            float(self.r_r[k]),
            None if self.done[k] else self.next_states[k].copy(),
            bool(self.done[k]),
            int(self.episode[k]),
            int(self.step[k]),
            float(self.d_scale[k]),
        )

    def __iter__(self):
        return (self[i] for i in range(self.size))

    _ARRAYS = ("states", "next_states", "actions", "r_d", "r_r", "d_scale", "done", "episode", "step")

    def state_dict(self) -> dict:
        d = {f"buffer.{name}": getattr(self, name) for name in self._ARRAYS}
        d["buffer.meta"] = np.array([self.capacity, self.state_dim, self.head, self.size])
        return d

    @classmethod
    def from_state_dict(cls, d: dict) -> "ReplayBuffer":
        capacity, state_dim, head, size = (int(v) for v in d["buffer.meta"])
        buf = cls(capacity, state_dim)
        for name in cls._ARRAYS:
            getattr(buf, name)[...] = d[f"buffer.{name}"]
        buf.head, buf.size = head, size
        return buf


@dataclass
class Batch:
    """Sampled transitions with their n-step lookahead windows."""

    states: np.ndarray
    actions: np.ndarray
    r_d: np.ndarray  # (B, n), zero past the window end
    r_r: np.ndarray
    d_scale: np.ndarray
    valid: np.ndarray  # (B, n) bool
    boot_states: np.ndarray
    bootstrap: np.ndarray  # (B,) bool: window ran n steps without hitting a terminal
    episode: np.ndarray
    step: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def sample_indices(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if len(buffer) < batch_size:
        raise NotReady(f"buffer holds {len(buffer)} < {batch_size} transitions")
    return rng.choice(len(buffer), size=batch_size, replace=False)


def gather_windows(buffer: ReplayBuffer, logical: np.ndarray, n: int) -> Batch:
    """Build n-step windows starting at the given logical buffer positions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    logical = np.asarray(logical, dtype=np.int64)
    b = len(logical)
    start = buffer._slot(logical)
    ep0 = buffer.episode[start]
    r_d = np.zeros((b, n))
    r_r = np.zeros((b, n))
    valid = np.zeros((b, n), dtype=bool)
    alive = np.ones(b, dtype=bool)
    last = start.copy()
    for k in range(n):
        pos = logical + k
        inside = pos < len(buffer)
        slot = buffer._slot(np.minimum(pos, len(buffer) - 1))
        ok = alive & inside & (buffer.episode[slot] == ep0)
        valid[:, k] = ok
        r_d[ok, k] = buffer.r_d[slot[ok]]
        r_r[ok, k] = buffer.r_r[slot[ok]]
        last[ok] = slot[ok]
        alive = ok & ~buffer.done[slot]
    bootstrap = alive & valid[:, n - 1]
    return Batch(
        states=buffer.states[start],
        actions=buffer.actions[start],
        r_d=r_d,
        r_r=r_r,
        d_scale=buffer.d_scale[start],
        valid=valid,
        boot_states=buffer.next_states[last],
        bootstrap=bootstrap,
        episode=buffer.episode[start],
        step=buffer.step[start],
    )


def sample_batch(buffer: ReplayBuffer, batch_size: int, rng, n: int = 1) -> Batch:
    """Uniformly sample ``batch_size`` distinct transitions with n-step windows."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return gather_windows(buffer, sample_indices(buffer, batch_size, rng), n)


def n_step_return(rewards, gamma: float, bootstrap_value=0.0, bootstrap=True, valid=None):
    """sum_k gamma^k r_k (+ gamma^n * bootstrap_value where ``bootstrap``)."""
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    n = rewards.shape[1]
    if valid is not None:
        rewards = np.where(valid, rewards, 0.0)
    disc = gamma ** np.arange(n)
    y = rewards @ disc
    y = y + np.where(bootstrap, gamma**n * np.asarray(bootstrap_value, dtype=np.float64), 0.0)
    return y


def critic_input(states, actions) -> np.ndarray:
    """Concatenate states with the (scaled) delta-QP action."""
    states = np.atleast_2d(states)
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, 1)
    return np.hstack([states, actions / ACTION_SCALE])


def n_step_targets(
    batch: Batch,
    gamma: float,
    target_critic: MlpNet,
    target_actor: MlpNet,
    channel: str = "distortion",
    n: int | None = None,
    lam: float = 0.0,
) -> np.ndarray:
    """Critic regression targets for the sampled windows.

    ``channel`` picks the reward: ``"distortion"`` (divided by the
    per-transition distortion scale), ``"rate"``, or ``"combined"``, the
    scaled distortion reward plus ``lam`` times the rate reward.
    """
    if n is not None and n != batch.r_d.shape[1]:
        raise ValueError("window length does not match n")
    if batch.r_d.shape[1] < 1:
        raise ValueError("n must be >= 1")
    if channel == "distortion":
        rewards = batch.r_d / batch.d_scale[:, None]
    elif channel == "rate":
        rewards = batch.r_r
    elif channel == "combined":
        rewards = batch.r_d / batch.d_scale[:, None] + lam * batch.r_r
    else:
        raise ValueError(f"unknown reward channel {channel!r}")
    boot = np.zeros(len(batch))
    if batch.bootstrap.any():
        s = batch.boot_states[batch.bootstrap]
        a = target_actor(s)[:, 0]
        boot[batch.bootstrap] = target_critic(critic_input(s, a))[:, 0]
    return n_step_return(rewards, gamma, boot, batch.bootstrap, batch.valid)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    resid = pred[:, 0] - target
    loss = float(np.mean(resid * resid))
    grad = (2.0 / len(target)) * resid[:, None]
    return loss, grad


def critic_update(critic: MlpNet, opt: Adam, inputs: np.ndarray, targets: np.ndarray) -> float:
    """One optimizer step on the mean squared TD error; returns the pre-step loss."""
    targets = np.asarray(targets, dtype=np.float64)
    if len(targets) == 0:
        raise ValueError("empty batch")
    if len(inputs) != len(targets):
        raise ShapeError("inputs and targets differ in length")
    _, grads = critic.forward_backward(inputs, lambda out: mse_loss(out, targets))
    opt.step(critic, grads)
    return grads.loss


class GaussianNoise:
    """i.i.d. Gaussian exploration noise whose scale decays per episode."""

    def __init__(self, sigma: float = 2.0, decay: float = 0.995, seed=0, sigma_min: float = 0.0):
        self.sigma0 = float(sigma)
        self.sigma = float(sigma)
        self.decay = float(decay)
        self.sigma_min = float(sigma_min)
        self.rng = np.random.default_rng(seed)

    def sample(self) -> float:
        return float(self.rng.normal(0.0, self.sigma)) if self.sigma > 0 else 0.0

    def end_episode(self) -> None:
        self.sigma = max(self.sigma_min, self.sigma * self.decay)

    def state_dict(self) -> dict:
        return {"sigma": self.sigma, "rng": self.rng.bit_generator.state}

    def load_state_dict(self, d: dict) -> None:
        self.sigma = float(d["sigma"])
        self.rng.bit_generator.state = d["rng"]


def clip_action(a: float, low: float = DELTA_MIN, high: float = DELTA_MAX) -> float:
    return float(min(high, max(low, a)))


# ----------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeLog:
    """Per-frame trace of one encoded episode."""

    frame_id: int
    qp_l: int
    roi_setting: str
    budget: float
    qps: np.ndarray
    raw_actions: np.ndarray
    bits: np.ndarray
    mse: np.ndarray
    roi: np.ndarray
    agent: str = ""

    @property
    def total_bits(self) -> float:
        total = 0.0
        for b in self.bits:
            total += float(b)
        return total

    @property
    def signed_deviation(self) -> float:
        return (self.total_bits - self.budget) / self.budget

    def weighted_distortion(self, w: float = 10.0) -> float:
        return float(np.sum(np.where(self.roi, w * self.mse, self.mse)))


def rollout(
    env: CodecEnv,
    frame: Frame,
    actor: Callable[[np.ndarray], float],
    noise: GaussianNoise | None = None,
    episode: int = 0,
    bounds: tuple[float, float] = (DELTA_MIN, DELTA_MAX),
) -> tuple[list[Transition], EpisodeLog]:
    """Play one exploration episode: a_i = clip(actor(s_i) + noise) to ``bounds``."""
    state = env.reset(frame)
    d_scale = env.distortion_scale
    transitions = []
    raw = []
    while True:
        a = actor(state.features)
        raw.append(a)
        if noise is not None:
            a = a + noise.sample()
        a = clip_action(a, *bounds)
        out = env.step(a)
        transitions.append(
            Transition(
                state.features,
                a,
                out.r_d,
                out.r_r,
                None if out.done else out.next_state.features,
                out.done,
                episode,
                state.index,
                d_scale,
            )
        )
        if out.done:
            break
        state = out.next_state
    return transitions, episode_log(env, raw)


def run_episode(env: CodecEnv, frame: Frame, policy: Callable, agent: str = "") -> EpisodeLog:
    """Encode ``frame`` with ``policy(features) -> (delta_qp, raw_action)``."""
    state = env.reset(frame)
    raw = []
    while True:
        delta, r = policy(state.features)
        raw.append(r)
        out = env.step(delta)
        if out.done:
            break
        state = out.next_state
    return episode_log(env, raw, agent)


def episode_log(env: CodecEnv, raw_actions, agent: str = "") -> EpisodeLog:
    fr = env.frame
    tr = env.trace
    return EpisodeLog(
        frame_id=fr.frame_id,
        qp_l=fr.qp_l,
        roi_setting=fr.roi_setting,
        budget=fr.budget,
        qps=np.array([o.qp for o in tr]),
        raw_actions=np.asarray(raw_actions, dtype=np.float64),
        bits=np.array([o.bits for o in tr]),
        mse=np.array([o.mse for o in tr]),
        roi=fr.roi_mask,
        agent=agent,
    )


# ----------------------------------------------------------------------------
# training session


LOG_COLUMNS = (
    "episode",
    "step",
    "action",
    "r_d",
    "r_r",
    "loss_d",
    "loss_r",
    "loss_actor",
    "rate_deviation",
)


@dataclass
class SessionState:
    episode: int = 0
    n_updates: int = 0
    deviations: dict = field(default_factory=dict)


class TrainingSession:
    """Algorithm-level driver shared by every actor-critic agent.

    Each episode: roll out with noise, store transitions, then run
    ``updates_per_episode`` rounds of ``agent.update`` on sampled batches
    once the buffer holds a full batch. Deterministic per seed and
    resumable through :meth:`state_dict`.
    """

    def __init__(self, agent, frame_source, config, seed: int):
        self.agent = agent
        self.config = config
        self.seed = int(seed)
        self.frame_source = frame_source
        ss = np.random.SeedSequence(self.seed).spawn(2)
        self.noise = GaussianNoise(config.noise_sigma, config.noise_decay, ss[0], config.noise_min)
        self.sample_rng = np.random.default_rng(ss[1])
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.env = CodecEnv(roi_weight=config.roi_weight)
        self.progress = SessionState()

    def frame_for(self, episode: int) -> Frame:
        src = self.frame_source
        if callable(src):
            return src(episode)
        return src[episode % len(src)]

    def run(self, n_episodes: int, log_rows: list | None = None) -> list:
        """Train until ``n_episodes`` episodes have been played in total."""
        rows = [] if log_rows is None else log_rows
        cfg = self.config
        while self.progress.episode < n_episodes:
            ep = self.progress.episode
            frame = self.frame_for(ep)
            try:
                transitions, elog = rollout(
                    self.env, frame, self.agent.act, self.noise, ep, (cfg.delta_min, cfg.delta_max)
                )
            except Exception as exc:
                raise RuntimeError(f"episode {ep}: rollout failed: {exc}") from exc
            self.buffer.extend(transitions)
            dev = elog.signed_deviation
            self.progress.deviations[ep] = dev
            self.agent.on_episode_end(ep, dev)
            losses = {}
            if len(self.buffer) >= cfg.batch_size:
                for _ in range(cfg.updates_per_episode):
                    batch = sample_batch(self.buffer, cfg.batch_size, self.sample_rng, cfg.n_step)
                    batch_dev = np.array([self.progress.deviations[e] for e in batch.episode])
                    try:
                        losses = self.agent.update(batch, batch_dev)
                    except Exception as exc:
                        raise RuntimeError(f"episode {ep}: update failed: {exc}") from exc
                    self.progress.n_updates += 1
            self.noise.end_episode()
            self._trim_deviations()
            for t in transitions:
                rows.append(
                    (
                        ep,
                        t.step,
                        t.action,
                        t.r_d,
                        t.r_r,
                        losses.get("loss_d", np.nan),
                        losses.get("loss_r", np.nan),
                        losses.get("loss_actor", np.nan),
                        dev,
                    )
                )
            self.progress.episode += 1
            if ep % 500 == 0:
                log.debug("episode %d deviation %.4f losses %s", ep, dev, losses)
        return rows

    def _trim_deviations(self) -> None:
        if len(self.buffer) == 0:
            return
        oldest = int(self.buffer.episode[self.buffer.head])
        stale = [e for e in self.progress.deviations if e < oldest]
        for e in stale:
            del self.progress.deviations[e]

    # ---------------------------------------------------------------- state
    def state_dict(self) -> tuple[dict, dict]:
        """Return ``(arrays, meta)`` capturing everything needed to resume."""
        arrays = dict(self.buffer.state_dict())
        arrays.update(self.agent.state_arrays())
        meta = {
            "seed": self.seed,
            "episode": self.progress.episode,
            "n_updates": self.progress.n_updates,
            "deviations": {str(k): v for k, v in self.progress.deviations.items()},
            "noise": self.noise.state_dict(),
            "sample_rng": self.sample_rng.bit_generator.state,
            "agent": self.agent.state_meta(),
        }
        return arrays, meta

    def load_state_dict(self, arrays: dict, meta: dict) -> None:
        self.buffer = ReplayBuffer.from_state_dict(arrays)
        self.agent.load_state(arrays, meta["agent"])
        self.progress = SessionState(
            int(meta["episode"]),
            int(meta["n_updates"]),
            {int(k): float(v) for k, v in meta["deviations"].items()},
        )
        self.noise.load_state_dict(meta["noise"])
        self.sample_rng.bit_generator.state = meta["sample_rng"]


# ----------------------------------------------------------------------------
# configuration and agent base


@dataclass
class RLConfig:
    """Hyper-parameters shared by every actor-critic agent."""

    n_episodes: int = 2000
    hidden_sizes: tuple = (128, 128)
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    gamma: float = 0.99
    gamma_rate: float = 1.0
    tau: float = 0.005
    n_step: int = 3
    batch_size: int = 64
    buffer_capacity: int = 100_000
    noise_sigma: float = 2.0
    noise_decay: float = 0.995
    noise_min: float = 0.0
    updates_per_episode: int = 1
    roi_weight: float = 10.0
    delta_min: float = DELTA_MIN
    delta_max: float = DELTA_MAX
    grid_step: float = 0.1

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.n_step < 1:
            raise ValueError("n_step must be >= 1")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gamma_rate <= 1.0:
            raise ValueError("discount factors must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_capacity")
        if self.roi_weight < 1.0:
            raise ValueError("roi_weight must be >= 1")
        if not DELTA_MIN <= self.delta_min < self.delta_max <= DELTA_MAX:
            raise ValueError("delta range must lie inside [-10, 10]")


def make_actor(cfg: RLConfig, rng, state_dim: int = N_FEATURES, identity_output: bool = False) -> MlpNet:
    sizes = (state_dim, *cfg.hidden_sizes, 1)
    if identity_output:
        return MlpNet(sizes, "identity", rng=rng)
    return MlpNet(sizes, "tanh", output_scale=ACTION_SCALE, rng=rng)


def make_critic(cfg: RLConfig, rng, state_dim: int = N_FEATURES) -> MlpNet:
    return MlpNet((state_dim + 1, *cfg.hidden_sizes, 1), rng=rng)


class Agent:
    """Base class holding named networks, their optimizers and targets.

    Subclasses fill ``self.nets`` / ``self.opts`` in ``_build`` and
    implement ``update``.
    """

    kind = "base"

    def __init__(self, config: RLConfig, seed: int = 0, state_dim: int = N_FEATURES):
        self.config = config
        self.state_dim = state_dim
        self.nets: dict[str, MlpNet] = {}
        self.opts: dict[str, Adam] = {}
        self._build(np.random.default_rng(seed))

    def _build(self, rng) -> None:
        raise NotImplementedError

    def _add(self, name: str, net: MlpNet, lr: float | None, target: bool = True) -> None:
        self.nets[name] = net
        if lr is not None:
            self.opts[name] = Adam.for_net(net, lr)
        if target:
            self.nets[name + "_target"] = net.copy()

    @property
    def actor(self) -> MlpNet:
        return self.nets["actor"]

    def act(self, features) -> float:
        return float(self.actor.forward(features)[0])

    def greedy(self, features) -> tuple[float, float]:
        a = self.act(features)
        return clip_action(a, self.config.delta_min, self.config.delta_max), a

    def on_episode_end(self, episode: int, deviation: float) -> None:
        pass

    def update(self, batch: Batch, batch_deviation: np.ndarray) -> dict:
        raise NotImplementedError

    def soft_update_targets(self) -> None:
        from .nn import soft_update

        for name, net in self.nets.items():
            if not name.endswith("_target"):
                tgt = self.nets.get(name + "_target")
                if tgt is not None:
                    soft_update(tgt, net, self.config.tau)

    # --------------------------------------------------------- persistence
    def state_arrays(self) -> dict:
        out = {}
        for name, net in self.nets.items():
            for k, p in enumerate(net.parameters()):
                out[f"net.{name}.{k}"] = p
        for name, opt in self.opts.items():
            for k, (m, v) in enumerate(zip(opt.m, opt.v)):
                out[f"opt.{name}.m.{k}"] = m
                out[f"opt.{name}.v.{k}"] = v
        return out

    def state_meta(self) -> dict:
        return {"kind": self.kind, "opt_steps": {n: o.t for n, o in self.opts.items()}}

    def load_state(self, arrays: dict, meta: dict) -> None:
        if meta.get("kind") != self.kind:
            raise ValueError(f"checkpoint holds a {meta.get('kind')!r} agent, not {self.kind!r}")
        for name, net in self.nets.items():
            for k, p in enumerate(net.parameters()):
                p[...] = arrays[f"net.{name}.{k}"]
        for name, opt in self.opts.items():
            for k, (m, v) in enumerate(zip(opt.m, opt.v)):
                m[...] = arrays[f"opt.{name}.m.{k}"]
                v[...] = arrays[f"opt.{name}.v.{k}"]
            opt.t = int(meta["opt_steps"][name])
