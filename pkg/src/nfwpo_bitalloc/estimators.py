"""scikit-learn style wrappers: ``fit`` on a frame set, ``predict`` QP assignments.

The "samples" here are :class:`~nfwpo_bitalloc.codec_env.Frame` objects
rather than rows of a feature matrix; :func:`check_frames` is the input
validator. Hyper-parameters are plain constructor arguments so that
``get_params`` / ``set_params`` / ``clone`` behave as usual.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import fixed_qp_allocate
from .checkpoint import AGENT_KINDS, new_session
from .codec_env import CodecEnv, Frame
from .metrics import DEADBAND, rate_deviation
from .rl import EpisodeLog, run_episode


def check_frames(frames) -> list[Frame]:
    """Validate and normalise a frame or a non-empty sequence of frames to a list."""
    if isinstance(frames, Frame):
        return [frames]
    if isinstance(frames, (str, bytes)) or not hasattr(frames, "__iter__"):
        raise TypeError(f"expected a Frame or a sequence of Frames, got {type(frames).__name__}")
    out = list(frames)
    if not out:
        raise ValueError("no frames given")
    bad = [type(f).__name__ for f in out if not isinstance(f, Frame)]
    if bad:
        raise TypeError(f"expected Frame objects, got {bad[0]}")
    return out


def _stack(rows: list[np.ndarray]):
    if len({len(r) for r in rows}) == 1:
        return np.vstack(rows)
    return rows


class _AllocatorMixin:
    """``predict``, ``evaluate`` and ``score`` built on a subclass's ``_episode``."""

    def evaluate(self, frames) -> list[EpisodeLog]:
        """Encode each frame greedily and return the per-frame logs."""
        check_is_fitted(self)
        frames = check_frames(frames)
        env = CodecEnv(roi_weight=self._roi_weight())
        return [self._episode(env, f) for f in frames]

    def predict(self, frames):
        """Absolute QP per CTU: a 2-D array, or a list when frame sizes differ."""
        return _stack([e.qps for e in self.evaluate(frames)])

    def score(self, frames, y=None) -> float:
        """Negative mean deadbanded rate deviation (percent); higher is better."""
        logs = self.evaluate(frames)
        return -float(np.mean([rate_deviation(e.total_bits, e.budget, DEADBAND) for e in logs]))

    def _roi_weight(self) -> float:
        return 10.0


class _RLAllocator(_AllocatorMixin, BaseEstimator):
    kind = ""

    def _config(self):
        cfg_cls = AGENT_KINDS[self.kind][0]
        params = {k: v for k, v in self.get_params().items() if k not in ("seed", "options")}
        params.update(self.options or {})
        return cfg_cls(**params)

    def fit(self, frames, y=None):
        """Train on ``frames``, visiting them cyclically, for ``n_episodes`` episodes."""
        frames = check_frames(frames)
        config = self._config()
        self.session_ = new_session(self.kind, config, frames, self.seed)
        self.training_log_ = self.session_.run(config.n_episodes)
        self.agent_ = self.session_.agent
        self.config_ = config
        return self

    def _roi_weight(self) -> float:
        return self.config_.roi_weight

    def _episode(self, env, frame):
        return run_episode(env, frame, self.agent_.greedy, agent=self.kind)


class NfwpoAllocator(_RLAllocator):
    """Actor with distortion and rate critics trained by Frank-Wolfe reference actions.

    ``options`` passes any further :class:`~nfwpo_bitalloc.nfwpo.NfwpoConfig`
    field (for example ``tau`` or ``noise_min``).
    """

    kind = "nfwpo"

    def __init__(
        self,
        n_episodes: int = 2000,
        hidden_sizes: Sequence[int] = (128, 128),
        updates_per_episode: int = 1,
        epsilon: float = -0.05,
        alpha: float = 0.05,
        seed: int = 0,
        options: dict | None = None,
    ):
        self.n_episodes = n_episodes
        self.hidden_sizes = hidden_sizes
        self.updates_per_episode = updates_per_episode
        self.epsilon = epsilon
        self.alpha = alpha
        self.seed = seed
        self.options = options


class SingleCriticAllocator(_RLAllocator):
    """Deterministic policy gradient on the combined reward ``r_D + lam * r_R``."""

    kind = "single"

    def __init__(
        self,
        n_episodes: int = 2000,
        hidden_sizes: Sequence[int] = (128, 128),
        updates_per_episode: int = 1,
        lam: float = 100.0,
        seed: int = 0,
        options: dict | None = None,
    ):
        self.n_episodes = n_episodes
        self.hidden_sizes = hidden_sizes
        self.updates_per_episode = updates_per_episode
        self.lam = lam
        self.seed = seed
        self.options = options


class DualCriticAllocator(_RLAllocator):
    """Actor driven by the distortion or the rate critic depending on the episode outcome."""

    kind = "dual"

    def __init__(
        self,
        n_episodes: int = 2000,
        hidden_sizes: Sequence[int] = (128, 128),
        updates_per_episode: int = 1,
        tolerance: float = 0.05,
        seed: int = 0,
        options: dict | None = None,
    ):
        self.n_episodes = n_episodes
        self.hidden_sizes = hidden_sizes
        self.updates_per_episode = updates_per_episode
        self.tolerance = tolerance
        self.seed = seed
        self.options = options


class ProjectionDdpgAllocator(_RLAllocator):
    """DDPG with a clamp projection layer between actor and critic."""

    kind = "proj-ddpg"

    def __init__(
        self,
        n_episodes: int = 2000,
        hidden_sizes: Sequence[int] = (128, 128),
        updates_per_episode: int = 1,
        epsilon: float = -0.05,
        seed: int = 0,
        options: dict | None = None,
    ):
        self.n_episodes = n_episodes
        self.hidden_sizes = hidden_sizes
        self.updates_per_episode = updates_per_episode
        self.epsilon = epsilon
        self.seed = seed
        self.options = options


class FixedQpAllocator(_AllocatorMixin, BaseEstimator):
    """Every CTU at ``QP_l + offset``; with ``offset=0`` it spends exactly the budget."""

    def __init__(self, offset: float = 0.0):
        self.offset = offset

    def fit(self, frames=None, y=None):
        if frames is not None:
            check_frames(frames)
        self.fitted_ = True
        return self

    def _episode(self, env, frame):
        return fixed_qp_allocate(frame, frame.qp_l + self.offset, env)
