"""Synthetic intra-frame codec and the per-CTU bit allocation episode.

Each coding tree unit (CTU) carries a parametric rate/distortion model::

    bits(qp) = max(R_FLOOR, a * qstep(qp) ** -b)
    mse(qp)  = min(variance, kappa * qstep(qp) ** 2 / 12)

A frame is a sequence of CTUs with a budget equal to its total bits when
every CTU is coded at the rate-point QP. An episode encodes the CTUs in
order, one QP decision per step.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

R_FLOOR = 64.0
RATE_POINTS = (22, 27, 32, 37)
BASE_QP_OFFSET = -3
MAX_QP = 51.0
N_FEATURES = 10
FEATURE_SCALE = 5000.0
OUTSTANDING_CLIP = (0.0, 2.0)
ROI_POLICIES = ("regular", "small", "large")
SMALL_ROI_MAX = 5
FRAMESET_FORMAT = "nfwpo-frameset"
FRAMESET_VERSION = 1

_VAR_RANGE = (50.0, 5000.0)
_GRADIENT_RHO = 50.0


class ProtocolError(RuntimeError):
    """The episode protocol was violated (e.g. stepping a finished episode)."""


def qstep(qp):
    """Quantizer step size for ``qp`` (HEVC convention, doubles every 6 QP)."""
    return 2.0 ** ((np.asarray(qp, dtype=np.float64) - 4.0) / 6.0)


@dataclass(frozen=True)
class CtuModel:
    variance: float
    gradient: float
    rate_scale: float
    rate_exp: float
    dist_scale: float
    roi: bool = False

    def __post_init__(self):
        if not self.rate_scale > 0:
            raise ValueError("rate_scale must be positive")
        if not self.variance > 0:
            raise ValueError("variance must be positive")


def encode_ctu(ctu: CtuModel, qp) -> tuple:
    """Return ``(bits, mse)`` for ``ctu`` coded at ``qp`` (scalar or array)."""
    q = qstep(qp)
    bits = np.maximum(R_FLOOR, ctu.rate_scale * q ** (-ctu.rate_exp))
    mse = np.minimum(ctu.variance, ctu.dist_scale * q * q / 12.0)
    if np.ndim(bits) == 0:
        return float(bits), float(mse)
    return bits, mse


def frame_budget(ctus: Iterable[CtuModel], qp_l: float) -> float:
    """Bits of the whole frame coded at a single fixed QP."""
    total = 0.0
    for ctu in ctus:
        total += encode_ctu(ctu, qp_l)[0]
    return total


@dataclass(frozen=True)
class Frame:
    ctus: tuple
    qp_l: int
    frame_id: int = 0
    roi_setting: str = "regular"
    budget: float = field(init=False)
    budget_ref: float = field(init=False)

    def __post_init__(self):
        if len(self.ctus) < 1:
            raise ValueError("a frame needs at least one CTU")
        object.__setattr__(self, "ctus", tuple(self.ctus))
        object.__setattr__(self, "budget", frame_budget(self.ctus, self.qp_l))
        object.__setattr__(self, "budget_ref", frame_budget(self.ctus, 22))

    @property
    def n_ctus(self) -> int:
        return len(self.ctus)

    @property
    def base_qp(self) -> float:
        return float(self.qp_l + BASE_QP_OFFSET)

    @property
    def roi_mask(self) -> np.ndarray:
        return np.array([c.roi for c in self.ctus], dtype=bool)

    @property
    def n_roi(self) -> int:
        return int(self.roi_mask.sum())

    def with_rate_point(self, qp_l: int) -> "Frame":
        return Frame(self.ctus, qp_l, self.frame_id, self.roi_setting)

    def with_roi(self, mask, roi_setting: str | None = None) -> "Frame":
        mask = np.asarray(mask, dtype=bool)
        ctus = tuple(_replace_roi(c, bool(r)) for c, r in zip(self.ctus, mask))
        return Frame(ctus, self.qp_l, self.frame_id, roi_setting or self.roi_setting)


def _replace_roi(ctu: CtuModel, roi: bool) -> CtuModel:
    d = asdict(ctu)
    d["roi"] = roi
    return CtuModel(**d)


# ----------------------------------------------------------------------------
# frame generation


def _content(rng: np.random.Generator, n: int) -> list[dict]:
    lo, hi = np.log(_VAR_RANGE[0]), np.log(_VAR_RANGE[1])
    log_var = rng.uniform(lo, hi, size=n)
    variance = np.exp(log_var)
    gradient = _GRADIENT_RHO * np.sqrt(variance) * rng.uniform(0.5, 1.5, size=n)
    # steeper rate slope for busier content, with jitter
    t = (log_var - lo) / (hi - lo)
    rate_exp = np.clip(0.8 + 0.6 * t + rng.normal(0.0, 0.05, size=n), 0.8, 1.4)
    bits_at_22 = 4.0 * gradient * rng.lognormal(0.0, 0.15, size=n)
    rate_scale = bits_at_22 * qstep(22.0) ** rate_exp
    dist_scale = rng.uniform(0.5, 2.0, size=n)
    return [
        dict(
            variance=float(variance[i]),
            gradient=float(gradient[i]),
            rate_scale=float(rate_scale[i]),
            rate_exp=float(rate_exp[i]),
            dist_scale=float(dist_scale[i]),
        )
        for i in range(n)
    ]


def _roi_mask(rng_regular, rng_small, n: int, policy: str) -> np.ndarray:
    # both streams are always consumed so that every policy sees the same draws
    n_regular = int(rng_regular.integers(0, n + 1))
    regular_pos = rng_regular.permutation(n)[:n_regular]
    n_small = int(rng_small.integers(1, min(SMALL_ROI_MAX, n) + 1))
    small_pos = rng_small.permutation(n)[:n_small]
    mask = np.zeros(n, dtype=bool)
    if policy == "regular":
        mask[regular_pos] = True
    else:
        mask[small_pos] = True
        if policy == "large":
            mask = ~mask
    return mask


def generate_frames(
    seed: int,
    count: int,
    n_ctus: int = 40,
    roi_policy: str = "regular",
    rate_points: Sequence[int] | int = RATE_POINTS,
) -> list[Frame]:
    """Generate ``count`` synthetic frames, deterministically per ``seed``.

    Frame ``k`` uses rate point ``rate_points[k % len(rate_points)]``. The
    CTU content and the ROI draws come from separate streams, so the
    ``large`` policy yields the exact complement of ``small`` for the same
    seed.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if roi_policy not in ROI_POLICIES:
        raise ValueError(f"unknown ROI policy {roi_policy!r}")
    if n_ctus < 1:
        raise ValueError("n_ctus must be >= 1")
    if roi_policy in ("small", "large") and n_ctus <= SMALL_ROI_MAX:
        raise ValueError(f"ROI policy {roi_policy!r} needs more than {SMALL_ROI_MAX} CTUs")
    if isinstance(rate_points, (int, np.integer)):
        rate_points = (int(rate_points),)
    return [
        make_frame(seed, k, n_ctus, roi_policy, rate_points[k % len(rate_points)])
        for k in range(count)
    ]


def make_frame(seed: int, k: int, n_ctus: int = 40, roi_policy: str = "regular", qp_l: int = 27) -> Frame:
    """Frame ``k`` of the stream identified by ``seed`` (independent of stream length)."""
    c_ss, r_ss, s_ss = np.random.SeedSequence(seed, spawn_key=(k,)).spawn(3)
    content = _content(np.random.default_rng(c_ss), n_ctus)
    mask = _roi_mask(np.random.default_rng(r_ss), np.random.default_rng(s_ss), n_ctus, roi_policy)
    ctus = tuple(CtuModel(**c, roi=bool(r)) for c, r in zip(content, mask))
    return Frame(ctus, int(qp_l), k, roi_policy)


# ----------------------------------------------------------------------------
# frame-set files


def save_frames(frames: Sequence[Frame], path) -> None:
    payload = {
        "format": FRAMESET_FORMAT,
        "version": FRAMESET_VERSION,
        "frames": [
            {
                "frame_id": f.frame_id,
                "qp_l": f.qp_l,
                "roi_setting": f.roi_setting,
                "budget": f.budget,
                "ctus": [asdict(c) for c in f.ctus],
            }
            for f in frames
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_frames(path) -> list[Frame]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != FRAMESET_FORMAT:
        raise ValueError(f"{path}: not a frame-set file")
    if payload.get("version") != FRAMESET_VERSION:
        raise ValueError(f"{path}: unsupported frame-set version {payload.get('version')}")
    return [
        Frame(
            tuple(CtuModel(**c) for c in f["ctus"]),
            int(f["qp_l"]),
            int(f["frame_id"]),
            f["roi_setting"],
        )
        for f in payload["frames"]
    ]


# ----------------------------------------------------------------------------
# encoder adapter and environment


class EncoderAdapter(Protocol):
    """Anything that can code CTU ``ctu_id`` at ``qp`` and report the result."""

    def encode(self, ctu_id: int, qp: float) -> tuple[float, float]: ...


class SimulatedEncoder:
    def __init__(self, frame: Frame, round_qp: bool = False):
        self.frame = frame
        self.round_qp = round_qp

    def encode(self, ctu_id: int, qp: float) -> tuple[float, float]:
        if self.round_qp:
            qp = float(np.round(qp))
        return encode_ctu(self.frame.ctus[ctu_id], qp)


@dataclass
class EnvState:
    features: np.ndarray
    index: int
    bits_spent: float


@dataclass
class StepOutcome:
    next_state: EnvState | None
    qp: float
    bits: float
    mse: float
    r_d: float
    r_r: float
    done: bool


def distortion_reward(mse: float, roi: bool, roi_weight: float) -> float:
    return -mse * roi_weight if roi else -mse


def rate_reward(total_bits: float, budget: float, done: bool) -> float:
    if not done:
        return 0.0
    return -abs(budget - total_bits) / budget


class CodecEnv:
    """One-frame episode: reset with a frame, then one ``step`` per CTU.

    Actions are delta QPs; the base QP of the frame is added here and only
    here.
    """

    def __init__(self, roi_weight: float = 10.0, round_qp: bool = False, encoder_factory=None):
        self.roi_weight = float(roi_weight)
        self.round_qp = round_qp
        self.encoder_factory = encoder_factory or (lambda fr: SimulatedEncoder(fr, round_qp))
        self.frame: Frame | None = None
        self._state: EnvState | None = None
        self._done = True

    @property
    def distortion_scale(self) -> float:
        """Nominal unweighted frame distortion at the rate-point QP.

        Agents divide distortion rewards by this to keep critic targets O(1)
        across rate points.
        """
        fr = self.frame
        return fr.n_ctus * float(qstep(fr.qp_l)) ** 2 / 12.0

    def reset(self, frame: Frame) -> EnvState:
        self.frame = frame
        self.encoder = self.encoder_factory(frame)
        self._var = np.array([c.variance for c in frame.ctus])
        self._grad = np.array([c.gradient for c in frame.ctus])
        self._roi = frame.roi_mask
        # suffix sums: index i covers CTUs i..N-1
        self._var_tail = np.append(np.cumsum(self._var[::-1])[::-1], 0.0)
        self._grad_tail = np.append(np.cumsum(self._grad[::-1])[::-1], 0.0)
        self._roi_tail = np.append(np.cumsum(self._roi[::-1])[::-1], 0)
        self._done = False
        self._state = EnvState(self._features(0, 0.0), 0, 0.0)
        self.trace: list[StepOutcome] = []
        return self._state

    def _features(self, i: int, spent: float) -> np.ndarray:
        fr = self.frame
        n = fr.n_ctus
        remaining = n - i
        f = np.zeros(N_FEATURES)
        if i < n:
            f[0] = self._var[i] / FEATURE_SCALE
            f[1] = self._grad[i] / FEATURE_SCALE
            f[8] = float(self._roi[i])
        if remaining > 0:
            f[2] = self._var_tail[i] / remaining / FEATURE_SCALE
            f[3] = self._grad_tail[i] / remaining / FEATURE_SCALE
            f[9] = self._roi_tail[i] / remaining
        f[4] = np.clip((fr.budget - spent) / fr.budget, *OUTSTANDING_CLIP)
        f[5] = remaining / n
        f[6] = fr.base_qp / MAX_QP
        f[7] = fr.budget / fr.budget_ref
        return f

    @property
    def state(self) -> EnvState | None:
        return self._state

    @property
    def done(self) -> bool:
        return self._done

    def step(self, delta_qp: float) -> StepOutcome:
        if self._done or self._state is None:
            raise ProtocolError("step() called on a finished episode; call reset()")
        i = self._state.index
        fr = self.frame
        qp = fr.base_qp + float(delta_qp)
        if self.round_qp:
            qp = float(np.round(qp))
        bits, mse = self.encoder.encode(i, qp)
        spent = self._state.bits_spent + bits
        done = i + 1 == fr.n_ctus
        r_d = distortion_reward(mse, bool(self._roi[i]), self.roi_weight)
        r_r = rate_reward(spent, fr.budget, done)
        self._done = done
        self._state = None if done else EnvState(self._features(i + 1, spent), i + 1, spent)
        out = StepOutcome(self._state, qp, bits, mse, r_d, r_r, done)
        self.trace.append(out)
        return out


# ----------------------------------------------------------------------------
# exhaustive oracle


@dataclass
class OracleResult:
    feasible: bool
    qps: tuple | None = None
    total_bits: float | None = None
    weighted_distortion: float | None = None


MAX_ORACLE_CTUS = 6
MAX_ORACLE_ASSIGNMENTS = 2_000_000


def oracle_allocate(
    frame: Frame, qp_grid: Sequence[float], epsilon: float = -0.05, roi_weight: float = 10.0
) -> OracleResult:
    """Exhaustive search over all QP assignments on ``qp_grid``.

    Minimises the ROI-weighted distortion among assignments whose total
    bits deviate from the budget by at most ``|epsilon|`` (relative). Ties
    go to fewer bits, then to the lexicographically smaller QP vector.
    """
    n = frame.n_ctus
    grid = np.asarray(sorted(qp_grid), dtype=np.float64)
    if n > MAX_ORACLE_CTUS:
        raise ValueError(f"oracle limited to {MAX_ORACLE_CTUS} CTUs, got {n}")
    if len(grid) ** n > MAX_ORACLE_ASSIGNMENTS:
        raise ValueError("too many assignments for exhaustive search")
    bits = np.empty((n, len(grid)))
    dist = np.empty((n, len(grid)))
    for i, ctu in enumerate(frame.ctus):
        bits[i], dist[i] = encode_ctu(ctu, grid)
        if ctu.roi:
            dist[i] *= roi_weight
    # rows of idx enumerate assignments in lexicographic order
    idx = np.array(list(itertools.product(range(len(grid)), repeat=n)), dtype=np.intp)
    rows = np.arange(n)
    tot_bits = bits[rows, idx].sum(axis=1)
    tot_dist = dist[rows, idx].sum(axis=1)
    ok = np.abs(tot_bits - frame.budget) / frame.budget <= abs(epsilon)
    if not ok.any():
        return OracleResult(False)
    cand = np.flatnonzero(ok)
    order = np.lexsort((tot_bits[cand], tot_dist[cand]))
    best = cand[order[0]]
    return OracleResult(
        True, tuple(float(q) for q in grid[idx[best]]), float(tot_bits[best]), float(tot_dist[best])
    )
