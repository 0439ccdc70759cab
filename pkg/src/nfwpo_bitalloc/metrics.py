"""Evaluation metrics: deadbanded rate deviation, ROI-weighted quality, BD-rate.

Everything here is a pure function of its inputs. :func:`aggregate` turns a
pile of :class:`~nfwpo_bitalloc.rl.EpisodeLog` records into a
:class:`RunReport` grouped by agent, ROI setting and rate point.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

DEADBAND = 0.05
ROI_WEIGHT = 10.0
PEAK = 255.0
# Relative slack on the deadband comparison so that 1.05 * target counts as
# "within 5%" despite binary rounding of the product.
_DEADBAND_SLACK = 1e-12


class NoOverlapError(ValueError):
    """Two rate-quality curves share no quality interval."""


def rate_deviation(actual_bits: float, target_bits: float, deadband: float = DEADBAND) -> float:
    """Absolute relative deviation in percent, reported as 0 inside the deadband.

    The boundary is inclusive: a deviation of exactly ``deadband`` maps to 0.
    """
    if not target_bits > 0:
        raise ValueError(f"target bits must be positive, got {target_bits}")
    if deadband < 0:
        raise ValueError("deadband must be non-negative")
    d = abs(actual_bits - target_bits) / target_bits
    if d <= deadband * (1.0 + _DEADBAND_SLACK) + _DEADBAND_SLACK:
        return 0.0
    return 100.0 * d


def roi_weighted_mse(
    mse_roi_sum: float, n_roi: int, mse_nroi_sum: float, n_nroi: int, w: float = ROI_WEIGHT
) -> float:
    """(w * ROI MSE sum + non-ROI MSE sum) / (w * n_roi + n_nroi)."""
    if n_roi < 0 or n_nroi < 0:
        raise ValueError("unit counts must be non-negative")
    if n_roi + n_nroi < 1:
        raise ValueError("empty frame: no coding units")
    return (mse_roi_sum * w + mse_nroi_sum) / (n_roi * w + n_nroi)


def psnr_from_mse(mse: float, peak: float = PEAK) -> float:
    """10 log10(peak^2 / mse). A non-positive MSE yields ``inf`` and a warning."""
    if not mse > 0:
        warnings.warn(f"mse={mse} is not positive; returning infinite PSNR", RuntimeWarning)
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def episode_quality(elog, w: float = ROI_WEIGHT, peak: float = PEAK) -> float:
    """ROI-weighted PSNR of one encoded frame."""
    roi = np.asarray(elog.roi, dtype=bool)
    mse = np.asarray(elog.mse, dtype=np.float64)
    wmse = roi_weighted_mse(mse[roi].sum(), int(roi.sum()), mse[~roi].sum(), int((~roi).sum()), w)
    return psnr_from_mse(wmse, peak)


# ----------------------------------------------------------------------------
# Bjontegaard delta rate


@dataclass(frozen=True)
class RdPoint:
    bits: float
    quality: float

    def __post_init__(self):
        if not self.bits > 0:
            raise ValueError(f"bits must be positive, got {self.bits}")
        if not math.isfinite(self.quality):
            raise ValueError("quality must be finite")


def _curve(points) -> tuple[np.ndarray, np.ndarray]:
    pts = [p if isinstance(p, RdPoint) else RdPoint(*p) for p in points]
    if len(pts) < 4:
        raise ValueError(f"need at least 4 rate-quality points, got {len(pts)}")
    pts.sort(key=lambda p: p.quality)
    q = np.array([p.quality for p in pts])
    if np.any(np.diff(q) <= 0):
        raise ValueError("quality values must be distinct")
    return q, np.log10([p.bits for p in pts])


def _mean_log_rate(q, logr, lo, hi, variant):
    if variant == "cubic":
        poly = np.polyint(np.polyfit(q, logr, 3))
        return (np.polyval(poly, hi) - np.polyval(poly, lo)) / (hi - lo)
    if variant == "pchip":
        return PchipInterpolator(q, logr).integrate(lo, hi) / (hi - lo)
    raise ValueError(f"unknown BD-rate variant {variant!r}")


def bd_rate(anchor, test, variant: str = "cubic") -> float:
    """Average bit-rate difference of ``test`` vs ``anchor`` at equal quality, in percent.

    ``anchor`` and ``test`` are sequences of :class:`RdPoint` or ``(bits,
    quality)`` pairs. ``variant`` selects a least-squares cubic fit
    (``"cubic"``) or a piecewise-cubic Hermite interpolant (``"pchip"``) of
    log10(bits) over quality. Negative values mean ``test`` needs fewer bits.
    """
    qa, ra = _curve(anchor)
    qt, rt = _curve(test)
    lo, hi = max(qa[0], qt[0]), min(qa[-1], qt[-1])
    if not hi > lo:
        raise NoOverlapError(f"quality ranges [{qa[0]}, {qa[-1]}] and [{qt[0]}, {qt[-1]}] do not overlap")
    delta = _mean_log_rate(qt, rt, lo, hi, variant) - _mean_log_rate(qa, ra, lo, hi, variant)
    return 100.0 * (10.0**delta - 1.0)


# ----------------------------------------------------------------------------
# aggregation


@dataclass
class GroupStats:
    agent: str
    roi_setting: str
    qp_l: int
    n_frames: int
    mean_deviation: float  # deadbanded, percent
    mean_abs_deviation: float  # raw |actual - target| / target, percent
    mean_bits: float
    mean_quality: float  # ROI-weighted PSNR, dB


@dataclass
class RunReport:
    groups: list[GroupStats]
    bd_rates: dict  # (agent, roi_setting) -> percent or None
    anchor: str | None
    n_episodes: int
    seeds: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def deviation_table(self) -> dict:
        """``{(agent, roi_setting): mean deadbanded deviation over rate points}``."""
        acc: dict = {}
        for g in self.groups:
            acc.setdefault((g.agent, g.roi_setting), []).append(g.mean_deviation)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "n_episodes": self.n_episodes,
            "seeds": self.seeds,
            "groups": [g.__dict__ for g in self.groups],
            "bd_rates": [
                {"agent": a, "roi_setting": r, "bd_rate": v} for (a, r), v in sorted(self.bd_rates.items())
            ],
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        """Aligned table: rate deviation per rate point plus BD-rate, per ROI setting and agent."""
        agents = sorted({g.agent for g in self.groups})
        settings = sorted({g.roi_setting for g in self.groups})
        points = sorted({g.qp_l for g in self.groups})
        by_key = {(g.agent, g.roi_setting, g.qp_l): g for g in self.groups}
        head = ["roi", "agent"] + [f"dev@{p}(%)" for p in points] + ["mean dev(%)", "BD-rate(%)"]
        lines = []
        for s in settings:
            for a in agents:
                devs = [by_key.get((a, s, p)) for p in points]
                cells = [f"{g.mean_deviation:.2f}" if g else "-" for g in devs]
                present = [g.mean_deviation for g in devs if g]
                mean = f"{np.mean(present):.2f}" if present else "-"
                bd = self.bd_rates.get((a, s))
                lines.append([s, a, *cells, mean, "-" if bd is None else f"{bd:.2f}"])
        widths = [max(len(r[i]) for r in [head] + lines) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths)).rstrip()
        out = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in lines]
        if self.anchor:
            out.append(f"BD-rate anchor: {self.anchor}")
        out.extend(f"note: {n}" for n in self.notes)
        return "\n".join(out) + "\n"


def _group_key(elog):
    return (elog.agent, elog.roi_setting, int(elog.qp_l))


def aggregate(
    logs: Iterable,
    anchor: str | None = None,
    agents: Sequence[str] | None = None,
    roi_settings: Sequence[str] | None = None,
    rate_points: Sequence[int] | None = None,
    deadband: float = DEADBAND,
    w: float = ROI_WEIGHT,
    seeds: dict | None = None,
    bd_variant: str = "cubic",
) -> RunReport:
    """Group episode logs by (agent, ROI setting, rate point) and average over frames.

    Explicitly requested groups with no episodes are omitted and noted.
    When ``anchor`` names an agent, each other agent gets a BD-rate per ROI
    setting from the per-rate-point (mean bits, mean quality) curves; a
    non-overlapping pair is recorded as ``None`` with a note.
    """
    logs = list(logs)
    buckets: dict = {}
    for e in logs:
        buckets.setdefault(_group_key(e), []).append(e)
    if agents is None and roi_settings is None and rate_points is None:
        keys = sorted(buckets)
    else:
        agents = agents or sorted({k[0] for k in buckets})
        roi_settings = roi_settings or sorted({k[1] for k in buckets})
        rate_points = rate_points or sorted({k[2] for k in buckets})
        keys = list(itertools.product(agents, roi_settings, [int(p) for p in rate_points]))
    groups, notes = [], []
    for key in keys:
        eps = buckets.get(key)
        if not eps:
            notes.append(f"no episodes for agent={key[0]} roi={key[1]} qp_l={key[2]}; omitted")
            continue
        devs = [rate_deviation(e.total_bits, e.budget, deadband) for e in eps]
        raw = [100.0 * abs(e.signed_deviation) for e in eps]
        groups.append(
            GroupStats(
                agent=key[0],
                roi_setting=key[1],
                qp_l=key[2],
                n_frames=len(eps),
                mean_deviation=float(np.mean(devs)),
                mean_abs_deviation=float(np.mean(raw)),
                mean_bits=float(np.mean([e.total_bits for e in eps])),
                mean_quality=float(np.mean([episode_quality(e, w) for e in eps])),
            )
        )
    bd = {}
    if anchor is not None:
        curves: dict = {}
        for g in groups:
            curves.setdefault((g.agent, g.roi_setting), []).append(RdPoint(g.mean_bits, g.mean_quality))
        for (a, s), pts in sorted(curves.items()):
            ref = curves.get((anchor, s))
            if ref is None:
                notes.append(f"no anchor curve for roi={s}; BD-rate skipped")
                continue
            try:
                bd[(a, s)] = 0.0 if a == anchor else bd_rate(ref, pts, bd_variant)
            except NoOverlapError as exc:
                bd[(a, s)] = None
                notes.append(f"BD-rate {a} vs {anchor} at roi={s}: {exc}")
            except ValueError as exc:
                bd[(a, s)] = None
                notes.append(f"BD-rate {a} vs {anchor} at roi={s} unavailable: {exc}")
    return RunReport(groups, bd, anchor, len(logs), dict(seeds or {}), notes)
