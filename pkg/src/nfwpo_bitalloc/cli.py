"""Command-line entry point: ``nfwpo-bitalloc <command> --config run.json --seed 7``.

Commands
--------
gen-frames  write the evaluation frame set (every ROI setting x rate point)
train       train one agent (shared across rate points, or one per rate point)
eval        greedy roll-outs of a trained agent over the evaluation frames
compare     eval every configured agent, then write the report
report      aggregate existing eval files into the report

Output layout under ``--out``::

    frames.json                      evaluation frame set
    <agent>/checkpoint[_qpNN].bin    resumable training bundle(s)
    <agent>/train_log[_qpNN].csv     per-step training log
    <agent>/eval.csv                 per-frame evaluation results
    report.json, report.txt          rate deviation and BD-rate tables
    heatmap.csv                      per-CTU QP assignments
    config.<command>.json            resolved configuration echo

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .baselines import fixed_qp_allocate
from .codec_env import RATE_POINTS, ROI_POLICIES, CodecEnv, generate_frames, load_frames, make_frame, save_frames
from .metrics import aggregate, episode_quality, rate_deviation
from .nn import NumericError
from .rl import LOG_COLUMNS, EpisodeLog, run_episode

log = logging.getLogger("nfwpo_bitalloc")

COMMANDS = ("gen-frames", "train", "eval", "compare", "report")
AGENTS = ("nfwpo", "single", "dual", "proj-ddpg", "fixed-qp")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
U64 = 2**64


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; maps to exit code 2."""


@dataclass
class RunConfig:
    """Everything a command needs. Loaded from JSON, then overridden by flags."""

    seed: int | None = None
    agent: str = "nfwpo"
    agents: list = field(default_factory=lambda: ["nfwpo", "fixed-qp"])
    rate_points: list = field(default_factory=lambda: list(RATE_POINTS))
    n_ctus: int = 40
    roi_policy: str = "regular"
    eval_roi_policies: list = field(default_factory=lambda: list(ROI_POLICIES))
    n_frames: int = 100
    frames_path: str | None = None
    train_frame_seed: int | None = None
    eval_seed: int | None = None
    per_rate_point: bool = False
    checkpoint_every: int = 0
    fixed_qp_offset: float = 0.0
    deadband: float = 0.05
    bd_variant: str = "cubic"
    agent_config: dict = field(default_factory=dict)
    out: str = "runs"

    def validate(self) -> "RunConfig":
        if self.seed is None:
            raise ConfigError("a seed is required (--seed or \"seed\" in the config file)")
        for name in ("seed", "train_frame_seed", "eval_seed"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < U64):
                raise ConfigError(f"{name} must be an unsigned 64-bit integer, got {v!r}")
        for a in [self.agent, *self.agents]:
            if a not in AGENTS:
                raise ConfigError(f"unknown agent {a!r}; choose from {', '.join(AGENTS)}")
        if not self.rate_points or any(not 0 <= int(p) <= 51 for p in self.rate_points):
            raise ConfigError("rate_points must be a non-empty list of QPs in [0, 51]")
        for p in [self.roi_policy, *self.eval_roi_policies]:
            if p not in ROI_POLICIES:
                raise ConfigError(f"unknown ROI policy {p!r}")
        if self.n_ctus < 1 or self.n_frames < 0 or self.checkpoint_every < 0:
            raise ConfigError("n_ctus must be >= 1; n_frames and checkpoint_every >= 0")
        if self.frames_path is not None and not Path(self.frames_path).is_file():
            raise ConfigError(f"frames_path {self.frames_path} does not exist")
        if self.bd_variant not in ("cubic", "pchip"):
            raise ConfigError(f"unknown BD-rate variant {self.bd_variant!r}")
        if not isinstance(self.agent_config, dict):
            raise ConfigError("agent_config must be an object")
        return self

    @property
    def train_seed(self) -> int:
        return self.seed if self.train_frame_seed is None else self.train_frame_seed

    @property
    def frames_seed(self) -> int:
        return (self.seed + 1) % U64 if self.eval_seed is None else self.eval_seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def agent_config(cfg: RunConfig, kind: str):
    try:
        return ckpt.config_from_dict(kind, dict(cfg.agent_config))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid agent_config for {kind}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def echo_config(cfg: RunConfig, command: str, directory: Path, extra: dict | None = None) -> None:
    payload = {"command": command, "run": cfg.to_dict()}
    payload.update(extra or {})
    _write_json(directory / f"config.{command}.json", payload)


# ----------------------------------------------------------------------------
# frames


def eval_frames(cfg: RunConfig) -> list:
    """The evaluation set: from ``frames_path`` if given, else generated from ``eval_seed``."""
    if cfg.frames_path is not None:
        return load_frames(cfg.frames_path)
    frames = []
    for policy in cfg.eval_roi_policies:
        for qp in cfg.rate_points:
            frames.extend(generate_frames(cfg.frames_seed, cfg.n_frames, cfg.n_ctus, policy, (int(qp),)))
    return frames


def cmd_gen_frames(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "frames.json"
    frames = eval_frames(dataclasses.replace(cfg, frames_path=None))
    save_frames(frames, path)
    echo_config(cfg, "gen-frames", out)
    log.info("wrote %d frames to %s", len(frames), path)
    return path


# ----------------------------------------------------------------------------
# training


def _models(cfg: RunConfig):
    """``(suffix, rate points)`` for each model to train."""
    if cfg.per_rate_point:
        return [(f"_qp{int(p)}", [int(p)]) for p in cfg.rate_points]
    return [("", [int(p) for p in cfg.rate_points])]


def _frame_source(cfg: RunConfig, points: list):
    seed, n, policy = cfg.train_seed, cfg.n_ctus, cfg.roi_policy
    return lambda k: make_frame(seed, k, n, policy, points[k % len(points)])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v)) if isinstance(v, (bool, np.bool_)) else str(v)


def _truncate_log(path: Path, episode: int) -> None:
    """Drop rows for episodes at or after ``episode`` (written after the last checkpoint)."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < episode]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


def _resume_key(meta_config: dict, config) -> tuple[dict, dict]:
    a = {k: v for k, v in meta_config.items() if k != "n_episodes"}
    b = {k: v for k, v in ckpt.config_to_dict(config).items() if k != "n_episodes"}
    return a, b


def train_model(cfg: RunConfig, kind: str, suffix: str, points: list, resume: bool) -> Path:
    config = agent_config(cfg, kind)
    directory = Path(cfg.out) / kind
    directory.mkdir(parents=True, exist_ok=True)
    bundle = directory / f"checkpoint{suffix}.bin"
    log_path = directory / f"train_log{suffix}.csv"
    source = _frame_source(cfg, points)
    provenance = {"train_frame_seed": cfg.train_seed, "rate_points": points, "n_ctus": cfg.n_ctus,
                  "roi_policy": cfg.roi_policy}
    if resume and bundle.exists():
        arrays, meta = ckpt.load_bundle(bundle)
        if meta.get("kind") != kind:
            raise ConfigError(f"{bundle} holds a {meta.get('kind')!r} agent, not {kind!r}")
        if int(meta["seed"]) != cfg.seed:
            raise ConfigError(f"{bundle} was trained with seed {meta['seed']}, not {cfg.seed}")
        old, new = _resume_key(meta["config"], config)
        if old != new or meta.get("extra") != ckpt._jsonable(provenance):
            raise ConfigError(f"{bundle} was trained with a different configuration; refusing to resume")
        session = ckpt.load_session(bundle, source)
        session.config = config
        _truncate_log(log_path, session.progress.episode)
        log.info("resuming %s at episode %d", bundle, session.progress.episode)
    else:
        session = ckpt.new_session(kind, config, source, cfg.seed)
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)
    step = cfg.checkpoint_every or config.n_episodes
    while True:
        target = min(config.n_episodes, session.progress.episode + step)
        rows = session.run(target, [])
        with open(log_path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerows([_fmt(v) for v in r] for r in rows)
        ckpt.save_session(bundle, session, provenance)
        if session.progress.episode >= config.n_episodes:
            break
    echo_config(cfg, "train", directory, {"agent_config": ckpt.config_to_dict(config)})
    log.info("trained %s%s for %d episodes -> %s", kind, suffix, session.progress.episode, bundle)
    return bundle


def cmd_train(cfg: RunConfig, resume: bool = False) -> list[Path]:
    if cfg.agent == "fixed-qp":
        raise ConfigError("the fixed-qp allocator has nothing to train")
    return [train_model(cfg, cfg.agent, suffix, points, resume) for suffix, points in _models(cfg)]


# ----------------------------------------------------------------------------
# evaluation


EVAL_COLUMNS = (
    "agent",
    "roi_setting",
    "qp_l",
    "frame_id",
    "budget",
    "total_bits",
    "deviation_pct",
    "signed_deviation",
    "quality_db",
    "qps",
    "raw_actions",
    "bits",
    "mse",
    "roi",
)


def _policies(cfg: RunConfig, kind: str):
    """Map rate point -> greedy policy for ``kind``."""
    if kind == "fixed-qp":
        return None
    directory = Path(cfg.out) / kind
    out = {}
    for suffix, points in _models(cfg):
        bundle = directory / f"checkpoint{suffix}.bin"
        if not bundle.exists():
            raise FileNotFoundError(f"missing checkpoint {bundle}; run train first")
        agent, _ = ckpt.load_agent(bundle)
        for p in points:
            out[p] = agent.greedy
    return out


def evaluate_agent(cfg: RunConfig, kind: str, frames) -> list[EpisodeLog]:
    policies = _policies(cfg, kind)
    env = CodecEnv()
    logs = []
    for f in frames:
        if policies is None:
            logs.append(fixed_qp_allocate(f, f.qp_l + cfg.fixed_qp_offset, env))
        else:
            if f.qp_l not in policies:
                raise ConfigError(f"no trained model for rate point {f.qp_l}")
            logs.append(run_episode(env, f, policies[f.qp_l], agent=kind))
        logs[-1].agent = kind
    return logs


def _join(a) -> str:
    return " ".join(_fmt(v) for v in np.asarray(a).tolist())


def write_eval_csv(path: Path, logs, deadband: float) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for e in logs:
            w.writerow(
                [
                    e.agent,
                    e.roi_setting,
                    e.qp_l,
                    e.frame_id,
                    _fmt(e.budget),
                    _fmt(e.total_bits),
                    _fmt(rate_deviation(e.total_bits, e.budget, deadband)),
                    _fmt(e.signed_deviation),
                    _fmt(episode_quality(e)),
                    _join(e.qps),
                    _join(e.raw_actions),
                    _join(e.bits),
                    _join(e.mse),
                    _join(e.roi.astype(int)),
                ]
            )


def read_eval_csv(path: Path) -> list[EpisodeLog]:
    def arr(s, dtype=np.float64):
        return np.array([float(x) for x in s.split()], dtype=dtype) if s else np.zeros(0, dtype)

    logs = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            logs.append(
                EpisodeLog(
                    frame_id=int(r["frame_id"]),
                    qp_l=int(r["qp_l"]),
                    roi_setting=r["roi_setting"],
                    budget=float(r["budget"]),
                    qps=arr(r["qps"]),
                    raw_actions=arr(r["raw_actions"]),
                    bits=arr(r["bits"]),
                    mse=arr(r["mse"]),
                    roi=arr(r["roi"]).astype(bool),
                    agent=r["agent"],
                )
            )
    return logs


def cmd_eval(cfg: RunConfig, kind: str | None = None) -> Path:
    kind = kind or cfg.agent
    frames = eval_frames(cfg)
    logs = evaluate_agent(cfg, kind, frames)
    path = Path(cfg.out) / kind / "eval.csv"
    write_eval_csv(path, logs, cfg.deadband)
    echo_config(cfg, "eval", path.parent)
    log.info("evaluated %s on %d frames -> %s", kind, len(logs), path)
    return path


# ----------------------------------------------------------------------------
# reports


def write_heatmap(path: Path, logs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("agent", "roi_setting", "qp_l", "frame_id", "ctu", "qp", "roi"))
        for e in logs:
            for i, (qp, roi) in enumerate(zip(e.qps, e.roi)):
                w.writerow((e.agent, e.roi_setting, e.qp_l, e.frame_id, i, _fmt(qp), int(roi)))


def cmd_report(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    logs = []
    for kind in cfg.agents:
        path = out / kind / "eval.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing {path}; run eval or compare first")
        logs.extend(read_eval_csv(path))
    anchor = "fixed-qp" if "fixed-qp" in cfg.agents else None
    report = aggregate(
        logs,
        anchor=anchor,
        agents=list(cfg.agents),
        deadband=cfg.deadband,
        seeds={"seed": cfg.seed, "train_frame_seed": cfg.train_seed, "eval_seed": cfg.frames_seed},
        bd_variant=cfg.bd_variant,
    )
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    write_heatmap(out / "heatmap.csv", logs)
    echo_config(cfg, "report", out)
    return out / "report.json"


def cmd_compare(cfg: RunConfig) -> Path:
    for kind in cfg.agents:
        cmd_eval(cfg, kind)
    return cmd_report(cfg)


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nfwpo-bitalloc", description="Constrained CTU bit allocation toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config file)")
    p.add_argument("--agent", choices=AGENTS, help="agent kind for train/eval")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", action="store_true", help="continue training from an existing checkpoint")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "agent": args.agent, "out": args.out})
        if args.command == "gen-frames":
            cmd_gen_frames(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "compare":
            cmd_compare(cfg)
        else:
            cmd_report(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ckpt.CheckpointError, FileNotFoundError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
