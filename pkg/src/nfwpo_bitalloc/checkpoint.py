"""Deterministic binary checkpoints for networks and whole training sessions.

Layout of a bundle file::

    NFWPO-BUNDLE <version>\\n
    <header length in bytes>\\n
    <JSON header, sorted keys>\\n
    <raw little-endian array bytes, in header order>

The header records each array's name, dtype, shape and byte offset plus a
free-form ``meta`` object. Nothing time-dependent is written, so identical
state produces byte-identical files (``numpy.savez`` embeds zip timestamps,
which is why it is not used).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .baselines import (
    DualCriticAgent,
    DualCriticConfig,
    ProjectionDdpgAgent,
    ProjectionDdpgConfig,
    SingleCriticAgent,
    SingleCriticConfig,
)
from .nfwpo import NfwpoAgent, NfwpoConfig
from .nn import MlpNet
from .rl import TrainingSession

MAGIC = b"NFWPO-BUNDLE"
VERSION = 1

AGENT_KINDS = {
    "nfwpo": (NfwpoConfig, NfwpoAgent),
    "single": (SingleCriticConfig, SingleCriticAgent),
    "dual": (DualCriticConfig, DualCriticAgent),
    "proj-ddpg": (ProjectionDdpgConfig, ProjectionDdpgAgent),
}


class CheckpointError(ValueError):
    """A bundle is malformed, of the wrong version, or does not match the caller."""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def save_bundle(path, arrays: dict, meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype == object:
            raise CheckpointError(f"array {name!r} has object dtype")
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": _jsonable(meta)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + b" %d\n" % VERSION)
        fh.write(b"%d\n" % len(header))
        fh.write(header + b"\n")
        for raw in chunks:
            fh.write(raw)


def load_bundle(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    try:
        first, rest = data.split(b"\n", 1)
        magic, version = first.split(b" ")
        hlen_line, rest = rest.split(b"\n", 1)
        hlen = int(hlen_line)
    except ValueError as exc:
        raise CheckpointError(f"{path}: not a checkpoint bundle") from exc
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint bundle")
    if int(version) != VERSION:
        raise CheckpointError(f"{path}: bundle version {int(version)} is not supported")
    header = json.loads(rest[:hlen])
    body = rest[hlen + 1 :]
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(body, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(dt.newbyteorder("="))
    return arrays, header["meta"]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# single networks


def save_net(path, net: MlpNet) -> None:
    arrays = {f"p{k:03d}": p for k, p in enumerate(net.parameters())}
    meta = {
        "kind": "mlp",
        "sizes": list(net.sizes),
        "output_activation": net.activations[-1],
        "output_scale": net.output_scale,
    }
    save_bundle(path, arrays, meta)


def load_net(path) -> MlpNet:
    arrays, meta = load_bundle(path)
    if meta.get("kind") != "mlp":
        raise CheckpointError(f"{path}: bundle does not hold a network")
    net = MlpNet(meta["sizes"], meta["output_activation"], meta["output_scale"])
    for k, p in enumerate(net.parameters()):
        src = arrays[f"p{k:03d}"]
        if src.shape != p.shape:
            raise CheckpointError(f"{path}: parameter {k} has shape {src.shape}, expected {p.shape}")
        p[...] = src
    return net


# ----------------------------------------------------------------------------
# agents and sessions


def config_to_dict(config) -> dict:
    return _jsonable(dataclasses.asdict(config))


def config_from_dict(kind: str, d: dict):
    if kind not in AGENT_KINDS:
        raise CheckpointError(f"unknown agent kind {kind!r}")
    cls = AGENT_KINDS[kind][0]
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise CheckpointError(f"unknown {kind} config keys: {sorted(unknown)}")
    return cls(**d)


def build_agent(kind: str, config, seed: int):
    if kind not in AGENT_KINDS:
        raise CheckpointError(f"unknown agent kind {kind!r}")
    return AGENT_KINDS[kind][1](config, seed)


def new_session(kind: str, config, frame_source, seed: int) -> TrainingSession:
    return TrainingSession(build_agent(kind, config, seed), frame_source, config, seed)


def save_session(path, session: TrainingSession, extra: dict | None = None) -> None:
    """Write everything needed to resume ``session`` (networks, optimizers, buffer, RNGs)."""
    arrays, meta = session.state_dict()
    meta = dict(meta)
    meta["kind"] = session.agent.kind
    meta["config"] = config_to_dict(session.config)
    meta["extra"] = dict(extra or {})
    save_bundle(path, arrays, meta)


def load_session(path, frame_source) -> TrainingSession:
    """Rebuild a session from a bundle; ``frame_source`` is not stored and must be supplied."""
    arrays, meta = load_bundle(path)
    kind = meta.get("kind")
    config = config_from_dict(kind, meta["config"])
    session = new_session(kind, config, frame_source, int(meta["seed"]))
    session.load_state_dict(arrays, meta)
    return session


def load_agent(path):
    """Only the agent from a session bundle (for evaluation)."""
    arrays, meta = load_bundle(path)
    kind = meta.get("kind")
    config = config_from_dict(kind, meta["config"])
    agent = build_agent(kind, config, int(meta["seed"]))
    agent.load_state(arrays, meta["agent"])
    return agent, meta
