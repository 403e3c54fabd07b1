"""Binary checkpoint format for agents.

Layout of ``<name>.ckpt`` (little-endian)::

    8 bytes   magic  b"D3QNCKPT"
    uint32    format version
    uint32    header length N
    N bytes   UTF-8 JSON header: architecture (layer specs), variant, preset,
              section names and array shapes
    ...       float32 arrays, section by section, in declaration order

Sections are ``online``, ``target``, ``adam_m``, ``adam_v``. A JSON sidecar
``<name>.json`` carries training metadata (counters, RNG states, config) and
an optional ``<name>.replay.npz`` holds the replay buffer for exact resume.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import neuro
from .errors import CheckpointError
from .neuro import LayerSpec, NetParams
from .qagent import AgentConfig, QAgent

MAGIC = b"D3QNCKPT"
FORMAT_VERSION = 1
SECTIONS = ("online", "target", "adam_m", "adam_v")
_LE_F32 = np.dtype("<f4")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def replay_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".replay.npz")


def save_checkpoint(
    agent: QAgent,
    path: Union[str, Path],
    metadata: Optional[dict] = None,
    save_replay: bool = False,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "online": agent.online.flat,
        "target": agent.target.flat,
        "adam_m": agent.adam.m,
        "adam_v": agent.adam.v,
    }
    header = {
        "architecture": agent.online.architecture(),
        "variant": agent.variant,
        "preset": agent.preset,
        "sections": list(SECTIONS),
        "shapes": [list(a.shape) for a in agent.online.arrays()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for name in SECTIONS:
        chunks.append(np.ascontiguousarray(arrays[name], dtype=_LE_F32).tobytes())
    _atomic_write(path, b"".join(chunks))

    meta = {
        "agent_config": agent.config.to_dict(),
        "preset": agent.preset,
        "input_size": agent.input_size,
        "global_step": agent.global_step,
        "n_updates": agent.n_updates,
        "next_sync": agent.next_sync,
        "adam_t": agent.adam.t,
        "online_version": agent.online.version,
        "online_digest": agent.online.digest(),
        "explore_rng": agent.explore_rng.bit_generator.state,
        "replay_rng": agent.replay_rng.bit_generator.state,
        "has_replay": save_replay,
    }
    meta.update(metadata or {})
    _atomic_write(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True).encode())
    if save_replay:
        tmp = path.with_name(path.stem + ".replay.tmp.npz")
        np.savez(tmp, **agent.buffer.state_dict())
        os.replace(tmp, replay_path(path))
    return path


def _read_section(blob: memoryview, index: int, size: int) -> np.ndarray:
    return np.frombuffer(blob, dtype=_LE_F32, count=size, offset=index * size * 4).astype(np.float32)


def read_header(path: Union[str, Path]) -> tuple[dict, bytes]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    if 16 + hlen > len(blob):
        raise CheckpointError("checkpoint header is truncated")
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except ValueError as exc:
        raise CheckpointError("checkpoint header is corrupt") from exc
    return header, blob[16 + hlen :]


def load_checkpoint(path: Union[str, Path], expect: Optional[NetParams] = None) -> QAgent:
    """Rebuild an agent from a checkpoint and its sidecar.

    ``expect``, when given, is an architecture the checkpoint must match
    (a shape error is raised otherwise).
    """
    path = Path(path)
    header, payload = read_header(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"missing or corrupt sidecar for {path}") from exc

    arch = header["architecture"]
    if expect is not None and expect.architecture() != arch:
        raise CheckpointError(
            f"checkpoint architecture does not match: expected {expect.architecture()}, found {arch}"
        )
    cfg = AgentConfig(**meta["agent_config"])
    trunk = [LayerSpec.from_dict(d) for d in arch["trunk"]]
    agent = QAgent(cfg, arch["input_size"], preset=header["preset"], seed=0)
    template = neuro.init_params(
        arch["input_size"], trunk,
        [(name, [LayerSpec.from_dict(d) for d in specs]) for name, specs in arch["heads"]],
        rng=np.random.default_rng(0),
    )
    if agent.online.architecture() != arch:
        agent.online = template
        agent.target = neuro.clone_params(template)
        agent.adam = neuro.AdamState.for_params(template, lr=cfg.lr)
    size = template.flat.size
    expected = 4 * len(SECTIONS) * size
    if len(payload) != expected:
        raise CheckpointError(
            f"checkpoint payload is {len(payload)} bytes, expected {expected} (truncated or wrong shape)"
        )
    blob = memoryview(payload)
    agent.online.flat[...] = _read_section(blob, 0, size)
    agent.target.flat[...] = _read_section(blob, 1, size)
    agent.adam.m = _read_section(blob, 2, size)
    agent.adam.v = _read_section(blob, 3, size)
    agent.adam.t = int(meta["adam_t"])
    agent.global_step = int(meta["global_step"])
    agent.n_updates = int(meta["n_updates"])
    agent.next_sync = int(meta["next_sync"])
    agent.online.version = int(meta.get("online_version", 0))
    agent.explore_rng.bit_generator.state = meta["explore_rng"]
    agent.replay_rng.bit_generator.state = meta["replay_rng"]
    if meta.get("has_replay") and replay_path(path).exists():
        with np.load(replay_path(path)) as data:
            agent.buffer.load_state_dict({k: data[k] for k in data.files})
    agent.metadata = meta
    return agent
