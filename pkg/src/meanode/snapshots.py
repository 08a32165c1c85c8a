"""Binary snapshots of network parameters with a JSON sidecar.

Layout of ``<name>.bin`` (little-endian):

    uint32 D, uint32 L, uint32 M, uint32 p, 16 bytes ASCII block tag,
    uint64 iteration, then L*M*p float64 parameters in row-major (L, M, p)
    order.

``<name>.json`` holds the TrainConfig and a ``reference`` flag.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from meanode.blocks import block_from_config
from meanode.config import TrainConfig
from meanode.errors import NonFiniteError, ShapeError, SnapshotError
from meanode.resnet import NetParams
from meanode.shared import write_json

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<4I16sQ")
TAG_BYTES = 16


@dataclass(frozen=True)
class Snapshot:
    net: NetParams
    iteration: int
    config: TrainConfig
    reference: bool = False


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_snapshot(
    path: str | Path,
    net: NetParams,
    iteration: int,
    config: TrainConfig,
    *,
    reference: bool = False,
) -> Path:
    """Write the parameter file and its sidecar; returns the parameter path."""
    path = Path(path)
    tag = net.kind.tag.encode("ascii")
    if len(tag) > TAG_BYTES:
        raise SnapshotError(f"block tag {net.kind.tag!r} exceeds {TAG_BYTES} bytes")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = HEADER.pack(net.D, net.L, net.M, net.p, tag.ljust(TAG_BYTES, b"\0"), iteration)
    body = np.ascontiguousarray(net.params, dtype="<f8").tobytes()
    path.write_bytes(header + body)
    write_json(
        sidecar_path(path),
        {"config": config.model_dump(mode="json"), "reference": reference, "iteration": iteration},
    )
    logger.debug("Saved snapshot k=%s to %s", iteration, path)
    return path


def load_snapshot(path: str | Path) -> Snapshot:
    path = Path(path)
    try:
        raw = path.read_bytes()
        meta = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise SnapshotError(f"missing snapshot file: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise SnapshotError(f"{sidecar_path(path)}: malformed sidecar ({e})") from e

    if len(raw) < HEADER.size:
        raise SnapshotError(f"{path}: truncated header")
    D, L, M, p, tag_raw, iteration = HEADER.unpack_from(raw)
    tag = tag_raw.rstrip(b"\0").decode("ascii")
    expected = HEADER.size + 8 * L * M * p
    if len(raw) != expected:
        raise SnapshotError(f"{path}: expected {expected} bytes, found {len(raw)}")

    try:
        config = TrainConfig.model_validate(meta["config"])
    except (KeyError, ValidationError) as e:
        raise SnapshotError(f"{sidecar_path(path)}: invalid config ({e})") from e
    kind = block_from_config(config)
    if kind.tag != tag:
        raise SnapshotError(f"{path}: block tag {tag!r} disagrees with sidecar {kind.tag!r}")

    params = np.frombuffer(raw, dtype="<f8", offset=HEADER.size).reshape(L, M, p)
    try:
        net = NetParams(kind, D, params.astype(np.float64))
    except (ShapeError, NonFiniteError) as e:
        raise SnapshotError(f"{path}: {e}") from e
    return Snapshot(net, iteration, config, bool(meta.get("reference", False)))
