"""Checkpoint and posterior files.

Both share one container, all integers little-endian::

    magic (4 bytes) | u8 version=1 | u32 header_len | header (UTF-8 JSON) |
    u64 count | count x f64

Checkpoints use magic ``SWGC`` and store the flat parameter vector.
Posteriors use ``SWGP`` and store ``mean``, ``sq_mean`` and then each
deviation column (oldest first).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Standardizer
from .errors import FormatError, MissingArtifactError
from .model import ModelSpec, ParamVector
from .swag import SwagPosterior

CHECKPOINT_MAGIC = b"SWGC"
POSTERIOR_MAGIC = b"SWGP"
VERSION = 1


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def encode(magic: bytes, header: dict, payload: np.ndarray) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(payload, dtype="<f8").ravel()
    return b"".join([
        magic,
        struct.pack("<BI", VERSION, len(head)),
        head,
        struct.pack("<Q", payload.size),
        payload.tobytes(),
    ])


def decode(blob: bytes, magic: bytes, source: str) -> tuple[dict, np.ndarray]:
    if blob[:4] != magic:
        raise FormatError(f"{source}: bad magic {blob[:4]!r}, expected {magic!r}")
    try:
        version, hlen = struct.unpack_from("<BI", blob, 4)
        if version != VERSION:
            raise FormatError(f"{source}: unsupported version {version}")
        header = json.loads(blob[9 : 9 + hlen].decode("utf-8"))
        (count,) = struct.unpack_from("<Q", blob, 9 + hlen)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt header ({exc})") from None
    start = 17 + hlen
    if len(blob) - start != 8 * count:
        raise FormatError(f"{source}: payload holds {len(blob) - start} bytes, header promises {8 * count}")
    return header, np.frombuffer(blob, dtype="<f8", offset=start).astype(np.float64)


def _read(path, magic: bytes) -> tuple[dict, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{path} does not exist")
    return decode(path.read_bytes(), magic, str(path))


def _layout_json(layout) -> list:
    return [[name, list(shape)] for name, shape in layout]


def _layout_from_json(obj) -> tuple:
    return tuple((name, tuple(shape)) for name, shape in obj)


@dataclass
class HeadFile:
    """Everything needed to score features with a stored model."""

    spec: ModelSpec
    standardizer: Standardizer | None
    header: dict


def write_checkpoint(
    path,
    spec: ModelSpec,
    params: ParamVector,
    *,
    iteration: int,
    seed: int,
    loss: str,
    standardizer: Standardizer | None = None,
    extra: dict | None = None,
) -> None:
    header = {
        "kind": "checkpoint",
        "model": spec.to_dict(),
        "layout": _layout_json(params.layout),
        "iteration": iteration,
        "seed": seed,
        "loss": loss,
        "standardizer": standardizer.to_dict() if standardizer else None,
    }
    if extra:
        header.update(extra)
    Path(path).write_bytes(encode(CHECKPOINT_MAGIC, header, params.values))


def read_checkpoint(path) -> tuple[HeadFile, ParamVector]:
    header, values = _read(path, CHECKPOINT_MAGIC)
    spec = ModelSpec.from_dict(header["model"])
    layout = _layout_from_json(header["layout"])
    if layout != spec.layout():
        raise FormatError(f"{path}: stored layout does not match its model description")
    std = Standardizer.from_dict(header["standardizer"]) if header.get("standardizer") else None
    return HeadFile(spec, std, header), ParamVector(values, layout)


def write_posterior(
    path,
    spec: ModelSpec,
    posterior: SwagPosterior,
    *,
    mode: str,
    standardizer: Standardizer | None = None,
    extra: dict | None = None,
) -> None:
    header = {
        "kind": "posterior",
        "model": spec.to_dict(),
        "layout": _layout_json(posterior.layout),
        "n_collected": posterior.n_collected,
        "rank": posterior.rank,
        "rank_max": posterior.rank_max,
        "mode": mode,
        "standardizer": standardizer.to_dict() if standardizer else None,
    }
    if extra:
        header.update(extra)
    payload = np.concatenate([posterior.mean.values, posterior.sq_mean, posterior.deviations.T.ravel()])
    Path(path).write_bytes(encode(POSTERIOR_MAGIC, header, payload))


def read_posterior(path) -> tuple[HeadFile, SwagPosterior]:
    header, values = _read(path, POSTERIOR_MAGIC)
    spec = ModelSpec.from_dict(header["model"])
    layout = _layout_from_json(header["layout"])
    p = spec.n_params
    rank = int(header["rank"])
    if values.size != p * (2 + rank):
        raise FormatError(f"{path}: payload size {values.size} does not match {p} params x (2 + {rank})")
    deviations = values[2 * p :].reshape(rank, p).T
    post = SwagPosterior.from_arrays(
        layout, values[:p], values[p : 2 * p], deviations, header["n_collected"], header["rank_max"]
    )
    std = Standardizer.from_dict(header["standardizer"]) if header.get("standardizer") else None
    return HeadFile(spec, std, header), post
