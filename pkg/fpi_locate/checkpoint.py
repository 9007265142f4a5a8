"""Binary checkpoint format.

Layout::

    b"FPI1"                      magic
    uint32 little-endian         header length in bytes
    JSON header                  {"config", "normalization", "params", "step"}
    float32 little-endian        parameters concatenated in manifest order

The header is serialised with sorted keys, so equal models give equal bytes.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .common import STREAM_INIT
from .config import RunConfig
from .fusion import FPIModel
from .geodata import ChannelStats
from .numkernel import RngState
from .validation import ConfigError, DataError

logger = logging.getLogger("fpi_locate.checkpoint")

MAGIC = b"FPI1"
_LEN = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    step: int = 0
    stats: ChannelStats = ChannelStats()


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def encode_checkpoint(
    config: RunConfig,
    params: dict[str, np.ndarray],
    step: int = 0,
    stats: ChannelStats | None = None,
) -> bytes:
    manifest = [{"name": name, "shape": list(arr.shape)} for name, arr in params.items()]
    header = {
        "config": config.to_dict(),
        "normalization": (stats or ChannelStats()).to_dict(),
        "params": manifest,
        "step": int(step),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in params.values())
    return MAGIC + _LEN.pack(len(header_bytes)) + header_bytes + payload


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    if len(blob) < 8:
        raise DataError("truncated checkpoint header")
    (length,) = _LEN.unpack_from(blob, 4)
    end = 8 + length
    if len(blob) < end:
        raise DataError("truncated checkpoint header")
    try:
        header = json.loads(blob[8:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"malformed checkpoint header: {e}") from e
    for key in ("config", "params", "step"):
        if key not in header:
            raise DataError(f"checkpoint header lacks {key!r}")

    params: dict[str, np.ndarray] = {}
    offset = end
    for entry in header["params"]:
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise DataError(f"checkpoint payload too short for {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = arr.reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"checkpoint has {len(blob) - offset} trailing bytes")

    try:
        config = RunConfig.from_dict(header["config"])
    except ConfigError as e:
        raise DataError(f"checkpoint configuration is invalid: {e}") from e
    stats = ChannelStats.from_dict(header["normalization"]) if "normalization" in header else ChannelStats()
    return Checkpoint(config=config, params=params, step=int(header["step"]), stats=stats)


def save_checkpoint(path: str | Path, model: FPIModel, config: RunConfig, step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = {name: t.data for name, t in model.parameters().items()}
    _atomic_write(path, encode_checkpoint(config, params, step, model.stats))
    logger.info("Checkpoint written to %s (step %d)", path, step)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(blob)


def restore_model(ckpt: Checkpoint) -> FPIModel:
    """Build the model described by the checkpoint and load its parameters."""
    model = FPIModel.create(ckpt.config.model, RngState(ckpt.config.seed).generator(STREAM_INIT))
    named = model.parameters()
    if list(named) != list(ckpt.params):
        missing = sorted(set(named) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(named))
        raise DataError(f"checkpoint parameters do not match the model (missing {missing}, extra {extra})")
    for name, tensor in named.items():
        values = ckpt.params[name]
        if values.shape != tensor.shape:
            raise DataError(f"{name}: checkpoint shape {values.shape}, model shape {tensor.shape}")
        tensor.data = values.copy()
    model.stats = ckpt.stats
    return model


def check_compatible(ckpt: Checkpoint, config: RunConfig) -> None:
    """A checkpoint and a ``--config`` must describe the same architecture."""
    if ckpt.config.model != config.model:
        raise ConfigError(
            "checkpoint model configuration conflicts with --config: "
            f"{ckpt.config.model} vs {config.model}"
        )
