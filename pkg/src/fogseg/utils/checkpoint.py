"""
Checkpoint Management Module
------------------------------------------------------------------------------------
This module provides functionality for saving and loading model checkpoints and loss
logs during fogseg training runs.

The module handles persistent storage of training progress, enabling:
- Resumption of interrupted runs from the ``latest`` pointer
- Hand-off of trained weights between the protocol steps (train -> finetune -> eval)
- Byte-exact save -> load -> save round trips (no timestamps are stored)

Binary layout (little-endian)::

    b"FOGSEG01"
    u32 config length, config JSON (sorted keys, includes "kind")
    u32 epoch, u64 seed
    u32 entry count, then per entry:
        u16 name length, name (utf-8), u8 dtype tag (0 = float32), u8 rank, rank x u32 dims, values
    u8 optimizer flag; when 1: u32 group count, then per group:
        u16 name length, name, u64 step, entries for the first moments, entries for the second

Functions:
    save_checkpoint: Atomically write registry (+ optimizer) state
    load_checkpoint: Read a checkpoint and copy it into a registry / optimizers
    read_checkpoint: Parse a checkpoint without applying it
    write_latest / read_latest: The ``latest`` pointer file in a run directory
    flush_chunk: Append accumulated loss rows to a CSV file

Dependencies:
    - numpy: value (de)serialization
    - pandas: CSV loss logs
    - utils.logger: operation logging
"""

import io
import json
import os
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, NamedTuple, Optional

import numpy as np
import pandas as pd

from .. import config
from ..errors import CheckpointError
from .logger import get_logger

logger = get_logger(__name__)

MAGIC = b"FOGSEG01"
DTYPE_F32 = 0

# ----------------------------------------------------------------------------------------------------------


class CheckpointData(NamedTuple):
    config: Dict[str, Any]
    epoch: int
    seed: int
    state: Dict[str, np.ndarray]
    optimizers: Dict[str, Dict[str, Any]]

    @property
    def kind(self) -> str:
        return self.config.get('kind', '')


def _write_entries(f: BinaryIO, entries: Dict[str, np.ndarray]) -> None:
    f.write(struct.pack('<I', len(entries)))
    for name, value in entries.items():
        raw_name = name.encode('utf-8')
        value = np.asarray(value)
        f.write(struct.pack('<H', len(raw_name)))
        f.write(raw_name)
        f.write(struct.pack('<BB', DTYPE_F32, value.ndim))
        f.write(struct.pack(f'<{value.ndim}I', *value.shape))
        f.write(np.ascontiguousarray(value, dtype='<f4').tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_entries(f: BinaryIO) -> Dict[str, np.ndarray]:
    (count,) = struct.unpack('<I', _read_exact(f, 4))
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack('<H', _read_exact(f, 2))
        name = _read_exact(f, name_len).decode('utf-8')
        tag, rank = struct.unpack('<BB', _read_exact(f, 2))
        if tag != DTYPE_F32:
            raise CheckpointError(f"unsupported dtype tag {tag} for '{name}'")
        dims = struct.unpack(f'<{rank}I', _read_exact(f, 4 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(_read_exact(f, 4 * size), dtype='<f4').astype(np.float32).reshape(dims)
        entries[name] = values
    return entries


def encode_checkpoint(state: Dict[str, np.ndarray], run_config: Dict[str, Any], epoch: int, seed: int,
                      optimizers: Optional[Dict[str, Any]] = None) -> bytes:
    buf = io.BytesIO()
    blob = json.dumps(run_config, sort_keys=True, separators=(',', ':'), default=str).encode('utf-8')
    buf.write(MAGIC)
    buf.write(struct.pack('<I', len(blob)))
    buf.write(blob)
    buf.write(struct.pack('<IQ', epoch, seed))
    _write_entries(buf, state)
    if optimizers:
        buf.write(struct.pack('<BI', 1, len(optimizers)))
        for group, opt in optimizers.items():
            opt_state = opt.state_dict() if hasattr(opt, 'state_dict') else opt
            raw = group.encode('utf-8')
            buf.write(struct.pack('<H', len(raw)))
            buf.write(raw)
            buf.write(struct.pack('<Q', int(opt_state['step'])))
            _write_entries(buf, opt_state['m'])
            _write_entries(buf, opt_state['v'])
    else:
        buf.write(struct.pack('<B', 0))
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> CheckpointData:
    f = io.BytesIO(data)
    if _read_exact(f, len(MAGIC)) != MAGIC:
        raise CheckpointError("not a fogseg checkpoint (bad magic)")
    (blob_len,) = struct.unpack('<I', _read_exact(f, 4))
    try:
        run_config = json.loads(_read_exact(f, blob_len).decode('utf-8'))
    except ValueError as e:
        raise CheckpointError(f"corrupt config blob: {e}") from e
    epoch, seed = struct.unpack('<IQ', _read_exact(f, 12))
    state = _read_entries(f)
    optimizers: Dict[str, Dict[str, Any]] = {}
    (flag,) = struct.unpack('<B', _read_exact(f, 1))
    if flag:
        (groups,) = struct.unpack('<I', _read_exact(f, 4))
        for _ in range(groups):
            (name_len,) = struct.unpack('<H', _read_exact(f, 2))
            group = _read_exact(f, name_len).decode('utf-8')
            (step,) = struct.unpack('<Q', _read_exact(f, 8))
            optimizers[group] = {'step': step, 'm': _read_entries(f), 'v': _read_entries(f)}
    if f.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return CheckpointData(run_config, epoch, seed, state, optimizers)

# ----------------------------------------------------------------------------------------------------------


def save_checkpoint(path: Path, registry, run_config: Dict[str, Any], epoch: int = 0, seed: int = 0,
                    optimizers: Optional[Dict[str, Any]] = None) -> Path:
    """
    Atomically write a checkpoint.

    Args:
        path: Target file
        registry: ParamRegistry whose parameters and buffers are stored
        run_config: JSON-serializable config, should carry ``kind``
        optimizers: Optional ``{group: AdamState}``

    Raises:
        CheckpointError: The write failed (the temp file is removed)
    """
    path = Path(path)
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        data = encode_checkpoint(registry.state(), run_config, epoch, seed, optimizers)
        # Write to a temporary file first to avoid corruption if the process is interrupted
        with open(tmp_path, "wb") as f:
            f.write(data)
        # Atomic replacement of the checkpoint file
        os.replace(tmp_path, path)

        logger.info("Saved checkpoint", extra={
            "operation": "save_checkpoint",
            "path": str(path),
            "kind": run_config.get('kind'),
            "epoch": epoch,
            "checkpoint_size_bytes": os.path.getsize(path),
            "entries": len(registry.state()),
        })
        return path
    except Exception as e:
        logger.error(f"Failed to save checkpoint: {str(e)}", extra={
            "operation": "save_checkpoint",
            "path": str(path),
            "error": str(e),
        })
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise CheckpointError(f"failed to save checkpoint {path}: {e}") from e


def read_checkpoint(path: Path) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def load_checkpoint(path: Path, registry=None, optimizers: Optional[Dict[str, Any]] = None) -> CheckpointData:
    """
    Read ``path`` and copy its state into ``registry`` (names must match exactly) and into
    the matching ``optimizers`` groups.
    """
    try:
        data = read_checkpoint(path)
        if registry is not None:
            registry.load_state(data.state)
        for group, opt in (optimizers or {}).items():
            if group not in data.optimizers:
                raise CheckpointError(f"checkpoint has no optimizer state for '{group}'")
            opt.load_state_dict(data.optimizers[group])
    except CheckpointError as e:
        logger.error(f"Failed to load checkpoint: {str(e)}", extra={
            "operation": "load_checkpoint",
            "path": str(path),
            "error": str(e),
            "status": "error",
        })
        raise

    logger.info("Loaded checkpoint", extra={
        "operation": "load_checkpoint",
        "path": str(path),
        "kind": data.kind,
        "epoch": data.epoch,
        "entries": len(data.state),
        "status": "success",
    })
    return data

# ----------------------------------------------------------------------------------------------------------


def epoch_path(run_dir: Path, epoch: int) -> Path:
    return Path(run_dir) / f"epoch_{epoch:03d}{config.CKPT_SUFFIX}"


def write_latest(run_dir: Path, checkpoint_path: Path) -> None:
    pointer = Path(run_dir) / config.LATEST_POINTER
    tmp = pointer.with_name(pointer.name + ".tmp")
    tmp.write_text(Path(checkpoint_path).name + "\n", encoding='utf-8')
    os.replace(tmp, pointer)


def read_latest(run_dir: Path) -> Optional[Path]:
    pointer = Path(run_dir) / config.LATEST_POINTER
    if not pointer.exists():
        logger.info("No checkpoint pointer found", extra={
            "operation": "load_checkpoint",
            "run_dir": str(run_dir),
            "status": "not_found",
        })
        return None
    target = Path(run_dir) / pointer.read_text(encoding='utf-8').strip()
    if not target.exists():
        raise CheckpointError(f"latest pointer names a missing checkpoint: {target}")
    return target

# ----------------------------------------------------------------------------------------------------------


def flush_chunk(csv_path: Path, chunk_buffer: List[Dict[str, Any]]) -> None:
    if not chunk_buffer:
        return  # nothing to write

    df = pd.DataFrame(chunk_buffer)

    mode = 'a' if os.path.exists(csv_path) else 'w'
    header = (mode == 'w')
    df.to_csv(csv_path, mode=mode, header=header, index=False)

    chunk_buffer.clear()
    return None
