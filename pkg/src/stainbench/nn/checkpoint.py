"""Versioned npz checkpoints of named parameter arrays plus a meta block."""

import json
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

CHECKPOINT_FORMAT = "stainbench-checkpoint/1"
_META_KEY = "__meta__"
_PARAM_PREFIX = "param/"


def save_checkpoint(path, arrays, meta=None):
    """Write named float arrays and a JSON-able meta dict to an npz file."""
    meta = dict(meta or {})
    meta["format"] = CHECKPOINT_FORMAT
    payload = {_PARAM_PREFIX + name: np.asarray(arr) for name, arr in arrays.items()}
    payload[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays, meta). Rejects unknown formats."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as npz:
        if _META_KEY not in npz:
            raise CheckpointError(f"{path} is not a stainbench checkpoint")
        meta = json.loads(str(npz[_META_KEY]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
        arrays = {
            key[len(_PARAM_PREFIX):]: npz[key]
            for key in npz.files
            if key.startswith(_PARAM_PREFIX)
        }
    return arrays, meta
