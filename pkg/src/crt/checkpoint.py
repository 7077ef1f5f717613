"""Checkpoints: a JSON manifest line plus a flat little-endian float64 stream.

The manifest names every array with its shape, in the order the values
follow; reloading rebuilds the parameter tree from the stored config and
overwrites each array in place, so a save/load round trip is bit-exact.
Writes go to a temp file renamed into place.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Vocab
from .errors import ContractError
from .model import ModelConfig, ModelParams, init_model_params, named_arrays

FORMAT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams,
                    vocab: Optional[Vocab] = None) -> None:
    path = Path(path)
    arrays = named_arrays(params)
    manifest = {
        "version": FORMAT_VERSION,
        "config": asdict(cfg),
        "vocab": None if vocab is None else {"mode": vocab.mode, "symbols": vocab.id_to_symbol},
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8"))
        fh.write(b"\n")
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (config, params, vocab or None)."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline()
        blob = fh.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {manifest.get('version')!r}")
    cfg = ModelConfig(**manifest["config"])
    params = init_model_params(cfg)
    offset = 0
    stored = {entry["name"]: tuple(entry["shape"]) for entry in manifest["arrays"]}
    live = dict(named_arrays(params))
    if set(stored) != set(live):
        raise ContractError("checkpoint arrays do not match the configured model")
    for entry in manifest["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        target = live[name]
        if target.shape != shape:
            raise ContractError(f"checkpoint array {name} has shape {shape}, expected {target.shape}")
        target[...] = values.reshape(shape)
    if offset != len(blob):
        raise ContractError("checkpoint has trailing bytes; file is corrupt")
    vocab = None
    if manifest.get("vocab"):
        symbols = manifest["vocab"]["symbols"]
        vocab = Vocab(symbol_to_id={s: i for i, s in enumerate(symbols)},
                      id_to_symbol=symbols, mode=manifest["vocab"]["mode"])
    return cfg, params, vocab
