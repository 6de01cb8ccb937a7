"""Binary checkpoint container.

Layout: the magic line ``PATKIT1\\n``, a little-endian uint64 manifest
length, a UTF-8 JSON manifest, then one blob per tensor listed in the
manifest: uint32 ndim, ndim uint32 dims, little-endian float32 values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import ConfigError, FormatError
from .config import PATConfig, from_mapping, to_mapping
from .network import PATNet, build_model
from .train import Adam, TrainState

MAGIC = b"PATKIT1\n"
FORMAT_VERSION = 1


def _write_blob(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_blob(buf: memoryview, pos: int) -> tuple[np.ndarray, int]:
    if pos + 4 > len(buf):
        raise FormatError("checkpoint truncated in tensor header")
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    end = pos + 4 * count
    if end > len(buf):
        raise FormatError("checkpoint truncated in tensor data")
    arr = np.frombuffer(buf[pos:end], dtype="<f4").reshape(shape).astype(np.float32)
    return arr, end


def save_checkpoint(path, model: PATNet, cfg: PATConfig, state: Optional[TrainState] = None) -> None:
    named = list(model.named_parameters())
    entries, blobs = [], []
    for name, p in named:
        entries.append({"name": name, "kind": "param", "shape": list(p.shape)})
        blobs.append(p.data)
    opt = state.optimizer if state is not None else None
    if opt is not None:
        for (name, _), m, v in zip(named, opt.m, opt.v):
            entries.append({"name": name, "kind": "adam_m", "shape": list(m.shape)})
            blobs.append(m)
            entries.append({"name": name, "kind": "adam_v", "shape": list(v.shape)})
            blobs.append(v)
    manifest = {
        "format": FORMAT_VERSION,
        "config": to_mapping(cfg),
        "epoch": state.epoch if state else 0,
        "step": state.step if state else 0,
        "tau": state.tau if state else model.tau,
        "rng_state": state.rng_state if state else {},
        "history": state.history if state else [],
        "optimizer": {"kind": opt.kind, "t": opt.t, "lr": opt.lr} if opt else None,
        "tensors": entries,
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for arr in blobs:
            _write_blob(fh, arr)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if pos + 8 > len(data):
        raise FormatError(f"{path}: truncated manifest header")
    (size,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        manifest = json.loads(data[pos : pos + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from None
    pos += size
    buf = memoryview(data)
    arrays = []
    for entry in manifest.get("tensors", []):
        arr, pos = _read_blob(buf, pos)
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"{path}: tensor {entry['name']} shape mismatch")
        arrays.append(arr)
    return manifest, arrays


def load_checkpoint(path, cfg: Optional[PATConfig] = None) -> tuple[PATNet, PATConfig, TrainState]:
    """Rebuild model, config and training state.

    Passing ``cfg`` checks that it matches the stored configuration in every
    architectural field.
    """
    manifest, arrays = read_checkpoint(path)
    stored = from_mapping(manifest["config"])
    if cfg is not None:
        mine, theirs = to_mapping(cfg), manifest["config"]
        arch = [k for k in theirs if not k.startswith(("optimizer.", "sampler.")) and k not in ("seed", "augment")]
        diff = [k for k in arch if mine.get(k) != theirs[k]]
        if diff:
            raise ConfigError(f"checkpoint config differs in {', '.join(diff)}")
        stored = cfg
    model = build_model(stored)
    params = {e["name"]: a for e, a in zip(manifest["tensors"], arrays) if e["kind"] == "param"}
    model.load_state_dict(params)
    model.tau = float(manifest.get("tau", model.tau))
    state = TrainState(
        epoch=int(manifest.get("epoch", 0)),
        step=int(manifest.get("step", 0)),
        tau=float(manifest.get("tau", 1.0)),
        rng_state=manifest.get("rng_state") or {},
        history=list(manifest.get("history", [])),
    )
    opt_info = manifest.get("optimizer")
    if opt_info:
        opt = Adam(model.parameters(), opt_info["lr"], opt_info["kind"])
        opt.t = int(opt_info["t"])
        moments = {(e["name"], e["kind"]): a for e, a in zip(manifest["tensors"], arrays)}
        names = [n for n, _ in model.named_parameters()]
        opt.m = [moments[(n, "adam_m")].copy() for n in names]
        opt.v = [moments[(n, "adam_v")].copy() for n in names]
        state.optimizer = opt
    return model, stored, state
