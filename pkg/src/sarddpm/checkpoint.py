"""Versioned binary checkpoint files.

Layout (all integers little-endian)::

    magic        8 bytes  b"SARDDPM\\0"
    version      uint32
    header_len   uint64
    header       UTF-8 JSON: {"kind", "config", "extra", "manifest": [{"name", "shape", "offset"}]}
    payload      float32 little-endian, tensors back to back (offsets in elements)
    checksum     32 bytes SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch

MAGIC = b"SARDDPM\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    """Raised for unreadable, truncated or corrupt checkpoint files."""


class ConfigConflictError(CheckpointError):
    """Stored configuration disagrees with the one the caller expects."""


class ManifestError(CheckpointError):
    """Parameter manifest does not match the architecture described by the config."""


def atomic_write(path: "str | os.PathLike", data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_state(
    path,
    kind: str,
    config: dict,
    state: dict[str, torch.Tensor],
    extra: Optional[dict] = None,
) -> None:
    manifest, chunks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"kind": kind, "config": config, "extra": extra or {}, "manifest": manifest},
        sort_keys=True,
    ).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)
    atomic_write(path, body + hashlib.sha256(body).digest())


def load_state(path) -> tuple[str, dict, dict, dict[str, torch.Tensor]]:
    """Read a checkpoint; returns ``(kind, config, extra, state)``."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _PREFIX.size + 32:
        raise CheckpointError(f"{path}: truncated checkpoint (format version {VERSION})")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}, expected {VERSION}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is truncated or corrupt (format version {version})")
    start = _PREFIX.size
    try:
        header = json.loads(body[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = np.frombuffer(body, dtype="<f4", offset=start + header_len)
    state = {}
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        if lo + n > payload.size:
            raise ManifestError(f"{path}: manifest entry {entry['name']} runs past the payload")
        state[entry["name"]] = torch.from_numpy(payload[lo : lo + n].reshape(entry["shape"]).astype(np.float32))
    return header["kind"], header["config"], header["extra"], state


def load_into(module: torch.nn.Module, state: dict[str, torch.Tensor], source="checkpoint") -> None:
    """Copy ``state`` into ``module`` after checking names and shapes agree exactly."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise ManifestError(f"{source}: parameter names disagree (missing {missing[:3]}, unexpected {unexpected[:3]})")
    for name, tensor in state.items():
        if tuple(own[name].shape) != tuple(tensor.shape):
            raise ManifestError(
                f"{source}: shape of {name} is {tuple(tensor.shape)}, architecture expects {tuple(own[name].shape)}"
            )
    module.load_state_dict(state)


def save_model(model, path, extra: Optional[dict] = None) -> None:
    """Write a :class:`~sarddpm.unet.UNet` checkpoint."""
    save_state(path, "unet", model.config.to_dict(), model.state_dict(), extra)


def load_model(path, expected_config=None):
    """Load a UNet checkpoint; returns ``(model, extra)``.

    Raises :class:`ConfigConflictError` if ``expected_config`` is given and
    differs from the stored configuration.
    """
    from sarddpm.unet import UNetConfig, build

    kind, config, extra, state = load_state(path)
    if kind != "unet":
        raise CheckpointError(f"{path}: expected a unet checkpoint, found {kind!r}")
    config = UNetConfig.from_dict(config)
    if expected_config is not None and expected_config != config:
        diff = {
            k: (v, expected_config.to_dict()[k])
            for k, v in config.to_dict().items()
            if expected_config.to_dict()[k] != v
        }
        raise ConfigConflictError(f"{path}: stored config conflicts with expected config: {diff}")
    model = build(config)
    load_into(model, state, source=str(path))
    model.eval()
    return model, extra
