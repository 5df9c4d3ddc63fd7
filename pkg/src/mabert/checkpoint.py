"""Single-file checkpoints: a JSON manifest followed by a float32 weights blob.

Layout::

    b"MABERTCK" | u32 manifest length | manifest (utf-8 JSON) | blob

The blob holds every registered parameter as little-endian float32, row-major,
in registry order. The manifest records the model config, normalizer, ETA
scale, the registry (name, shape, byte offset), training provenance and the
sha256 of the blob. Compute stays float64; only storage is 32-bit.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import atomic_write
from .model import Model, ModelConfig, parameter_shapes
from .scene import Normalizer

MAGIC = b"MABERTCK"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    """The stored model config disagrees with the one requested."""

    def __init__(self, stored: dict, requested: dict, path: str = ""):
        self.stored = stored
        self.requested = requested
        lines = [f"incompatible checkpoint {path}".rstrip(), "  checkpoint config:"]
        lines += [f"    {k} = {v!r}" for k, v in stored.items()]
        lines.append("  requested config:")
        lines += [f"    {k} = {v!r}" for k, v in requested.items()]
        diff = sorted(k for k in set(stored) | set(requested) if stored.get(k) != requested.get(k))
        lines.append("  differing keys: " + ", ".join(diff))
        super().__init__("\n".join(lines))


@dataclass
class Checkpoint:
    model: Model
    run: dict | None = None  # what produced the weights: command, plan, config, data hash
    parent: str | None = None  # sha256 of the parent checkpoint file
    chain: list[str] = field(default_factory=list)  # ancestors, oldest first
    sha256: str = ""  # of this file


def registry(config: ModelConfig) -> list[dict]:
    out, offset = [], 0
    for name, shape in parameter_shapes(config):
        out.append({"name": name, "shape": list(shape), "offset": offset})
        offset += int(np.prod(shape)) * _DTYPE.itemsize
    return out


def _normalizer_dict(norm: Normalizer | None):
    if norm is None:
        return None
    return {"mean": list(norm.mean), "std": list(norm.std), "ref": list(norm.ref)}


def encode_checkpoint(model: Model, run: dict | None = None, parent: Checkpoint | None = None) -> bytes:
    reg = registry(model.config)
    blob = b"".join(np.ascontiguousarray(model.params[r["name"]], dtype=_DTYPE).tobytes() for r in reg)
    chain = (parent.chain + [parent.sha256]) if parent is not None else []
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "normalizer": _normalizer_dict(model.normalizer),
        "eta_scale": list(model.eta_scale) if model.eta_scale is not None else None,
        "registry": reg,
        "provenance": {"run": run, "parent": chain[-1] if chain else None, "chain": chain},
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + blob


def save_checkpoint(path: str | Path, model: Model, run: dict | None = None, parent: Checkpoint | None = None) -> str:
    """Write atomically; returns the sha256 of the file."""
    payload = encode_checkpoint(model, run, parent)
    atomic_write(path, payload)
    return hashlib.sha256(payload).hexdigest()


def read_manifest(buf: bytes, path: str = "") -> tuple[dict, bytes]:
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (n,) = struct.unpack_from("<I", buf, len(MAGIC))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    start = len(MAGIC) + 4
    if len(buf) < start + n:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(buf[start : start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint format version {version!r}")
    return manifest, buf[start + n :]


def decode_checkpoint(buf: bytes, path: str = "", expect: ModelConfig | None = None) -> Checkpoint:
    manifest, blob = read_manifest(buf, path)
    try:
        config = ModelConfig(**manifest["model_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config in manifest ({exc})") from exc
    if expect is not None and expect.to_dict() != config.to_dict():
        raise IncompatibleCheckpoint(config.to_dict(), expect.to_dict(), path)
    reg = registry(config)
    if manifest["registry"] != reg:
        raise CheckpointError(f"{path}: parameter registry does not match the model config")
    need = sum(int(np.prod(r["shape"])) for r in reg) * _DTYPE.itemsize
    if len(blob) != need or manifest["blob_bytes"] != need:
        raise CheckpointError(f"{path}: truncated weights blob ({len(blob)} of {need} bytes)")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path}: weights blob hash mismatch")
    params = {}
    for r in reg:
        count = int(np.prod(r["shape"]))
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=r["offset"])
        params[r["name"]] = arr.astype(np.float64).reshape(r["shape"])
    model = Model(config, params=params)
    if manifest["normalizer"] is not None:
        nd = manifest["normalizer"]
        model.normalizer = Normalizer(tuple(nd["mean"]), tuple(nd["std"]), tuple(nd["ref"]))
    if manifest["eta_scale"] is not None:
        model.eta_scale = tuple(manifest["eta_scale"])
    prov = manifest["provenance"]
    return Checkpoint(model, prov["run"], prov["parent"], list(prov["chain"]), hashlib.sha256(buf).hexdigest())


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read and verify a checkpoint; ``expect`` rejects a differing model config."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    return decode_checkpoint(buf, str(path), expect)


def check_encoder_compatible(stored: ModelConfig, requested: ModelConfig, path: str = "") -> None:
    """Encoder weights can be reused only when the encoder shape and variant agree."""
    if stored.encoder_signature() != requested.encoder_signature():
        raise IncompatibleCheckpoint(stored.to_dict(), requested.to_dict(), path)
