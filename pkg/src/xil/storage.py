"""On-disk container for datasets and checkpoints.

Layout (all integers ASCII, all blobs little-endian)::

    XILPACK1\\n
    <manifest_bytes> <sha256-hex of manifest>\\n
    <manifest: UTF-8 JSON, sorted keys>
    <blob section: arrays back to back>

The manifest holds ``kind``, free-form ``meta``, ``blob_size``, the git-style
``content_hash`` (sha1 over ``b"blob <size>\\0" + blobs``) and, per array,
``dtype``, ``shape``, ``offset`` and ``nbytes`` relative to the blob section.
Dataset arrays are always stored as ``<f4``. Every length read from a file is
bounds-checked before use, so a damaged file raises ``CorruptFileError``.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures import ModelConfig, PolicyModel, build_model
from .tasks import ChunkDataset

MAGIC = b"XILPACK1\n"
MAX_MANIFEST_BYTES = 1 << 26
DTYPES = ("<f4", "<f8", "<i8")


class CorruptFileError(ValueError):
    """The file is truncated, tampered with or not a container at all."""


class IncompatibleCheckpointError(ValueError):
    """The checkpoint was written for a different model configuration."""

    def __init__(self, field_name: str, stored, expected):
        self.field = field_name
        super().__init__(f"checkpoint field {field_name!r} is {stored!r}, expected {expected!r}")


def content_hash(blob: bytes) -> str:
    h = hashlib.sha1(b"blob %d\0" % len(blob))
    h.update(blob)
    return h.hexdigest()


def write_container(path, arrays: dict, meta: dict, kind: str, dtype: str | None = None) -> None:
    """Write ``arrays`` (name -> ndarray) and JSON-able ``meta`` atomically."""
    entries, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = dtype or np.dtype(arr.dtype).newbyteorder("<").str
        if dt not in DTYPES:
            raise TypeError(f"array {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dt)).tobytes()
        entries[name] = {"dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = json.dumps({"kind": kind, "meta": meta, "arrays": entries, "blob_size": len(blob),
                           "content_hash": content_hash(blob)}, sort_keys=True).encode()
    header = f"{len(manifest)} {hashlib.sha256(manifest).hexdigest()}\n".encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + header + manifest + blob)
    os.replace(tmp, path)


def _fail(msg: str):
    raise CorruptFileError(msg)


def _check_entry(name, e, blob_size):
    if not isinstance(e, dict) or set(e) != {"dtype", "shape", "offset", "nbytes"}:
        _fail(f"array {name!r}: malformed entry")
    if e["dtype"] not in DTYPES:
        _fail(f"array {name!r}: unsupported dtype {e['dtype']!r}")
    shape, off, nb = e["shape"], e["offset"], e["nbytes"]
    if not isinstance(shape, list) or not all(type(s) is int and s >= 0 for s in shape):
        _fail(f"array {name!r}: bad shape {shape!r}")
    if type(off) is not int or type(nb) is not int or off < 0 or nb < 0 or off + nb > blob_size:
        _fail(f"array {name!r}: byte range out of bounds")
    if int(np.prod(shape, dtype=object)) * np.dtype(e["dtype"]).itemsize != nb:
        _fail(f"array {name!r}: shape {shape} does not match {nb} bytes")


def read_container(path, kind: str | None = None) -> tuple[dict, dict]:
    """Read and verify a container. Returns (meta, arrays)."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        _fail(f"{path}: not a container (bad magic)")
    pos = len(MAGIC)
    nl = data.find(b"\n", pos, pos + 100)
    if nl < 0:
        _fail(f"{path}: missing header line")
    try:
        size_txt, digest = data[pos:nl].decode("ascii").split(" ")
        msize = int(size_txt)
    except (UnicodeDecodeError, ValueError):
        _fail(f"{path}: malformed header line")
    if not 0 < msize <= min(MAX_MANIFEST_BYTES, len(data) - nl - 1):
        _fail(f"{path}: manifest length {msize} out of bounds (file truncated?)")
    raw = data[nl + 1:nl + 1 + msize]
    if hashlib.sha256(raw).hexdigest() != digest:
        _fail(f"{path}: manifest checksum mismatch")
    try:
        manifest = json.loads(raw)
    except (UnicodeDecodeError, ValueError):
        _fail(f"{path}: manifest is not valid JSON")
    if not isinstance(manifest, dict) or not {"kind", "meta", "arrays", "blob_size", "content_hash"} <= set(manifest):
        _fail(f"{path}: manifest missing required keys")
    blob = data[nl + 1 + msize:]
    if manifest["blob_size"] != len(blob):
        _fail(f"{path}: blob section is {len(blob)} bytes, manifest says {manifest['blob_size']}")
    if content_hash(blob) != manifest["content_hash"]:
        _fail(f"{path}: content hash mismatch")
    if kind is not None and manifest["kind"] != kind:
        _fail(f"{path}: expected a {kind} file, found {manifest['kind']!r}")
    if not isinstance(manifest["arrays"], dict):
        _fail(f"{path}: malformed array table")
    arrays = {}
    for name, e in manifest["arrays"].items():
        _check_entry(name, e, len(blob))
        buf = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[name] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return manifest["meta"], arrays


# -- datasets ---------------------------------------------------------------

def save_dataset(dataset: ChunkDataset, path) -> None:
    write_container(path, dataset.arrays, dataset.meta, "dataset", dtype="<f4")


def load_dataset(path, dtype=np.float32) -> ChunkDataset:
    """Load a dataset; ``dtype=np.float64`` upcasts every array."""
    meta, arrays = read_container(path, "dataset")
    if "actions" not in arrays or "goal_id" not in arrays:
        raise CorruptFileError(f"{path}: dataset lacks 'actions' or 'goal_id'")
    return ChunkDataset({k: v.astype(dtype) for k, v in arrays.items()}, meta)


# -- checkpoints ------------------------------------------------------------

@dataclass
class PolicyCheckpoint:
    config: ModelConfig
    params: dict
    optimizer: dict | None = None       # kind, hyperparameters, step, m, v
    meta: dict = field(default_factory=dict)

    def build(self) -> PolicyModel:
        model = build_model(self.config)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(model: PolicyModel, optimizer, path, meta: dict | None = None) -> None:
    """Persist parameters, optimizer moments and step, and the model config."""
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    opt_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        for k, v in state.pop("m").items():
            arrays[f"opt_m/{k}"] = v
        for k, v in state.pop("v").items():
            arrays[f"opt_v/{k}"] = v
        opt_meta = state
    write_container(path, arrays, {"config": model.config.to_dict(), "optimizer": opt_meta,
                                   "extra": meta or {}}, "checkpoint")


def load_checkpoint(path, expected: ModelConfig | dict | None = None) -> PolicyCheckpoint:
    """Read a checkpoint; if ``expected`` is given, every config field must match."""
    meta, arrays = read_container(path, "checkpoint")
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFileError(f"{path}: unreadable model config ({e})") from None
    if expected is not None:
        want = expected.to_dict() if isinstance(expected, ModelConfig) else ModelConfig.from_dict(expected).to_dict()
        have = config.to_dict()
        for k in want:
            if have[k] != want[k]:
                raise IncompatibleCheckpointError(k, have[k], want[k])
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    opt = meta.get("optimizer")
    if opt is not None:
        opt = dict(opt)
        opt["m"] = {k[6:]: v for k, v in arrays.items() if k.startswith("opt_m/")}
        opt["v"] = {k[6:]: v for k, v in arrays.items() if k.startswith("opt_v/")}
    return PolicyCheckpoint(config, params, opt, meta.get("extra", {}))
