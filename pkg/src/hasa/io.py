"""Durable artifacts: genotype JSON files and a flat binary tensor container.

Container layout (all integers little-endian)::

    magic  b"HASATNSR"
    u32    format version
    u64    header length in bytes
    header UTF-8 JSON: {"meta": ..., "tensors": [{name, shape, dtype, offset, nbytes}], "sha256": ...}
    payload  concatenated raw tensors

Every write goes to a temporary file in the target directory and is renamed
into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cell import Genotype
from .errors import ArtifactError, ChecksumError, UnsupportedVersionError
from .ops import OpKind

GENOTYPE_FORMAT_VERSION = 1
CONTAINER_FORMAT_VERSION = 1
MAGIC = b"HASATNSR"
_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|u1", "|b1"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, separators=(",", ": ")) + "\n"


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(config: dict) -> str:
    return digest(json.dumps(config, sort_keys=True, separators=(",", ":")).encode())[:16]


def atomic_write(path, data: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc
    return path


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------- genotypes


def save_genotype(path, genotype: Genotype, task: str, catalog: Sequence[OpKind],
                  provenance: Optional[dict] = None) -> Path:
    body = {
        "format_version": GENOTYPE_FORMAT_VERSION,
        "task": task,
        "cells": genotype.to_dict(),
        "active_op_catalog": [OpKind(k).value for k in catalog],
        "provenance": provenance or {},
    }
    body["checksum"] = digest(canonical_json(body).encode())
    return atomic_write(path, canonical_json(body).encode())


def load_genotype(path) -> tuple[Genotype, dict]:
    """Returns the genotype and the full document (task, catalog, provenance)."""
    raw = _read(path)
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ChecksumError(f"{path} is not valid JSON") from exc
    if not isinstance(doc, dict):
        raise ChecksumError(f"{path} is not a genotype document")
    version = doc.get("format_version")
    if version != GENOTYPE_FORMAT_VERSION:
        raise UnsupportedVersionError(f"genotype format version {version!r} is not supported")
    stored = doc.pop("checksum", None)
    if stored != digest(canonical_json(doc).encode()):
        raise ChecksumError(f"checksum mismatch in {path}")
    for name in doc["active_op_catalog"]:
        OpKind.parse(name)
    return Genotype.from_dict(doc["cells"]), doc


# ---------------------------------------------------------------- tensor container


def pack_tensors(tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<")) if arr.dtype.byteorder == ">" else arr
        if le.dtype.str not in _DTYPES:
            raise ArtifactError(f"unsupported dtype {arr.dtype} for {name}")
        buf = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = json.dumps({"meta": meta or {}, "tensors": entries, "sha256": digest(payload)},
                        sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", CONTAINER_FORMAT_VERSION, len(header)) + header + payload


def unpack_tensors(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if raw[:8] != MAGIC:
        raise ChecksumError("not a tensor container (bad magic)")
    if len(raw) < 20:
        raise ChecksumError("truncated tensor container")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CONTAINER_FORMAT_VERSION:
        raise UnsupportedVersionError(f"container format version {version} is not supported")
    try:
        header = json.loads(raw[20:20 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ChecksumError("corrupted container header") from exc
    payload = raw[20 + hlen:]
    if digest(payload) != header.get("sha256"):
        raise ChecksumError("container payload checksum mismatch")
    out = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return out, header["meta"]


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    """Named tensors (model parameters, optimizer moments, alphas) plus JSON metadata."""
    return atomic_write(path, pack_tensors(tensors, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return unpack_tensors(_read(path))


def optimizer_tensors(opt, prefix: str) -> dict[str, np.ndarray]:
    """Adam moments as named tensors (the step count travels in checkpoint metadata)."""
    st = opt.state()
    out = {f"{prefix}.m.{name}": m for name, m in st["m"].items()}
    out.update({f"{prefix}.v.{name}": v for name, v in st["v"].items()})
    return out


def restore_optimizer(opt, tensors: dict[str, np.ndarray], prefix: str, step: int) -> None:
    m = {k[len(prefix) + 3:]: v for k, v in tensors.items() if k.startswith(prefix + ".m.")}
    v = {k[len(prefix) + 3:]: t for k, t in tensors.items() if k.startswith(prefix + ".v.")}
    opt.load_state({"t": step, "m": m, "v": v})
