"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VNCK" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
    then one record per tensor until end of file:
    u32 name length | name (UTF-8) | u8 dtype tag | u32 rank | rank x u64 dims | raw values

Parameters, BN running statistics (``*.running_mean``/``*.running_var``)
and optional optimizer moments (``optim.*``) are all stored as records.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .architecture import ArchSpec, Network, build

MAGIC = b"VNCK"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}
OPTIM_PREFIX = "optim."


class CheckpointError(ValueError):
    pass


def _encode(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<IQ", VERSION, len(meta_raw)), meta_raw]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        key = name.encode()
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack("<BI", DTYPE_TAGS[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def _decode(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<IQ", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        meta = json.loads(raw[pos:pos + meta_len].decode())
        pos += meta_len
        tensors: dict[str, np.ndarray] = {}
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            tag, rank = struct.unpack_from("<BI", raw, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            dt = TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise CheckpointError(f"truncated record {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize,
                                          offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if "tensor_count" in meta and meta["tensor_count"] != len(tensors):
        raise CheckpointError(f"expected {meta['tensor_count']} tensors, found {len(tensors)}")
    return meta, tensors


def state_dict(graph: Network) -> dict[str, np.ndarray]:
    state = dict(graph.named_parameters())
    state.update(graph.named_buffers())
    return state


def is_parameter_record(name: str) -> bool:
    return not (name.startswith(OPTIM_PREFIX) or name.endswith((".running_mean", ".running_var")))


def save_checkpoint(graph: Network, meta: dict | None, path, optimizer=None) -> None:
    tensors = state_dict(graph)
    if optimizer is not None:
        for key, arr in optimizer.state_arrays().items():
            tensors[OPTIM_PREFIX + key] = arr
    meta = dict(meta or {})
    meta.update(arch=graph.spec.to_dict(), lam=graph.lam, tensor_count=len(tensors),
                format_version=VERSION)
    if optimizer is not None:
        meta["optimizer"] = optimizer.state_meta()
    raw = _encode(tensors, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(raw)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        return _decode(f.read())


def _assign(graph: Network, tensors: dict[str, np.ndarray], strict: bool) -> tuple[list[str], list[str]]:
    matched, fresh = [], []
    slots = {}
    for mod_name, mod in graph.named_modules():
        for store in (mod.params, mod.buffers):
            for key in store:
                slots[f"{mod_name}.{key}" if mod_name else key] = (store, key)
    for name, (store, key) in slots.items():
        src = tensors.get(name)
        if src is not None and src.shape == store[key].shape:
            store[key] = src.astype(store[key].dtype, copy=True)
            matched.append(name)
        else:
            fresh.append(name)
    if strict and fresh:
        raise CheckpointError(f"checkpoint is missing {len(fresh)} tensors, e.g. {fresh[:3]}")
    return matched, fresh


def load_checkpoint(path, dtype=None) -> tuple[Network, dict]:
    """Rebuild the graph described in the metadata and load every tensor."""
    meta, tensors = read_checkpoint(path)
    spec = ArchSpec.from_dict(meta["arch"])
    if dtype is None:
        dtype = next(t.dtype for n, t in tensors.items() if is_parameter_record(n))
    graph = build(spec, dtype=dtype, init=False)
    _assign(graph, tensors, strict=True)
    graph.set_lambda(meta.get("lam", graph.lam))
    meta["optim_state"] = {k[len(OPTIM_PREFIX):]: v for k, v in tensors.items() if k.startswith(OPTIM_PREFIX)}
    return graph, meta


def load_into(graph: Network, path) -> dict:
    """Initialize matching-name, matching-shape tensors of ``graph`` from ``path``.

    Nothing is modified unless the whole file parses. Returns the lists of
    matched names and of names left at their fresh initialization.
    """
    _, tensors = read_checkpoint(path)
    matched, fresh = _assign(graph, tensors, strict=False)
    return {"matched": matched, "fresh": fresh}
