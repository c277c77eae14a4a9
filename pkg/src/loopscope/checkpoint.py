"""Checkpoint file format.

Layout: magic, format version, JSON header with the model config, JSON
manifest of (name, offset, shape) entries, then a flat little-endian float32
weight blob. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autograd import Tensor2
from .model import LoopedConfig, LoopedModelParams, init_params

MAGIC = b"LPSCCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint file."""


def save_checkpoint(params: LoopedModelParams, path) -> None:
    named = params.named_tensors()
    manifest = []
    offset = 0
    blobs = []
    for name, t in named:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "config": params.config.to_dict()},
        sort_keys=True).encode()
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", len(header), len(manifest_bytes)))
        f.write(header)
        f.write(manifest_bytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> LoopedModelParams:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 8 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    hlen, mlen = struct.unpack_from("<II", raw, len(MAGIC))
    pos = len(MAGIC) + 8
    try:
        header = json.loads(raw[pos:pos + hlen])
        manifest = json.loads(raw[pos + hlen:pos + hlen + mlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt header/manifest: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"format version {header.get('format_version')} != {FORMAT_VERSION}")
    config = LoopedConfig.from_dict(header["config"])
    blob = raw[pos + hlen + mlen:]

    # instantiate with the right structure, then overwrite every tensor
    params = init_params(config, seed=0, dtype=np.float32)
    expected = dict(params.named_tensors())
    if {e["name"] for e in manifest} != set(expected):
        raise CheckpointError("manifest tensor names do not match config")
    for entry in manifest:
        name, off, shape = entry["name"], entry["offset"], tuple(entry["shape"])
        target = expected[name]
        if shape != target.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {shape}")
        n = int(np.prod(shape))
        chunk = blob[off * 4:(off + n) * 4]
        if len(chunk) != n * 4:
            raise CheckpointError(f"corrupt manifest: blob truncated at {name}")
        target.data = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    return params
