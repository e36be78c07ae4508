"""Checkpoint directory format.

``manifest.json`` holds the architecture, per-block head layout and a tensor
table (name -> dtype, shape, byte offset, byte length); ``tensors.bin`` holds
the raw little-endian f32 payloads, each starting on a 64-byte boundary.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import PROJECTIONS, ArchSpec, DecoderBlock, DecoderModel

FORMAT = "colprune-checkpoint"
VERSION = 1
ALIGN = 64
MANIFEST = "manifest.json"
PAYLOAD = "tensors.bin"
_LE_F32 = np.dtype("<f4")


def save_model(model: DecoderModel, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = {}
    offset = 0
    with open(path / PAYLOAD, "wb") as fh:
        for name, arr in model.tensors().items():
            data = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
            table[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset, "length": len(data)}
            fh.write(data)
            offset += len(data)
            pad = -offset % ALIGN
            fh.write(b"\0" * pad)
            offset += pad
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "arch": model.spec.to_dict(),
        "blocks": [{"v_head_dims": list(b.v_head_dims)} for b in model.blocks],
        "tensors": table,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no {MANIFEST} in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} directory")
    return manifest


def load_model(path, spec: ArchSpec | None = None) -> DecoderModel:
    """Load a checkpoint; if ``spec`` is given it must match the stored one."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        stored = ArchSpec.from_dict(manifest["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad arch record: {exc}") from exc
    if spec is not None and spec != stored:
        raise CheckpointError(f"checkpoint arch {stored} does not match requested {spec}")
    try:
        blob = (path / PAYLOAD).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"no {PAYLOAD} in {path}") from exc

    tensors = {}
    for name, rec in manifest["tensors"].items():
        if rec.get("dtype") != "f32":
            raise CheckpointError(f"{name}: unsupported dtype {rec.get('dtype')}")
        shape = tuple(rec["shape"])
        start, length = rec["offset"], rec["length"]
        if length != 4 * int(np.prod(shape)) or start + length > len(blob) or start % ALIGN:
            raise CheckpointError(f"{name}: table entry inconsistent with payload")
        tensors[name] = np.frombuffer(blob, _LE_F32, count=length // 4, offset=start).reshape(shape).astype(np.float32)

    def take(name, shape=None):
        try:
            arr = tensors.pop(name)
        except KeyError:
            raise CheckpointError(f"missing tensor {name}") from None
        if shape is not None and arr.shape != shape:
            raise CheckpointError(f"{name}: shape {arr.shape}, expected {shape}")
        return arr

    d = stored.d_model
    embed = take("embed", (stored.vocab, d))
    pos = take("pos_embed", (stored.max_seq, d))
    block_recs = manifest.get("blocks", [])
    if len(block_recs) != stored.n_blocks:
        raise CheckpointError(f"manifest lists {len(block_recs)} blocks, arch says {stored.n_blocks}")
    blocks = []
    for i, rec in enumerate(block_recs):
        prefix = f"blocks.{i}."
        weights = {n: take(f"{prefix}{n}.weight") for n in PROJECTIONS[stored.family]}
        biases = {n: take(f"{prefix}{n}.bias") for n in PROJECTIONS[stored.family] if f"{prefix}{n}.bias" in tensors}
        norms = {k[len(prefix):]: take(k, (d,)) for k in [k for k in tensors if k.startswith(prefix + "norm")]}
        blk = DecoderBlock(stored.family, stored.n_heads, weights, biases, norms, tuple(rec["v_head_dims"]))
        try:
            blk.validate()
        except AssertionError as exc:
            raise CheckpointError(f"block {i}: {exc}") from exc
        blocks.append(blk)
    final_norm = {k.split(".", 1)[1]: take(k, (d,)) for k in [k for k in tensors if k.startswith("final_norm.")]}
    unembed = take("unembed", (stored.vocab, d))
    if tensors:
        raise CheckpointError(f"unexpected tensors {sorted(tensors)}")
    return DecoderModel(stored, embed, pos, blocks, final_norm, unembed)
