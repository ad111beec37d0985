"""Checkpoint format: a JSON manifest plus one raw little-endian blob.

The manifest lists every tensor with name, shape, dtype and byte offset in
blob order, along with the model config, live per-layer widths and exit
layers.  float64 round-trips bit-exact.  Extra manifest entries (like the
hash of the pipeline config that produced a stage) ride along untouched.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import (AttentionHead, EncoderLayer, ExitHead, ModelConfig,
                    MultiExitModel)

FORMAT = "slimexit-checkpoint-v1"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"


def stable_hash(obj) -> str:
    """sha256 of the canonical JSON encoding; used to fingerprint configs."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def save_model(model: MultiExitModel, directory, extra: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = [], [], 0
    for name, tensor in model.named_parameters():
        raw = np.ascontiguousarray(tensor.value, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(tensor.shape),
                      "dtype": "float64", "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "config": model.config.to_dict(),
        "head_size": model.head_size,
        "layer_widths": [list(w) for w in model.layer_widths()],
        "exit_layers": model.exit_layers(),
        "factorized": model.is_factorized,
        "tensors": index,
        "blob_bytes": offset,
    }
    if extra:
        overlap = set(extra) & set(manifest)
        if overlap:
            raise ValueError(f"extra manifest keys collide: {sorted(overlap)}")
        manifest.update(extra)
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (directory / BLOB_NAME).write_bytes(b"".join(blobs))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_model(directory) -> MultiExitModel:
    directory = Path(directory)
    manifest = read_manifest(directory)
    blob = (directory / BLOB_NAME).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(f"blob is {len(blob)} bytes, manifest says "
                         f"{manifest['blob_bytes']}")
    tensors = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "float64":
            raise ValueError(f"unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = Tensor(arr.reshape(shape).astype(np.float64))
    return _assemble(manifest, tensors)


def _assemble(manifest, tensors):
    config = ModelConfig.from_dict(manifest["config"])

    def take(name):
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        return tensors.pop(name)

    factorized = manifest["factorized"]
    embedding = (
        None if factorized else take("embedding.word"),
        take("embedding.word_a") if factorized else None,
        take("embedding.word_b") if factorized else None,
        take("embedding.position"), take("embedding.token_type"),
        take("embedding.ln.gain"), take("embedding.ln.bias"))

    layers = []
    for li, (heads, _fw) in enumerate(manifest["layer_widths"], start=1):
        hs = []
        for hi in range(heads):
            p = f"layer{li}.head{hi}"
            hs.append(AttentionHead(take(f"{p}.wq"), take(f"{p}.bq"),
                                    take(f"{p}.wk"), take(f"{p}.bk"),
                                    take(f"{p}.wv"), take(f"{p}.bv"),
                                    take(f"{p}.wo")))
        layers.append(EncoderLayer(
            hs, take(f"layer{li}.attn_out_bias"),
            take(f"layer{li}.ln_attn.gain"), take(f"layer{li}.ln_attn.bias"),
            take(f"layer{li}.ffn_in.w"), take(f"layer{li}.ffn_in.b"),
            take(f"layer{li}.ffn_out.w"), take(f"layer{li}.ffn_out.b"),
            take(f"layer{li}.ln_ffn.gain"), take(f"layer{li}.ln_ffn.bias")))

    exits = {li: ExitHead(take(f"exit{li}.w"), take(f"exit{li}.b"))
             for li in manifest["exit_layers"]}
    if tensors:
        raise ValueError(f"unexpected tensors in checkpoint: {sorted(tensors)}")
    model = MultiExitModel(config, manifest["head_size"], embedding,
                           layers, exits)
    declared = [tuple(w) for w in manifest["layer_widths"]]
    if model.layer_widths() != declared:
        raise ValueError("tensor shapes disagree with declared layer widths")
    return model
