"""Checkpoints: a human-readable JSON manifest plus a binary payload.

A checkpoint is a directory holding `manifest.json` (schema version, kind,
topology, tensor descriptors, quantization record, free-form provenance,
payload checksum) and `payload.bin` (tensors back to back). Full-precision
tensors are stored as little-endian 32-bit floats; grid-resident tensors
are stored as signed 8-bit integer levels with their scale kept at full
precision in the manifest, so quantized values reload bit for bit.

Capture banks are directories of entry checkpoints plus an ordering
manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .averaging import AveragedModel, CaptureBank, CaptureEntry
from .nn import LayerSpec, Network, output_shapes
from .qat import ShadowModel
from .quantizer import QuantizedModel

__all__ = ["CheckpointError", "SCHEMA_VERSION", "save", "load", "load_manifest"]

SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, tampered, or structurally wrong checkpoint."""


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _i8_bytes(arr: np.ndarray, scale: float, name: str) -> bytes:
    levels = np.rint(arr / scale)
    if np.abs(levels).max(initial=0.0) > 127:
        raise CheckpointError(f"{name}: quantized levels exceed signed 8-bit storage")
    if not np.array_equal(levels * scale, arr):
        raise CheckpointError(f"{name}: values are not on the recorded grid")
    return np.ascontiguousarray(levels, dtype="<i1").tobytes()


def _decode(desc: dict, payload: bytes) -> np.ndarray:
    start = desc["offset"]
    shape = tuple(desc["shape"])
    count = int(np.prod(shape)) if shape else 1
    if desc["encoding"] == "f32":
        raw = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        return raw.astype(np.float64).reshape(shape)
    if desc["encoding"] == "i8":
        raw = np.frombuffer(payload, dtype="<i1", count=count, offset=start)
        return raw.astype(np.float64).reshape(shape) * desc["scale"]
    raise CheckpointError(f"unknown tensor encoding {desc['encoding']!r}")


class _PayloadBuilder:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.descriptors: list[dict] = []
        self.offset = 0

    def add(self, name: str, arr: np.ndarray, encoding: str, scale: float | None = None):
        if encoding == "f32":
            raw = _f32_bytes(arr)
        else:
            raw = _i8_bytes(arr, scale, name)
        desc = {"name": name, "shape": list(arr.shape), "offset": self.offset,
                "encoding": encoding}
        if scale is not None:
            desc["scale"] = scale
        self.descriptors.append(desc)
        self.chunks.append(raw)
        self.offset += len(raw)


def _add_network(builder: _PayloadBuilder, net: Network, *, weight_encoding="f32",
                 steps=None, denominator=1, weight_prefix="weight"):
    for j, i in enumerate(net.param_layers()):
        scale = None
        if weight_encoding == "i8":
            scale = steps[j] / denominator if denominator != 1 else steps[j]
        builder.add(f"layer{i}.{weight_prefix}", net.weights[i], weight_encoding, scale)
        if net.biases[i] is not None:
            builder.add(f"layer{i}.bias", net.biases[i], "f32")


def _base_manifest(kind: str, net: Network, provenance=None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "input_shape": list(net.input_shape),
        "layers": [s.to_dict() for s in net.specs],
        "provenance": provenance,
        "quantization": None,
    }


def save(obj, path, provenance: dict | None = None) -> Path:
    """Write a Network, QuantizedModel, ShadowModel, AveragedModel, or
    CaptureBank to a checkpoint directory. Returns the directory path."""
    path = Path(path)
    if isinstance(obj, CaptureBank):
        return _save_bank(obj, path, provenance)
    builder = _PayloadBuilder()
    if isinstance(obj, Network):
        manifest = _base_manifest("network", obj, provenance)
        _add_network(builder, obj)
    elif isinstance(obj, QuantizedModel):
        manifest = _base_manifest("quantized", obj.net, provenance)
        manifest["quantization"] = {"bits": obj.bits, "steps": list(obj.steps)}
        _add_network(builder, obj.net, weight_encoding="i8", steps=obj.steps)
    elif isinstance(obj, ShadowModel):
        manifest = _base_manifest("shadow", obj.shadow, provenance)
        manifest["quantization"] = {"bits": obj.bits, "steps": list(obj.steps)}
        for j, i in enumerate(obj.shadow.param_layers()):
            builder.add(f"layer{i}.shadow_weight", obj.shadow.weights[i], "f32")
            builder.add(f"layer{i}.applied_weight", obj.applied.weights[i], "i8",
                        obj.steps[j])
            if obj.shadow.biases[i] is not None:
                builder.add(f"layer{i}.bias", obj.shadow.biases[i], "f32")
    elif isinstance(obj, AveragedModel):
        manifest = _base_manifest("averaged", obj.net, provenance)
        manifest["quantization"] = {
            "bits": obj.effective_bits,
            "base_steps": list(obj.base_steps),
            "denominator": obj.count,
            "effective_bits": obj.effective_bits,
        }
        _add_network(builder, obj.net, weight_encoding="i8", steps=obj.base_steps,
                     denominator=obj.count)
    else:
        raise TypeError(f"cannot checkpoint object of type {type(obj).__name__}")

    payload = b"".join(builder.chunks)
    manifest["tensors"] = builder.descriptors
    manifest["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    manifest["payload_bytes"] = len(payload)
    path.mkdir(parents=True, exist_ok=True)
    (path / "payload.bin").write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"{path}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema version {version!r} "
                              f"(this build reads {SCHEMA_VERSION})")
    return manifest


def _read_payload(path: Path, manifest: dict) -> bytes:
    payload = (path / "payload.bin").read_bytes()
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest "
                              f"says {manifest['payload_bytes']}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch, payload corrupted or tampered")
    return payload


def _rebuild_network(manifest: dict, payload: bytes, weight_name="weight") -> Network:
    specs = [LayerSpec.from_dict(d) for d in manifest["layers"]]
    input_shape = tuple(manifest["input_shape"])
    tensors = {d["name"]: _decode(d, payload) for d in manifest["tensors"]}
    weights: list[np.ndarray | None] = []
    biases: list[np.ndarray | None] = []
    output_shapes(specs, input_shape)
    for i, spec in enumerate(specs):
        if spec.has_params:
            w = tensors.get(f"layer{i}.{weight_name}")
            if w is None:
                raise CheckpointError(f"layer{i}.{weight_name}: tensor missing from payload")
            expected = ((spec.fan_out, spec.fan_in) if spec.kind == "dense" else
                        (spec.out_channels, spec.in_channels, spec.kernel_size,
                         spec.kernel_size))
            if w.shape != expected:
                raise CheckpointError(f"layer{i}.{weight_name}: shape mismatch, "
                                      f"payload {w.shape} vs topology {expected}")
            weights.append(w)
            if spec.has_bias:
                b = tensors.get(f"layer{i}.bias")
                if b is None:
                    raise CheckpointError(f"layer{i}.bias: tensor missing from payload")
                biases.append(b)
            else:
                biases.append(None)
        else:
            weights.append(None)
            biases.append(None)
    return Network(input_shape, specs, weights, biases)


def load(path):
    """Load whatever `save` wrote at `path`, verifying checksum and shapes."""
    path = Path(path)
    manifest = load_manifest(path)
    kind = manifest["kind"]
    if kind == "capture-bank":
        return _load_bank(path, manifest)
    payload = _read_payload(path, manifest)
    if kind == "network":
        return _rebuild_network(manifest, payload)
    if kind == "quantized":
        q = manifest["quantization"]
        net = _rebuild_network(manifest, payload)
        return QuantizedModel(net, q["bits"], list(q["steps"]))
    if kind == "shadow":
        q = manifest["quantization"]
        shadow = _rebuild_network(manifest, payload, weight_name="shadow_weight")
        applied = _rebuild_network(manifest, payload, weight_name="applied_weight")
        return ShadowModel(shadow, applied, q["bits"], list(q["steps"]))
    if kind == "averaged":
        q = manifest["quantization"]
        net = _rebuild_network(manifest, payload)
        return AveragedModel(net, q["denominator"], list(q["base_steps"]),
                             q["effective_bits"])
    raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")


def _save_bank(bank: CaptureBank, path: Path, provenance=None) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, entry in enumerate(bank.entries):
        sub = f"entry_{k:03d}"
        sm = ShadowModel(entry.shadow, entry.model.net, bank.bits, list(bank.steps))
        save(sm, path / sub, provenance={"epoch": entry.epoch})
        entries.append({"epoch": entry.epoch, "metrics": entry.metrics, "dir": sub})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "capture-bank",
        "bits": bank.bits,
        "steps": list(bank.steps),
        "entries": entries,
        "provenance": provenance,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _load_bank(path: Path, manifest: dict) -> CaptureBank:
    bank = CaptureBank(manifest["bits"], list(manifest["steps"]))
    for rec in manifest["entries"]:
        sub = path / rec["dir"]
        if not (sub / "manifest.json").is_file():
            raise CheckpointError(f"{path}: capture bank incomplete, missing {rec['dir']}")
        sm = load(sub)
        model = QuantizedModel(sm.applied, sm.bits, list(sm.steps))
        bank.add(CaptureEntry(rec["epoch"], model, sm.shadow, dict(rec["metrics"])))
    return bank
