"""Binary checkpoint container.

Layout: the 8-byte magic ``RELNETCK``, a little-endian u32 format version, a
little-endian u64 manifest length, the manifest as UTF-8 JSON, then a blob of
little-endian 32-bit floats.  The manifest lists every array by name, shape,
byte offset and byte length; the ranges must tile the blob exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from relnet.model import ModelConfig, RelationNetwork, ZslConfig, ZslRelationNetwork
from relnet.optim import AdamState

MAGIC = b"RELNETCK"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_ADAM_FIELDS = ("lr", "beta1", "beta2", "eps", "weight_decay", "decoupled", "t")


class CheckpointError(Exception):
    """A checkpoint file is truncated, tampered with or of an unsupported version."""


@dataclass
class TrainingState:
    """Everything needed to continue a run exactly where it stopped."""

    model: RelationNetwork | ZslRelationNetwork
    adam: AdamState
    step: int
    rng: np.random.Generator
    extra: dict = field(default_factory=dict)


def _model_kind(model) -> str:
    return "zsl" if isinstance(model, ZslRelationNetwork) else "fewshot"


def _config_dict(model) -> dict:
    if isinstance(model, ZslRelationNetwork):
        return dict(vars(model.config))
    return model.config.to_dict()


def _arrays(model, adam: AdamState):
    for name, p in model.params.items():
        yield f"param/{name}", p.data
    for name, b in model.buffers.items():
        yield f"buffer/{name}", b
    for name in model.params:
        if name in adam.m:
            yield f"adam.m/{name}", adam.m[name]
            yield f"adam.v/{name}", adam.v[name]


def encode_checkpoint(model, adam: AdamState, step: int, rng: np.random.Generator, extra: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in _arrays(model, adam):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": VERSION,
        "model": {"kind": _model_kind(model), "config": _config_dict(model)},
        "step": int(step),
        "adam": {**{k: getattr(adam, k) for k in _ADAM_FIELDS}, "decay_names": sorted(adam.decay_names)},
        "rng": rng.bit_generator.state,
        "extra": extra or {},
        "arrays": entries,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(chunks)


def save_checkpoint(path, model, adam: AdamState, step: int, rng: np.random.Generator, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(model, adam, step, rng, extra)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def _parse(data: bytes) -> tuple[dict, memoryview]:
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint truncated inside the header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a relnet checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    start = _HEADER.size + mlen
    if len(data) < start:
        raise CheckpointError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(bytes(data[_HEADER.size:start]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
    blob = memoryview(data)[start:]
    expected = 0
    for e in manifest["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] != expected or e["nbytes"] != 4 * count:
            raise CheckpointError(f"manifest entry {e['name']!r} does not tile the blob")
        expected += e["nbytes"]
    if expected != len(blob):
        kind = "truncated" if len(blob) < expected else "has trailing bytes"
        raise CheckpointError(f"checkpoint blob {kind}: manifest covers {expected} bytes, blob has {len(blob)}")
    return manifest, blob


def decode_checkpoint(data: bytes) -> TrainingState:
    manifest, blob = _parse(data)
    kind = manifest["model"]["kind"]
    cfg = manifest["model"]["config"]
    if kind == "zsl":
        model = ZslRelationNetwork(ZslConfig(**cfg), dtype=np.float32)
    else:
        model = RelationNetwork(ModelConfig.from_dict(cfg), dtype=np.float32)
    a = manifest["adam"]
    adam = AdamState(**{k: a[k] for k in _ADAM_FIELDS}, decay_names=frozenset(a["decay_names"]))
    seen = set()
    for e in manifest["arrays"]:
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        arr = arr.astype(np.float32)
        section, name = e["name"].split("/", 1)
        if section == "param":
            target = model.params.get(name)
            if target is None or target.shape != arr.shape:
                raise CheckpointError(f"checkpoint parameter {name!r} does not fit the model config")
            target.data[...] = arr
        elif section == "buffer":
            if name not in model.buffers or model.buffers[name].shape != arr.shape:
                raise CheckpointError(f"checkpoint buffer {name!r} does not fit the model config")
            model.buffers[name][...] = arr
        elif section == "adam.m":
            adam.m[name] = arr
        elif section == "adam.v":
            adam.v[name] = arr
        else:
            raise CheckpointError(f"unknown checkpoint section {section!r}")
        seen.add(e["name"])
    missing = [n for n in model.params if f"param/{n}" not in seen]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    rng = np.random.Generator(np.random.PCG64())
    try:
        rng.bit_generator.state = manifest["rng"]
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"invalid RNG state in checkpoint: {exc}") from exc
    return TrainingState(model, adam, int(manifest["step"]), rng, manifest.get("extra", {}))


def load_checkpoint(path) -> TrainingState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return decode_checkpoint(path.read_bytes())


def read_manifest(path) -> dict:
    return _parse(Path(path).read_bytes())[0]
