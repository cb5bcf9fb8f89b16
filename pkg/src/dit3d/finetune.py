"""Checkpoint persistence, partial weight transfer and scale-factor fine-tuning.

Binary checkpoint layout (little-endian)::

    b"DIT3D" | version u8 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | rank x u32 dims | float32 data

A JSON sidecar ``<path>.json`` carries the model config, the trainable set
and run metadata (step count, seed, resolved run config).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, TransferError
from .model import ModelConfig, NoisePredictor
from .params import GAMMA_SUFFIX, ParamStore
from .tensor import Tensor

MAGIC = b"DIT3D"
VERSION = 1


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_checkpoint(store: ParamStore, path, metadata: dict | None = None) -> None:
    """Write ``store`` and its sidecar. Values are stored as float32."""
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(store))]
    for name, t in store.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"parameter name too long: {name[:40]}...")
        shape = t.shape
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    meta = dict(metadata or {})
    meta["format"] = {"magic": MAGIC.decode(), "version": VERSION}
    meta["trainable"] = [n for n in store.names() if n in store.trainable]
    meta["gammas"] = sorted(store.gammas)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_checkpoint_bytes(buf: bytes) -> list[tuple[str, np.ndarray]]:
    if len(buf) < len(MAGIC) + 5 or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("not a DIT3D checkpoint (bad magic)")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<BI", buf, pos)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos += 5
    entries = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if pos + n > len(buf):
                raise FormatError("truncated checkpoint (name)")
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            end = pos + 4 * size
            if end > len(buf):
                raise FormatError(f"truncated checkpoint (data of {name})")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(dims)
            pos = end
            entries.append((name, arr))
    except struct.error:
        raise FormatError("truncated checkpoint (header)") from None
    except UnicodeDecodeError:
        raise FormatError("parameter name is not valid UTF-8") from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last entry")
    return entries


def load_metadata(path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        return {}
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"bad checkpoint sidecar {side}: {e}") from None


def load_checkpoint(path) -> ParamStore:
    """Read a checkpoint; the trainable set comes from the sidecar when present."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    entries = read_checkpoint_bytes(buf)
    meta = load_metadata(path)
    store = ParamStore(((n, Tensor(a, dtype=np.float32)) for n, a in entries))
    if "trainable" in meta:
        store.set_trainable(n for n in meta["trainable"] if n in store)
    return store


def save_model(model: NoisePredictor, path, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta["model"] = model.config.to_dict()
    save_checkpoint(model.params, path, meta)


def load_model(path) -> NoisePredictor:
    meta = load_metadata(path)
    if "model" not in meta:
        raise FormatError(f"checkpoint {path} has no model config in its sidecar")
    cfg = ModelConfig.from_dict(meta["model"])
    return NoisePredictor(cfg, params=load_checkpoint(path))


@dataclass
class TransferReport:
    matched: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    shape_mismatch: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"matched": self.matched, "missing": self.missing, "shape_mismatch": self.shape_mismatch}


def transfer_partial(source: ParamStore, target: NoisePredictor, strict: bool = False) -> TransferReport:
    """Copy every source tensor whose name and shape match a target entry.

    Attention projections keep the same names on global and window blocks, so
    a source without window blocks still fills Q/K/V/output weights; the
    reduction layers, and anything else absent, keep their initial values.
    """
    report = TransferReport()
    for name, t in target.params.items():
        src = source.get(name)
        if src is None:
            report.missing.append(name)
        elif src.shape != t.shape:
            report.shape_mismatch.append(name)
        else:
            report.matched.append(name)
    if strict and (report.missing or report.shape_mismatch):
        raise TransferError(
            f"strict transfer failed: {len(report.missing)} missing, "
            f"{len(report.shape_mismatch)} shape mismatches "
            f"(first: {(report.missing + report.shape_mismatch)[0]})"
        )
    for name in report.matched:
        dst = target.params[name]
        dst.data = np.array(source[name].data, dtype=dst.data.dtype)
    return report


def affine_layers(store: ParamStore) -> list[str]:
    """Prefixes of every affine layer (entries with a 2-d ``.weight``)."""
    return [n[: -len(".weight")] for n, t in store.items() if n.endswith(".weight") and t.ndim == 2]


def add_scale_factors(store: ParamStore) -> list[str]:
    """Attach a scalar ``gamma = 1`` to every affine layer lacking one."""
    added = []
    for prefix in affine_layers(store):
        name = prefix + GAMMA_SUFFIX
        if name not in store:
            dtype = store[prefix + ".weight"].data.dtype
            store.add(name, Tensor(np.ones(1, dtype=dtype), dtype=dtype))
            added.append(name)
    return added


def efficient_partition(store: ParamStore) -> set[str]:
    """Scale factors, biases, norm affines and the class table."""
    keep = set()
    for name in store:
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(GAMMA_SUFFIX) or leaf == "bias":
            keep.add(name)
        elif ".norm" in name or name.startswith("norm"):
            keep.add(name)
        elif name.startswith("y_embedder."):
            keep.add(name)
    return keep


def mark_trainable_efficient(model: NoisePredictor) -> set[str]:
    """Add scale factors and freeze everything except the efficient partition."""
    add_scale_factors(model.params)
    trainable = efficient_partition(model.params)
    model.params.set_trainable(trainable)
    return trainable


def mark_trainable_full(model: NoisePredictor) -> set[str]:
    model.params.set_trainable(model.params.names())
    return set(model.params.names())


def count_params(model, trainable_only: bool = False) -> int:
    """Exact scalar count; accepts a model or a bare :class:`ParamStore`."""
    store = model.params if isinstance(model, NoisePredictor) else model
    return store.count(trainable_only)
