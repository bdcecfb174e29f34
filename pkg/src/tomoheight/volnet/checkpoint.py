"""Model checkpoint format.

Layout: magic "TMDL1\\n", uint32 LE header length, UTF-8 JSON header with
the model spec and the ordered tensor directory (parameters then buffers,
each with name and shape), then the tensors as float32 little-endian blobs
in directory order.  Loading a float32 model reproduces it exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, HeaderParseError, TruncatedPayloadError
from .models import Backbone, CollapseKind, ModelSpec, UNet3dRegressor, build_model

MAGIC_MODEL = b"TMDL1\n"


def _spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "backbone": spec.backbone.value,
        "collapse": spec.collapse.value,
        "in_channels": spec.in_channels,
        "base_width": spec.base_width,
        "dropout_rate": spec.dropout_rate,
        "batch_norm": spec.batch_norm,
    }


def _spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(
        backbone=Backbone(d["backbone"]),
        collapse=CollapseKind(d["collapse"]),
        in_channels=int(d["in_channels"]),
        base_width=d["base_width"],
        dropout_rate=float(d["dropout_rate"]),
        batch_norm=bool(d["batch_norm"]),
    )


def save_model(model: UNet3dRegressor, path) -> None:
    tensors = list(model.named_params()) + list(model.named_buffers())
    header = {
        "spec": _spec_to_dict(model.spec),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC_MODEL)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path, dtype=np.float32) -> UNet3dRegressor:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC_MODEL):
        raise BadMagicError(f"{path}: expected magic {MAGIC_MODEL!r}")
    off = len(MAGIC_MODEL)
    if len(data) < off + 4:
        raise HeaderParseError(f"{path}: missing header length")
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
        spec = _spec_from_dict(header["spec"])
        directory = header["tensors"]
    except (KeyError, ValueError, TypeError) as exc:
        raise HeaderParseError(f"{path}: {exc}") from exc
    off += hlen

    model = build_model(spec, dtype=dtype)
    live = dict(model.named_params())
    live.update(model.named_buffers())
    if set(live) != {t["name"] for t in directory}:
        raise HeaderParseError(f"{path}: tensor directory does not match the model config")
    for entry in directory:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if len(data) < off + nbytes:
            raise TruncatedPayloadError(f"{path}: tensor {entry['name']} truncated")
        arr = np.frombuffer(data[off:off + nbytes], dtype="<f4").reshape(shape)
        target = live[entry["name"]]
        if target.shape != shape:
            raise HeaderParseError(
                f"{path}: tensor {entry['name']} shape {shape} != {target.shape}")
        target[...] = arr.astype(target.dtype)
        off += nbytes
    if off != len(data):
        raise HeaderParseError(f"{path}: trailing bytes after last tensor")
    return model
