"""Model container: ``model.json`` manifest plus ``model.bin`` blob store.

Integer payloads are little-endian int32, threshold arrays int64, float
arrays float64. Every blob carries its own CRC32; loading verifies them and
the format version before reconstructing the graph.
"""

from __future__ import annotations

import json
import os
import zlib
from typing import Any

import numpy as np

from .graph import Graph, LayerNode
from .qtensor import QuantTensor

__all__ = ["save_model", "load_model", "ModelFormatError", "ChecksumError", "FORMAT_VERSION"]

FORMAT_VERSION = 1

_BLOB_DTYPES = {"float64": "<f8", "int32": "<i4", "int64": "<i8"}


class ModelFormatError(ValueError):
    """Container cannot be parsed: version, schema, or reference problems."""


class ChecksumError(ModelFormatError):
    """A blob's CRC32 does not match its manifest entry."""


class _BlobWriter:
    def __init__(self) -> None:
        self.chunks: list[bytes] = []
        self.offset = 0

    def write(self, arr: np.ndarray, dtype: str) -> dict[str, Any]:
        data = np.ascontiguousarray(arr, dtype=_BLOB_DTYPES[dtype]).tobytes()
        desc = {
            "offset": self.offset,
            "nbytes": len(data),
            "crc32": zlib.crc32(data),
            "dtype": dtype,
            "shape": list(arr.shape),
        }
        self.chunks.append(data)
        self.offset += len(data)
        return desc


def _jsonable(v: Any) -> Any:
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if v is None or isinstance(v, (int, float, str, bool)):
        return v
    raise ModelFormatError(f"attr value {v!r} is not serializable")


def _tensor_entry(value: Any, blobs: _BlobWriter) -> dict[str, Any]:
    if isinstance(value, QuantTensor):
        if np.any(value.data < np.iinfo(np.int32).min) or np.any(value.data > np.iinfo(np.int32).max):
            raise ModelFormatError("quantized payload does not fit int32")
        entry = {
            "type": "quant",
            "data": blobs.write(value.data, "int32"),
            "scales": blobs.write(np.atleast_1d(value.scales), "float64"),
            "bit_width": value.bit_width,
            "signed": value.signed,
            "channel_axis": value.channel_axis,
        }
        if value.zero_channels is not None:
            entry["zero_channels"] = [int(i) for i in np.flatnonzero(value.zero_channels)]
        return entry
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        return {"type": "float", "data": blobs.write(arr, "float64")}
    if arr.dtype.kind == "i":
        return {"type": "int", "data": blobs.write(arr, "int64")}
    raise ModelFormatError(f"unsupported tensor dtype {arr.dtype}")


def save_model(g: Graph, out_dir: str, name: str = "model") -> tuple[str, str]:
    """Write ``<name>.json`` and ``<name>.bin`` under out_dir."""
    g.validate()
    os.makedirs(out_dir, exist_ok=True)
    blobs = _BlobWriter()
    tensors = {tname: _tensor_entry(tval, blobs) for tname, tval in sorted(g.tensors.items())}
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": g.stage,
        "input_resolution": g.input_resolution,
        "blob_file": f"{name}.bin",
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "inputs": list(n.inputs),
                "attrs": {k: _jsonable(v) for k, v in sorted(n.attrs.items())},
                "weight_ref": n.weight_ref,
            }
            for n in g.nodes
        ],
        "tensors": tensors,
    }
    json_path = os.path.join(out_dir, f"{name}.json")
    bin_path = os.path.join(out_dir, f"{name}.bin")
    with open(json_path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(bin_path, "wb") as f:
        for chunk in blobs.chunks:
            f.write(chunk)
    return json_path, bin_path


def _read_blob(raw: bytes, desc: dict[str, Any]) -> np.ndarray:
    data = raw[desc["offset"] : desc["offset"] + desc["nbytes"]]
    if len(data) != desc["nbytes"]:
        raise ModelFormatError("blob extends past end of file")
    if zlib.crc32(data) != desc["crc32"]:
        raise ChecksumError(f"blob at offset {desc['offset']} failed CRC32")
    arr = np.frombuffer(data, dtype=_BLOB_DTYPES[desc["dtype"]]).reshape(desc["shape"])
    return arr.astype(arr.dtype.newbyteorder("="))


def _restore_attrs(attrs: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for k, v in attrs.items():
        if k.endswith("_hw") and isinstance(v, list):
            v = tuple(v)
        out[k] = v
    return out


def load_model(json_path: str) -> Graph:
    """Load a container, verifying version and every blob CRC."""
    with open(json_path) as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {version!r}")
    bin_path = os.path.join(os.path.dirname(json_path), manifest["blob_file"])
    with open(bin_path, "rb") as f:
        raw = f.read()
    tensors: dict[str, Any] = {}
    for tname, entry in manifest["tensors"].items():
        kind = entry.get("type")
        if kind == "quant":
            data = _read_blob(raw, entry["data"]).astype(np.int64)
            scales = _read_blob(raw, entry["scales"])
            axis = entry["channel_axis"]
            if axis is None:
                scales = scales.reshape(())
            zero = None
            if "zero_channels" in entry:
                zero = np.zeros(data.shape[axis], dtype=bool)
                zero[entry["zero_channels"]] = True
            tensors[tname] = QuantTensor(
                data=data,
                scales=scales,
                bit_width=entry["bit_width"],
                signed=entry["signed"],
                channel_axis=axis,
                zero_channels=zero,
            )
        elif kind in ("float", "int"):
            tensors[tname] = _read_blob(raw, entry["data"])
        else:
            raise ModelFormatError(f"tensor {tname!r} has unknown type {kind!r}")
    nodes = [
        LayerNode(
            id=nd["id"],
            kind=nd["kind"],
            inputs=list(nd["inputs"]),
            attrs=_restore_attrs(nd["attrs"]),
            weight_ref=nd.get("weight_ref"),
        )
        for nd in manifest["nodes"]
    ]
    g = Graph(
        stage=manifest["stage"],
        nodes=nodes,
        tensors=tensors,
        input_resolution=manifest["input_resolution"],
    )
    g.validate()
    return g
