"""
Versioned binary container for models, hybrid models and datasets.

Layout (little-endian):

    magic      4 bytes  b"TSDP"
    version    u16
    kind       u16      1 = model, 2 = dataset, 3 = hybrid model
    meta_len   u32
    meta       meta_len bytes of UTF-8 JSON
    n_entries  u32
    entries    n_entries x (name_len u16, name, dtype u8, ndim u8,
                            dims ndim x u64, nbytes u64, data)

dtype codes: 0 = float64, 1 = int64.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- write_container(path, kind, meta, arrays): Write a container file
- read_container(path, expected_kind): Read a container file
- save_model(model, path, kind, extra_meta): Container plus JSON topology sidecar
- load_model(path): Rebuild a ModelGraph from a container
- model_topology(model): JSON-serializable topology of a graph
- model_from_topology(topology, arrays): Inverse of model_topology
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from tsdplab.core.layers import LayerSpec
from tsdplab.core.nn import ModelGraph
from tsdplab.utils.logging import TSDPFileError, logger

MAGIC = b"TSDP"
FORMAT_VERSION = 1

KIND_MODEL = 1
KIND_DATASET = 2
KIND_HYBRID = 3

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {"f": 0, "i": 1, "u": 1, "b": 1}

PathLike = Union[str, Path]


def write_container(
    path: PathLike, kind: int, meta: Dict[str, Any], arrays: Dict[str, np.ndarray]
) -> None:
    """Write `arrays` and the JSON `meta` block to `path`."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<HHI", FORMAT_VERSION, kind, len(meta_bytes)))
            f.write(meta_bytes)
            f.write(struct.pack("<I", len(arrays)))
            for name, arr in arrays.items():
                arr = np.asarray(arr)
                code = _CODES.get(arr.dtype.kind)
                if code is None:
                    raise TSDPFileError(f"Unsupported dtype {arr.dtype} for '{name}'")
                data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
                encoded = name.encode("utf-8")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<BB", code, arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                f.write(struct.pack("<Q", len(data)))
                f.write(data)
    except OSError as e:
        raise TSDPFileError(f"Failed to write container {path}: {e}")
    logger.debug(f"Wrote container {path} ({len(arrays)} arrays)")


def _take(buf: memoryview, pos: int, n: int, path: PathLike) -> Tuple[bytes, int]:
    if pos + n > len(buf):
        raise TSDPFileError(f"Container {path} is truncated")
    return bytes(buf[pos:pos + n]), pos + n


def read_container(
    path: PathLike, expected_kind: Optional[int] = None
) -> Tuple[int, Dict[str, Any], Dict[str, np.ndarray]]:
    """Read a container; returns (kind, meta, arrays)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise TSDPFileError(f"Failed to read container {path}: {e}")
    buf = memoryview(raw)

    magic, pos = _take(buf, 0, 4, path)
    if magic != MAGIC:
        raise TSDPFileError(f"{path} is not a TSDP container (bad magic {magic!r})")
    head, pos = _take(buf, pos, 8, path)
    version, kind, meta_len = struct.unpack("<HHI", head)
    if version > FORMAT_VERSION:
        raise TSDPFileError(f"{path} has unsupported container version {version}")
    if expected_kind is not None and kind != expected_kind:
        raise TSDPFileError(f"{path} holds kind {kind}, expected {expected_kind}")

    meta_bytes, pos = _take(buf, pos, meta_len, path)
    meta = json.loads(meta_bytes.decode("utf-8"))
    count_bytes, pos = _take(buf, pos, 4, path)
    (count,) = struct.unpack("<I", count_bytes)

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen_bytes, pos = _take(buf, pos, 2, path)
        (nlen,) = struct.unpack("<H", nlen_bytes)
        name_bytes, pos = _take(buf, pos, nlen, path)
        hdr, pos = _take(buf, pos, 2, path)
        code, ndim = struct.unpack("<BB", hdr)
        if code not in _DTYPES:
            raise TSDPFileError(f"{path}: unknown dtype code {code}")
        dims_bytes, pos = _take(buf, pos, 8 * ndim, path)
        dims = struct.unpack(f"<{ndim}Q", dims_bytes)
        nb_bytes, pos = _take(buf, pos, 8, path)
        (nbytes,) = struct.unpack("<Q", nb_bytes)
        data, pos = _take(buf, pos, nbytes, path)
        arr = np.frombuffer(data, dtype=_DTYPES[code]).reshape(dims).copy()
        arrays[name_bytes.decode("utf-8")] = arr
    return kind, meta, arrays


def model_topology(model: ModelGraph) -> Dict[str, Any]:
    return {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "output_mode": model.output_mode,
        "meta": model.meta,
        "layers": [
            {
                "name": layer.name,
                "kind": layer.kind,
                "params": layer.params,
                "inputs": layer.inputs,
                "frozen": layer.frozen,
                "out_shape": list(layer.out_shape or ()),
            }
            for layer in model.layers
        ],
    }


def model_from_topology(
    topology: Dict[str, Any], arrays: Dict[str, np.ndarray]
) -> ModelGraph:
    layers = []
    for spec in topology["layers"]:
        prefix = spec["name"] + "."
        weights = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        layers.append(
            LayerSpec(
                name=spec["name"],
                kind=spec["kind"],
                params=dict(spec["params"]),
                weights=weights,
                inputs=list(spec["inputs"]),
                frozen=bool(spec.get("frozen", False)),
            )
        )
    return ModelGraph(
        layers=layers,
        input_shape=tuple(topology["input_shape"]),
        output_mode=topology.get("output_mode", "Logits"),
        name=topology.get("name", "model"),
        meta=dict(topology.get("meta", {})),
    )


def save_model(
    model: ModelGraph,
    path: PathLike,
    kind: int = KIND_MODEL,
    extra_meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write the model container and a `<path>.json` topology sidecar."""
    path = Path(path)
    topology = model_topology(model)
    meta = {"topology": topology, **(extra_meta or {})}
    arrays = {f"{name}.{pname}": value
              for (name, pname), value in model.parameters(trainable_only=False)}
    write_container(path, kind, meta, arrays)
    sidecar = path.with_name(path.name + ".json")
    with open(sidecar, "w") as f:
        json.dump(meta, f, indent=2)
    return path


def load_model(path: PathLike) -> ModelGraph:
    kind, meta, arrays = read_container(path)
    if kind not in (KIND_MODEL, KIND_HYBRID):
        raise TSDPFileError(f"{path} does not hold a model (kind {kind})")
    if "topology" not in meta:
        raise TSDPFileError(f"{path} has no topology block")
    return model_from_topology(meta["topology"], arrays)
