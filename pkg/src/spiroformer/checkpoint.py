"""Model checkpoint container holding every artifact of one training trial.

Binary layout, all little-endian:

    bytes 0..3   magic "SPFM"
    uint32       format version (1)
    uint64       manifest length in bytes
    ...          manifest JSON (utf-8)
    ...          contiguous float payload

The manifest lists every named tensor (name, shape, dtype, byte offset into
the payload) plus JSON sections for the model config, the curve
standardizer, and the fused-classifier ensemble, so a single file restores
the full per-seed pipeline. Tensors default to float64 (bitwise round-trip);
a float32 flag halves the file at the cost of one lossy cast - once cast,
further round-trips are again bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError, NumericsError, ShapeError
from .fileio import atomic_write_bytes
from .fusion import GbdtEnsemble
from .model import ModelConfig, ModelParams, parameter_shapes
from .preproc import Standardizer
from .tensorcore import Tensor

MAGIC = b"SPFM"
VERSION = 1
_HEADER = len(MAGIC) + 4 + 8
_DTYPES = {"<f8": 8, "<f4": 4}


@dataclass
class Checkpoint:
    params: ModelParams
    standardizer: Standardizer | None
    fusion: GbdtEnsemble | None
    endpoint: str | None
    seed: int | None
    manifest: dict


def save_checkpoint(
    params: ModelParams,
    path,
    standardizer: Standardizer | None = None,
    fusion: GbdtEnsemble | None = None,
    endpoint: str | None = None,
    seed: int | None = None,
    use_float32: bool = False,
) -> None:
    dtype = "<f4" if use_float32 else "<f8"
    itemsize = _DTYPES[dtype]
    entries = []
    chunks = []
    offset = 0
    for name, tensor in params.tensors.items():
        arr = np.ascontiguousarray(tensor.data, dtype=dtype)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
        })
        chunks.append(arr.tobytes())
        offset += arr.size * itemsize
    manifest = {
        "tensors": entries,
        "payload_bytes": offset,
        "model_config": params.config.to_obj(),
        "n_patches_max": params.n_patches_max,
        "endpoint": endpoint,
        "seed": seed,
        "standardizer": standardizer.to_obj() if standardizer else None,
        "fusion": fusion.to_obj() if fusion else None,
    }
    mbytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    blob = (
        MAGIC
        + np.uint32(VERSION).tobytes()
        + np.uint64(len(mbytes)).tobytes()
        + mbytes
        + b"".join(chunks)
    )
    atomic_write_bytes(path, blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER:
        raise IntegrityError(
            f"checkpoint is {len(blob)} bytes, shorter than the {_HEADER}-byte header"
        )
    if blob[:4] != MAGIC:
        raise IntegrityError(f"bad magic {blob[:4]!r} at offset 0; expected {MAGIC!r}")
    version = int(np.frombuffer(blob, "<u4", count=1, offset=4)[0])
    if version != VERSION:
        raise IntegrityError(
            f"unsupported checkpoint version {version}; expected {VERSION}"
        )
    mlen = int(np.frombuffer(blob, "<u8", count=1, offset=8)[0])
    if _HEADER + mlen > len(blob):
        raise IntegrityError(
            f"manifest of {mlen} bytes exceeds file size at offset {_HEADER}"
        )
    try:
        manifest = json.loads(blob[_HEADER : _HEADER + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable checkpoint manifest: {exc}") from exc

    payload_off = _HEADER + mlen
    payload_bytes = int(manifest["payload_bytes"])
    if payload_off + payload_bytes != len(blob):
        raise IntegrityError(
            f"checkpoint is {len(blob)} bytes; expected "
            f"{payload_off + payload_bytes} (truncated at offset {len(blob)})"
        )

    config = ModelConfig.from_obj(manifest["model_config"])
    n_patches_max = int(manifest["n_patches_max"])
    expected = parameter_shapes(config, n_patches_max)
    tensors = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        dtype = entry["dtype"]
        if dtype not in _DTYPES:
            raise IntegrityError(f"tensor {name!r} has unsupported dtype {dtype!r}")
        if name not in expected:
            raise ShapeError(f"unexpected tensor {name!r} in checkpoint")
        if shape != expected[name]:
            raise ShapeError(
                f"tensor {name!r} has shape {shape}; config requires {expected[name]}"
            )
        count = int(np.prod(shape)) if shape else 1
        start = payload_off + int(entry["offset"])
        end = start + count * _DTYPES[dtype]
        if end > len(blob):
            raise IntegrityError(
                f"tensor {name!r} payload runs past end of file at offset {start}"
            )
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
        data = arr.reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise NumericsError(f"tensor {name!r} contains non-finite values")
        tensors[name] = Tensor(data.copy(), requires_grad=True)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ShapeError(f"checkpoint is missing tensors: {missing}")

    params = ModelParams(tensors=tensors, n_patches_max=n_patches_max, config=config)
    std = manifest.get("standardizer")
    fusion = manifest.get("fusion")
    return Checkpoint(
        params=params,
        standardizer=Standardizer.from_obj(std) if std else None,
        fusion=GbdtEnsemble.from_obj(fusion) if fusion else None,
        endpoint=manifest.get("endpoint"),
        seed=manifest.get("seed"),
        manifest=manifest,
    )
