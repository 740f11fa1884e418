"""Reader/writer for SFV1 scalar volumes.

Mirrors the parser semantics of the segmentation toolkit that produces and
consumes these files: line ``SFV1``, one JSON header line (dims, spacing,
origin, kind, dtype ``f32le``, version 1), then raw little-endian float32 in
x-fastest order.  Kind invariants are enforced on read and write.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("intensity", "probability", "mask")


class SfvError(ValueError):
    """Malformed SFV1 file (bad magic/version, truncation, inconsistent header)."""


@dataclass(frozen=True)
class Volume:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray                    # float32, shape dims, x-fastest serialization
    kind: str = "intensity"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        data = np.asarray(self.data, np.float32)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise SfvError(f"data size {data.size} does not match dims {dims}")
        data = data.reshape(dims, order="F") if data.ndim == 1 else data
        if self.kind not in KINDS:
            raise SfvError(f"unknown volume kind {self.kind!r}")
        if self.kind == "probability" and (data.min() < 0.0 or data.max() > 1.0):
            raise SfvError("probability volume outside [0, 1]")
        if self.kind == "mask" and not np.all((data == 0.0) | (data == 1.0)):
            raise SfvError("mask volume has non-binary values")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "data", data)


def read_volume(path: str | Path) -> Volume:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 2)
    if len(parts) < 3 or parts[0] != b"SFV1":
        raise SfvError(f"{path}: not an SFV1 file")
    try:
        header = json.loads(parts[1].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SfvError(f"{path}: unparseable header ({exc})") from exc
    if header.get("version") != 1:
        raise SfvError(f"{path}: unsupported version {header.get('version')!r}")
    if header.get("dtype") != "f32le":
        raise SfvError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        origin = tuple(float(o) for o in header["origin"])
        kind = header["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SfvError(f"{path}: bad header field ({exc})") from exc
    payload = parts[2]
    want = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != want:
        raise SfvError(f"{path}: payload {len(payload)} bytes, header wants {want}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return Volume(dims, spacing, origin, data, kind)


def write_volume(vol: Volume, path: str | Path) -> None:
    header = {
        "version": 1,
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "kind": vol.kind,
        "dtype": "f32le",
    }
    blob = (
        b"SFV1\n"
        + json.dumps(header, sort_keys=True).encode()
        + b"\n"
        + vol.data.ravel(order="F").astype("<f4").tobytes()
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
