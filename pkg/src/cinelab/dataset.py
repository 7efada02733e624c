"""On-disk dataset: one ``.usc`` cineloop file per core plus ``cores.jsonl``.

``.usc`` layout (little-endian)::

    b"USC1" | u32 version=1 | u32 T | u32 H | u32 W
    T*H*W float32 frames (row-major)
    H*W uint8 needle | H*W uint8 prostate | H*W uint8 lesion
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from cinelab.phantom import CoreRecord, Cineloop

MAGIC = b"USC1"
VERSION = 1
MANIFEST = "cores.jsonl"
_HEADER = struct.Struct("<4sIIII")
_RECORD_KEYS = ("patient_id", "center", "core_id", "label", "involvement", "grade_bucket", "path")


class DatasetError(ValueError):
    """Malformed or missing dataset file; carries the path and byte offset."""

    def __init__(self, path, message: str, offset: int | None = None):
        self.path = str(path)
        self.offset = offset
        where = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"{path}: {message}{where}")


def write_usc(loop: Cineloop, path) -> None:
    t, h, w = loop.frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, t, h, w))
        fh.write(np.ascontiguousarray(loop.frames, dtype="<f4").tobytes())
        for m in (loop.needle, loop.prostate, loop.lesion):
            fh.write(np.ascontiguousarray(m, dtype=np.uint8).tobytes())


def read_usc(path) -> Cineloop:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(path, "missing core file") from None
    if len(data) < 4 or data[:4] != MAGIC:
        raise DatasetError(path, f"bad magic {data[:4]!r}", 0)
    if len(data) < _HEADER.size:
        raise DatasetError(path, "truncated header", len(data))
    _, version, t, h, w = _HEADER.unpack_from(data)
    if version != VERSION:
        raise DatasetError(path, f"unsupported version {version}", 4)
    if t < 2 or h < 1 or w < 1:
        raise DatasetError(path, f"invalid dimensions T={t} H={h} W={w}", 8)
    n_frames = t * h * w * 4
    expected = _HEADER.size + n_frames + 3 * h * w
    if len(data) < expected:
        raise DatasetError(path, f"truncated file ({len(data)} of {expected} bytes)", len(data))
    if len(data) > expected:
        raise DatasetError(path, f"{len(data) - expected} trailing bytes", expected)
    off = _HEADER.size
    frames = np.frombuffer(data, "<f4", t * h * w, off).reshape(t, h, w).astype(np.float32)
    off += n_frames
    masks = []
    for name in ("needle", "prostate", "lesion"):
        raw = np.frombuffer(data, np.uint8, h * w, off).reshape(h, w)
        if raw.max(initial=0) > 1:
            raise DatasetError(path, f"{name} mask holds non-boolean values", off)
        masks.append(raw.astype(bool))
        off += h * w
    return Cineloop(frames, *masks)


@dataclass
class Dataset:
    """Manifest records plus lazily loaded, cached cineloops."""

    root: Path
    records: list[CoreRecord]
    _cache: dict[int, Cineloop] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, core_id: int) -> CoreRecord:
        for r in self.records:
            if r.core_id == core_id:
                return r
        raise KeyError(f"unknown core id {core_id}")

    def load(self, core_id: int) -> Cineloop:
        if core_id not in self._cache:
            self._cache[core_id] = read_usc(self.root / self.record(core_id).path)
        return self._cache[core_id]

    @property
    def patients(self) -> list[int]:
        return sorted({r.patient_id for r in self.records})


def write_dataset(cores: Iterable[tuple[Cineloop, CoreRecord]], directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for loop, rec in cores:
        target = root / rec.path
        target.parent.mkdir(parents=True, exist_ok=True)
        write_usc(loop, target)
        lines.append(json.dumps({k: getattr(rec, k) for k in _RECORD_KEYS}))
    (root / MANIFEST).write_text("".join(line + "\n" for line in lines))
    return root


def read_dataset(directory, preload: bool = False) -> Dataset:
    root = Path(directory)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(manifest, "missing manifest")
    records = []
    offset = 0
    for line in manifest.read_text().splitlines(keepends=True):
        if line.strip():
            try:
                obj = json.loads(line)
                rec = CoreRecord(**{k: obj[k] for k in _RECORD_KEYS})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(manifest, f"bad manifest line ({exc})", offset) from None
            if not (root / rec.path).is_file():
                raise DatasetError(root / rec.path, "missing core file")
            records.append(rec)
        offset += len(line.encode())
    ds = Dataset(root, records)
    if preload:
        for r in records:
            ds.load(r.core_id)
    return ds
