"""Scalar volumes, landmark sets, preprocessing and the JSON+raw container.

Arrays are held in memory indexed ``[i, j, k]`` (x, y, z) with shape
``(nx, ny, nz)``.  On disk the payload is x-fastest, which is Fortran order
of that array.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cycreg.errors import DataError


def _triple(values, name, cast=float):
    t = tuple(cast(v) for v in values)
    if len(t) != 3:
        raise DataError(f"{name} must have 3 components, got {len(t)}")
    return t


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar 3D image with voxel spacing in millimetres.

    ``data`` has shape ``(nx, ny, nz)`` and is stored read-only in float64.
    """

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = _readonly(self.data)
        if data.ndim != 3:
            raise DataError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 2:
            raise DataError(f"every volume dimension must be >= 2, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        spacing = _triple(self.spacing_mm, "spacing_mm")
        if min(spacing) <= 0:
            raise DataError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", _triple(self.origin_mm, "origin_mm"))

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def with_data(self, data, spacing_mm=None) -> "Volume3D":
        return Volume3D(data, self.spacing_mm if spacing_mm is None else spacing_mm,
                        self.origin_mm)


@dataclass(frozen=True)
class LandmarkSet:
    """Named points in voxel coordinates."""

    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple((str(i), _triple(p, f"landmark {i}")) for i, p in self.entries)
        ids = [i for i, _ in entries]
        if len(set(ids)) != len(ids):
            raise DataError("landmark ids must be unique")
        object.__setattr__(self, "entries", entries)

    @property
    def ids(self) -> list:
        return [i for i, _ in self.entries]

    @property
    def positions(self) -> np.ndarray:
        return np.array([p for _, p in self.entries], dtype=np.float64).reshape(-1, 3)

    def as_dict(self) -> dict:
        return dict(self.entries)

    def check_domain(self, dims: Sequence[int]) -> None:
        upper = np.asarray(dims, dtype=np.float64) - 1
        for i, p in self.entries:
            if any(c < 0 or c > u for c, u in zip(p, upper)):
                raise DataError(f"landmark {i!r} at {p} lies outside domain {tuple(dims)}")

    def __len__(self):
        return len(self.entries)


# --- container I/O -----------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def read_container(path, kind: str) -> tuple[dict, np.ndarray]:
    """Read a header/raw pair and return the header and flat float32 payload."""
    header_path, raw_path = _paths(path)
    if not header_path.exists():
        raise DataError(f"missing header file {header_path}")
    if not raw_path.exists():
        raise DataError(f"missing raw file {raw_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed header {header_path}: {exc}") from None
    missing = [k for k in ("dims", "spacing_mm") if k not in header]
    if missing:
        raise DataError(f"header {header_path} lacks {missing}")
    if header.get("dtype", "f32le") != "f32le":
        raise DataError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise DataError(f"unsupported order {header.get('order')!r}")
    if header.get("kind", "scalar") != kind:
        raise DataError(f"{header_path} holds kind {header.get('kind')!r}, expected {kind!r}")
    dims = _triple(header["dims"], "dims", int)
    ncomp = 3 if kind == "field" else 1
    expected = 4 * ncomp * math.prod(dims)
    size = raw_path.stat().st_size
    if size != expected:
        raise DataError(
            f"{raw_path} has {size} bytes but header dims {list(dims)} require {expected}")
    payload = np.fromfile(raw_path, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise DataError(f"{raw_path} contains non-finite values")
    return header, payload


def write_container(path, header: dict, payload: np.ndarray) -> tuple[Path, Path]:
    header_path, raw_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    np.ascontiguousarray(payload, dtype="<f4").tofile(raw_path)
    return header_path, raw_path


def load_volume(path) -> Volume3D:
    header, payload = read_container(path, "scalar")
    dims = _triple(header["dims"], "dims", int)
    data = payload.reshape(dims, order="F")
    return Volume3D(data, header["spacing_mm"], header.get("origin_mm", (0, 0, 0)))


def save_volume(vol: Volume3D, path) -> tuple[Path, Path]:
    """Write ``vol`` as float32; values not representable in float32 are rounded."""
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "origin_mm": list(vol.origin_mm),
        "dtype": "f32le",
        "order": "x-fastest",
        "kind": "scalar",
    }
    return write_container(path, header, vol.data.ravel(order="F"))


def load_landmarks(path) -> LandmarkSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing landmark file {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        head = [h.strip() for h in next(reader, [])]
        if head != ["id", "x", "y", "z"]:
            raise DataError(f"{path}: header must be 'id,x,y,z', got {','.join(head)!r}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 columns")
            try:
                entries.append((row[0].strip(), tuple(float(c) for c in row[1:])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric coordinate") from None
    return LandmarkSet(tuple(entries))


def save_landmarks(points: LandmarkSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "z"])
        for i, p in points.entries:
            w.writerow([i, *(repr(float(c)) for c in p)])
    return path


# --- preprocessing ------------------------------------------------------------

def normalize_max(v: Volume3D) -> Volume3D:
    """Scale intensities so the maximum becomes exactly 1."""
    peak = float(v.data.max())
    if not peak > 0:
        raise DataError(f"cannot max-normalize a volume whose maximum is {peak}")
    if peak == 1.0:
        return v
    return v.with_data(v.data / peak)


def downsample_trilinear(v: Volume3D, factor: Iterable[int]) -> Volume3D:
    """Resample ``v`` on a grid coarser by an integer ``factor`` per axis.

    Coarse voxel ``i`` sits at fine coordinate ``i * factor``; output dims are
    ``ceil(n / factor)``.
    """
    from cycreg.field import trilinear_sample

    factor = _triple(factor, "factor", int)
    if min(factor) < 1:
        raise DataError(f"downsampling factors must be positive, got {factor}")
    if factor == (1, 1, 1):
        return v
    out_dims = tuple(-(-n // f) for n, f in zip(v.dims, factor))
    if min(out_dims) < 2:
        raise DataError(f"factor {factor} reduces dims {v.dims} to {out_dims}")
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) * f
                          for n, f in zip(out_dims, factor)), indexing="ij")
    coords = np.stack(grids, axis=-1)
    data = trilinear_sample(v.data, coords)
    spacing = tuple(s * f for s, f in zip(v.spacing_mm, factor))
    return v.with_data(data, spacing)


def zero_pad_centered(v: Volume3D, target_nz: int) -> Volume3D:
    """Pad along z with zero slices so the volume has ``target_nz`` slices.

    When the padding is odd the extra slice goes below (low z).
    """
    nz = v.dims[2]
    if target_nz < nz:
        raise DataError(f"target_nz {target_nz} is smaller than current nz {nz}")
    if target_nz == nz:
        return v
    extra = target_nz - nz
    above = extra // 2
    below = extra - above
    data = np.pad(v.data, ((0, 0), (0, 0), (below, above)))
    origin = list(v.origin_mm)
    origin[2] -= below * v.spacing_mm[2]
    return Volume3D(data, v.spacing_mm, origin)


def crop(v: Volume3D, bounds: Sequence[tuple[int, int]]) -> Volume3D:
    """Keep the half-open index ranges ``bounds`` (one ``(lo, hi)`` per axis)."""
    if len(bounds) != 3:
        raise DataError("crop needs one (lo, hi) pair per axis")
    slices = []
    for axis, ((lo, hi), n) in enumerate(zip(bounds, v.dims)):
        if not 0 <= lo < hi <= n:
            raise DataError(f"crop bounds {lo}:{hi} invalid for axis {axis} of size {n}")
        slices.append(slice(lo, hi))
    origin = tuple(o + lo * s for o, (lo, _), s in zip(v.origin_mm, bounds, v.spacing_mm))
    return Volume3D(v.data[tuple(slices)], v.spacing_mm, origin)
