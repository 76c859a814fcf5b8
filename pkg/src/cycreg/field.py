"""Displacement fields, trilinear warping and its adjoints, Jacobian analysis.

A field ``phi`` of shape ``(nx, ny, nz, 3)`` holds voxel-unit displacements;
warping resamples the moving image at ``x + phi(x)``::

    warped(x) = sum_{y in N(x + phi(x))} moving(y) * prod_d (1 - |x_d + phi_d(x) - y_d|)

where ``N`` is the 8-voxel cell around the displaced point.  Neighbours
outside the grid contribute zero intensity.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from cycreg.errors import DataError
from cycreg.volume import LandmarkSet, Volume3D, _readonly, _triple, read_container, \
    write_container

CORNERS = tuple(itertools.product((0, 1), repeat=3))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement vectors ``(dx, dy, dz)`` in voxel units."""

    vectors: np.ndarray

    def __post_init__(self):
        vec = _readonly(self.vectors)
        if vec.ndim != 4 or vec.shape[-1] != 3:
            raise DataError(f"field must have shape (nx, ny, nz, 3), got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise DataError("field contains non-finite components")
        object.__setattr__(self, "vectors", vec)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.vectors.shape[:3])

    def __array__(self, dtype=None, copy=None):
        return self.vectors if dtype is None else self.vectors.astype(dtype)

    @classmethod
    def zeros(cls, dims) -> "DisplacementField":
        return cls(np.zeros((*dims, 3)))


@dataclass(frozen=True, eq=False)
class JacobianStats:
    det_volume: Volume3D
    nonpositive_fraction: float


def load_field(path) -> DisplacementField:
    header, payload = read_container(path, "field")
    dims = _triple(header["dims"], "dims", int)
    vec = payload.reshape((3, *dims), order="F")
    return DisplacementField(np.moveaxis(vec, 0, -1))


def save_field(field: DisplacementField, path, spacing_mm=(1.0, 1.0, 1.0),
               origin_mm=(0.0, 0.0, 0.0)):
    header = {
        "dims": list(field.dims),
        "spacing_mm": [float(s) for s in spacing_mm],
        "origin_mm": [float(o) for o in origin_mm],
        "dtype": "f32le",
        "order": "x-fastest",
        "kind": "field",
    }
    payload = np.moveaxis(field.vectors, -1, 0).ravel(order="F")
    return write_container(path, header, payload)


def identity_grid(dims) -> np.ndarray:
    """Voxel index coordinates, shape ``(*dims, 3)``."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


class Stencil:
    """Trilinear cell geometry for a set of sample points on a grid.

    Holds, for each of the 8 cell corners, the flat neighbour index, the
    in-bounds mask, the interpolation weight and the weight derivative with
    respect to each coordinate of the sample point.  Built once and shared
    by the forward warp and both adjoints.
    """

    def __init__(self, coords: np.ndarray, dims):
        coords = np.asarray(coords, dtype=np.float64)
        self.dims = tuple(int(n) for n in dims)
        self.shape = coords.shape[:-1]
        pts = coords.reshape(-1, 3)
        base = np.floor(pts)
        frac = pts - base
        base = base.astype(np.int64)
        lo_w, hi_w = 1.0 - frac, frac
        nx, ny, nz = self.dims
        # inbounds: corner lies on the grid (used by derivative taps, which
        # are nonzero even where the weight vanishes on a lattice plane);
        # valid: inbounds and strictly positive weight (used by sample/splat)
        self.index, self.inbounds, self.valid = [], [], []
        self.weight, self.dweight = [], []
        for corner in CORNERS:
            idx = base + np.array(corner)
            inb = ((idx >= 0) & (idx < self.dims)).all(axis=1)
            w = [hi_w[:, d] if corner[d] else lo_w[:, d] for d in range(3)]
            s = [1.0 if corner[d] else -1.0 for d in range(3)]
            weight = w[0] * w[1] * w[2]
            self.index.append(np.where(inb, (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2], 0))
            self.inbounds.append(inb)
            self.valid.append(inb & (weight > 0))
            self.weight.append(weight)
            self.dweight.append(np.stack([s[0] * w[1] * w[2], s[1] * w[0] * w[2],
                                          s[2] * w[0] * w[1]], axis=1))

    def sample(self, values: np.ndarray) -> np.ndarray:
        """Interpolate a scalar or vector array defined on the grid."""
        values = np.asarray(values, dtype=np.float64)
        extra = values.shape[3:]
        flat = values.reshape(math.prod(self.dims), *extra)
        out = None
        for idx, valid, w in zip(self.index, self.valid, self.weight):
            mask = valid.reshape(-1, *([1] * len(extra)))
            term = w.reshape(mask.shape) * flat[idx]
            if out is None:
                out = np.where(mask, term, 0.0)
            else:
                out = np.where(mask, out + term, out)
        return out.reshape(*self.shape, *extra)

    def sample_gradient(self, values: np.ndarray) -> np.ndarray:
        """Spatial derivative of the interpolant at each sample point, ``(..., 3)``."""
        flat = np.asarray(values, dtype=np.float64).reshape(-1)
        out = np.zeros((len(self.index[0]), 3))
        for idx, inb, dw in zip(self.index, self.inbounds, self.dweight):
            out += np.where(inb, flat[idx], 0.0)[:, None] * dw
        return out.reshape(*self.shape, 3)

    def splat(self, upstream: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`sample` for scalar data: scatter-add onto the grid."""
        up = np.asarray(upstream, dtype=np.float64).reshape(-1)
        n = math.prod(self.dims)
        out = np.zeros(n)
        for idx, valid, w in zip(self.index, self.valid, self.weight):
            out += np.bincount(idx[valid], weights=(up * w)[valid], minlength=n)
        return out.reshape(self.dims)


def displaced_stencil(field: np.ndarray) -> Stencil:
    field = np.asarray(field, dtype=np.float64)
    return Stencil(identity_grid(field.shape[:3]) + field, field.shape[:3])


def trilinear_sample(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Interpolate ``values`` (shape ``(nx, ny, nz[, C])``) at voxel ``coords``.

    Out-of-grid neighbours read as zero.
    """
    values = np.asarray(values, dtype=np.float64)
    return Stencil(coords, values.shape[:3]).sample(values)


def _check_dims(a, b, what="dims"):
    if tuple(a) != tuple(b):
        raise DataError(f"{what} mismatch: {tuple(a)} vs {tuple(b)}")


def warp_array(moving: np.ndarray, field: np.ndarray) -> np.ndarray:
    moving = np.asarray(moving, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    _check_dims(moving.shape, field.shape[:3])
    return displaced_stencil(field).sample(moving)


def warp(moving: Volume3D, field: DisplacementField) -> Volume3D:
    """Resample ``moving`` at ``x + field(x)`` with trilinear interpolation."""
    _check_dims(moving.dims, field.dims)
    return moving.with_data(warp_array(moving.data, field.vectors))


def warp_gradient(moving, field, upstream) -> DisplacementField | np.ndarray:
    """Gradient of ``<upstream, warp(moving, field)>`` with respect to ``field``.

    Accepts volumes/fields or bare arrays; returns the matching type.
    """
    m = np.asarray(moving, dtype=np.float64)
    f = np.asarray(field, dtype=np.float64)
    u = np.asarray(upstream, dtype=np.float64)
    _check_dims(m.shape, f.shape[:3])
    _check_dims(m.shape, u.shape)
    grad = displaced_stencil(f).sample_gradient(m) * u[..., None]
    if isinstance(field, DisplacementField):
        return DisplacementField(grad)
    return grad


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Single field equivalent to warping by ``outer`` and then by ``inner``.

    ``result(x) = inner(x) + outer(x + inner(x))``, with ``outer`` read as zero
    outside the grid.
    """
    _check_dims(outer.dims, inner.dims)
    stencil = displaced_stencil(inner.vectors)
    return DisplacementField(inner.vectors + stencil.sample(outer.vectors))


def warp_landmarks(points: LandmarkSet, field: DisplacementField) -> LandmarkSet:
    """Move each point ``q`` to ``q + field(q)``."""
    points.check_domain(field.dims)
    if not len(points):
        return points
    pos = points.positions
    moved = pos + trilinear_sample(field.vectors, pos)
    return LandmarkSet(tuple(zip(points.ids, map(tuple, moved))))


def jacobian_determinant(field: np.ndarray) -> np.ndarray:
    """det(I + grad phi) per voxel, central differences inside, one-sided on faces."""
    f = np.asarray(field, dtype=np.float64)
    # J[..., c, d] = d phi_c / d x_d
    jac = np.stack([np.stack(np.gradient(f[..., c], edge_order=1), axis=-1)
                    for c in range(3)], axis=-2)
    jac = jac + np.eye(3)
    a, b, c = jac[..., 0, 0], jac[..., 0, 1], jac[..., 0, 2]
    d, e, g = jac[..., 1, 0], jac[..., 1, 1], jac[..., 1, 2]
    h, i, k = jac[..., 2, 0], jac[..., 2, 1], jac[..., 2, 2]
    return a * (e * k - g * i) - b * (d * k - g * h) + c * (d * i - e * h)


def jacobian_stats(field: DisplacementField, spacing_mm=(1.0, 1.0, 1.0)) -> JacobianStats:
    det = jacobian_determinant(field.vectors)
    frac = np.count_nonzero(det <= 0) / det.size
    return JacobianStats(Volume3D(det, spacing_mm), float(frac))


def upsample_field(field: np.ndarray, new_dims, ratio) -> np.ndarray:
    """Resample a coarse field onto a finer grid and rescale its vectors.

    Fine voxel ``x`` reads the coarse field at ``x / ratio`` (clamped to the
    coarse grid, so constant fields are reproduced exactly) and the vector is
    multiplied by ``ratio`` per axis.
    """
    field = np.asarray(field, dtype=np.float64)
    ratio = np.asarray(ratio, dtype=np.float64)
    coarse = np.asarray(field.shape[:3], dtype=np.float64)
    coords = identity_grid(new_dims) / ratio
    coords = np.clip(coords, 0.0, coarse - 1)
    return trilinear_sample(field, coords) * ratio
